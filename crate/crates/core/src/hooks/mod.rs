//! Hook registration and the gather, edit, scatter pipeline around model sites.

mod engine;
pub mod shape;
mod store;
mod tree;

pub use engine::{
    AffineModule, AuxModule, EditFn, FlexWrapper, ForwardOutput, HookFunction, HookHandle, ModuleRef, SaveContext,
    TrainableModuleRegistry,
};
pub use shape::{infer_full_shape, infer_full_shape_with_hint, GatherPlan, ShapeInferenceError};
pub use store::{ActivationStore, StoreEntry, STORE_MANIFEST};
pub use tree::{flatten, unflatten, Leaf, Opaque, TreeDef, TreeNode};
