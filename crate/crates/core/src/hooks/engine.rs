use std::any::Any;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;

use super::shape::infer_full_shape_with_hint;
use super::store::ActivationStore;
use super::tree::{flatten, unflatten, Leaf, TreeNode};
use crate::error::{Error, Result};
use crate::mesh::{launch, Axis, CommLedger, DeviceMesh, GroupKind, OffloadMode, Origin, Worker};
use crate::parallel::{
    assemble_outputs, check_replicas, DistTensor, ModelInput, ModuleTree, NoHooks, ShardedModel, SiteVisitor,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Read-only view of the module a hook is attached to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleRef {
    pub name: String,
    pub parameter_names: Vec<String>,
}

/// Values shared between editing functions for the lifetime of a wrapper.
#[derive(Default)]
pub struct SaveContext {
    values: BTreeMap<String, Box<dyn Any + Send>>,
}

impl SaveContext {
    pub fn insert<V: Any + Send>(&mut self, key: impl Into<String>, value: V) {
        self.values.insert(key.into(), Box::new(value));
    }

    pub fn get<V: Any>(&self, key: &str) -> Option<&V> {
        self.values.get(key)?.downcast_ref()
    }

    pub fn get_mut<V: Any>(&mut self, key: &str) -> Option<&mut V> {
        self.values.get_mut(key)?.downcast_mut()
    }

    pub fn remove(&mut self, key: &str) -> bool {
        self.values.remove(key).is_some()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl fmt::Debug for SaveContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.values.keys()).finish()
    }
}

/// A small module with parameters that editing functions can call.
pub trait AuxModule<T>: Send {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn parameters(&self) -> Vec<(&str, &Tensor<T>)>;
}

/// `y = x·Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineModule<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> AuxModule<T> for AffineModule<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(&self.weight)?.add_row_vector(&self.bias)
    }

    fn parameters(&self) -> Vec<(&str, &Tensor<T>)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }
}

pub struct TrainableModuleRegistry<T> {
    modules: BTreeMap<String, Box<dyn AuxModule<T>>>,
}

impl<T> Default for TrainableModuleRegistry<T> {
    fn default() -> Self {
        Self {
            modules: BTreeMap::new(),
        }
    }
}

impl<T> TrainableModuleRegistry<T> {
    pub fn register(&mut self, name: impl Into<String>, module: Box<dyn AuxModule<T>>) -> Result<()> {
        let name = name.into();
        if self.modules.contains_key(&name) {
            return Err(Error::Config(format!("trainable module {name:?} already registered")));
        }
        self.modules.insert(name, module);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&dyn AuxModule<T>> {
        self.modules.get(name).map(|m| m.as_ref())
    }

    pub fn names(&self) -> Vec<&str> {
        self.modules.keys().map(String::as_str).collect()
    }
}

pub type EditFn<T> = Box<
    dyn FnMut(&ModuleRef, Tensor<T>, &mut SaveContext, &mut TrainableModuleRegistry<T>) -> Result<Tensor<T>> + Send,
>;

pub struct HookFunction<T> {
    pub module_name: String,
    pub expected_shape: Vec<Option<usize>>,
    pub editing_function: Option<EditFn<T>>,
    /// Which tensor leaf of the site output to operate on; first by default.
    pub leaf: Option<usize>,
}

impl<T> HookFunction<T> {
    /// A retrieval-only hook.
    pub fn new(module_name: impl Into<String>, expected_shape: Vec<Option<usize>>) -> Self {
        Self {
            module_name: module_name.into(),
            expected_shape,
            editing_function: None,
            leaf: None,
        }
    }

    pub fn with_edit(
        mut self,
        f: impl FnMut(&ModuleRef, Tensor<T>, &mut SaveContext, &mut TrainableModuleRegistry<T>) -> Result<Tensor<T>>
            + Send
            + 'static,
    ) -> Self {
        self.editing_function = Some(Box::new(f));
        self
    }

    pub fn with_leaf(mut self, index: usize) -> Self {
        self.leaf = Some(index);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HookHandle(u64);

#[derive(Clone, Debug)]
struct HookMeta {
    id: u64,
    site: String,
    expected: Vec<Option<usize>>,
    leaf: Option<usize>,
    has_edit: bool,
}

struct Shared<T> {
    edits: BTreeMap<u64, EditFn<T>>,
    save_ctx: SaveContext,
    registry: TrainableModuleRegistry<T>,
}

/// Result of a wrapped forward over the whole mesh.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub output: Tensor<T>,
    pub ledger: CommLedger,
    pub ledgers: Vec<CommLedger>,
}

/// Owns one model shard per rank and runs hooks around its sites.
pub struct FlexWrapper<T, M> {
    models: Vec<M>,
    mesh: DeviceMesh,
    offload: OffloadMode,
    hooks: Vec<HookMeta>,
    next_id: u64,
    shared: Mutex<Shared<T>>,
    stores: Vec<Mutex<ActivationStore<T>>>,
}

impl<T: Scalar, M: ShardedModel<T>> FlexWrapper<T, M> {
    pub fn wrap(models: Vec<M>, mesh: DeviceMesh, offload: OffloadMode) -> Result<Self> {
        check_replicas(&mesh, models.len())?;
        let stores = (0..mesh.world_size()).map(|_| Mutex::default()).collect();
        Ok(Self {
            models,
            mesh,
            offload,
            hooks: Vec::new(),
            next_id: 0,
            shared: Mutex::new(Shared {
                edits: BTreeMap::new(),
                save_ctx: SaveContext::default(),
                registry: TrainableModuleRegistry::default(),
            }),
            stores,
        })
    }

    /// Drops every hook and hands back the original shards.
    pub fn unwrap(self) -> Vec<M> {
        self.models
    }

    pub fn mesh(&self) -> &DeviceMesh {
        &self.mesh
    }

    pub fn models(&self) -> &[M] {
        &self.models
    }

    pub fn module_tree(&self) -> &ModuleTree {
        self.models[0].module_tree()
    }

    pub fn offload_mode(&self) -> OffloadMode {
        self.offload
    }

    pub fn set_offload_mode(&mut self, mode: OffloadMode) {
        self.offload = mode;
    }

    pub fn num_hooks(&self) -> usize {
        self.hooks.len()
    }

    pub fn register_hook_function(&mut self, hook: HookFunction<T>) -> Result<HookHandle> {
        let tree = self.models[0].module_tree();
        if !tree.has_site(&hook.module_name) {
            return Err(Error::UnknownModule {
                candidates: tree.near_sites(&hook.module_name),
                name: hook.module_name,
            });
        }
        let id = self.next_id;
        self.next_id += 1;
        self.hooks.push(HookMeta {
            id,
            site: hook.module_name,
            expected: hook.expected_shape,
            leaf: hook.leaf,
            has_edit: hook.editing_function.is_some(),
        });
        if let Some(f) = hook.editing_function {
            self.shared_mut().edits.insert(id, f);
        }
        Ok(HookHandle(id))
    }

    /// Returns false if the handle was already removed.
    pub fn remove_hook(&mut self, handle: HookHandle) -> bool {
        let before = self.hooks.len();
        self.hooks.retain(|h| h.id != handle.0);
        self.shared_mut().edits.remove(&handle.0);
        self.hooks.len() != before
    }

    fn shared_mut(&mut self) -> &mut Shared<T> {
        self.shared.get_mut().unwrap_or_else(|e| e.into_inner())
    }

    pub fn save_ctx(&mut self) -> &mut SaveContext {
        &mut self.shared_mut().save_ctx
    }

    pub fn registry(&mut self) -> &mut TrainableModuleRegistry<T> {
        &mut self.shared_mut().registry
    }

    /// The activation store of the global root.
    pub fn store(&mut self) -> &mut ActivationStore<T> {
        self.stores[0].get_mut().unwrap_or_else(|e| e.into_inner())
    }

    /// Number of retrieved tensors held by `rank`.
    pub fn retrieved_on(&self, rank: usize) -> usize {
        self.stores
            .get(rank)
            .map(|s| s.lock().unwrap_or_else(|e| e.into_inner()).len())
            .unwrap_or(0)
    }

    /// This rank's part of a hooked forward. Must be called on every rank.
    pub fn forward_on(&self, w: &mut Worker<'_>, input: &ModelInput<T>) -> Result<Option<Tensor<T>>> {
        let model = &self.models[w.rank()];
        if self.hooks.is_empty() {
            return model.forward(w, input, &mut NoHooks);
        }
        let mut visitor = HookVisitor {
            wrapper: self,
            tree: model.module_tree(),
            pending: Vec::new(),
        };
        let out = model.forward(w, input, &mut visitor)?;
        let pending = visitor.pending;
        let offload = self.offload;
        let got = w.with_origin(Origin::Hook, |w| w.gather_to_root(GroupKind::World, pending, offload))?;
        if let Some(mut items) = got {
            let tree = model.module_tree();
            items.sort_by_key(|it| tree.site_index(&it.label));
            let mut store = self.stores[w.rank()].lock().unwrap_or_else(|e| e.into_inner());
            for it in items {
                store.push(&it.label, it.tensor);
            }
        }
        Ok(out)
    }

    /// Launches a hooked forward over the mesh and assembles the full output.
    pub fn forward(&self, input: &ModelInput<T>) -> Result<ForwardOutput<T>> {
        let out = launch(&self.mesh, |w| self.forward_on(w, input))?;
        Ok(ForwardOutput {
            output: assemble_outputs(&self.mesh, &out.results)?,
            ledger: out.merged_ledger(),
            ledgers: out.ledgers,
        })
    }

    /// Gathers a parameter over TP and delivers it to the global root, which
    /// gets `Some`. Must be called on every rank.
    pub fn get_module_parameter(
        &self,
        w: &mut Worker<'_>,
        name: &str,
        expected_shape: &[Option<usize>],
    ) -> Result<Option<Tensor<T>>> {
        let model = &self.models[w.rank()];
        let tree = model.module_tree();
        if !tree.has_parameter(name) {
            return Err(Error::UnknownParameter {
                name: name.to_string(),
                candidates: tree.near_parameters(name),
            });
        }
        let offload = self.offload;
        w.with_origin(Origin::Hook, |w| {
            let mut items = Vec::new();
            if let Some(p) = model.parameter(name) {
                let tp = w.mesh().tp_size();
                let plan = infer_full_shape_with_hint(p.local.shape(), expected_shape, tp, 1, Some(&p.spec))?;
                if plan.tp_dim != p.spec.tp_dim {
                    return Err(Error::Pipeline {
                        site: name.to_string(),
                        detail: format!(
                            "expected shape {expected_shape:?} disagrees with TP sharding of dim {:?}",
                            p.spec.tp_dim
                        ),
                    });
                }
                let full = match plan.tp_dim {
                    Some(d) => w.all_gather(Axis::Tp, &p.local, d)?,
                    None => p.local,
                };
                let c = w.coord();
                if c.dp == 0 && c.tp == 0 {
                    items.push((name.to_string(), full));
                }
            }
            let got = w.gather_to_root(GroupKind::World, items, offload)?;
            match got {
                None => Ok(None),
                Some(mut v) if v.len() == 1 => Ok(Some(v.remove(0).tensor)),
                Some(v) => Err(Error::Pipeline {
                    site: name.to_string(),
                    detail: format!("{} copies reached the root", v.len()),
                }),
            }
        })
    }

    /// Convenience launch of [`FlexWrapper::get_module_parameter`].
    pub fn fetch_parameter(&self, name: &str, expected_shape: &[Option<usize>]) -> Result<Tensor<T>> {
        let tree = self.module_tree();
        if !tree.has_parameter(name) {
            return Err(Error::UnknownParameter {
                name: name.to_string(),
                candidates: tree.near_parameters(name),
            });
        }
        let out = launch(&self.mesh, |w| self.get_module_parameter(w, name, expected_shape))?;
        out.results
            .into_iter()
            .next()
            .flatten()
            .ok_or_else(|| Error::Pipeline {
                site: name.to_string(),
                detail: "root received nothing".into(),
            })
    }

    fn run_hook(
        &self,
        w: &mut Worker<'_>,
        site: &str,
        meta: &HookMeta,
        tree: &ModuleTree,
        dist: &DistTensor<T>,
        pending: &mut Vec<(String, Tensor<T>)>,
    ) -> Result<Tensor<T>> {
        let pipeline_err = |detail: String| Error::Pipeline {
            site: site.to_string(),
            detail,
        };
        let (tp, dp) = (w.mesh().tp_size(), w.mesh().dp_size());
        let plan = infer_full_shape_with_hint(dist.local.shape(), &meta.expected, tp, dp, Some(&dist.spec))?;
        if plan.tp_dim != dist.spec.tp_dim {
            return Err(pipeline_err(format!(
                "expected shape {:?} implies TP dim {:?}, activation is TP-sharded on {:?}",
                meta.expected, plan.tp_dim, dist.spec.tp_dim
            )));
        }
        if plan.dp_dim.is_some() && plan.dp_dim != dist.spec.dp_dim {
            return Err(pipeline_err(format!(
                "expected shape {:?} implies DP dim {:?}, activation is DP-sharded on {:?}",
                meta.expected, plan.dp_dim, dist.spec.dp_dim
            )));
        }

        let mut full = dist.local.clone();
        if let Some(d) = plan.tp_dim {
            full = w.all_gather(Axis::Tp, &full, d)?;
        }
        if let Some(d) = plan.dp_dim {
            full = w.all_gather(Axis::Dp, &full, d)?;
        }
        // Without a DP gather each DP replica is its own activation group.
        let group = if plan.dp_dim.is_some() { GroupKind::Stage } else { GroupKind::Tp };

        let edited = if w.group(group).is_root() {
            let t = if meta.has_edit {
                let mut shared = self.shared.lock().unwrap_or_else(|e| e.into_inner());
                let Shared {
                    edits,
                    save_ctx,
                    registry,
                } = &mut *shared;
                let f = edits
                    .get_mut(&meta.id)
                    .ok_or_else(|| pipeline_err("editing function missing".into()))?;
                let module = ModuleRef {
                    name: site.to_string(),
                    parameter_names: tree
                        .parameters()
                        .iter()
                        .filter(|p| p.strip_prefix(site).is_some_and(|r| r.starts_with('.')))
                        .cloned()
                        .collect(),
                };
                let shape = full.shape().to_vec();
                let out = f(&module, full, save_ctx, registry)?;
                if out.shape() != shape.as_slice() {
                    return Err(pipeline_err(format!(
                        "editing function returned shape {:?}, expected {shape:?}",
                        out.shape()
                    )));
                }
                out
            } else {
                full
            };
            pending.push((site.to_string(), t.clone()));
            Some(t)
        } else {
            None
        };

        if !meta.has_edit {
            return Ok(dist.local.clone());
        }
        let mut local = w.broadcast(group, edited.as_ref())?;
        if let Some(d) = plan.dp_dim {
            local = w.scatter(Axis::Dp, &local, d)?;
        }
        if let Some(d) = plan.tp_dim {
            local = w.scatter(Axis::Tp, &local, d)?;
        }
        Ok(local)
    }
}

struct HookVisitor<'a, T, M> {
    wrapper: &'a FlexWrapper<T, M>,
    tree: &'a ModuleTree,
    pending: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar, M: ShardedModel<T>> SiteVisitor<T> for HookVisitor<'_, T, M> {
    fn visit(&mut self, w: &mut Worker<'_>, site: &str, output: TreeNode<T>) -> Result<TreeNode<T>> {
        let metas: Vec<&HookMeta> = self.wrapper.hooks.iter().filter(|h| h.site == site).collect();
        if metas.is_empty() {
            return Ok(output);
        }
        let (mut leaves, def) = flatten(output);
        for meta in metas {
            let idx = match meta.leaf {
                Some(i) => i,
                None => leaves
                    .iter()
                    .position(|l| l.as_tensor().is_some())
                    .ok_or_else(|| Error::Pipeline {
                        site: site.to_string(),
                        detail: "site output has no tensor leaf".into(),
                    })?,
            };
            let dist = leaves
                .get(idx)
                .and_then(Leaf::as_tensor)
                .cloned()
                .ok_or_else(|| Error::Pipeline {
                    site: site.to_string(),
                    detail: format!("leaf {idx} is not a tensor"),
                })?;
            let (wrapper, tree, pending) = (self.wrapper, self.tree, &mut self.pending);
            let local = w.with_origin(Origin::Hook, |w| wrapper.run_hook(w, site, meta, tree, &dist, pending))?;
            leaves[idx] = Leaf::Tensor(DistTensor {
                local,
                spec: dist.spec,
            });
        }
        unflatten(&def, leaves)
    }
}
