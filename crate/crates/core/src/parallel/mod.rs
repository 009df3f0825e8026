//! Sharded layers and the models built from them.

mod alternating;
mod checkpoint;
mod linear;
mod module_tree;
mod shard;
mod synthetic;
mod transformer;

pub use alternating::AlternatingLinearModel;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointEntry};
pub use linear::{ColumnParallelLinear, RowParallelLinear};
pub use module_tree::ModuleTree;
pub use shard::{DistTensor, ShardSpec};
pub use synthetic::{build_synthetic_induction_model, SyntheticInductionModel};
pub use transformer::{DenseParams, ParamShard, ParamSpec, ToyTransformer, ToyTransformerConfig};

use crate::error::{Error, Result};
use crate::hooks::TreeNode;
use crate::mesh::{launch, DeviceMesh, LaunchOutput, MeshCoord, Worker};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Token ids laid out `[batch, seq]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    batch: usize,
    seq: usize,
    ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != batch * seq || batch == 0 || seq == 0 {
            return Err(Error::shape(
                "TokenBatch",
                format!("{} ids for batch {batch} × seq {seq}", ids.len()),
            ));
        }
        Ok(Self { batch, seq, ids })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }

    /// Rows `[start, start+len)`.
    pub fn rows(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.batch {
            return Err(Error::index("TokenBatch::rows", format!("{start}+{len} > {}", self.batch)));
        }
        Self::new(len, self.seq, self.ids[start * self.seq..(start + len) * self.seq].to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelInput<T> {
    Tokens(TokenBatch),
    /// A replicated `[b, s, d]` activation.
    Dense(Tensor<T>),
}

impl<T: Scalar> ModelInput<T> {
    pub fn batch(&self) -> usize {
        match self {
            ModelInput::Tokens(t) => t.batch(),
            ModelInput::Dense(x) => x.shape().first().copied().unwrap_or(0),
        }
    }
}

/// Receives every named site output during a forward and may replace it.
pub trait SiteVisitor<T> {
    fn visit(&mut self, worker: &mut Worker<'_>, site: &str, output: TreeNode<T>) -> Result<TreeNode<T>>;
}

/// Passes every site output through untouched.
pub struct NoHooks;

impl<T> SiteVisitor<T> for NoHooks {
    fn visit(&mut self, _: &mut Worker<'_>, _: &str, output: TreeNode<T>) -> Result<TreeNode<T>> {
        Ok(output)
    }
}

/// The per-rank slice of a model.
pub trait ShardedModel<T: Scalar>: Send + Sync {
    fn module_tree(&self) -> &ModuleTree;

    /// Local shard of a parameter, or `None` if another pipeline stage owns it.
    fn parameter(&self, name: &str) -> Option<DistTensor<T>>;

    /// Runs this rank's part of the forward. Ranks that produce final outputs
    /// (last pipeline stage) return `Some`.
    fn forward(
        &self,
        worker: &mut Worker<'_>,
        input: &ModelInput<T>,
        sites: &mut dyn SiteVisitor<T>,
    ) -> Result<Option<Tensor<T>>>;
}

/// Pulls the designated tensor back out of a visited site output.
pub(crate) fn site_tensor<T: Scalar>(site: &str, tree: &TreeNode<T>) -> Result<Tensor<T>> {
    tree.first_tensor()
        .map(|d| d.local.clone())
        .ok_or_else(|| Error::Pipeline {
            site: site.to_string(),
            detail: "site output lost its tensor leaf".into(),
        })
}

/// Visits a plain tensor site and returns the possibly replaced local shard.
pub(crate) fn visit_tensor<T: Scalar>(
    worker: &mut Worker<'_>,
    sites: &mut dyn SiteVisitor<T>,
    site: &str,
    local: Tensor<T>,
    spec: ShardSpec,
) -> Result<Tensor<T>> {
    let before = local.shape().to_vec();
    let out = sites.visit(worker, site, TreeNode::Tensor(DistTensor::new(local, spec)?))?;
    let t = site_tensor(site, &out)?;
    if t.shape() != before.as_slice() {
        return Err(Error::Pipeline {
            site: site.to_string(),
            detail: format!("shape changed from {before:?} to {:?}", t.shape()),
        });
    }
    Ok(t)
}

/// The batch rows a DP replica owns.
pub(crate) fn dp_slice(batch: usize, mesh: &DeviceMesh, coord: MeshCoord) -> Result<(usize, usize)> {
    let dp = mesh.dp_size();
    if batch % dp != 0 {
        return Err(Error::Config(format!("batch {batch} not divisible by dp {dp}")));
    }
    let per = batch / dp;
    Ok((coord.dp * per, per))
}

/// Concatenates the final outputs of every DP replica, in DP order, from the
/// TP-index-0 ranks of the last stage.
pub fn assemble_outputs<T: Scalar>(mesh: &DeviceMesh, per_rank: &[Option<Tensor<T>>]) -> Result<Tensor<T>> {
    let mut parts = Vec::new();
    for dp in 0..mesh.dp_size() {
        let r = mesh.rank_of(MeshCoord {
            dp,
            tp: 0,
            pp: mesh.pp_size() - 1,
        });
        match per_rank.get(r) {
            Some(Some(t)) => parts.push(t.clone()),
            _ => return Err(Error::Config(format!("rank {r} produced no output"))),
        }
    }
    Tensor::concat(&parts, 0)
}

/// Launches an unhooked forward of per-rank models and returns the full output.
pub fn forward_unhooked<T: Scalar, M: ShardedModel<T>>(
    mesh: &DeviceMesh,
    models: &[M],
    input: &ModelInput<T>,
) -> Result<(Tensor<T>, LaunchOutput<Option<Tensor<T>>>)> {
    check_replicas(mesh, models.len())?;
    let out = launch(mesh, |w| models[w.rank()].forward(w, input, &mut NoHooks))?;
    let full = assemble_outputs(mesh, &out.results)?;
    Ok((full, out))
}

pub(crate) fn check_replicas(mesh: &DeviceMesh, n: usize) -> Result<()> {
    if n != mesh.world_size() {
        return Err(Error::Config(format!(
            "{n} model replicas for a world of {}",
            mesh.world_size()
        )));
    }
    Ok(())
}
