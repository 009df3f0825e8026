//! Megatron-style tensor-parallel linear layers (no bias).

use super::{DistTensor, ShardSpec};
use crate::error::{Error, Result};
use crate::mesh::{Axis, Worker};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output features split across the TP group: local weight is `[out/tp, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnParallelLinear<T> {
    pub weight: Tensor<T>,
    pub tp_size: usize,
    pub gather_output: bool,
}

/// Input features split across the TP group: local weight is `[out, in/tp]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RowParallelLinear<T> {
    pub weight: Tensor<T>,
    pub tp_size: usize,
}

impl<T: Scalar> ColumnParallelLinear<T> {
    pub fn from_dense(dense: &Tensor<T>, tp_size: usize, tp_idx: usize, gather_output: bool) -> Result<Self> {
        let parts = dense.split(0, tp_size)?;
        Ok(Self {
            weight: parts[tp_idx].clone(),
            tp_size,
            gather_output,
        })
    }

    pub fn spec(&self) -> ShardSpec {
        ShardSpec::tp(0, self.tp_size)
    }

    /// `x` must be replicated across the TP group.
    pub fn forward(&self, w: &mut Worker<'_>, x: &Tensor<T>) -> Result<DistTensor<T>> {
        let y = x.linear(&self.weight)?;
        let last = y.rank() - 1;
        if self.gather_output {
            let full = w.all_gather(Axis::Tp, &y, last)?;
            Ok(DistTensor::replicated(full))
        } else {
            DistTensor::new(y, ShardSpec::tp(last, self.tp_size))
        }
    }
}

impl<T: Scalar> RowParallelLinear<T> {
    pub fn from_dense(dense: &Tensor<T>, tp_size: usize, tp_idx: usize) -> Result<Self> {
        let parts = dense.split(1, tp_size)?;
        Ok(Self {
            weight: parts[tp_idx].clone(),
            tp_size,
        })
    }

    pub fn spec(&self) -> ShardSpec {
        ShardSpec::tp(1, self.tp_size)
    }

    /// Partial products summed over the TP group; the result is replicated.
    pub fn forward(&self, w: &mut Worker<'_>, x: &DistTensor<T>) -> Result<Tensor<T>> {
        let last = x.local.rank() - 1;
        if self.tp_size > 1 && x.spec.tp_dim != Some(last) {
            return Err(Error::shape(
                "row_parallel_forward",
                format!("input must be TP-sharded on its last dim, got {:?}", x.spec),
            ));
        }
        if x.local.last_dim() != self.weight.dim(1) {
            return Err(Error::shape(
                "row_parallel_forward",
                format!("local input {:?} vs weight shard {:?}", x.local.shape(), self.weight.shape()),
            ));
        }
        let partial = x.local.linear(&self.weight)?;
        w.all_reduce_sum(Axis::Tp, &partial)
    }
}
