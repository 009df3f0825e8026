use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Axis;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which tensor dims are split along which mesh axes.
///
/// Each axis shards at most one dim; `full_dim = local_dim × group_size` for
/// every sharded dim.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardSpec {
    pub tp_dim: Option<usize>,
    pub tp_size: usize,
    pub dp_dim: Option<usize>,
    pub dp_size: usize,
}

impl ShardSpec {
    pub fn replicated() -> Self {
        Self {
            tp_dim: None,
            tp_size: 1,
            dp_dim: None,
            dp_size: 1,
        }
    }

    pub fn tp(dim: usize, size: usize) -> Self {
        Self {
            tp_dim: (size > 1).then_some(dim),
            tp_size: size,
            ..Self::replicated()
        }
    }

    pub fn with_dp(mut self, dim: usize, size: usize) -> Self {
        self.dp_dim = (size > 1).then_some(dim);
        self.dp_size = size;
        self
    }

    pub fn dim_for(&self, axis: Axis) -> Option<usize> {
        match axis {
            Axis::Tp => self.tp_dim,
            Axis::Dp => self.dp_dim,
            Axis::Pp => None,
        }
    }

    pub fn full_shape(&self, local: &[usize]) -> Vec<usize> {
        let mut s = local.to_vec();
        if let Some(d) = self.tp_dim {
            s[d] *= self.tp_size;
        }
        if let Some(d) = self.dp_dim {
            s[d] *= self.dp_size;
        }
        s
    }
}

/// A local shard together with its sharding layout.
#[derive(Clone, Debug, PartialEq)]
pub struct DistTensor<T> {
    pub local: Tensor<T>,
    pub spec: ShardSpec,
}

impl<T: Scalar> DistTensor<T> {
    pub fn new(local: Tensor<T>, spec: ShardSpec) -> Result<Self> {
        for d in [spec.tp_dim, spec.dp_dim].into_iter().flatten() {
            if d >= local.rank() {
                return Err(Error::shape(
                    "DistTensor",
                    format!("sharded dim {d} out of range for {:?}", local.shape()),
                ));
            }
        }
        if spec.tp_dim.is_some() && spec.tp_dim == spec.dp_dim {
            return Err(Error::shape("DistTensor", "TP and DP shard the same dim"));
        }
        Ok(Self { local, spec })
    }

    pub fn replicated(local: Tensor<T>) -> Self {
        Self {
            local,
            spec: ShardSpec::replicated(),
        }
    }

    pub fn full_shape(&self) -> Vec<usize> {
        self.spec.full_shape(self.local.shape())
    }
}
