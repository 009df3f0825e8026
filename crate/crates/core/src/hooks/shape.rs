//! Full-shape inference from a local shard and a partially known expected shape.
//!
//! Known expected entries that differ from the local size must be explained by
//! exactly one axis: `local × tp == expected` or `local × dp == expected`.
//! Unknown (`None`) entries adopt the local size and are treated as unsharded.

use thiserror::Error;

use crate::mesh::Axis;
use crate::parallel::ShardSpec;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ShapeInferenceError {
    #[error("expected shape has rank {expected}, activation has rank {local}")]
    RankMismatch { local: usize, expected: usize },

    #[error(
        "dim {dim}: local {local} -> expected {expected} fits both TP ({tp}) and DP ({dp}); \
         cannot tell which axis shards it"
    )]
    Ambiguous {
        dim: usize,
        local: usize,
        expected: usize,
        tp: usize,
        dp: usize,
    },

    #[error(
        "dim {dim}: local {local} -> expected {expected} is not local×TP ({tp}) or local×DP ({dp}); \
         a dim may be sharded along one axis only"
    )]
    Infeasible {
        dim: usize,
        local: usize,
        expected: usize,
        tp: usize,
        dp: usize,
    },

    #[error("{axis:?} would shard both dim {first} and dim {second}")]
    AxisReused {
        axis: Axis,
        first: usize,
        second: usize,
    },
}

/// The gathers needed to materialize the full tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatherPlan {
    pub full_shape: Vec<usize>,
    pub tp_dim: Option<usize>,
    pub dp_dim: Option<usize>,
}

impl GatherPlan {
    pub fn is_noop(&self) -> bool {
        self.tp_dim.is_none() && self.dp_dim.is_none()
    }

    pub fn dim_for(&self, axis: Axis) -> Option<usize> {
        match axis {
            Axis::Tp => self.tp_dim,
            Axis::Dp => self.dp_dim,
            Axis::Pp => None,
        }
    }
}

pub fn infer_full_shape(
    local: &[usize],
    expected: &[Option<usize>],
    tp: usize,
    dp: usize,
) -> Result<GatherPlan, ShapeInferenceError> {
    infer_full_shape_with_hint(local, expected, tp, dp, None)
}

/// As [`infer_full_shape`], but a dim that fits both axes is resolved by the
/// producer's [`ShardSpec`] when one is supplied.
pub fn infer_full_shape_with_hint(
    local: &[usize],
    expected: &[Option<usize>],
    tp: usize,
    dp: usize,
    hint: Option<&ShardSpec>,
) -> Result<GatherPlan, ShapeInferenceError> {
    if local.len() != expected.len() {
        return Err(ShapeInferenceError::RankMismatch {
            local: local.len(),
            expected: expected.len(),
        });
    }
    let mut plan = GatherPlan {
        full_shape: local.to_vec(),
        tp_dim: None,
        dp_dim: None,
    };
    for (dim, (&l, &e)) in local.iter().zip(expected).enumerate() {
        let Some(e) = e else { continue };
        if e == l {
            continue;
        }
        let by_tp = tp > 1 && l * tp == e;
        let by_dp = dp > 1 && l * dp == e;
        let axis = match (by_tp, by_dp) {
            (true, false) => Axis::Tp,
            (false, true) => Axis::Dp,
            (true, true) => match hint.map(|h| (h.tp_dim == Some(dim), h.dp_dim == Some(dim))) {
                Some((true, false)) => Axis::Tp,
                Some((false, true)) => Axis::Dp,
                _ => {
                    return Err(ShapeInferenceError::Ambiguous {
                        dim,
                        local: l,
                        expected: e,
                        tp,
                        dp,
                    })
                }
            },
            (false, false) => {
                return Err(ShapeInferenceError::Infeasible {
                    dim,
                    local: l,
                    expected: e,
                    tp,
                    dp,
                })
            }
        };
        let slot = match axis {
            Axis::Tp => &mut plan.tp_dim,
            _ => &mut plan.dp_dim,
        };
        if let Some(first) = *slot {
            return Err(ShapeInferenceError::AxisReused {
                axis,
                first,
                second: dim,
            });
        }
        *slot = Some(dim);
        plan.full_shape[dim] = e;
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_tp() {
        let p = infer_full_shape(&[2, 4, 4], &[None, None, Some(8)], 2, 1).unwrap();
        assert_eq!(p.full_shape, vec![2, 4, 8]);
        assert_eq!(p.tp_dim, Some(2));
        assert_eq!(p.dp_dim, None);
    }

    #[test]
    fn forced_dp() {
        let p = infer_full_shape(&[1, 10, 16], &[Some(2), None, Some(16)], 1, 2).unwrap();
        assert_eq!(p.full_shape, vec![2, 10, 16]);
        assert_eq!(p.dp_dim, Some(0));
        assert_eq!(p.tp_dim, None);
    }

    #[test]
    fn product_of_both_axes_is_rejected() {
        let e = infer_full_shape(&[2, 4, 4], &[None, None, Some(16)], 2, 2).unwrap_err();
        assert!(matches!(e, ShapeInferenceError::Infeasible { dim: 2, .. }));
    }

    #[test]
    fn equal_axis_sizes_are_ambiguous_without_hint() {
        let e = infer_full_shape(&[1, 4, 4], &[Some(2), None, None], 2, 2).unwrap_err();
        assert!(matches!(e, ShapeInferenceError::Ambiguous { dim: 0, .. }));
        let hint = ShardSpec::tp(1, 2).with_dp(0, 2);
        let p = infer_full_shape_with_hint(&[1, 4, 4], &[Some(2), None, None], 2, 2, Some(&hint)).unwrap();
        assert_eq!(p.dp_dim, Some(0));
    }

    #[test]
    fn axis_cannot_shard_two_dims() {
        let e = infer_full_shape(&[2, 2], &[Some(4), Some(4)], 2, 1).unwrap_err();
        assert!(matches!(e, ShapeInferenceError::AxisReused { axis: Axis::Tp, .. }));
    }

    #[test]
    fn rank_mismatch() {
        assert!(matches!(
            infer_full_shape(&[2, 2], &[None], 1, 1),
            Err(ShapeInferenceError::RankMismatch { .. })
        ));
    }
}
