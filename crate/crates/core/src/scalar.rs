//! Element type abstraction for tensors and collectives.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type usable in tensors, layers and collectives.
///
/// Implemented for `f32` and `f64`. Everything numeric in the crate is written
/// against this trait; the analysis layers (lenses, induction, profiler) fix it
/// to `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Size of one element in bytes, used for communication accounting.
    const BYTES: usize;
    /// Human-readable type name.
    const NAME: &'static str;

    /// Lossy conversion from an `f64` literal or sample.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";
}
