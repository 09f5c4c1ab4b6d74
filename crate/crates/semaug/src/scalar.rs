//! Scalar abstraction: every numeric kernel in this crate is generic over a
//! floating-point element type.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Element type accepted by the tensors and numeric kernels (f32 or f64).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64; panics only for values no float can hold.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 convertible to scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    fn as_f32(self) -> f32 {
        self.to_f32().expect("scalar convertible to f32")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
