//! Scalar abstraction for the numeric core.
//!
//! Everything numeric in this crate is generic over [`Scalar`] so the same
//! code instantiates at `f32` and `f64`. The crate-root aliases pin `f64`,
//! which is what the CLI and the acceptance suite use.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; panics only if the target type cannot
    /// represent any finite approximation, which none of ours can hit.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 convertible to scalar")
    }

    /// Widening conversion back to `f64` for reporting and serialization.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<S: Scalar>(v: f64) -> f64 {
        S::of(v).as_f64()
    }

    #[test]
    fn conversions_roundtrip() {
        assert_eq!(roundtrip::<f64>(0.125), 0.125);
        assert_eq!(roundtrip::<f32>(0.125), 0.125);
    }
}
