//! Floating-point abstraction so the same layers run in f32 (training)
//! and f64 (gradient-check oracles).

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Element type for network tensors. Implemented for `f32` and `f64`.
pub trait Scalar: NdFloat + FromPrimitive + std::iter::Sum + Default + 'static {
    fn from_f64c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }
    fn to_f64c(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64c(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64c(self) -> f64 {
        self
    }
}
