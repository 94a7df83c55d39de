//! Minimal differentiable layer library: convolution, instance norm, dense
//! layers and the sequencing/tap machinery the translation networks build on.

pub mod conv;
pub mod linear;
pub mod norm;
pub mod param;
pub mod seq;

pub use conv::{conv_out_size, Conv2d};
pub use linear::Linear;
pub use norm::InstanceNorm2d;
pub use param::{GradMode, HasParams, Param};
pub use seq::{blur_down, reflect_pad, upsample2x, Cache, Layer, Sequential};

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

/// Weight init: zero-mean Gaussian with std 0.02, biases zero.
pub const INIT_STD: f64 = 0.02;

pub fn gaussian_conv_weights<F: Scalar, R: Rng>(
    rng: &mut R,
    out_ch: usize,
    in_ch: usize,
    kernel: usize,
    std: f64,
) -> Array4<F> {
    let dist = Normal::new(0.0, std).unwrap();
    let data: Vec<F> = (0..out_ch * in_ch * kernel * kernel)
        .map(|_| F::from_f64c(dist.sample(rng)))
        .collect();
    Array4::from_shape_vec((out_ch, in_ch, kernel, kernel), data).unwrap()
}

pub fn gaussian_linear_weights<F: Scalar, R: Rng>(
    rng: &mut R,
    out_dim: usize,
    in_dim: usize,
    std: f64,
) -> Array2<F> {
    let dist = Normal::new(0.0, std).unwrap();
    let data: Vec<F> = (0..out_dim * in_dim)
        .map(|_| F::from_f64c(dist.sample(rng)))
        .collect();
    Array2::from_shape_vec((out_dim, in_dim), data).unwrap()
}

/// Convenience constructor for an initialized convolution.
pub fn conv<F: Scalar, R: Rng>(
    rng: &mut R,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Conv2d<F> {
    let w = gaussian_conv_weights(rng, out_ch, in_ch, kernel, INIT_STD);
    Conv2d::new(name, in_ch, out_ch, kernel, stride, pad, w)
}

pub fn linear<F: Scalar, R: Rng>(rng: &mut R, name: &str, in_dim: usize, out_dim: usize) -> Linear<F> {
    let w = gaussian_linear_weights(rng, out_dim, in_dim, INIT_STD);
    Linear::new(name, in_dim, out_dim, w)
}
