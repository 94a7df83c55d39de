//! Dense layer over row-major (rows, features) matrices.

use ndarray::{Array1, Array2, Ix1, Ix2};

use super::param::{GradMode, Param};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Linear<F: Scalar> {
    pub w: Param<F>, // (out, in)
    pub b: Param<F>, // (out,)
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<F: Scalar> Linear<F> {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, weights: Array2<F>) -> Self {
        debug_assert_eq!(weights.dim(), (out_dim, in_dim));
        Linear {
            w: Param::new(format!("{name}.w"), weights.into_dyn()),
            b: Param::new(format!("{name}.b"), Array1::<F>::zeros(out_dim).into_dyn()),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let w = self.w.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.b.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = x.dot(&w.t());
        for mut row in y.rows_mut() {
            row += &b;
        }
        y
    }

    pub fn backward(&mut self, x: &Array2<F>, gy: &Array2<F>, mode: GradMode) -> Array2<F> {
        if mode == GradMode::Accumulate {
            let gw = gy.t().dot(x);
            let mut wg = self.w.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            wg += &gw;
            let mut bg = self.b.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            for row in gy.rows() {
                bg += &row;
            }
        }
        let w = self.w.value.view().into_dimensionality::<Ix2>().unwrap();
        gy.dot(&w)
    }
}
