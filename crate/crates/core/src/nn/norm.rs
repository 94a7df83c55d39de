//! Instance normalization (non-affine), per sample and channel.

use ndarray::{Array2, Array4};

use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct InstanceNorm2d {
    pub eps: f64,
}

impl Default for InstanceNorm2d {
    fn default() -> Self {
        InstanceNorm2d { eps: 1e-5 }
    }
}

#[derive(Debug, Clone)]
pub struct NormCache<F: Scalar> {
    /// Normalized output, reused by the backward pass.
    pub y: Array4<F>,
    pub inv_std: Array2<F>,
}

impl InstanceNorm2d {
    pub fn forward<F: Scalar>(&self, x: &Array4<F>) -> (Array4<F>, NormCache<F>) {
        let (n, c, h, w) = x.dim();
        let m = (h * w) as f64;
        let mut y = x.clone();
        let mut inv_std = Array2::<F>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let mut plane = y.slice_mut(ndarray::s![ni, ci, .., ..]);
                let mean = plane.iter().map(|v| v.to_f64c()).sum::<f64>() / m;
                let var = plane
                    .iter()
                    .map(|v| {
                        let d = v.to_f64c() - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / m;
                let is = 1.0 / (var + self.eps).sqrt();
                let mean_f = F::from_f64c(mean);
                let is_f = F::from_f64c(is);
                plane.mapv_inplace(|v| (v - mean_f) * is_f);
                inv_std[(ni, ci)] = is_f;
            }
        }
        let cache = NormCache { y: y.clone(), inv_std };
        (y, cache)
    }

    pub fn backward<F: Scalar>(&self, gy: &Array4<F>, cache: &NormCache<F>) -> Array4<F> {
        let (n, c, h, w) = gy.dim();
        let m = F::from_f64c((h * w) as f64);
        let mut gx = Array4::<F>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let g = gy.slice(ndarray::s![ni, ci, .., ..]);
                let y = cache.y.slice(ndarray::s![ni, ci, .., ..]);
                let is = cache.inv_std[(ni, ci)];
                let g_mean = g.sum() / m;
                let gy_dot_y = g
                    .iter()
                    .zip(y.iter())
                    .fold(F::zero(), |acc, (&a, &b)| acc + a * b)
                    / m;
                let mut o = gx.slice_mut(ndarray::s![ni, ci, .., ..]);
                ndarray::Zip::from(&mut o).and(&g).and(&y).for_each(|o, &g, &y| {
                    *o = is * (g - g_mean - y * gy_dot_y);
                });
            }
        }
        gx
    }
}
