//! Adaptive-moment optimizer over a parameter visitor.

use ndarray::ArrayD;

use crate::nn::HasParams;
use crate::scalar::Scalar;

/// Adam with bias correction. Moment buffers are laid out in the module's
/// parameter traversal order, which is fixed at construction.
#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam { lr, beta1, beta2, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update from the accumulated gradients; `lr_scale` applies the
    /// schedule. Gradients are left untouched (callers zero them).
    pub fn step<M: HasParams<F> + ?Sized>(&mut self, net: &mut M, lr_scale: f64) {
        self.t += 1;
        let lr = F::from_f64c(self.lr * lr_scale);
        let b1 = F::from_f64c(self.beta1);
        let b2 = F::from_f64c(self.beta2);
        let eps = F::from_f64c(self.eps);
        let bc1 = F::from_f64c(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = F::from_f64c(1.0 - self.beta2.powi(self.t as i32));
        let one = F::one();

        let first = self.m.is_empty();
        let mut idx = 0usize;
        let m = &mut self.m;
        let v = &mut self.v;
        net.visit_params_mut(&mut |p| {
            if first {
                m.push(ArrayD::zeros(p.value.raw_dim()));
                v.push(ArrayD::zeros(p.value.raw_dim()));
            }
            let mi = &mut m[idx];
            let vi = &mut v[idx];
            debug_assert_eq!(mi.raw_dim(), p.value.raw_dim(), "param order changed");
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(mi)
                .and(vi)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w = *w - lr * mhat / (vhat.sqrt() + eps);
                });
            idx += 1;
        });
    }

    /// Moment buffers for checkpointing: (t, m, v).
    pub fn state(&self) -> (u64, &[ArrayD<F>], &[ArrayD<F>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<ArrayD<F>>, v: Vec<ArrayD<F>>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}
