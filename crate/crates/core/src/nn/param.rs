//! Learnable parameter storage and traversal.

use ndarray::ArrayD;

use crate::scalar::Scalar;

/// A named tensor with an accumulated gradient buffer.
#[derive(Debug, Clone)]
pub struct Param<F: Scalar> {
    pub name: String,
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(name: impl Into<String>, value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

/// Anything that owns parameters. Traversal order is construction order and
/// is relied on by the optimizer, checkpointing, and momentum twins.
pub trait HasParams<F: Scalar> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    /// Squared L2 norm over all parameter values (diagnostics).
    fn param_sq_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.visit_params(&mut |p| {
            acc += p.value.iter().map(|v| v.to_f64c() * v.to_f64c()).sum::<f64>();
        });
        acc
    }

    fn snapshot_values(&self) -> Vec<ArrayD<F>> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p.value.clone()));
        out
    }

    /// Elementwise `self = m * self + (1 - m) * src` over the parameter list.
    /// `src` must come from `snapshot_values` of a structurally equal module.
    fn ema_from_snapshot(&mut self, src: &[ArrayD<F>], momentum: F) -> crate::Result<()> {
        let mut idx = 0usize;
        let mut err = None;
        self.visit_params_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match src.get(idx) {
                Some(s) if s.raw_dim() == p.value.raw_dim() => {
                    let one_m = F::one() - momentum;
                    ndarray::Zip::from(&mut p.value).and(s).for_each(|v, &s| {
                        *v = momentum * *v + one_m * s;
                    });
                }
                Some(_) => err = Some(format!("shape mismatch for parameter {}", p.name)),
                None => err = Some("snapshot shorter than parameter list".into()),
            }
            idx += 1;
        });
        if err.is_none() && idx != src.len() {
            err = Some("snapshot longer than parameter list".into());
        }
        match err {
            Some(e) => Err(crate::Error::invalid_state(e)),
            None => Ok(()),
        }
    }
}

/// Whether a backward pass should write parameter gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Accumulate into each `Param::grad`.
    Accumulate,
    /// Propagate input gradients only (frozen module).
    SkipParams,
}
