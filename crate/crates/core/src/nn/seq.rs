//! Layer sequences for the convolutional networks, with tap points and a
//! linearized (frozen-mask) pass used by the gradient penalty.

use ndarray::Array4;

use super::conv::Conv2d;
use super::norm::{InstanceNorm2d, NormCache};
use super::param::{GradMode, HasParams, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub enum Layer<F: Scalar> {
    Conv(Conv2d<F>),
    Norm(InstanceNorm2d),
    Relu,
    LeakyRelu(f64),
    Tanh,
    ReflectPad(usize),
    /// Fixed [1 2 1]/4 separable blur followed by stride-2 subsampling.
    BlurDown,
    Upsample2x,
    /// y = x + body(x), optionally scaled by 1/sqrt(2).
    Residual { body: Box<Sequential<F>>, rescale: bool },
}

#[derive(Debug)]
pub enum Cache<F: Scalar> {
    Conv(Array4<F>),
    Norm(NormCache<F>),
    Mask(Array4<bool>),
    Tanh(Array4<F>),
    Shape(usize, usize),
    Residual(Vec<Cache<F>>),
    None,
}

#[derive(Debug, Clone, Default)]
pub struct Sequential<F: Scalar> {
    pub layers: Vec<Layer<F>>,
}

impl<F: Scalar> Sequential<F> {
    pub fn new(layers: Vec<Layer<F>>) -> Self {
        Sequential { layers }
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, Vec<Cache<F>>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (y, cache) = layer_forward(layer, &cur);
            caches.push(cache);
            cur = y;
        }
        (cur, caches)
    }

    /// Forward pass that also returns the outputs of the given layer indices.
    pub fn forward_taps(
        &self,
        x: &Array4<F>,
        taps: &[usize],
    ) -> (Array4<F>, Vec<Cache<F>>, Vec<Array4<F>>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut tapped = Vec::with_capacity(taps.len());
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = layer_forward(layer, &cur);
            caches.push(cache);
            cur = y;
            if taps.contains(&i) {
                tapped.push(cur.clone());
            }
        }
        (cur, caches, tapped)
    }

    pub fn backward(&mut self, gy: Array4<F>, caches: &[Cache<F>], mode: GradMode) -> Array4<F> {
        self.backward_with_taps(gy, &[], caches, mode)
    }

    /// Reverse pass with extra gradients injected at tap outputs.
    /// `tap_grads` pairs a layer index with the gradient of the loss with
    /// respect to that layer's output.
    pub fn backward_with_taps(
        &mut self,
        gy: Array4<F>,
        tap_grads: &[(usize, Array4<F>)],
        caches: &[Cache<F>],
        mode: GradMode,
    ) -> Array4<F> {
        assert_eq!(caches.len(), self.layers.len());
        let mut grad = gy;
        for i in (0..self.layers.len()).rev() {
            for (t, tg) in tap_grads {
                if *t == i {
                    grad = grad + tg;
                }
            }
            grad = layer_backward(&mut self.layers[i], grad, &caches[i], mode, true);
        }
        grad
    }

    /// Directional-derivative forward with activation masks frozen from a
    /// primal pass and all bias terms dropped. Exact for piecewise-linear
    /// stacks (conv / leaky-relu / pad / blur); rejects smooth nonlinearities.
    pub fn forward_linearized(
        &self,
        tangent: &Array4<F>,
        primal_caches: &[Cache<F>],
    ) -> Result<(Array4<F>, Vec<Cache<F>>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = tangent.clone();
        for (layer, primal) in self.layers.iter().zip(primal_caches) {
            let (y, cache) = layer_forward_linearized(layer, &cur, primal)?;
            caches.push(cache);
            cur = y;
        }
        Ok((cur, caches))
    }

    /// Backward over a linearized pass; conv bias gradients are skipped since
    /// the linearized forward had no bias contribution.
    pub fn backward_linearized(
        &mut self,
        gy: Array4<F>,
        lin_caches: &[Cache<F>],
        mode: GradMode,
    ) -> Array4<F> {
        let mut grad = gy;
        for i in (0..self.layers.len()).rev() {
            grad = layer_backward(&mut self.layers[i], grad, &lin_caches[i], mode, false);
        }
        grad
    }

    /// Output spatial size given an input size (shape bookkeeping only).
    pub fn trace_shape(&self, h: usize, w: usize) -> (usize, usize) {
        let mut cur = (h, w);
        for layer in &self.layers {
            cur = layer_shape(layer, cur);
        }
        cur
    }

    /// Like `trace_shape` but detects inputs too small for the stack.
    pub fn try_trace_shape(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let mut cur = (h, w);
        for layer in &self.layers {
            if let Layer::Conv(c) = layer {
                if cur.0 + 2 * c.pad < c.kernel || cur.1 + 2 * c.pad < c.kernel {
                    return None;
                }
            }
            if let Layer::ReflectPad(p) = layer {
                if cur.0 <= *p || cur.1 <= *p {
                    return None;
                }
            }
            cur = layer_shape(layer, cur);
            if cur.0 == 0 || cur.1 == 0 {
                return None;
            }
        }
        Some(cur)
    }

    /// Spatial size at the output of layer `tap`.
    pub fn trace_shape_at(&self, h: usize, w: usize, tap: usize) -> (usize, usize) {
        let mut cur = (h, w);
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer_shape(layer, cur);
            if i == tap {
                return cur;
            }
        }
        cur
    }

    /// (receptive field, stride) of the output of layer `tap` relative to the
    /// input of this sequence.
    pub fn receptive_field_at(&self, tap: usize) -> (usize, usize) {
        let mut rf = 1usize;
        let mut jump = 1usize;
        for (i, layer) in self.layers.iter().enumerate() {
            let (k, s) = layer_kernel_stride(layer);
            rf += (k - 1) * jump;
            jump *= s;
            if i == tap {
                return (rf, jump);
            }
        }
        (rf, jump)
    }

    /// Number of channels produced by layer `tap` given the input channels.
    pub fn channels_at(&self, in_ch: usize, tap: usize) -> usize {
        let mut c = in_ch;
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::Conv(conv) = layer {
                c = conv.out_ch;
            }
            if i == tap {
                return c;
            }
        }
        c
    }
}

impl<F: Scalar> HasParams<F> for Sequential<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    f(&c.w);
                    f(&c.b);
                }
                Layer::Residual { body, .. } => body.visit_params(f),
                _ => {}
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    f(&mut c.w);
                    f(&mut c.b);
                }
                Layer::Residual { body, .. } => body.visit_params_mut(f),
                _ => {}
            }
        }
    }
}

fn layer_forward<F: Scalar>(layer: &Layer<F>, x: &Array4<F>) -> (Array4<F>, Cache<F>) {
    match layer {
        Layer::Conv(c) => (c.forward(x), Cache::Conv(x.clone())),
        Layer::Norm(n) => {
            let (y, cache) = n.forward(x);
            (y, Cache::Norm(cache))
        }
        Layer::Relu => {
            let mask = x.mapv(|v| v > F::zero());
            let y = x.mapv(|v| if v > F::zero() { v } else { F::zero() });
            (y, Cache::Mask(mask))
        }
        Layer::LeakyRelu(slope) => {
            let a = F::from_f64c(*slope);
            let mask = x.mapv(|v| v > F::zero());
            let y = x.mapv(|v| if v > F::zero() { v } else { v * a });
            (y, Cache::Mask(mask))
        }
        Layer::Tanh => {
            let y = x.mapv(|v| v.tanh());
            (y.clone(), Cache::Tanh(y))
        }
        Layer::ReflectPad(p) => {
            let (_, _, h, w) = x.dim();
            (reflect_pad(x, *p), Cache::Shape(h, w))
        }
        Layer::BlurDown => {
            let (_, _, h, w) = x.dim();
            (blur_down(x), Cache::Shape(h, w))
        }
        Layer::Upsample2x => {
            let (_, _, h, w) = x.dim();
            (upsample2x(x), Cache::Shape(h, w))
        }
        Layer::Residual { body, rescale } => {
            let (fy, caches) = body.forward(x);
            let mut y = fy + x;
            if *rescale {
                y.mapv_inplace(|v| v * F::from_f64c(std::f64::consts::FRAC_1_SQRT_2));
            }
            (y, Cache::Residual(caches))
        }
    }
}

fn layer_backward<F: Scalar>(
    layer: &mut Layer<F>,
    gy: Array4<F>,
    cache: &Cache<F>,
    mode: GradMode,
    with_bias: bool,
) -> Array4<F> {
    match (layer, cache) {
        (Layer::Conv(c), Cache::Conv(x)) => c.backward(x, &gy, mode, with_bias),
        (Layer::Norm(n), Cache::Norm(cache)) => n.backward(&gy, cache),
        (Layer::Relu, Cache::Mask(mask)) => {
            let mut g = gy;
            ndarray::Zip::from(&mut g).and(mask).for_each(|g, &m| {
                if !m {
                    *g = F::zero();
                }
            });
            g
        }
        (Layer::LeakyRelu(slope), Cache::Mask(mask)) => {
            let a = F::from_f64c(*slope);
            let mut g = gy;
            ndarray::Zip::from(&mut g).and(mask).for_each(|g, &m| {
                if !m {
                    *g = *g * a;
                }
            });
            g
        }
        (Layer::Tanh, Cache::Tanh(y)) => {
            let mut g = gy;
            ndarray::Zip::from(&mut g).and(y).for_each(|g, &y| {
                *g = *g * (F::one() - y * y);
            });
            g
        }
        (Layer::ReflectPad(p), Cache::Shape(h, w)) => reflect_pad_backward(&gy, *p, *h, *w),
        (Layer::BlurDown, Cache::Shape(h, w)) => blur_down_backward(&gy, *h, *w),
        (Layer::Upsample2x, Cache::Shape(..)) => upsample2x_backward(&gy),
        (Layer::Residual { body, rescale }, Cache::Residual(caches)) => {
            let g = if *rescale {
                gy.mapv(|v| v * F::from_f64c(std::f64::consts::FRAC_1_SQRT_2))
            } else {
                gy
            };
            let gx_body = if with_bias {
                body.backward(g.clone(), caches, mode)
            } else {
                body.backward_linearized(g.clone(), caches, mode)
            };
            gx_body + &g
        }
        _ => unreachable!("cache does not match layer"),
    }
}

fn layer_forward_linearized<F: Scalar>(
    layer: &Layer<F>,
    t: &Array4<F>,
    primal: &Cache<F>,
) -> Result<(Array4<F>, Cache<F>)> {
    match (layer, primal) {
        (Layer::Conv(c), Cache::Conv(_)) => Ok((c.forward_linear(t), Cache::Conv(t.clone()))),
        (Layer::Relu, Cache::Mask(mask)) => {
            let mut y = t.clone();
            ndarray::Zip::from(&mut y).and(mask).for_each(|y, &m| {
                if !m {
                    *y = F::zero();
                }
            });
            Ok((y, Cache::Mask(mask.clone())))
        }
        (Layer::LeakyRelu(slope), Cache::Mask(mask)) => {
            let a = F::from_f64c(*slope);
            let mut y = t.clone();
            ndarray::Zip::from(&mut y).and(mask).for_each(|y, &m| {
                if !m {
                    *y = *y * a;
                }
            });
            Ok((y, Cache::Mask(mask.clone())))
        }
        (Layer::ReflectPad(p), Cache::Shape(h, w)) => {
            Ok((reflect_pad(t, *p), Cache::Shape(*h, *w)))
        }
        (Layer::BlurDown, Cache::Shape(h, w)) => Ok((blur_down(t), Cache::Shape(*h, *w))),
        (Layer::Residual { body, rescale }, Cache::Residual(caches)) => {
            let (fy, lin) = body.forward_linearized(t, caches)?;
            let mut y = fy + t;
            if *rescale {
                y.mapv_inplace(|v| v * F::from_f64c(std::f64::consts::FRAC_1_SQRT_2));
            }
            Ok((y, Cache::Residual(lin)))
        }
        (layer, _) => Err(Error::invalid_state(format!(
            "layer {} does not support the linearized pass",
            layer_name(layer)
        ))),
    }
}

fn layer_shape<F: Scalar>(layer: &Layer<F>, (h, w): (usize, usize)) -> (usize, usize) {
    match layer {
        Layer::Conv(c) => c.out_size(h, w),
        Layer::ReflectPad(p) => (h + 2 * p, w + 2 * p),
        Layer::BlurDown => (h.div_ceil(2), w.div_ceil(2)),
        Layer::Upsample2x => (h * 2, w * 2),
        _ => (h, w),
    }
}

/// (effective kernel, stride) for receptive-field accounting. Residual bodies
/// must preserve shape, so their kernel extent is folded into one term.
fn layer_kernel_stride<F: Scalar>(layer: &Layer<F>) -> (usize, usize) {
    match layer {
        Layer::Conv(c) => (c.kernel, c.stride),
        Layer::BlurDown => (3, 2),
        Layer::Residual { body, .. } => {
            let (rf, _) = body.receptive_field_at(body.layers.len().saturating_sub(1));
            (rf, 1)
        }
        _ => (1, 1),
    }
}

fn layer_name<F: Scalar>(layer: &Layer<F>) -> &'static str {
    match layer {
        Layer::Conv(_) => "conv",
        Layer::Norm(_) => "instance_norm",
        Layer::Relu => "relu",
        Layer::LeakyRelu(_) => "leaky_relu",
        Layer::Tanh => "tanh",
        Layer::ReflectPad(_) => "reflect_pad",
        Layer::BlurDown => "blur_down",
        Layer::Upsample2x => "upsample2x",
        Layer::Residual { .. } => "residual",
    }
}

pub fn reflect_pad<F: Scalar>(x: &Array4<F>, p: usize) -> Array4<F> {
    if p == 0 {
        return x.clone();
    }
    let (n, c, h, w) = x.dim();
    assert!(h > p && w > p, "reflect pad larger than input");
    let mut y = Array4::<F>::zeros((n, c, h + 2 * p, w + 2 * p));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h + 2 * p {
                let si = reflect_index(i as isize - p as isize, h);
                for j in 0..w + 2 * p {
                    let sj = reflect_index(j as isize - p as isize, w);
                    y[(ni, ci, i, j)] = x[(ni, ci, si, sj)];
                }
            }
        }
    }
    y
}

fn reflect_pad_backward<F: Scalar>(gy: &Array4<F>, p: usize, h: usize, w: usize) -> Array4<F> {
    if p == 0 {
        return gy.clone();
    }
    let (n, c, _, _) = gy.dim();
    let mut gx = Array4::<F>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h + 2 * p {
                let si = reflect_index(i as isize - p as isize, h);
                for j in 0..w + 2 * p {
                    let sj = reflect_index(j as isize - p as isize, w);
                    gx[(ni, ci, si, sj)] += gy[(ni, ci, i, j)];
                }
            }
        }
    }
    gx
}

fn reflect_index(i: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= len {
        i = 2 * (len - 1) - i;
    }
    debug_assert!(i >= 0 && i < len);
    i as usize
}

const BLUR: [f64; 3] = [0.25, 0.5, 0.25];

/// Separable [1 2 1]/4 blur with reflect padding, subsampled by 2.
pub fn blur_down<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut y = Array4::<F>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = 0.0;
                    for (di, wi) in BLUR.iter().enumerate() {
                        let si = reflect_index(2 * oi as isize + di as isize - 1, h);
                        for (dj, wj) in BLUR.iter().enumerate() {
                            let sj = reflect_index(2 * oj as isize + dj as isize - 1, w);
                            acc += wi * wj * x[(ni, ci, si, sj)].to_f64c();
                        }
                    }
                    y[(ni, ci, oi, oj)] = F::from_f64c(acc);
                }
            }
        }
    }
    y
}

fn blur_down_backward<F: Scalar>(gy: &Array4<F>, h: usize, w: usize) -> Array4<F> {
    let (n, c, oh, ow) = gy.dim();
    let mut gx = Array4::<F>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let g = gy[(ni, ci, oi, oj)].to_f64c();
                    for (di, wi) in BLUR.iter().enumerate() {
                        let si = reflect_index(2 * oi as isize + di as isize - 1, h);
                        for (dj, wj) in BLUR.iter().enumerate() {
                            let sj = reflect_index(2 * oj as isize + dj as isize - 1, w);
                            let cur = gx[(ni, ci, si, sj)].to_f64c();
                            gx[(ni, ci, si, sj)] = F::from_f64c(cur + g * wi * wj);
                        }
                    }
                }
            }
        }
    }
    gx
}

pub fn upsample2x<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<F>::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    y[(ni, ci, i, j)] = x[(ni, ci, i / 2, j / 2)];
                }
            }
        }
    }
    y
}

fn upsample2x_backward<F: Scalar>(gy: &Array4<F>) -> Array4<F> {
    let (n, c, h2, w2) = gy.dim();
    let mut gx = Array4::<F>::zeros((n, c, h2 / 2, w2 / 2));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h2 {
                for j in 0..w2 {
                    let cur = gx[(ni, ci, i / 2, j / 2)];
                    gx[(ni, ci, i / 2, j / 2)] = cur + gy[(ni, ci, i, j)];
                }
            }
        }
    }
    gx
}
