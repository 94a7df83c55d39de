//! 2D convolution with explicit im2col forward/backward.

use ndarray::{Array1, Array2, Array4, ArrayView3, ArrayViewMut3, Ix1, Ix4};

use super::param::{GradMode, Param};
use crate::scalar::Scalar;

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Convolution over NCHW tensors with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar> {
    pub w: Param<F>,
    pub b: Param<F>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        weights: Array4<F>,
    ) -> Self {
        debug_assert_eq!(weights.dim(), (out_ch, in_ch, kernel, kernel));
        Conv2d {
            w: Param::new(format!("{name}.w"), weights.into_dyn()),
            b: Param::new(format!("{name}.b"), Array1::<F>::zeros(out_ch).into_dyn()),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_size(h, self.kernel, self.stride, self.pad),
            conv_out_size(w, self.kernel, self.stride, self.pad),
        )
    }

    fn w_mat(&self) -> Array2<F> {
        let k = self.kernel;
        self.w
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .into_shape_with_order((self.out_ch, self.in_ch * k * k))
            .unwrap()
            .to_owned()
    }

    /// Returns the output; the caller keeps the input as the backward cache.
    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        self.forward_impl(x, true)
    }

    /// Bias-free forward used by the linearized (directional-derivative) pass.
    pub fn forward_linear(&self, x: &Array4<F>) -> Array4<F> {
        self.forward_impl(x, false)
    }

    fn forward_impl(&self, x: &Array4<F>, with_bias: bool) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel;
        let mut y = Array4::<F>::zeros((n, self.out_ch, oh, ow));
        let w_mat = self.w_mat();
        let b = self.b.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut col = Array2::<F>::zeros((c * k * k, oh * ow));
        for ni in 0..n {
            im2col(x.index_axis(ndarray::Axis(0), ni), k, self.stride, self.pad, &mut col);
            let out = w_mat.dot(&col); // (out_ch, oh*ow)
            let mut yn = y.index_axis_mut(ndarray::Axis(0), ni);
            let ys = yn.as_slice_mut().unwrap();
            let os = out.as_slice().unwrap();
            ys.copy_from_slice(os);
            if with_bias {
                for oc in 0..self.out_ch {
                    let bv = b[oc];
                    for v in &mut ys[oc * oh * ow..(oc + 1) * oh * ow] {
                        *v += bv;
                    }
                }
            }
        }
        y
    }

    /// Backward pass. `x` is the forward input, `gy` the upstream gradient.
    /// `with_bias = false` is used by the linearized pass, whose forward had
    /// no bias term.
    pub fn backward(
        &mut self,
        x: &Array4<F>,
        gy: &Array4<F>,
        mode: GradMode,
        with_bias: bool,
    ) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let (nb, oc, oh, ow) = gy.dim();
        assert_eq!(n, nb);
        assert_eq!(oc, self.out_ch);
        let k = self.kernel;
        let w_mat = self.w_mat();
        let mut gx = Array4::<F>::zeros((n, c, h, w));
        let mut col = Array2::<F>::zeros((c * k * k, oh * ow));
        let mut gw_acc = Array2::<F>::zeros((self.out_ch, c * k * k));
        let mut gb_acc = Array1::<F>::zeros(self.out_ch);
        for ni in 0..n {
            let gyn = gy.index_axis(ndarray::Axis(0), ni);
            let g_mat = gyn.into_shape_with_order((oc, oh * ow)).unwrap();
            if mode == GradMode::Accumulate {
                im2col(x.index_axis(ndarray::Axis(0), ni), k, self.stride, self.pad, &mut col);
                gw_acc = gw_acc + g_mat.dot(&col.t());
                if with_bias {
                    for o in 0..oc {
                        gb_acc[o] += g_mat.row(o).sum();
                    }
                }
            }
            let gcol = w_mat.t().dot(&g_mat); // (c*k*k, oh*ow)
            col2im(
                &gcol,
                k,
                self.stride,
                self.pad,
                gx.index_axis_mut(ndarray::Axis(0), ni),
            );
        }
        if mode == GradMode::Accumulate {
            let gw_flat = self.w.grad.as_slice_mut().unwrap();
            for (g, a) in gw_flat.iter_mut().zip(gw_acc.as_slice().unwrap()) {
                *g += *a;
            }
            if with_bias {
                for (g, a) in self.b.grad.iter_mut().zip(gb_acc.iter()) {
                    *g += *a;
                }
            }
        }
        gx
    }
}

/// Lay out patches as (C*K*K, OH*OW) so the conv is a single GEMM per sample.
fn im2col<F: Scalar>(x: ArrayView3<F>, k: usize, stride: usize, pad: usize, col: &mut Array2<F>) {
    let (c, h, w) = x.dim();
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    debug_assert_eq!(col.dim(), (c * k * k, oh * ow));
    col.fill(F::zero());
    let xs = x.as_slice().expect("contiguous input");
    let cs = col.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst_base = row * oh * ow;
                for oi in 0..oh {
                    let ih = (oi * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src_row = (ci * h + ih as usize) * w;
                    let dst_row = dst_base + oi * ow;
                    if stride == 1 {
                        // Contiguous span; clip to valid horizontal range.
                        let jw = kj as isize - pad as isize;
                        let o_start = (-jw).max(0) as usize;
                        let o_end = ow.min((w as isize - jw).max(0) as usize);
                        if o_start < o_end {
                            let src0 = (src_row as isize + o_start as isize + jw) as usize;
                            cs[dst_row + o_start..dst_row + o_end]
                                .copy_from_slice(&xs[src0..src0 + (o_end - o_start)]);
                        }
                    } else {
                        for oj in 0..ow {
                            let iw = (oj * stride + kj) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                cs[dst_row + oj] = xs[src_row + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the column gradient back onto the (C,H,W) input gradient.
fn col2im<F: Scalar>(
    gcol: &Array2<F>,
    k: usize,
    stride: usize,
    pad: usize,
    mut gx: ArrayViewMut3<F>,
) {
    let (c, h, w) = gx.dim();
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let gs = gcol.as_slice().unwrap();
    let out = gx.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src_base = row * oh * ow;
                for oi in 0..oh {
                    let ih = (oi * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst_row = (ci * h + ih as usize) * w;
                    let src_row = src_base + oi * ow;
                    for oj in 0..ow {
                        let iw = (oj * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            out[dst_row + iw as usize] += gs[src_row + oj];
                        }
                    }
                }
            }
        }
    }
}
