//! Generator (encoder + decoder with tap points), projection heads, and the
//! PatchGAN / tile discriminators.
//!
//! The full-dataset generator is the 9-block residual translation network:
//! a 7x7 stem, two antialiased downsampling stages (stride-1 conv followed
//! by a blurred stride-2 subsample), nine residual blocks, two upsampling
//! stages and a bounded output layer. The encoder is the prefix up to the
//! deepest tap (residual block 5); the decoder is everything after it.
//! Default taps sit at the RGB pixels, both downsampling convolutions and
//! residual blocks 1 and 5, giving receptive fields of 1, 9, 15, 35 and 99
//! pixels.

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    conv, linear, Cache, GradMode, HasParams, Layer, Linear, Param, Sequential,
};
use crate::nce::{LayerPatches, PatchEmbeddingSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorVariant {
    /// Two downsampling stages, nine residual blocks, two upsampling stages.
    Resnet9,
    /// One downsampling block, six residual blocks, one upsampling block.
    SingleImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub variant: GeneratorVariant,
    pub input_channels: usize,
    pub output_channels: usize,
    pub base_width: usize,
    /// Ordered tap identifiers; resolved against the encoder layout.
    pub tap_layers: Vec<String>,
}

impl GeneratorSpec {
    pub fn resnet9(base_width: usize) -> Self {
        GeneratorSpec {
            variant: GeneratorVariant::Resnet9,
            input_channels: 3,
            output_channels: 3,
            base_width,
            tap_layers: default_taps(GeneratorVariant::Resnet9),
        }
    }

    pub fn single_image(base_width: usize) -> Self {
        GeneratorSpec {
            variant: GeneratorVariant::SingleImage,
            input_channels: 3,
            output_channels: 3,
            base_width,
            tap_layers: default_taps(GeneratorVariant::SingleImage),
        }
    }

    /// Spatial sizes must be divisible by this for an exact round trip.
    pub fn size_divisor(&self) -> usize {
        match self.variant {
            GeneratorVariant::Resnet9 => 4,
            GeneratorVariant::SingleImage => 2,
        }
    }
}

pub fn default_taps(variant: GeneratorVariant) -> Vec<String> {
    match variant {
        GeneratorVariant::Resnet9 => vec![
            "rgb".into(),
            "down_conv_1".into(),
            "down_conv_2".into(),
            "res_block_1".into(),
            "res_block_5".into(),
        ],
        GeneratorVariant::SingleImage => vec![
            "rgb".into(),
            "stem_conv".into(),
            "down_conv_1".into(),
            "res_block_1".into(),
            "res_block_3".into(),
        ],
    }
}

/// A resolved tap: the raw input image or the output of an encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tap {
    Input,
    Layer(usize),
}

/// Feature maps collected at the tap layers, ordered like `tap_layers`.
#[derive(Debug, Clone)]
pub struct FeatureStack<F: Scalar> {
    pub maps: Vec<Array4<F>>,
}

pub struct EncodeResult<F: Scalar> {
    pub features: FeatureStack<F>,
    /// Encoder output fed to the decoder.
    pub deepest: Array4<F>,
    pub caches: Vec<Cache<F>>,
}

#[derive(Debug, Clone)]
pub struct Generator<F: Scalar> {
    pub spec: GeneratorSpec,
    pub enc: Sequential<F>,
    pub dec: Sequential<F>,
    pub taps: Vec<Tap>,
}

fn resnet_block<F: Scalar, R: Rng>(rng: &mut R, name: &str, ch: usize) -> Layer<F> {
    let body = Sequential::new(vec![
        Layer::ReflectPad(1),
        Layer::Conv(conv(rng, &format!("{name}.c1"), ch, ch, 3, 1, 0)),
        Layer::Norm(Default::default()),
        Layer::Relu,
        Layer::ReflectPad(1),
        Layer::Conv(conv(rng, &format!("{name}.c2"), ch, ch, 3, 1, 0)),
        Layer::Norm(Default::default()),
    ]);
    Layer::Residual { body: Box::new(body), rescale: false }
}

fn lrelu_block<F: Scalar, R: Rng>(rng: &mut R, name: &str, ch: usize) -> Layer<F> {
    let body = Sequential::new(vec![
        Layer::ReflectPad(1),
        Layer::Conv(conv(rng, &format!("{name}.c1"), ch, ch, 3, 1, 0)),
        Layer::LeakyRelu(0.2),
        Layer::ReflectPad(1),
        Layer::Conv(conv(rng, &format!("{name}.c2"), ch, ch, 3, 1, 0)),
    ]);
    Layer::Residual { body: Box::new(body), rescale: true }
}

impl<F: Scalar> Generator<F> {
    pub fn new<R: Rng>(spec: GeneratorSpec, rng: &mut R) -> Result<Self> {
        let w = spec.base_width;
        let (enc, dec, tap_map) = match spec.variant {
            GeneratorVariant::Resnet9 => {
                let enc = Sequential::new(vec![
                    Layer::ReflectPad(3),
                    Layer::Conv(conv(rng, "enc.stem", spec.input_channels, w, 7, 1, 0)),
                    Layer::Norm(Default::default()),
                    Layer::Relu,
                    Layer::Conv(conv(rng, "enc.down1", w, 2 * w, 3, 1, 1)),
                    Layer::Norm(Default::default()),
                    Layer::Relu,
                    Layer::BlurDown,
                    Layer::Conv(conv(rng, "enc.down2", 2 * w, 4 * w, 3, 1, 1)),
                    Layer::Norm(Default::default()),
                    Layer::Relu,
                    Layer::BlurDown,
                    resnet_block(rng, "enc.res1", 4 * w),
                    resnet_block(rng, "enc.res2", 4 * w),
                    resnet_block(rng, "enc.res3", 4 * w),
                    resnet_block(rng, "enc.res4", 4 * w),
                    resnet_block(rng, "enc.res5", 4 * w),
                ]);
                let dec = Sequential::new(vec![
                    resnet_block(rng, "dec.res6", 4 * w),
                    resnet_block(rng, "dec.res7", 4 * w),
                    resnet_block(rng, "dec.res8", 4 * w),
                    resnet_block(rng, "dec.res9", 4 * w),
                    Layer::Upsample2x,
                    Layer::Conv(conv(rng, "dec.up1", 4 * w, 2 * w, 3, 1, 1)),
                    Layer::Norm(Default::default()),
                    Layer::Relu,
                    Layer::Upsample2x,
                    Layer::Conv(conv(rng, "dec.up2", 2 * w, w, 3, 1, 1)),
                    Layer::Norm(Default::default()),
                    Layer::Relu,
                    Layer::ReflectPad(3),
                    Layer::Conv(conv(rng, "dec.out", w, spec.output_channels, 7, 1, 0)),
                    Layer::Tanh,
                ]);
                let tap_map: Vec<(&str, Tap)> = vec![
                    ("rgb", Tap::Input),
                    ("stem_conv", Tap::Layer(1)),
                    ("down_conv_1", Tap::Layer(4)),
                    ("down_conv_2", Tap::Layer(8)),
                    ("res_block_1", Tap::Layer(12)),
                    ("res_block_2", Tap::Layer(13)),
                    ("res_block_3", Tap::Layer(14)),
                    ("res_block_4", Tap::Layer(15)),
                    ("res_block_5", Tap::Layer(16)),
                ];
                (enc, dec, tap_map)
            }
            GeneratorVariant::SingleImage => {
                let enc = Sequential::new(vec![
                    Layer::Conv(conv(rng, "enc.stem", spec.input_channels, w, 3, 1, 1)),
                    Layer::LeakyRelu(0.2),
                    Layer::Conv(conv(rng, "enc.down1", w, 2 * w, 3, 1, 1)),
                    Layer::LeakyRelu(0.2),
                    Layer::BlurDown,
                    lrelu_block(rng, "enc.res1", 2 * w),
                    lrelu_block(rng, "enc.res2", 2 * w),
                    lrelu_block(rng, "enc.res3", 2 * w),
                ]);
                let dec = Sequential::new(vec![
                    lrelu_block(rng, "dec.res4", 2 * w),
                    lrelu_block(rng, "dec.res5", 2 * w),
                    lrelu_block(rng, "dec.res6", 2 * w),
                    Layer::Upsample2x,
                    Layer::Conv(conv(rng, "dec.up1", 2 * w, w, 3, 1, 1)),
                    Layer::LeakyRelu(0.2),
                    Layer::Conv(conv(rng, "dec.out", w, spec.output_channels, 3, 1, 1)),
                    Layer::Tanh,
                ]);
                let tap_map: Vec<(&str, Tap)> = vec![
                    ("rgb", Tap::Input),
                    ("stem_conv", Tap::Layer(0)),
                    ("down_conv_1", Tap::Layer(2)),
                    ("res_block_1", Tap::Layer(5)),
                    ("res_block_2", Tap::Layer(6)),
                    ("res_block_3", Tap::Layer(7)),
                ];
                (enc, dec, tap_map)
            }
        };
        let mut taps = Vec::with_capacity(spec.tap_layers.len());
        for name in &spec.tap_layers {
            let tap = tap_map
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| *t)
                .ok_or_else(|| {
                    Error::invalid_argument(format!("unknown tap layer `{name}`"))
                })?;
            taps.push(tap);
        }
        Ok(Generator { spec, enc, dec, taps })
    }

    fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let d = self.spec.size_divisor();
        if h % d != 0 || w % d != 0 || h == 0 || w == 0 {
            return Err(Error::invalid_argument(format!(
                "input {h}x{w} not divisible by {d}"
            )));
        }
        // The 7x7 stem reflects 3 pixels; require enough extent.
        if h < 8 || w < 8 {
            return Err(Error::invalid_argument(format!("input {h}x{w} too small")));
        }
        Ok(())
    }

    fn layer_taps(&self) -> Vec<usize> {
        self.taps
            .iter()
            .filter_map(|t| match t {
                Tap::Layer(i) => Some(*i),
                Tap::Input => None,
            })
            .collect()
    }

    /// Run the encoder, collecting the tap feature maps.
    pub fn encode(&self, x: &Array4<F>) -> Result<EncodeResult<F>> {
        let (_, _, h, w) = x.dim();
        self.check_size(h, w)?;
        let layer_taps = self.layer_taps();
        let (deepest, caches, tapped) = self.enc.forward_taps(x, &layer_taps);
        let mut maps = Vec::with_capacity(self.taps.len());
        let mut it = tapped.into_iter();
        // forward_taps returns tapped outputs in layer order; reassemble in
        // declared tap order (layer taps are declared in increasing depth).
        for tap in &self.taps {
            match tap {
                Tap::Input => maps.push(x.clone()),
                Tap::Layer(_) => maps.push(it.next().expect("tap output")),
            }
        }
        Ok(EncodeResult { features: FeatureStack { maps }, deepest, caches })
    }

    /// Encoder backward. `d_deepest` is the gradient at the encoder output,
    /// `d_taps` pairs each declared tap with a gradient (aligned with
    /// `tap_layers`; `None` entries are skipped). Returns the input gradient
    /// including any contribution injected at the RGB tap.
    pub fn encode_backward(
        &mut self,
        d_deepest: Array4<F>,
        d_taps: &[Option<Array4<F>>],
        caches: &[Cache<F>],
        mode: GradMode,
    ) -> Array4<F> {
        let mut tap_grads = Vec::new();
        let mut input_grad: Option<Array4<F>> = None;
        for (tap, grad) in self.taps.iter().zip(d_taps) {
            if let Some(g) = grad {
                match tap {
                    Tap::Layer(i) => tap_grads.push((*i, g.clone())),
                    Tap::Input => input_grad = Some(g.clone()),
                }
            }
        }
        let mut gx = self.enc.backward_with_taps(d_deepest, &tap_grads, caches, mode);
        if let Some(g) = input_grad {
            gx = gx + &g;
        }
        gx
    }

    /// Run the decoder on the deepest encoder feature.
    pub fn decode_raw(&self, deepest: &Array4<F>) -> (Array4<F>, Vec<Cache<F>>) {
        self.dec.forward(deepest)
    }

    /// Decode from a feature stack; the deepest tap must be the encoder
    /// output (the default tap configuration guarantees this).
    pub fn decode(&self, features: &FeatureStack<F>) -> Result<Array4<F>> {
        let deepest = features
            .maps
            .last()
            .ok_or_else(|| Error::invalid_state("feature stack is empty"))?;
        let expected = self.enc.channels_at(self.spec.input_channels, self.enc.layers.len() - 1);
        if deepest.dim().1 != expected {
            return Err(Error::invalid_state(format!(
                "deepest feature has {} channels, encoder output has {}",
                deepest.dim().1,
                expected
            )));
        }
        Ok(self.decode_raw(deepest).0)
    }

    pub fn decode_backward(
        &mut self,
        gy: Array4<F>,
        caches: &[Cache<F>],
        mode: GradMode,
    ) -> Array4<F> {
        self.dec.backward(gy, caches, mode)
    }

    /// Full translation pass without keeping caches.
    pub fn translate(&self, x: &Array4<F>) -> Result<Array4<F>> {
        let enc = self.encode(x)?;
        Ok(self.decode_raw(&enc.deepest).0)
    }

    /// Channel count of each tap layer (projection head input widths).
    pub fn tap_channels(&self) -> Vec<usize> {
        self.taps
            .iter()
            .map(|t| match t {
                Tap::Input => self.spec.input_channels,
                Tap::Layer(i) => self.enc.channels_at(self.spec.input_channels, *i),
            })
            .collect()
    }

    /// Spatial size of each tap for an input of the given size.
    pub fn tap_shapes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        self.taps
            .iter()
            .map(|t| match t {
                Tap::Input => (h, w),
                Tap::Layer(i) => self.enc.trace_shape_at(h, w, *i),
            })
            .collect()
    }

    /// Receptive field (in input pixels) of each tap.
    pub fn tap_receptive_fields(&self) -> Vec<usize> {
        self.taps
            .iter()
            .map(|t| match t {
                Tap::Input => 1,
                Tap::Layer(i) => self.enc.receptive_field_at(*i).0,
            })
            .collect()
    }

    /// Cumulative stride of each tap.
    pub fn tap_strides(&self) -> Vec<usize> {
        self.taps
            .iter()
            .map(|t| match t {
                Tap::Input => 1,
                Tap::Layer(i) => self.enc.receptive_field_at(*i).1,
            })
            .collect()
    }
}

impl<F: Scalar> HasParams<F> for Generator<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        self.enc.visit_params(f);
        self.dec.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.enc.visit_params_mut(f);
        self.dec.visit_params_mut(f);
    }
}

/// Two affine layers with a rectifier between, then row L2 normalization.
#[derive(Debug, Clone)]
pub struct ProjectionHead<F: Scalar> {
    pub l1: Linear<F>,
    pub l2: Linear<F>,
}

pub struct HeadCache<F: Scalar> {
    x: Array2<F>,
    h1: Array2<F>,
    mask: Array2<bool>,
    y_norm: Array2<F>,
    norms: Vec<F>,
}

impl<F: Scalar> ProjectionHead<F> {
    pub fn new<R: Rng>(rng: &mut R, name: &str, in_dim: usize, hidden: usize, out: usize) -> Self {
        ProjectionHead {
            l1: linear(rng, &format!("{name}.l1"), in_dim, hidden),
            l2: linear(rng, &format!("{name}.l2"), hidden, out),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, HeadCache<F>) {
        let pre1 = self.l1.forward(x);
        let mask = pre1.mapv(|v| v > F::zero());
        let h1 = pre1.mapv(|v| if v > F::zero() { v } else { F::zero() });
        let y = self.l2.forward(&h1);
        let mut y_norm = y.clone();
        let mut norms = Vec::with_capacity(y.nrows());
        for mut row in y_norm.rows_mut() {
            let n = row.dot(&row).sqrt();
            let n = if n > F::from_f64c(1e-12) { n } else { F::one() };
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        (
            y_norm.clone(),
            HeadCache { x: x.clone(), h1, mask, y_norm, norms },
        )
    }

    pub fn backward(&mut self, gy: &Array2<F>, cache: &HeadCache<F>, mode: GradMode) -> Array2<F> {
        // Through the row normalization: g = (gy - y (y . gy)) / norm.
        let mut g = gy.clone();
        for (i, mut row) in g.rows_mut().into_iter().enumerate() {
            let y = cache.y_norm.row(i);
            let dot = y.dot(&gy.row(i));
            let n = cache.norms[i];
            row.zip_mut_with(&y, |gv, &yv| *gv = (*gv - yv * dot) / n);
        }
        let gh1 = self.l2.backward(&cache.h1, &g, mode);
        let mut gpre1 = gh1;
        ndarray::Zip::from(&mut gpre1).and(&cache.mask).for_each(|g, &m| {
            if !m {
                *g = F::zero();
            }
        });
        self.l1.backward(&cache.x, &gpre1, mode)
    }
}

impl<F: Scalar> HasParams<F> for ProjectionHead<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        f(&self.l1.w);
        f(&self.l1.b);
        f(&self.l2.w);
        f(&self.l2.b);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.l1.w);
        f(&mut self.l1.b);
        f(&mut self.l2.w);
        f(&mut self.l2.b);
    }
}

/// One head per tap layer; the same set embeds the input-image and
/// output-image paths (weight sharing, unless ablated at a higher level).
#[derive(Debug, Clone)]
pub struct HeadSet<F: Scalar> {
    pub heads: Vec<ProjectionHead<F>>,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl<F: Scalar> HeadSet<F> {
    pub fn new<R: Rng>(
        rng: &mut R,
        tap_channels: &[usize],
        hidden_dim: usize,
        embed_dim: usize,
    ) -> Self {
        let heads = tap_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| ProjectionHead::new(rng, &format!("head{i}"), c, hidden_dim, embed_dim))
            .collect();
        HeadSet { heads, embed_dim, hidden_dim }
    }
}

impl<F: Scalar> HasParams<F> for HeadSet<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        for h in &self.heads {
            h.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        for h in &mut self.heads {
            h.visit_params_mut(f);
        }
    }
}

/// Pull the feature vectors at `indices` from sample `n` of a feature map.
pub fn gather_locations<F: Scalar>(
    features: &Array4<F>,
    n: usize,
    indices: &[(usize, usize)],
) -> Result<Array2<F>> {
    let (_, c, h, w) = features.dim();
    let mut out = Array2::<F>::zeros((indices.len(), c));
    for (s, &(r, col)) in indices.iter().enumerate() {
        if r >= h || col >= w {
            return Err(Error::invalid_argument(format!(
                "index ({r},{col}) outside {h}x{w}"
            )));
        }
        for ci in 0..c {
            out[(s, ci)] = features[(n, ci, r, col)];
        }
    }
    Ok(out)
}

/// Scatter per-location gradients back onto a zero feature-map gradient.
pub fn scatter_locations<F: Scalar>(
    grad_rows: &Array2<F>,
    shape: (usize, usize, usize, usize),
    n: usize,
    indices: &[(usize, usize)],
) -> Array4<F> {
    let mut out = Array4::<F>::zeros(shape);
    for (s, &(r, col)) in indices.iter().enumerate() {
        for ci in 0..shape.1 {
            out[(n, ci, r, col)] += grad_rows[(s, ci)];
        }
    }
    out
}

pub struct ProjectCache<F: Scalar> {
    pub head_caches: Vec<HeadCache<F>>,
    pub indices: Vec<Vec<(usize, usize)>>,
    pub shapes: Vec<(usize, usize, usize, usize)>,
    pub sample: usize,
}

/// Embed the features of sample `n` at the given per-layer locations:
/// gather, apply each layer's head, L2-normalize rows.
pub fn project<F: Scalar>(
    features: &FeatureStack<F>,
    heads: &HeadSet<F>,
    indices: &[Vec<(usize, usize)>],
    sample: usize,
) -> Result<(PatchEmbeddingSet<F>, ProjectCache<F>)> {
    if features.maps.len() != heads.heads.len() || features.maps.len() != indices.len() {
        return Err(Error::invalid_argument(format!(
            "layer count mismatch: {} features, {} heads, {} index lists",
            features.maps.len(),
            heads.heads.len(),
            indices.len()
        )));
    }
    let mut layers = Vec::with_capacity(features.maps.len());
    let mut head_caches = Vec::with_capacity(features.maps.len());
    let mut shapes = Vec::with_capacity(features.maps.len());
    for (li, (map, idx)) in features.maps.iter().zip(indices).enumerate() {
        let rows = gather_locations(map, sample, idx)?;
        let (emb, cache) = heads.heads[li].forward(&rows);
        let (_, _, h, w) = map.dim();
        layers.push(LayerPatches {
            layer_id: li,
            embeddings: emb,
            indices: idx.clone(),
            spatial: (h, w),
        });
        head_caches.push(cache);
        shapes.push(map.dim());
    }
    let set = PatchEmbeddingSet { layers };
    set.validate()?;
    Ok((set, ProjectCache { head_caches, indices: indices.to_vec(), shapes, sample }))
}

/// Backward of `project`: per-layer gradients on the embeddings flow through
/// the heads and scatter onto feature-map gradients (aligned with the tap
/// list; every tap gets `Some`).
pub fn project_backward<F: Scalar>(
    heads: &mut HeadSet<F>,
    d_embeddings: &[Array2<F>],
    cache: &ProjectCache<F>,
    mode: GradMode,
) -> Vec<Option<Array4<F>>> {
    let mut out = Vec::with_capacity(d_embeddings.len());
    for (li, gy) in d_embeddings.iter().enumerate() {
        let grows = heads.heads[li].backward(gy, &cache.head_caches[li], mode);
        out.push(Some(scatter_locations(
            &grows,
            cache.shapes[li],
            cache.sample,
            &cache.indices[li],
        )));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorVariant {
    /// 70x70-receptive-field convolutional classifier over full images.
    PatchGan,
    /// Norm-free classifier over 64x64 tiles (single-image mode); kept
    /// piecewise-linear so the gradient penalty has exact parameter
    /// gradients via the linearized pass.
    Tile64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub variant: DiscriminatorVariant,
    pub input_channels: usize,
    pub base_width: usize,
}

pub const TILE_SIZE: usize = 64;

#[derive(Debug, Clone)]
pub struct Discriminator<F: Scalar> {
    pub spec: DiscriminatorSpec,
    pub net: Sequential<F>,
}

impl<F: Scalar> Discriminator<F> {
    pub fn new<R: Rng>(spec: DiscriminatorSpec, rng: &mut R) -> Self {
        let w = spec.base_width;
        let c = spec.input_channels;
        let net = match spec.variant {
            DiscriminatorVariant::PatchGan => Sequential::new(vec![
                Layer::Conv(conv(rng, "disc.c1", c, w, 4, 2, 1)),
                Layer::LeakyRelu(0.2),
                Layer::Conv(conv(rng, "disc.c2", w, 2 * w, 4, 2, 1)),
                Layer::Norm(Default::default()),
                Layer::LeakyRelu(0.2),
                Layer::Conv(conv(rng, "disc.c3", 2 * w, 4 * w, 4, 2, 1)),
                Layer::Norm(Default::default()),
                Layer::LeakyRelu(0.2),
                Layer::Conv(conv(rng, "disc.c4", 4 * w, 8 * w, 4, 1, 1)),
                Layer::Norm(Default::default()),
                Layer::LeakyRelu(0.2),
                Layer::Conv(conv(rng, "disc.out", 8 * w, 1, 4, 1, 1)),
            ]),
            DiscriminatorVariant::Tile64 => Sequential::new(vec![
                Layer::Conv(conv(rng, "disc.c1", c, w, 3, 1, 1)),
                Layer::LeakyRelu(0.2),
                Layer::Conv(conv(rng, "disc.c2", w, 2 * w, 4, 2, 1)),
                Layer::LeakyRelu(0.2),
                Layer::Conv(conv(rng, "disc.c3", 2 * w, 4 * w, 4, 2, 1)),
                Layer::LeakyRelu(0.2),
                Layer::Conv(conv(rng, "disc.c4", 4 * w, 4 * w, 4, 2, 1)),
                Layer::LeakyRelu(0.2),
                Layer::Conv(conv(rng, "disc.c5", 4 * w, 4 * w, 4, 2, 1)),
                Layer::LeakyRelu(0.2),
                Layer::Conv(conv(rng, "disc.out", 4 * w, 1, 4, 1, 0)),
            ]),
        };
        Discriminator { spec, net }
    }

    /// Spatial map of unbounded real scores; losses apply their own links.
    pub fn discriminate(&self, x: &Array4<F>) -> Result<(Array4<F>, Vec<Cache<F>>)> {
        let (_, c, h, w) = x.dim();
        if c != self.spec.input_channels {
            return Err(Error::invalid_argument(format!(
                "discriminator expects {} channels, got {c}",
                self.spec.input_channels
            )));
        }
        if self.spec.variant == DiscriminatorVariant::Tile64 && (h != TILE_SIZE || w != TILE_SIZE)
        {
            return Err(Error::invalid_argument(format!(
                "tile64 discriminator expects {TILE_SIZE}x{TILE_SIZE} tiles, got {h}x{w}"
            )));
        }
        if self.net.try_trace_shape(h, w).is_none() {
            return Err(Error::invalid_argument(format!(
                "discriminator input {h}x{w} too small for its conv stack"
            )));
        }
        let (y, caches) = self.net.forward(x);
        Ok((y, caches))
    }

    pub fn backward(&mut self, gy: Array4<F>, caches: &[Cache<F>], mode: GradMode) -> Array4<F> {
        self.net.backward(gy, caches, mode)
    }
}

impl<F: Scalar> HasParams<F> for Discriminator<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        self.net.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.net.visit_params_mut(f);
    }
}

/// Split (N, C, H, W) crops into (N * (H/t)*(W/t), C, t, t) tiles.
pub fn split_tiles<F: Scalar>(crops: &Array4<F>, tile: usize) -> Result<Array4<F>> {
    let (n, c, h, w) = crops.dim();
    if h % tile != 0 || w % tile != 0 {
        return Err(Error::invalid_argument(format!(
            "crop {h}x{w} not divisible into {tile}x{tile} tiles"
        )));
    }
    let th = h / tile;
    let tw = w / tile;
    let mut out = Array4::<F>::zeros((n * th * tw, c, tile, tile));
    for ni in 0..n {
        for ti in 0..th {
            for tj in 0..tw {
                let idx = (ni * th + ti) * tw + tj;
                out.index_axis_mut(Axis(0), idx).assign(&crops.slice(ndarray::s![
                    ni,
                    ..,
                    ti * tile..(ti + 1) * tile,
                    tj * tile..(tj + 1) * tile
                ]));
            }
        }
    }
    Ok(out)
}

/// Reverse of `split_tiles` for gradients: sum tile gradients back into crops.
pub fn merge_tile_grads<F: Scalar>(
    tile_grads: &Array4<F>,
    crops_dim: (usize, usize, usize, usize),
    tile: usize,
) -> Array4<F> {
    let (n, _, h, w) = crops_dim;
    let th = h / tile;
    let tw = w / tile;
    let mut out = Array4::<F>::zeros(crops_dim);
    for ni in 0..n {
        for ti in 0..th {
            for tj in 0..tw {
                let idx = (ni * th + ti) * tw + tj;
                let mut dst = out.slice_mut(ndarray::s![
                    ni,
                    ..,
                    ti * tile..(ti + 1) * tile,
                    tj * tile..(tj + 1) * tile
                ]);
                dst += &tile_grads.index_axis(Axis(0), idx);
            }
        }
    }
    out
}
