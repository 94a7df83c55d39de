//! Training objectives: adversarial terms, the R1 gradient penalty, and the
//! composed generator loss (GAN + patch contrastive term on the source
//! domain + optional identity contrastive term on the target domain) with
//! configurable gradient routing.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nce::{
    external_nce_loss_with_grads, patchnce_loss_with_grads, NceReduction, PatchEmbeddingSet,
    PatchNceGrads,
};
use crate::networks::{
    project, project_backward, Discriminator, EncodeResult, Generator, HeadSet, ProjectCache,
};
use crate::nn::{Cache, GradMode, HasParams, Layer, Param};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    LeastSquares,
    NonSaturating,
}

/// Which pool each query's negatives are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    /// Other sampled locations of the same image.
    Internal,
    /// The momentum-encoded dictionary only.
    External,
    /// Both pools concatenated per query.
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Weight of the source-domain patch contrastive term.
    pub lambda_x: f64,
    /// Weight of the identity patch contrastive term on the target domain.
    pub lambda_y: f64,
    pub gan_mode: GanMode,
    /// R1 penalty coefficient (non-saturating mode).
    pub r1_gamma: f64,
    pub temperature: f64,
    /// When false, the patch contrastive gradient is cut at the generated
    /// image, so the decoder learns from the adversarial term only.
    pub decoder_grad_through_nce: bool,
    /// When false, a separate encoder + head set embeds the input images.
    pub shared_embedding_weights: bool,
    pub nce_reduction: NceReduction,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda_x: 1.0,
            lambda_y: 1.0,
            gan_mode: GanMode::LeastSquares,
            r1_gamma: 0.0,
            temperature: crate::nce::DEFAULT_TEMPERATURE,
            decoder_grad_through_nce: true,
            shared_embedding_weights: true,
            nce_reduction: NceReduction::Mean,
        }
    }
}

fn softplus<F: Scalar>(x: F) -> F {
    // max(x, 0) + ln(1 + exp(-|x|))
    let m = x.max(F::zero());
    m + (F::one() + (-x.abs()).exp()).ln()
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// (generator term, discriminator term) from score maps.
pub fn gan_losses<F: Scalar>(
    real_scores: &Array4<F>,
    fake_scores: &Array4<F>,
    mode: GanMode,
) -> (F, F) {
    let nr = F::from_f64c(real_scores.len() as f64);
    let nf = F::from_f64c(fake_scores.len() as f64);
    match mode {
        GanMode::LeastSquares => {
            let half = F::from_f64c(0.5);
            let d_real = real_scores
                .iter()
                .map(|&s| (s - F::one()) * (s - F::one()))
                .sum::<F>()
                / nr;
            let d_fake = fake_scores.iter().map(|&s| s * s).sum::<F>() / nf;
            let g = fake_scores
                .iter()
                .map(|&s| (s - F::one()) * (s - F::one()))
                .sum::<F>()
                / nf;
            (g, half * d_real + half * d_fake)
        }
        GanMode::NonSaturating => {
            let d_real = real_scores.iter().map(|&s| softplus(-s)).sum::<F>() / nr;
            let d_fake = fake_scores.iter().map(|&s| softplus(s)).sum::<F>() / nf;
            let g = fake_scores.iter().map(|&s| softplus(-s)).sum::<F>() / nf;
            (g, d_real + d_fake)
        }
    }
}

/// Gradient of the generator term with respect to the fake scores.
pub fn gan_generator_score_grad<F: Scalar>(fake_scores: &Array4<F>, mode: GanMode) -> Array4<F> {
    let n = F::from_f64c(fake_scores.len() as f64);
    match mode {
        GanMode::LeastSquares => {
            fake_scores.mapv(|s| F::from_f64c(2.0) * (s - F::one()) / n)
        }
        GanMode::NonSaturating => fake_scores.mapv(|s| -sigmoid(-s) / n),
    }
}

/// Gradients of the discriminator term with respect to (real, fake) scores.
pub fn gan_discriminator_score_grads<F: Scalar>(
    real_scores: &Array4<F>,
    fake_scores: &Array4<F>,
    mode: GanMode,
) -> (Array4<F>, Array4<F>) {
    let nr = F::from_f64c(real_scores.len() as f64);
    let nf = F::from_f64c(fake_scores.len() as f64);
    match mode {
        GanMode::LeastSquares => (
            real_scores.mapv(|s| (s - F::one()) / nr),
            fake_scores.mapv(|s| s / nf),
        ),
        GanMode::NonSaturating => (
            real_scores.mapv(|s| -sigmoid(-s) / nr),
            fake_scores.mapv(|s| sigmoid(s) / nf),
        ),
    }
}

/// Value of the R1 penalty `(gamma/2) * mean_i ||d score_i / d x_i||^2`
/// together with what the parameter-gradient pass needs.
pub struct R1Result<F: Scalar> {
    pub penalty: F,
    pub input_grads: Array4<F>,
    caches: Vec<Cache<F>>,
}

pub fn r1_penalty<F: Scalar>(
    disc: &Discriminator<F>,
    real: &Array4<F>,
    gamma: f64,
) -> Result<R1Result<F>> {
    if gamma < 0.0 {
        return Err(Error::invalid_argument("r1 gamma must be non-negative"));
    }
    let (scores, caches) = disc.discriminate(real)?;
    // Gradient of the summed score map per sample.
    let ones = Array4::<F>::ones(scores.dim());
    let mut net = disc.net.clone();
    let input_grads = net.backward(ones, &caches, GradMode::SkipParams);
    let b = real.dim().0;
    let mut acc = F::zero();
    for n in 0..b {
        let g = input_grads.index_axis(ndarray::Axis(0), n);
        acc += g.iter().map(|&v| v * v).sum::<F>();
    }
    let penalty = F::from_f64c(gamma / 2.0) * acc / F::from_f64c(b as f64);
    Ok(R1Result { penalty, input_grads, caches })
}

/// Accumulate `d penalty / d theta` into the discriminator's gradients.
///
/// Uses the identity `d/dtheta (gamma/2B) sum_i ||g_i||^2
/// = (gamma/B) d/dtheta sum_i <g_i(theta), u_i>` with `u = stop_grad(g)`;
/// the inner product is the directional derivative of the score along `u`,
/// evaluated exactly by a bias-free forward pass with activation masks
/// frozen from the primal pass. Exact for piecewise-linear discriminators
/// (the tile variant and any norm-free conv stack).
pub fn r1_accumulate_param_grads<F: Scalar>(
    disc: &mut Discriminator<F>,
    r1: &R1Result<F>,
    gamma: f64,
) -> Result<()> {
    let b = r1.input_grads.dim().0;
    let (tangent_out, lin_caches) = disc
        .net
        .forward_linearized(&r1.input_grads, &r1.caches)?;
    let upstream = Array4::<F>::from_elem(
        tangent_out.dim(),
        F::from_f64c(gamma / b as f64),
    );
    disc.net
        .backward_linearized(upstream, &lin_caches, GradMode::Accumulate);
    Ok(())
}

/// Networks owned by a training run. When `shared_embedding_weights` is off,
/// `key_path` holds the separate encoder + heads used to embed input images.
pub struct TranslationNets<F: Scalar> {
    pub gen: Generator<F>,
    pub heads: HeadSet<F>,
    pub key_path: Option<KeyPath<F>>,
    pub disc: Discriminator<F>,
}

pub struct KeyPath<F: Scalar> {
    pub gen: Generator<F>,
    pub heads: HeadSet<F>,
}

/// External-negative context resolved by the trainer (queue snapshot).
pub struct NegativeContext<F: Scalar> {
    /// Per-layer (rows, K) dictionaries; `None` disables external negatives.
    pub queues: Option<Vec<Array2<F>>>,
    pub include_internal: bool,
}

impl<F: Scalar> NegativeContext<F> {
    pub fn internal() -> Self {
        NegativeContext { queues: None, include_internal: true }
    }
}

type Idx = (usize, usize);

/// Forward state of one contrastive term (source or identity).
pub struct TermForward<F: Scalar> {
    pub enc_gen: EncodeResult<F>,
    pub dec_caches: Vec<Cache<F>>,
    /// Generated image, in the flipped frame when `flip` was set.
    pub fake: Array4<F>,
    pub enc_fake: EncodeResult<F>,
    /// Per-sample query/key embeddings (batch loops share index lists).
    pub q_sets: Vec<PatchEmbeddingSet<F>>,
    pub q_caches: Vec<ProjectCache<F>>,
    pub k_sets: Vec<PatchEmbeddingSet<F>>,
    pub k_caches: Vec<ProjectCache<F>>,
    /// Separate encoder pass for the keys (flip mode re-encodes the
    /// unflipped input; the unshared ablation uses its own encoder).
    pub enc_key: Option<EncodeResult<F>>,
    pub keys_on_main_heads: bool,
    pub flip: bool,
}

/// Mirror index columns: gathering a horizontally flipped feature map at
/// `(r, c)` equals gathering the unflipped map at `(r, w-1-c)`.
fn mirror_indices(indices: &[Vec<Idx>], widths: &[usize]) -> Vec<Vec<Idx>> {
    indices
        .iter()
        .zip(widths)
        .map(|(list, &w)| list.iter().map(|&(r, c)| (r, w - 1 - c)).collect())
        .collect()
}

fn hflip<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<F>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    y[(ni, ci, i, j)] = x[(ni, ci, i, w - 1 - j)];
                }
            }
        }
    }
    y
}

/// Run the generation + embedding passes for one contrastive term.
///
/// With `flip` set, the generator consumes the horizontally flipped image and
/// query features are read back at mirrored locations (equivalent to
/// unflipping the feature maps), while keys embed the original image via a
/// separate encoder pass.
pub fn term_forward<F: Scalar>(
    nets: &TranslationNets<F>,
    image: &Array4<F>,
    indices: &[Vec<Idx>],
    flip: bool,
) -> Result<TermForward<F>> {
    let gen_input = if flip { hflip(image) } else { image.clone() };
    let enc_gen = nets.gen.encode(&gen_input)?;
    let (fake, dec_caches) = nets.gen.decode_raw(&enc_gen.deepest);
    let enc_fake = nets.gen.encode(&fake)?;

    let (_, _, h, w) = image.dim();
    let widths: Vec<usize> = nets.gen.tap_shapes(h, w).iter().map(|&(_, w)| w).collect();
    let idx_q = if flip { mirror_indices(indices, &widths) } else { indices.to_vec() };

    let batch = image.dim().0;
    let mut q_sets = Vec::with_capacity(batch);
    let mut q_caches = Vec::with_capacity(batch);
    for n in 0..batch {
        let (set, cache) = project(&enc_fake.features, &nets.heads, &idx_q, n)?;
        // Align the location lists with the key path: the mirrored gather is
        // the unflip, so embeddings correspond to the original locations.
        let mut set = set;
        for (l, list) in set.layers.iter_mut().zip(indices) {
            l.indices = list.clone();
        }
        q_sets.push(set);
        q_caches.push(cache);
    }

    let (key_heads, key_gen) = match &nets.key_path {
        Some(kp) => (&kp.heads, &kp.gen),
        None => (&nets.heads, &nets.gen),
    };
    let needs_own_pass = flip || nets.key_path.is_some();
    let enc_key = if needs_own_pass { Some(key_gen.encode(image)?) } else { None };
    let key_features = enc_key.as_ref().map(|e| &e.features).unwrap_or(&enc_gen.features);

    let mut k_sets = Vec::with_capacity(batch);
    let mut k_caches = Vec::with_capacity(batch);
    for n in 0..batch {
        let (set, cache) = project(key_features, key_heads, indices, n)?;
        k_sets.push(set);
        k_caches.push(cache);
    }

    Ok(TermForward {
        enc_gen,
        dec_caches,
        fake,
        enc_fake,
        q_sets,
        q_caches,
        k_sets,
        k_caches,
        enc_key,
        keys_on_main_heads: nets.key_path.is_none(),
        flip,
    })
}

/// Contrastive loss of a term, averaged over the batch.
pub fn term_nce_loss<F: Scalar>(
    term: &TermForward<F>,
    cfg: &ObjectiveConfig,
    negs: &NegativeContext<F>,
    want_grads: bool,
) -> Result<(F, Option<Vec<PatchNceGrads<F>>>)> {
    let t = F::from_f64c(cfg.temperature);
    let batch = term.q_sets.len();
    let scale = F::from_f64c(1.0 / batch as f64);
    let mut total = F::zero();
    let mut grads = want_grads.then(Vec::new);
    for n in 0..batch {
        let (loss, g) = match &negs.queues {
            None => {
                let (l, g) = patchnce_loss_with_grads(
                    &term.q_sets[n],
                    &term.k_sets[n],
                    t,
                    cfg.nce_reduction,
                )?;
                (l, g)
            }
            Some(queues) => {
                let (l, g) = external_nce_loss_with_grads(
                    &term.q_sets[n],
                    &term.k_sets[n],
                    queues,
                    t,
                    cfg.nce_reduction,
                    negs.include_internal,
                )?;
                (l, g)
            }
        };
        total += loss * scale;
        if let Some(gs) = &mut grads {
            let mut g = g;
            for m in g.d_query.iter_mut().chain(g.d_key.iter_mut()) {
                m.mapv_inplace(|v| v * scale);
            }
            gs.push(g);
        }
    }
    Ok((total, grads))
}

/// Backward pass of one term. `nce_weight` scales the contrastive gradients;
/// `extra_fake_grad` injects the adversarial gradient at the generated image
/// (source term only). Honors `decoder_grad_through_nce`.
pub fn term_backward<F: Scalar>(
    nets: &mut TranslationNets<F>,
    term: &TermForward<F>,
    nce_grads: &[PatchNceGrads<F>],
    nce_weight: f64,
    extra_fake_grad: Option<Array4<F>>,
    cfg: &ObjectiveConfig,
) -> Result<()> {
    let wl = F::from_f64c(nce_weight);
    let n_taps = nets.gen.taps.len();
    let batch = term.q_sets.len();

    // Query side: head backward per sample, tap grads summed over the batch.
    let mut q_tap_grads: Vec<Option<Array4<F>>> = vec![None; n_taps];
    let mut k_tap_grads: Vec<Option<Array4<F>>> = vec![None; n_taps];
    for n in 0..batch {
        let dq: Vec<Array2<F>> = nce_grads[n]
            .d_query
            .iter()
            .map(|m| m.mapv(|v| v * wl))
            .collect();
        let got = project_backward(&mut nets.heads, &dq, &term.q_caches[n], GradMode::Accumulate);
        for (slot, g) in q_tap_grads.iter_mut().zip(got) {
            merge_grad(slot, g);
        }
        let dk: Vec<Array2<F>> = nce_grads[n]
            .d_key
            .iter()
            .map(|m| m.mapv(|v| v * wl))
            .collect();
        let key_heads: &mut HeadSet<F> = if term.keys_on_main_heads {
            &mut nets.heads
        } else {
            &mut nets.key_path.as_mut().expect("key path").heads
        };
        let got = project_backward(key_heads, &dk, &term.k_caches[n], GradMode::Accumulate);
        for (slot, g) in k_tap_grads.iter_mut().zip(got) {
            merge_grad(slot, g);
        }
    }

    // Through the re-encoding of the generated image.
    let zero_deep = Array4::<F>::zeros(term.enc_fake.deepest.dim());
    let g_fake_nce =
        nets.gen
            .encode_backward(zero_deep, &q_tap_grads, &term.enc_fake.caches, GradMode::Accumulate);

    // Gradient arriving at the generated image.
    let mut g_fake: Option<Array4<F>> = extra_fake_grad;
    if cfg.decoder_grad_through_nce {
        match &mut g_fake {
            Some(g) => *g = g.clone() + &g_fake_nce,
            None => g_fake = Some(g_fake_nce),
        }
    }

    // Decoder and the generation encoder pass.
    let gen_enc_key_grads: Vec<Option<Array4<F>>> = if term.enc_key.is_none() {
        k_tap_grads.clone()
    } else {
        vec![None; n_taps]
    };
    let needs_gen_backward =
        g_fake.is_some() || gen_enc_key_grads.iter().any(|g| g.is_some());
    if needs_gen_backward {
        let d_deepest = match g_fake {
            Some(g) => nets.gen.decode_backward(g, &term.dec_caches, GradMode::Accumulate),
            None => Array4::<F>::zeros(term.enc_gen.deepest.dim()),
        };
        let _ = nets.gen.encode_backward(
            d_deepest,
            &gen_enc_key_grads,
            &term.enc_gen.caches,
            GradMode::Accumulate,
        );
    }

    // Separate key encoder pass (flip mode or unshared weights).
    if let Some(enc_key) = &term.enc_key {
        let zero_deep = Array4::<F>::zeros(enc_key.deepest.dim());
        if term.keys_on_main_heads {
            let _ = nets.gen.encode_backward(
                zero_deep,
                &k_tap_grads,
                &enc_key.caches,
                GradMode::Accumulate,
            );
        } else {
            let kp = nets.key_path.as_mut().expect("key path");
            let _ = kp.gen.encode_backward(
                zero_deep,
                &k_tap_grads,
                &enc_key.caches,
                GradMode::Accumulate,
            );
        }
    }
    Ok(())
}

fn merge_grad<F: Scalar>(slot: &mut Option<Array4<F>>, g: Option<Array4<F>>) {
    if let Some(g) = g {
        match slot {
            Some(acc) => *acc = acc.clone() + &g,
            None => *slot = Some(g),
        }
    }
}

/// Component breakdown of the generator objective. The total is
/// `gan_g + lambda_x * nce_x + lambda_y * nce_y`.
#[derive(Debug, Clone, Copy)]
pub struct GenLossBreakdown<F: Scalar> {
    pub total: F,
    pub gan_g: F,
    pub nce_x: F,
    pub nce_y: Option<F>,
}

/// Loss-only evaluation of the full generator objective (no gradients), used
/// by gradient-check oracles and tests. `fake_scorer` supplies the
/// adversarial scores for the generated image.
pub fn total_generator_loss<F: Scalar>(
    nets: &TranslationNets<F>,
    x: &Array4<F>,
    y: Option<&Array4<F>>,
    cfg: &ObjectiveConfig,
    indices_x: &[Vec<Idx>],
    indices_y: &[Vec<Idx>],
    flip: bool,
    negs: &NegativeContext<F>,
) -> Result<GenLossBreakdown<F>> {
    let term_x = term_forward(nets, x, indices_x, flip)?;
    let (scores, _) = nets.disc.discriminate(&term_x.fake)?;
    let ones = Array4::<F>::ones(scores.dim());
    let (gan_g, _) = gan_losses(&ones, &scores, cfg.gan_mode);
    let nce_x = if cfg.lambda_x > 0.0 {
        term_nce_loss(&term_x, cfg, negs, false)?.0
    } else {
        F::zero()
    };
    let nce_y = match y {
        Some(y) if cfg.lambda_y > 0.0 => {
            let term_y = term_forward(nets, y, indices_y, flip)?;
            Some(term_nce_loss(&term_y, cfg, negs, false)?.0)
        }
        _ => None,
    };
    let total = gan_g
        + F::from_f64c(cfg.lambda_x) * nce_x
        + F::from_f64c(cfg.lambda_y) * nce_y.unwrap_or(F::zero());
    Ok(GenLossBreakdown { total, gan_g, nce_x, nce_y })
}
