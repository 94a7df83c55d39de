//! Patchwise contrastive losses.
//!
//! The content-preservation signal is an (N+1)-way classification problem:
//! a query embedding must select its positive (the embedding of the
//! corresponding patch) over a set of negatives, with dot products scaled by
//! a temperature and passed through a softmax cross-entropy. Negatives come
//! either from other locations of the same image (`patchnce_loss`) or from an
//! external dictionary of patches from other images (`external_nce_loss`).

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Similarity logits are divided by this temperature before the softmax.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Default embedding dimension produced by the projection heads.
pub const DEFAULT_EMBED_DIM: usize = 256;

/// One query / one positive / N negatives, all unit-norm K-vectors.
#[derive(Debug, Clone)]
pub struct NceBatch<F: Scalar> {
    pub query: Array1<F>,
    pub positive: Array1<F>,
    /// (N, K), one negative per row.
    pub negatives: Array2<F>,
    pub temperature: F,
}

impl<F: Scalar> NceBatch<F> {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= F::zero() {
            return Err(Error::invalid_argument("temperature must be positive"));
        }
        let k = self.query.len();
        if self.positive.len() != k || self.negatives.ncols() != k {
            return Err(Error::invalid_argument(format!(
                "embedding dimension mismatch: query {}, positive {}, negatives {}",
                k,
                self.positive.len(),
                self.negatives.ncols()
            )));
        }
        if self.negatives.nrows() == 0 {
            return Err(Error::invalid_argument("at least one negative required"));
        }
        Ok(())
    }
}

/// Gradients of `info_nce_loss` with respect to its inputs.
#[derive(Debug, Clone)]
pub struct NceGrads<F: Scalar> {
    pub query: Array1<F>,
    pub positive: Array1<F>,
    pub negatives: Array2<F>,
}

/// Rescale a vector onto the unit sphere. Zero vectors are left unchanged.
pub fn l2_normalized<F: Scalar>(v: &Array1<F>) -> Array1<F> {
    let n = v.iter().fold(F::zero(), |a, &x| a + x * x).sqrt();
    if n > F::from_f64c(1e-12) {
        v.mapv(|x| x / n)
    } else {
        v.clone()
    }
}

/// Cross-entropy of selecting the positive among the negatives, from raw
/// (pre-temperature) similarity values. Computed in log space with
/// max-subtraction so large `similarity / temperature` ratios cannot
/// overflow.
pub fn nce_from_similarities<F: Scalar>(pos: F, negatives: &[F], temperature: F) -> F {
    let t = temperature;
    let pos_logit = pos / t;
    let mut max = pos_logit;
    for &n in negatives {
        max = max.max(n / t);
    }
    let mut sum = (pos_logit - max).exp();
    for &n in negatives {
        sum += (n / t - max).exp();
    }
    max + sum.ln() - pos_logit
}

/// The (N+1)-way contrastive cross-entropy
/// `-log(exp(q·p/t) / (exp(q·p/t) + sum_n exp(q·n_n/t)))`.
pub fn info_nce_loss<F: Scalar>(batch: &NceBatch<F>) -> Result<F> {
    batch.validate()?;
    let pos = batch.query.dot(&batch.positive);
    let negs: Vec<F> = batch
        .negatives
        .rows()
        .into_iter()
        .map(|r| batch.query.dot(&r))
        .collect();
    Ok(nce_from_similarities(pos, &negs, batch.temperature))
}

/// Loss plus analytic gradients with respect to every input vector.
pub fn info_nce_loss_with_grads<F: Scalar>(batch: &NceBatch<F>) -> Result<(F, NceGrads<F>)> {
    batch.validate()?;
    let t = batch.temperature;
    let n = batch.negatives.nrows();
    let pos = batch.query.dot(&batch.positive);
    let negs: Vec<F> = batch
        .negatives
        .rows()
        .into_iter()
        .map(|r| batch.query.dot(&r))
        .collect();
    let loss = nce_from_similarities(pos, &negs, t);

    // Softmax over [positive, negatives] logits.
    let mut max = pos / t;
    for &s in &negs {
        max = max.max(s / t);
    }
    let e_pos = (pos / t - max).exp();
    let e_negs: Vec<F> = negs.iter().map(|&s| (s / t - max).exp()).collect();
    let z = e_pos + e_negs.iter().fold(F::zero(), |a, &x| a + x);
    let p_pos = e_pos / z;

    let mut g_query = batch.positive.mapv(|v| v * (p_pos - F::one()) / t);
    let g_positive = batch.query.mapv(|v| v * (p_pos - F::one()) / t);
    let mut g_negatives = Array2::<F>::zeros((n, batch.query.len()));
    for (i, &e) in e_negs.iter().enumerate() {
        let p = e / z;
        g_query = g_query + &batch.negatives.row(i).mapv(|v| v * p / t);
        g_negatives
            .row_mut(i)
            .assign(&batch.query.mapv(|v| v * p / t));
    }
    Ok((
        loss,
        NceGrads {
            query: g_query,
            positive: g_positive,
            negatives: g_negatives,
        },
    ))
}

/// How per-location terms are combined across locations and layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NceReduction {
    /// Mean over every (layer, location) pair; loss magnitude independent of
    /// the patch count and layer count. The default scaling convention.
    Mean,
    /// Plain double sum.
    Sum,
}

impl Default for NceReduction {
    fn default() -> Self {
        NceReduction::Mean
    }
}

/// Embeddings sampled at `indices` of one tapped layer. Rows are unit-norm.
#[derive(Debug, Clone)]
pub struct LayerPatches<F: Scalar> {
    pub layer_id: usize,
    /// (S, K) embedding matrix.
    pub embeddings: Array2<F>,
    /// Sampled (row, col) locations, unique within the layer.
    pub indices: Vec<(usize, usize)>,
    /// Spatial extent (height, width) of the tapped feature map.
    pub spatial: (usize, usize),
}

impl<F: Scalar> LayerPatches<F> {
    pub fn validate(&self) -> Result<()> {
        if self.embeddings.nrows() != self.indices.len() {
            return Err(Error::invalid_argument(format!(
                "layer {}: {} embedding rows but {} indices",
                self.layer_id,
                self.embeddings.nrows(),
                self.indices.len()
            )));
        }
        let (h, w) = self.spatial;
        let mut seen = std::collections::HashSet::new();
        for &(r, c) in &self.indices {
            if r >= h || c >= w {
                return Err(Error::invalid_argument(format!(
                    "layer {}: index ({r},{c}) outside {h}x{w}",
                    self.layer_id
                )));
            }
            if !seen.insert((r, c)) {
                return Err(Error::invalid_argument(format!(
                    "layer {}: duplicate index ({r},{c})",
                    self.layer_id
                )));
            }
        }
        Ok(())
    }
}

/// Per-layer patch embeddings for one image.
#[derive(Debug, Clone)]
pub struct PatchEmbeddingSet<F: Scalar> {
    pub layers: Vec<LayerPatches<F>>,
}

impl<F: Scalar> PatchEmbeddingSet<F> {
    pub fn validate(&self) -> Result<()> {
        for layer in &self.layers {
            layer.validate()?;
        }
        Ok(())
    }
}

fn check_aligned<F: Scalar>(
    query_set: &PatchEmbeddingSet<F>,
    key_set: &PatchEmbeddingSet<F>,
) -> Result<()> {
    if query_set.layers.len() != key_set.layers.len() {
        return Err(Error::invalid_argument(format!(
            "layer count mismatch: {} queries vs {} keys",
            query_set.layers.len(),
            key_set.layers.len()
        )));
    }
    for (q, k) in query_set.layers.iter().zip(&key_set.layers) {
        if q.layer_id != k.layer_id {
            return Err(Error::invalid_argument(format!(
                "layer id mismatch: {} vs {}",
                q.layer_id, k.layer_id
            )));
        }
        if q.indices != k.indices {
            return Err(Error::invalid_argument(format!(
                "layer {}: query and key location lists differ",
                q.layer_id
            )));
        }
        if q.embeddings.dim() != k.embeddings.dim() {
            return Err(Error::invalid_argument(format!(
                "layer {}: embedding shape mismatch",
                q.layer_id
            )));
        }
    }
    Ok(())
}

/// Which negatives each query is contrasted against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NegativeSource<'a, F: Scalar> {
    Internal,
    External(&'a [Array2<F>]),
    Both(&'a [Array2<F>]),
}

/// Per-layer gradients of a patch-level loss with respect to the query and
/// key embedding matrices.
#[derive(Debug, Clone)]
pub struct PatchNceGrads<F: Scalar> {
    pub d_query: Vec<Array2<F>>,
    pub d_key: Vec<Array2<F>>,
}

/// Multilayer patchwise loss with internal negatives: for each sampled
/// location, the positive is the key at the same location and the negatives
/// are the keys at the other sampled locations of the same layer.
pub fn patchnce_loss<F: Scalar>(
    query_set: &PatchEmbeddingSet<F>,
    key_set: &PatchEmbeddingSet<F>,
    temperature: F,
    reduction: NceReduction,
) -> Result<F> {
    let (loss, _) = patch_loss_impl(
        query_set,
        key_set,
        NegativeSource::<F>::Internal,
        temperature,
        reduction,
        false,
    )?;
    Ok(loss)
}

/// `patchnce_loss` plus gradients for the training path.
pub fn patchnce_loss_with_grads<F: Scalar>(
    query_set: &PatchEmbeddingSet<F>,
    key_set: &PatchEmbeddingSet<F>,
    temperature: F,
    reduction: NceReduction,
) -> Result<(F, PatchNceGrads<F>)> {
    let (loss, grads) = patch_loss_impl(
        query_set,
        key_set,
        NegativeSource::<F>::Internal,
        temperature,
        reduction,
        true,
    )?;
    Ok((loss, grads.expect("grads requested")))
}

/// Patchwise loss with negatives drawn from an external per-layer dictionary
/// (and, when `include_internal` is set, the same-image negatives as well).
/// Queue entries are treated as constants; no gradients flow into them.
pub fn external_nce_loss<F: Scalar>(
    query_set: &PatchEmbeddingSet<F>,
    key_set: &PatchEmbeddingSet<F>,
    queue_contents: &[Array2<F>],
    temperature: F,
    reduction: NceReduction,
    include_internal: bool,
) -> Result<F> {
    let source = if include_internal {
        NegativeSource::Both(queue_contents)
    } else {
        NegativeSource::External(queue_contents)
    };
    let (loss, _) = patch_loss_impl(query_set, key_set, source, temperature, reduction, false)?;
    Ok(loss)
}

pub fn external_nce_loss_with_grads<F: Scalar>(
    query_set: &PatchEmbeddingSet<F>,
    key_set: &PatchEmbeddingSet<F>,
    queue_contents: &[Array2<F>],
    temperature: F,
    reduction: NceReduction,
    include_internal: bool,
) -> Result<(F, PatchNceGrads<F>)> {
    let source = if include_internal {
        NegativeSource::Both(queue_contents)
    } else {
        NegativeSource::External(queue_contents)
    };
    let (loss, grads) = patch_loss_impl(query_set, key_set, source, temperature, reduction, true)?;
    Ok((loss, grads.expect("grads requested")))
}

fn patch_loss_impl<F: Scalar>(
    query_set: &PatchEmbeddingSet<F>,
    key_set: &PatchEmbeddingSet<F>,
    source: NegativeSource<F>,
    temperature: F,
    reduction: NceReduction,
    want_grads: bool,
) -> Result<(F, Option<PatchNceGrads<F>>)> {
    if temperature <= F::zero() {
        return Err(Error::invalid_argument("temperature must be positive"));
    }
    query_set.validate()?;
    key_set.validate()?;
    check_aligned(query_set, key_set)?;
    match source {
        NegativeSource::Internal => {
            for q in &query_set.layers {
                if q.embeddings.nrows() < 2 {
                    return Err(Error::invalid_argument(format!(
                        "layer {}: internal negatives need at least 2 locations",
                        q.layer_id
                    )));
                }
            }
        }
        NegativeSource::External(queues) | NegativeSource::Both(queues) => {
            if queues.len() != query_set.layers.len() {
                return Err(Error::invalid_state(format!(
                    "queue has {} layers, embeddings have {}",
                    queues.len(),
                    query_set.layers.len()
                )));
            }
            for (q, m) in query_set.layers.iter().zip(queues) {
                if m.nrows() == 0 {
                    return Err(Error::invalid_state(format!(
                        "layer {}: external negative queue is empty",
                        q.layer_id
                    )));
                }
                if m.ncols() != q.embeddings.ncols() {
                    return Err(Error::invalid_argument(format!(
                        "layer {}: queue width {} != embedding width {}",
                        q.layer_id,
                        m.ncols(),
                        q.embeddings.ncols()
                    )));
                }
            }
        }
    }

    let total_locations: usize = query_set.layers.iter().map(|l| l.embeddings.nrows()).sum();
    let scale = match reduction {
        NceReduction::Mean => F::one() / F::from_f64c(total_locations as f64),
        NceReduction::Sum => F::one(),
    };

    let t = temperature;
    let mut loss = F::zero();
    let mut d_query = Vec::new();
    let mut d_key = Vec::new();

    for (li, (ql, kl)) in query_set.layers.iter().zip(&key_set.layers).enumerate() {
        let q = &ql.embeddings;
        let k = &kl.embeddings;
        let s = q.nrows();
        let use_internal = matches!(source, NegativeSource::Internal | NegativeSource::Both(_));
        let ext: Option<&Array2<F>> = match source {
            NegativeSource::External(m) | NegativeSource::Both(m) => Some(&m[li]),
            NegativeSource::Internal => None,
        };

        // Raw similarities.
        let pos: Array1<F> = Array1::from_iter(
            q.rows()
                .into_iter()
                .zip(k.rows())
                .map(|(a, b)| a.dot(&b)),
        );
        let sim_int = if use_internal { Some(q.dot(&k.t())) } else { None };
        let sim_ext = ext.map(|m| q.dot(&m.t()));

        // Row-wise stable softmax over [positive, negatives...].
        let mut p_int = sim_int.as_ref().map(|m| Array2::<F>::zeros(m.dim()));
        let mut p_ext = sim_ext.as_ref().map(|m| Array2::<F>::zeros(m.dim()));
        let mut p_pos = Array1::<F>::zeros(s);

        for i in 0..s {
            let pl = pos[i] / t;
            let mut max = pl;
            if let Some(m) = &sim_int {
                for j in 0..s {
                    if j != i {
                        max = max.max(m[(i, j)] / t);
                    }
                }
            }
            if let Some(m) = &sim_ext {
                for j in 0..m.ncols() {
                    max = max.max(m[(i, j)] / t);
                }
            }
            let mut z = (pl - max).exp();
            if let Some(m) = &sim_int {
                for j in 0..s {
                    if j != i {
                        z += (m[(i, j)] / t - max).exp();
                    }
                }
            }
            if let Some(m) = &sim_ext {
                for j in 0..m.ncols() {
                    z += (m[(i, j)] / t - max).exp();
                }
            }
            loss += (max + z.ln() - pl) * scale;

            if want_grads {
                p_pos[i] = (pl - max).exp() / z;
                if let (Some(pm), Some(m)) = (&mut p_int, &sim_int) {
                    for j in 0..s {
                        pm[(i, j)] = if j == i {
                            F::zero()
                        } else {
                            (m[(i, j)] / t - max).exp() / z
                        };
                    }
                }
                if let (Some(pm), Some(m)) = (&mut p_ext, &sim_ext) {
                    for j in 0..m.ncols() {
                        pm[(i, j)] = (m[(i, j)] / t - max).exp() / z;
                    }
                }
            }
        }

        if want_grads {
            // dL/dsim scaled by 1/t and the reduction factor.
            let c = scale / t;
            // Query grads: positive term + internal negatives + external ones.
            let mut gq = Array2::<F>::zeros(q.dim());
            for i in 0..s {
                let coeff = (p_pos[i] - F::one()) * c;
                gq.row_mut(i).assign(&k.row(i).mapv(|v| v * coeff));
            }
            if let Some(pm) = &p_int {
                gq = gq + pm.dot(k).mapv(|v| v * c);
            }
            if let (Some(pm), Some(m)) = (&p_ext, ext) {
                gq = gq + pm.dot(m).mapv(|v| v * c);
            }
            // Key grads: diagonal positive plus transposed internal negatives.
            let mut gk = Array2::<F>::zeros(k.dim());
            for i in 0..s {
                let coeff = (p_pos[i] - F::one()) * c;
                gk.row_mut(i).assign(&q.row(i).mapv(|v| v * coeff));
            }
            if let Some(pm) = &p_int {
                gk = gk + pm.t().dot(q).mapv(|v| v * c);
            }
            d_query.push(gq);
            d_key.push(gk);
        }
    }

    let grads = want_grads.then_some(PatchNceGrads { d_query, d_key });
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Naive high-precision softmax cross-entropy, the independent oracle.
    fn naive_nce_f64(q: &[f64], p: &[f64], negs: &[Vec<f64>], t: f64) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let num = (dot(q, p) / t).exp();
        let den = num + negs.iter().map(|n| (dot(q, n) / t).exp()).sum::<f64>();
        -(num / den).ln()
    }

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Array2<f64> {
        let dist = Normal::new(0.0, 1.0).unwrap();
        let mut m: Array2<f64> = Array2::from_shape_fn((n, k), |_| dist.sample(rng));
        for mut row in m.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        m
    }

    fn batch_from(
        q: Array1<f64>,
        p: Array1<f64>,
        negs: Array2<f64>,
        t: f64,
    ) -> NceBatch<f64> {
        NceBatch { query: q, positive: p, negatives: negs, temperature: t }
    }

    #[test]
    fn uniform_logits_give_log_n_plus_one() {
        // All dots zero with N = 255 negatives: loss = ln(256).
        let k = 8;
        let q = Array1::from_shape_fn(k, |i| if i == 0 { 1.0 } else { 0.0 });
        let p = Array1::from_shape_fn(k, |i| if i == 1 { 1.0 } else { 0.0 });
        let negs = Array2::from_shape_fn((255, k), |(_, j)| if j == 2 { 1.0 } else { 0.0 });
        let loss = info_nce_loss(&batch_from(q, p, negs, DEFAULT_TEMPERATURE)).unwrap();
        assert!((loss - 256f64.ln()).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn matched_query_with_cold_negative_matches_oracle() {
        // q = p (dot 1), one orthogonal negative, t = 0.07.
        let q = array![1.0, 0.0];
        let p = array![1.0, 0.0];
        let negs = array![[0.0, 1.0]];
        let loss = info_nce_loss(&batch_from(q, p, negs, 0.07)).unwrap();
        let oracle = naive_nce_f64(&[1.0, 0.0], &[1.0, 0.0], &[vec![0.0, 1.0]], 0.07);
        assert!((loss - oracle).abs() / oracle.max(1e-30) < 1e-6);
        // Magnitude sanity: ln(1 + e^(-1/0.07)) ~ 6.2e-7.
        assert!((loss - (1.0 + (-1.0f64 / 0.07).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn random_batches_match_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &n in &[1usize, 15, 255] {
            for _ in 0..20 {
                let q = unit_rows(&mut rng, 1, 8).row(0).to_owned();
                let p = unit_rows(&mut rng, 1, 8).row(0).to_owned();
                let negs = unit_rows(&mut rng, n, 8);
                let loss =
                    info_nce_loss(&batch_from(q.clone(), p.clone(), negs.clone(), 0.07)).unwrap();
                let negs_v: Vec<Vec<f64>> =
                    negs.rows().into_iter().map(|r| r.to_vec()).collect();
                let oracle = naive_nce_f64(q.as_slice().unwrap(), p.as_slice().unwrap(), &negs_v, 0.07);
                assert!((loss - oracle).abs() / oracle.abs().max(1e-12) < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let q = array![1.0, 0.0];
        let p = array![0.0, 1.0];
        let negs = array![[1.0, 0.0]];
        let mut b = batch_from(q, p, negs, 0.07);
        b.temperature = 0.0;
        assert!(matches!(info_nce_loss(&b), Err(Error::InvalidArgument(_))));
        b.temperature = 0.07;
        b.positive = array![1.0, 0.0, 0.0];
        assert!(matches!(info_nce_loss(&b), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = unit_rows(&mut rng, 1, 6).row(0).to_owned();
        let p = unit_rows(&mut rng, 1, 6).row(0).to_owned();
        let negs = unit_rows(&mut rng, 7, 6);
        let b = batch_from(q, p, negs, 0.07);
        let (_, grads) = info_nce_loss_with_grads(&b).unwrap();
        let eps = 1e-5;
        let check = |analytic: f64, fd: f64| {
            assert!(
                (analytic - fd).abs() / (analytic.abs() + fd.abs() + 1e-10) < 1e-4,
                "analytic {analytic} vs fd {fd}"
            );
        };
        for i in 0..6 {
            let mut bp = b.clone();
            bp.query[i] += eps;
            let hi = info_nce_loss(&bp).unwrap();
            bp.query[i] -= 2.0 * eps;
            let lo = info_nce_loss(&bp).unwrap();
            check(grads.query[i], (hi - lo) / (2.0 * eps));

            let mut bp = b.clone();
            bp.positive[i] += eps;
            let hi = info_nce_loss(&bp).unwrap();
            bp.positive[i] -= 2.0 * eps;
            let lo = info_nce_loss(&bp).unwrap();
            check(grads.positive[i], (hi - lo) / (2.0 * eps));
        }
        for r in 0..7 {
            for i in 0..6 {
                let mut bp = b.clone();
                bp.negatives[(r, i)] += eps;
                let hi = info_nce_loss(&bp).unwrap();
                bp.negatives[(r, i)] -= 2.0 * eps;
                let lo = info_nce_loss(&bp).unwrap();
                check(grads.negatives[(r, i)], (hi - lo) / (2.0 * eps));
            }
        }
    }

    fn patches(layer_id: usize, emb: Array2<f64>) -> LayerPatches<f64> {
        let s = emb.nrows();
        LayerPatches {
            layer_id,
            embeddings: emb,
            indices: (0..s).map(|i| (0, i)).collect(),
            spatial: (1, s.max(1)),
        }
    }

    #[test]
    fn perfect_positive_at_small_temperature_vanishes() {
        let rows = unit_rows(&mut ChaCha8Rng::seed_from_u64(13), 2, 4);
        let qs = PatchEmbeddingSet { layers: vec![patches(0, rows.clone())] };
        let ks = PatchEmbeddingSet { layers: vec![patches(0, rows)] };
        let loss = patchnce_loss(&qs, &ks, 0.005, NceReduction::Mean).unwrap();
        assert!(loss >= 0.0);
        assert!(loss < 1e-6, "{loss}");
    }

    #[test]
    fn decomposes_into_per_location_info_nce() {
        // One layer, S = 3, 2-dim embeddings: the patch loss must equal the
        // sum (here: mean) of three hand-assembled classification losses.
        let q = unit_rows(&mut ChaCha8Rng::seed_from_u64(14), 3, 2);
        let k = unit_rows(&mut ChaCha8Rng::seed_from_u64(15), 3, 2);
        let qs = PatchEmbeddingSet { layers: vec![patches(0, q.clone())] };
        let ks = PatchEmbeddingSet { layers: vec![patches(0, k.clone())] };
        let t = 0.07;
        let loss = patchnce_loss(&qs, &ks, t, NceReduction::Sum).unwrap();
        let mut oracle = 0.0;
        for s in 0..3 {
            let negs: Vec<Vec<f64>> = (0..3)
                .filter(|&j| j != s)
                .map(|j| k.row(j).to_vec())
                .collect();
            oracle += naive_nce_f64(q.row(s).as_slice().unwrap(), k.row(s).as_slice().unwrap(), &negs, t);
        }
        assert!((loss - oracle).abs() < 1e-12);
        let mean = patchnce_loss(&qs, &ks, t, NceReduction::Mean).unwrap();
        assert!((mean - oracle / 3.0).abs() < 1e-12);
    }

    #[test]
    fn negative_count_is_locations_minus_one() {
        // 256 sampled locations -> 255 internal negatives per query. Checked
        // against an explicit 255-negative classification at one location.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let q = unit_rows(&mut rng, 256, 4);
        let k = unit_rows(&mut rng, 256, 4);
        let qs = PatchEmbeddingSet { layers: vec![patches(0, q.clone())] };
        let ks = PatchEmbeddingSet { layers: vec![patches(0, k.clone())] };
        let total = patchnce_loss(&qs, &ks, 0.07, NceReduction::Sum).unwrap();
        let mut oracle = 0.0;
        for s in 0..256 {
            let negs: Vec<Vec<f64>> = (0..256)
                .filter(|&j| j != s)
                .map(|j| k.row(j).to_vec())
                .collect();
            assert_eq!(negs.len(), 255);
            oracle += naive_nce_f64(q.row(s).as_slice().unwrap(), k.row(s).as_slice().unwrap(), &negs, 0.07);
        }
        assert!((total - oracle).abs() / oracle.abs() < 1e-10);
    }

    #[test]
    fn mismatched_indices_rejected() {
        let q = unit_rows(&mut ChaCha8Rng::seed_from_u64(17), 2, 2);
        let k = unit_rows(&mut ChaCha8Rng::seed_from_u64(18), 2, 2);
        let qs = PatchEmbeddingSet { layers: vec![patches(0, q)] };
        let mut kl = patches(0, k);
        kl.indices = vec![(0, 1), (0, 0)];
        let ks = PatchEmbeddingSet { layers: vec![kl] };
        assert!(matches!(
            patchnce_loss(&qs, &ks, 0.07, NceReduction::Mean),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn external_with_duplicated_keys_equals_internal() {
        // When both key rows are identical, each query's internal negative
        // set is exactly that row, so a single-entry queue holding the same
        // row reproduces the internal loss.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let q = unit_rows(&mut rng, 2, 4);
        let krow = unit_rows(&mut rng, 1, 4);
        let mut k = Array2::<f64>::zeros((2, 4));
        k.row_mut(0).assign(&krow.row(0));
        k.row_mut(1).assign(&krow.row(0));
        let qs = PatchEmbeddingSet { layers: vec![patches(0, q)] };
        let ks = PatchEmbeddingSet { layers: vec![patches(0, k)] };
        let internal = patchnce_loss(&qs, &ks, 0.07, NceReduction::Mean).unwrap();
        let queue = vec![krow];
        let external =
            external_nce_loss(&qs, &ks, &queue, 0.07, NceReduction::Mean, false).unwrap();
        assert!((internal - external).abs() < 1e-12);
    }

    #[test]
    fn external_matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let q = unit_rows(&mut rng, 2, 2);
        let k = unit_rows(&mut rng, 2, 2);
        let queue = unit_rows(&mut rng, 4, 2);
        let qs = PatchEmbeddingSet { layers: vec![patches(0, q.clone())] };
        let ks = PatchEmbeddingSet { layers: vec![patches(0, k.clone())] };
        let loss =
            external_nce_loss(&qs, &ks, &[queue.clone()], 0.07, NceReduction::Sum, false).unwrap();
        let mut oracle = 0.0;
        for s in 0..2 {
            let negs: Vec<Vec<f64>> = queue.rows().into_iter().map(|r| r.to_vec()).collect();
            oracle += naive_nce_f64(q.row(s).as_slice().unwrap(), k.row(s).as_slice().unwrap(), &negs, 0.07);
        }
        assert!((loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn empty_queue_layer_is_invalid_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let q = unit_rows(&mut rng, 2, 2);
        let k = unit_rows(&mut rng, 2, 2);
        let qs = PatchEmbeddingSet { layers: vec![patches(0, q)] };
        let ks = PatchEmbeddingSet { layers: vec![patches(0, k)] };
        let queue = vec![Array2::<f64>::zeros((0, 2))];
        assert!(matches!(
            external_nce_loss(&qs, &ks, &queue, 0.07, NceReduction::Mean, false),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn patch_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let q = unit_rows(&mut rng, 4, 3);
        let k = unit_rows(&mut rng, 4, 3);
        let make = |q: &Array2<f64>, k: &Array2<f64>| {
            (
                PatchEmbeddingSet { layers: vec![patches(0, q.clone())] },
                PatchEmbeddingSet { layers: vec![patches(0, k.clone())] },
            )
        };
        let (qs, ks) = make(&q, &k);
        let (_, grads) =
            patchnce_loss_with_grads(&qs, &ks, 0.07, NceReduction::Mean).unwrap();
        let eps = 1e-6;
        for r in 0..4 {
            for c in 0..3 {
                let mut qp = q.clone();
                qp[(r, c)] += eps;
                let (a, b) = make(&qp, &k);
                let hi = patchnce_loss(&a, &b, 0.07, NceReduction::Mean).unwrap();
                qp[(r, c)] -= 2.0 * eps;
                let (a, b) = make(&qp, &k);
                let lo = patchnce_loss(&a, &b, 0.07, NceReduction::Mean).unwrap();
                let fd = (hi - lo) / (2.0 * eps);
                let g = grads.d_query[0][(r, c)];
                assert!((g - fd).abs() / (g.abs() + fd.abs() + 1e-10) < 1e-4);

                let mut kp = k.clone();
                kp[(r, c)] += eps;
                let (a, b) = make(&q, &kp);
                let hi = patchnce_loss(&a, &b, 0.07, NceReduction::Mean).unwrap();
                kp[(r, c)] -= 2.0 * eps;
                let (a, b) = make(&q, &kp);
                let lo = patchnce_loss(&a, &b, 0.07, NceReduction::Mean).unwrap();
                let fd = (hi - lo) / (2.0 * eps);
                let g = grads.d_key[0][(r, c)];
                assert!((g - fd).abs() / (g.abs() + fd.abs() + 1e-10) < 1e-4);
            }
        }
    }

    #[test]
    fn external_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let q = unit_rows(&mut rng, 3, 3);
        let k = unit_rows(&mut rng, 3, 3);
        let queue = unit_rows(&mut rng, 5, 3);
        let make = |q: &Array2<f64>, k: &Array2<f64>| {
            (
                PatchEmbeddingSet { layers: vec![patches(0, q.clone())] },
                PatchEmbeddingSet { layers: vec![patches(0, k.clone())] },
            )
        };
        for include_internal in [false, true] {
            let (qs, ks) = make(&q, &k);
            let (_, grads) = external_nce_loss_with_grads(
                &qs, &ks, &[queue.clone()], 0.07, NceReduction::Mean, include_internal,
            )
            .unwrap();
            let eps = 1e-6;
            for r in 0..3 {
                for c in 0..3 {
                    for target in ["q", "k"] {
                        let mut qp = q.clone();
                        let mut kp = k.clone();
                        let bump = |qp: &mut Array2<f64>, kp: &mut Array2<f64>, d: f64| {
                            if target == "q" {
                                qp[(r, c)] += d;
                            } else {
                                kp[(r, c)] += d;
                            }
                        };
                        bump(&mut qp, &mut kp, eps);
                        let (a, b) = make(&qp, &kp);
                        let hi = external_nce_loss(
                            &a, &b, &[queue.clone()], 0.07, NceReduction::Mean, include_internal,
                        )
                        .unwrap();
                        bump(&mut qp, &mut kp, -2.0 * eps);
                        let (a, b) = make(&qp, &kp);
                        let lo = external_nce_loss(
                            &a, &b, &[queue.clone()], 0.07, NceReduction::Mean, include_internal,
                        )
                        .unwrap();
                        let fd = (hi - lo) / (2.0 * eps);
                        let g = if target == "q" {
                            grads.d_query[0][(r, c)]
                        } else {
                            grads.d_key[0][(r, c)]
                        };
                        assert!(
                            (g - fd).abs() / (g.abs() + fd.abs() + 1e-10) < 1e-4,
                            "{target} ({r},{c}) int={include_internal}: {g} vs {fd}"
                        );
                    }
                }
            }
        }
    }
}
