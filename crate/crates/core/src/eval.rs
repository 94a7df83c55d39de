//! Evaluation and visualization: Fréchet distance between Gaussian fits of
//! embedded image sets (with pluggable embedders), the class-pixel-fraction
//! statistic over a pluggable segmenter, and the similarity-map / PCA
//! embedding visualizations.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Array3, Array4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::resize_bilinear;
use crate::error::{Error, Result};
use crate::networks::{gather_locations, Generator, HeadSet};
use crate::seeds::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderSpec {
    /// Activations of an externally supplied feature network applied to
    /// images resized to 299x299 with bilinear sampling. The weights file is
    /// an external asset; nothing is bundled.
    ExternalInception { weights: PathBuf },
    /// Frozen seeded Gaussian projection of 32x32 bilinear thumbnails.
    FixedRandomProjection { dim: usize, seed: u64 },
    /// Grid average pooling of the raw pixels.
    IdentityPool { grid: usize },
}

impl EmbedderSpec {
    pub fn fixed_random_projection() -> Self {
        EmbedderSpec::FixedRandomProjection { dim: 64, seed: 1234 }
    }

    pub fn identity_pool() -> Self {
        EmbedderSpec::IdentityPool { grid: 4 }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "fixed_random_projection" => Ok(Self::fixed_random_projection()),
            "identity_pool" => Ok(Self::identity_pool()),
            other if other.starts_with("external_inception:") => {
                let path = other.trim_start_matches("external_inception:");
                Ok(EmbedderSpec::ExternalInception { weights: PathBuf::from(path) })
            }
            other => Err(Error::Config(format!(
                "unknown embedder `{other}` (expected identity_pool, fixed_random_projection, or external_inception:<weights>)"
            ))),
        }
    }
}

/// A realized embedder mapping an image to a feature vector.
pub enum Embedder {
    External { net: Generator<f32> },
    Projection { matrix: Array2<f64>, thumb: usize },
    Pool { grid: usize },
}

pub const INCEPTION_INPUT_SIZE: usize = 299;

impl Embedder {
    pub fn build(spec: &EmbedderSpec) -> Result<Self> {
        match spec {
            EmbedderSpec::IdentityPool { grid } => Ok(Embedder::Pool { grid: (*grid).max(1) }),
            EmbedderSpec::FixedRandomProjection { dim, seed } => {
                let thumb = 32usize;
                let in_dim = 3 * thumb * thumb;
                let mut rng = stream_rng(*seed, "fixed_projection", &[]);
                use rand_distr::Distribution;
                let normal = rand_distr::Normal::new(0.0, 1.0 / (in_dim as f64).sqrt()).unwrap();
                let matrix = Array2::from_shape_fn((*dim, in_dim), |_| normal.sample(&mut rng));
                Ok(Embedder::Projection { matrix, thumb })
            }
            EmbedderSpec::ExternalInception { weights } => {
                if !weights.is_file() {
                    return Err(Error::Config(format!(
                        "embedding network weights not found at {} (external asset, supply via config)",
                        weights.display()
                    )));
                }
                let (net, _, _) = crate::trainer::load_generator(weights)?;
                Ok(Embedder::External { net })
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Embedder::External { net } => {
                net.enc.channels_at(net.spec.input_channels, net.enc.layers.len() - 1)
            }
            Embedder::Projection { matrix, .. } => matrix.nrows(),
            Embedder::Pool { grid } => 3 * grid * grid,
        }
    }

    pub fn embed(&self, image: &Array3<f32>) -> Result<Vec<f64>> {
        match self {
            Embedder::Pool { grid } => {
                let (c, h, w) = image.dim();
                let g = *grid;
                let mut out = vec![0.0; c * g * g];
                let mut counts = vec![0usize; c * g * g];
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let gi = (i * g / h).min(g - 1);
                            let gj = (j * g / w).min(g - 1);
                            let k = (ci * g + gi) * g + gj;
                            out[k] += image[(ci, i, j)] as f64;
                            counts[k] += 1;
                        }
                    }
                }
                for (o, n) in out.iter_mut().zip(counts) {
                    *o /= n.max(1) as f64;
                }
                Ok(out)
            }
            Embedder::Projection { matrix, thumb } => {
                let small = resize_bilinear(image, *thumb, *thumb);
                let flat: Array1<f64> =
                    Array1::from_iter(small.iter().map(|&v| v as f64));
                Ok(matrix.dot(&flat).to_vec())
            }
            Embedder::External { net } => {
                // Resize to 299x299 bilinear, run the feature network's
                // encoder, global-average-pool the deepest activations.
                let resized = resize_bilinear(image, INCEPTION_INPUT_SIZE, INCEPTION_INPUT_SIZE);
                let pad = pad_to_divisor(&resized, net.spec.size_divisor());
                let mut batch = Array4::<f32>::zeros((1, 3, pad.dim().1, pad.dim().2));
                batch.index_axis_mut(ndarray::Axis(0), 0).assign(&pad);
                let enc = net.encode(&batch)?;
                let deep = &enc.deepest;
                let (_, c, h, w) = deep.dim();
                let mut out = vec![0.0f64; c];
                for ci in 0..c {
                    let mut acc = 0.0f64;
                    for i in 0..h {
                        for j in 0..w {
                            acc += deep[(0, ci, i, j)] as f64;
                        }
                    }
                    out[ci] = acc / (h * w) as f64;
                }
                Ok(out)
            }
        }
    }
}

fn pad_to_divisor(img: &Array3<f32>, d: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    let ph = h.div_ceil(d) * d;
    let pw = w.div_ceil(d) * d;
    if ph == h && pw == w {
        return img.clone();
    }
    let mut out = Array3::<f32>::zeros((c, ph, pw));
    for ci in 0..c {
        for i in 0..ph {
            for j in 0..pw {
                out[(ci, i, j)] = img[(ci, i.min(h - 1), j.min(w - 1))];
            }
        }
    }
    out
}

/// Gaussian fit of an embedded image set.
#[derive(Debug, Clone)]
pub struct GaussianSummary {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub count: usize,
}

/// Embed all images and fit mean + unbiased covariance.
pub fn summarize(images: &[Array3<f32>], embedder: &Embedder) -> Result<GaussianSummary> {
    if images.len() < 2 {
        return Err(Error::invalid_argument(format!(
            "need at least 2 images for a covariance, got {}",
            images.len()
        )));
    }
    let embedded: Vec<Vec<f64>> = images
        .par_iter()
        .map(|img| embedder.embed(img))
        .collect::<Result<Vec<_>>>()?;
    let k = embedded[0].len();
    let n = embedded.len();
    let mut mean = Array1::<f64>::zeros(k);
    for e in &embedded {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    mean.mapv_inplace(|v| v / n as f64);
    let mut cov = Array2::<f64>::zeros((k, k));
    for e in &embedded {
        let d: Vec<f64> = e.iter().zip(mean.iter()).map(|(v, m)| v - m).collect();
        for i in 0..k {
            for j in i..k {
                cov[(i, j)] += d[i] * d[j];
            }
        }
    }
    for i in 0..k {
        for j in i..k {
            let v = cov[(i, j)] / (n as f64 - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(GaussianSummary { mean, cov, count: n })
}

fn check_symmetric(m: &Array2<f64>, label: &str) -> Result<()> {
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-8 * scale {
                return Err(Error::invalid_argument(format!(
                    "{label} covariance is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    Ok(())
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

/// Eigenvalues clamped at zero; negativity beyond `-1e-8 * scale` is an
/// error (a covariance that indefinite is corrupt, not noisy).
fn clamped_sqrt_eigs(eigs: &DVector<f64>, scale: f64) -> Result<Vec<f64>> {
    let tol = 1e-8 * scale.max(1e-300);
    eigs.iter()
        .map(|&l| {
            if l < -tol {
                Err(Error::invalid_argument(format!(
                    "eigenvalue {l} too negative for a covariance (scale {scale})"
                )))
            } else {
                Ok(l.max(0.0).sqrt())
            }
        })
        .collect()
}

/// `||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2))`, with the matrix root
/// evaluated on the symmetric product `Sa^(1/2) Sb Sa^(1/2)`.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::invalid_argument(format!(
            "dimension mismatch: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    check_symmetric(&a.cov, "first")?;
    check_symmetric(&b.cov, "second")?;
    let sa = to_dmatrix(&a.cov);
    let sb = to_dmatrix(&b.cov);
    let scale_a = sa.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale_b = sb.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    // Sa^(1/2) via symmetric eigendecomposition.
    let ea = nalgebra::SymmetricEigen::new(sa.clone());
    let roots = clamped_sqrt_eigs(&ea.eigenvalues, scale_a)?;
    let d = DMatrix::from_diagonal(&DVector::from_vec(roots));
    let sqrt_a = &ea.eigenvectors * d * ea.eigenvectors.transpose();

    // Symmetrized inner product, then the trace of its root.
    let mut inner = &sqrt_a * &sb * &sqrt_a;
    let inner_t = inner.transpose();
    inner = (inner + inner_t) * 0.5;
    let ei = nalgebra::SymmetricEigen::new(inner);
    let inner_scale = scale_a.max(scale_b).powi(2).max(1e-300);
    let tr_sqrt: f64 = clamped_sqrt_eigs(&ei.eigenvalues, inner_scale)?.iter().sum();

    let mean_sq: f64 = a
        .mean
        .iter()
        .zip(b.mean.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let tr_a: f64 = (0..a.cov.nrows()).map(|i| a.cov[(i, i)]).sum();
    let tr_b: f64 = (0..b.cov.nrows()).map(|i| b.cov[(i, i)]).sum();
    Ok((mean_sq + tr_a + tr_b - 2.0 * tr_sqrt).max(0.0))
}

/// Per-pixel labeler; pluggable so external segmentation models can be used
/// without bundling one.
pub trait Segmenter {
    /// Label map matching the image's spatial size.
    fn segment(&self, image_path: &Path, image: &Array3<f32>) -> Result<Array2<u32>>;
}

/// Reads label masks (grayscale PNG, pixel value = class id) from a
/// directory, matched by file stem.
pub struct MaskDirSegmenter {
    pub dir: PathBuf,
}

impl Segmenter for MaskDirSegmenter {
    fn segment(&self, image_path: &Path, image: &Array3<f32>) -> Result<Array2<u32>> {
        let stem = image_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid_argument("image path has no stem"))?;
        let mask_path = self.dir.join(format!("{stem}.png"));
        let mask = image::open(&mask_path)
            .map_err(|e| {
                Error::invalid_argument(format!("mask {} unreadable: {e}", mask_path.display()))
            })?
            .to_luma8();
        let (w, h) = mask.dimensions();
        let (_, ih, iw) = image.dim();
        if (h as usize, w as usize) != (ih, iw) {
            return Err(Error::invalid_argument(format!(
                "mask {}x{} does not match image {}x{}",
                h, w, ih, iw
            )));
        }
        let mut out = Array2::<u32>::zeros((ih, iw));
        for (x, y, p) in mask.enumerate_pixels() {
            out[(y as usize, x as usize)] = p.0[0] as u32;
        }
        Ok(out)
    }
}

/// Fraction of pixels whose label is in `class_ids`, aggregated over the set.
pub fn class_pixel_fraction(
    images: &[(PathBuf, Array3<f32>)],
    segmenter: &dyn Segmenter,
    class_ids: &[u32],
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid_argument("no images"));
    }
    let mut hit = 0u64;
    let mut total = 0u64;
    for (path, img) in images {
        let labels = segmenter.segment(path, img)?;
        let (_, h, w) = img.dim();
        if labels.dim() != (h, w) {
            return Err(Error::invalid_argument(format!(
                "segmenter output {:?} does not match image {h}x{w}",
                labels.dim()
            )));
        }
        for &l in labels.iter() {
            if class_ids.contains(&l) {
                hit += 1;
            }
        }
        total += (h * w) as u64;
    }
    Ok(hit as f64 / total as f64)
}

/// Similarity of the output-patch embedding at `query_loc` to every input
/// patch of one tap layer: `exp(v . k / temperature)`, min-max normalized to
/// [0, 1] over the layer grid.
pub fn similarity_map(
    gen: &Generator<f32>,
    heads: &HeadSet<f32>,
    input: &Array4<f32>,
    output: &Array4<f32>,
    query_loc: (usize, usize),
    layer: usize,
    temperature: f64,
) -> Result<Array2<f32>> {
    if layer >= gen.taps.len() {
        return Err(Error::invalid_argument(format!("layer {layer} out of range")));
    }
    let enc_in = gen.encode(input)?;
    let enc_out = gen.encode(output)?;
    let (_, _, h, w) = enc_in.features.maps[layer].dim();
    if query_loc.0 >= h || query_loc.1 >= w {
        return Err(Error::invalid_argument(format!(
            "query location {:?} outside layer extent {h}x{w}",
            query_loc
        )));
    }
    let all: Vec<(usize, usize)> =
        (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).collect();
    let keys_rows = gather_locations(&enc_in.features.maps[layer], 0, &all)?;
    let (keys, _) = heads.heads[layer].forward(&keys_rows);
    let q_rows = gather_locations(&enc_out.features.maps[layer], 0, &[query_loc])?;
    let (q, _) = heads.heads[layer].forward(&q_rows);
    let qv = q.row(0);
    let mut sims = Array2::<f32>::zeros((h, w));
    for (p, &(i, j)) in all.iter().enumerate() {
        let dot: f32 = keys.row(p).dot(&qv);
        sims[(i, j)] = (dot as f64 / temperature).exp() as f32;
    }
    let min = sims.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = sims.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = (max - min).max(1e-12);
    sims.mapv_inplace(|v| (v - min) / span);
    Ok(sims)
}

/// Upsample a heatmap to image size and blend it over the image.
pub fn render_heatmap_overlay(image: &Array3<f32>, heat: &Array2<f32>) -> Array3<f32> {
    let (_, h, w) = image.dim();
    let heat3 = Array3::from_shape_fn((1, heat.nrows(), heat.ncols()), |(_, i, j)| heat[(i, j)]);
    let up = resize_bilinear(&heat3, h, w);
    let mut out = Array3::<f32>::zeros((3, h, w));
    for i in 0..h {
        for j in 0..w {
            let v = up[(0, i, j)].clamp(0.0, 1.0);
            // Cold-to-hot ramp in [-1, 1] output space.
            let heat_rgb = [2.0 * v - 1.0, 0.6 * v - 0.8, 1.0 - 2.0 * v];
            for c in 0..3 {
                out[(c, i, j)] = 0.5 * image[(c, i, j)] + 0.5 * heat_rgb[c];
            }
        }
    }
    out
}

/// Fit one 3-component PCA basis on pooled patch embeddings of all images at
/// one tap layer, then render each image's components as RGB.
pub struct PcaRendering {
    /// Per-image (3, h, w) component maps scaled to [0, 1].
    pub images: Vec<Array3<f32>>,
    /// The (3, K) orthonormal basis used for every image.
    pub basis: Array2<f64>,
}

pub fn pca_embedding_images(
    gen: &Generator<f32>,
    heads: &HeadSet<f32>,
    images: &[Array3<f32>],
    layer: usize,
) -> Result<PcaRendering> {
    if images.is_empty() {
        return Err(Error::invalid_argument("need at least one image"));
    }
    if layer >= gen.taps.len() {
        return Err(Error::invalid_argument(format!("layer {layer} out of range")));
    }
    // Pool embeddings across all images.
    let mut per_image: Vec<(Array2<f32>, (usize, usize))> = Vec::new();
    for img in images {
        let (c, h, w) = img.dim();
        let mut batch = Array4::<f32>::zeros((1, c, h, w));
        batch.index_axis_mut(ndarray::Axis(0), 0).assign(img);
        let enc = gen.encode(&batch)?;
        let map = &enc.features.maps[layer];
        let (_, _, fh, fw) = map.dim();
        let all: Vec<(usize, usize)> =
            (0..fh).flat_map(|i| (0..fw).map(move |j| (i, j))).collect();
        let rows = gather_locations(map, 0, &all)?;
        let (emb, _) = heads.heads[layer].forward(&rows);
        per_image.push((emb, (fh, fw)));
    }
    let k = per_image[0].0.ncols();
    let total: usize = per_image.iter().map(|(e, _)| e.nrows()).sum();
    let mut mean = vec![0.0f64; k];
    for (e, _) in &per_image {
        for row in e.rows() {
            for (m, &v) in mean.iter_mut().zip(row.iter()) {
                *m += v as f64;
            }
        }
    }
    for m in &mut mean {
        *m /= total as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(k, k);
    for (e, _) in &per_image {
        for row in e.rows() {
            let d: Vec<f64> = row.iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect();
            for i in 0..k {
                for j in 0..k {
                    cov[(i, j)] += d[i] * d[j];
                }
            }
        }
    }
    cov /= (total.max(2) - 1) as f64;
    let eig = nalgebra::SymmetricEigen::new(cov);
    // Top 3 by eigenvalue.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut basis = Array2::<f64>::zeros((3, k));
    let eps = 1e-12 * eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut rank = 0usize;
    for c in 0..3.min(k) {
        let col = order[c];
        if eig.eigenvalues[col] > eps {
            for i in 0..k {
                basis[(c, i)] = eig.eigenvectors[(i, col)];
            }
            rank += 1;
        }
    }
    if rank < 3 {
        log::warn!("embedding set has rank {rank} < 3; missing components rendered as zero");
    }

    // Project everything with the shared basis, then shared min/max scaling.
    let mut projected: Vec<(Array3<f64>, (usize, usize))> = Vec::new();
    let mut mins = [f64::INFINITY; 3];
    let mut maxs = [f64::NEG_INFINITY; 3];
    for (e, (fh, fw)) in &per_image {
        let mut comp = Array3::<f64>::zeros((3, *fh, *fw));
        for (p, row) in e.rows().into_iter().enumerate() {
            let (i, j) = (p / fw, p % fw);
            for c in 0..3 {
                let mut acc = 0.0;
                for (bi, (&v, m)) in row.iter().zip(&mean).enumerate() {
                    acc += basis[(c, bi)] * (v as f64 - m);
                }
                comp[(c, i, j)] = acc;
                mins[c] = mins[c].min(acc);
                maxs[c] = maxs[c].max(acc);
            }
        }
        projected.push((comp, (*fh, *fw)));
    }
    let rendered = projected
        .into_iter()
        .map(|(comp, (fh, fw))| {
            Array3::from_shape_fn((3, fh, fw), |(c, i, j)| {
                let span = (maxs[c] - mins[c]).max(1e-12);
                ((comp[(c, i, j)] - mins[c]) / span) as f32
            })
        })
        .collect();
    Ok(PcaRendering { images: rendered, basis })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::GeneratorSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Distribution;

    fn spd_matrix(rng: &mut ChaCha8Rng, k: usize) -> Array2<f64> {
        let d = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let a = Array2::from_shape_fn((k, k), |_| d.sample(rng));
        let mut s = a.t().dot(&a);
        for i in 0..k {
            s[(i, i)] += 0.5;
        }
        s
    }

    /// Independent oracle: cyclic Jacobi eigensolver (no nalgebra).
    fn jacobi_eigenvalues(m: &Array2<f64>) -> Vec<f64> {
        let n = m.nrows();
        let mut a = m.clone();
        for _sweep in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    off += a[(i, j)] * a[(i, j)];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[(p, q)].abs() < 1e-18 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[(i, i)]).collect()
    }

    /// Oracle route: Frechet distance via the Jacobi eigensolver only.
    fn frechet_oracle(a: &GaussianSummary, b: &GaussianSummary) -> f64 {
        let k = a.mean.len();
        // sqrt(Sa) via Jacobi on Sa: sqrt = V sqrt(L) V^T. Reconstruct V by
        // re-running Jacobi while tracking rotations.
        let n = k;
        let mut m = a.cov.clone();
        let mut v = Array2::<f64>::eye(n);
        for _ in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    off += m[(i, j)] * m[(i, j)];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if m[(p, q)].abs() < 1e-18 {
                        continue;
                    }
                    let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * m[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for kk in 0..n {
                        let mkp = m[(kk, p)];
                        let mkq = m[(kk, q)];
                        m[(kk, p)] = c * mkp - s * mkq;
                        m[(kk, q)] = s * mkp + c * mkq;
                        let vkp = v[(kk, p)];
                        let vkq = v[(kk, q)];
                        v[(kk, p)] = c * vkp - s * vkq;
                        v[(kk, q)] = s * vkp + c * vkq;
                    }
                    for kk in 0..n {
                        let mpk = m[(p, kk)];
                        let mqk = m[(q, kk)];
                        m[(p, kk)] = c * mpk - s * mqk;
                        m[(q, kk)] = s * mpk + c * mqk;
                    }
                }
            }
        }
        let mut sqrt_a = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..n {
                    acc += v[(i, l)] * m[(l, l)].max(0.0).sqrt() * v[(j, l)];
                }
                sqrt_a[(i, j)] = acc;
            }
        }
        let inner = sqrt_a.dot(&b.cov).dot(&sqrt_a);
        let inner_sym = (&inner + &inner.t()) * 0.5;
        let tr_sqrt: f64 = jacobi_eigenvalues(&inner_sym)
            .iter()
            .map(|l| l.max(0.0).sqrt())
            .sum();
        let mean_sq: f64 = a
            .mean
            .iter()
            .zip(b.mean.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let tr_a: f64 = (0..n).map(|i| a.cov[(i, i)]).sum();
        let tr_b: f64 = (0..n).map(|i| b.cov[(i, i)]).sum();
        (mean_sq + tr_a + tr_b - 2.0 * tr_sqrt).max(0.0)
    }

    fn summary(mean: Array1<f64>, cov: Array2<f64>) -> GaussianSummary {
        GaussianSummary { count: 10, mean, cov }
    }

    #[test]
    fn identical_summaries_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let cov = spd_matrix(&mut rng, 4);
        let mean = Array1::from_vec(vec![0.3, -0.7, 1.2, 0.0]);
        let a = summary(mean.clone(), cov.clone());
        let b = summary(mean, cov);
        let d = frechet_distance(&a, &b).unwrap();
        assert!(d.abs() < 1e-10, "{d}");
    }

    #[test]
    fn identity_covariances_reduce_to_mean_distance() {
        let k = 5;
        let eye = Array2::<f64>::eye(k);
        let m1 = Array1::zeros(k);
        let mut m2 = Array1::zeros(k);
        m2[0] = 3.0;
        m2[2] = 4.0; // distance 5, squared 25
        let d = frechet_distance(&summary(m1, eye.clone()), &summary(m2, eye)).unwrap();
        assert!((d - 25.0).abs() < 1e-8, "{d}");
    }

    #[test]
    fn random_spd_pairs_match_jacobi_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..20 {
            let a = summary(
                Array1::from_shape_fn(4, |i| i as f64 * 0.1),
                spd_matrix(&mut rng, 4),
            );
            let b = summary(
                Array1::from_shape_fn(4, |i| -(i as f64) * 0.2),
                spd_matrix(&mut rng, 4),
            );
            let d = frechet_distance(&a, &b).unwrap();
            let o = frechet_oracle(&a, &b);
            assert!((d - o).abs() / o.abs().max(1e-12) < 1e-6, "{d} vs {o}");
            // Symmetry.
            let r = frechet_distance(&b, &a).unwrap();
            assert!((d - r).abs() < 1e-8, "{d} vs {r}");
        }
    }

    #[test]
    fn commuting_covariances_match_closed_form() {
        // Simultaneously diagonal inputs: Tr(Sa + Sb - 2 sqrt(Sa Sb)) =
        // sum_i (sqrt(la_i) - sqrt(lb_i))^2.
        let la = [1.0, 2.0, 0.5, 3.0];
        let lb = [0.25, 4.0, 1.5, 0.9];
        let sa = Array2::from_diag(&Array1::from_vec(la.to_vec()));
        let sb = Array2::from_diag(&Array1::from_vec(lb.to_vec()));
        let mean = Array1::zeros(4);
        let d = frechet_distance(&summary(mean.clone(), sa), &summary(mean, sb)).unwrap();
        let expect: f64 = la
            .iter()
            .zip(&lb)
            .map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2))
            .sum();
        assert!((d - expect).abs() < 1e-8, "{d} vs {expect}");
    }

    #[test]
    fn dimension_and_symmetry_violations_rejected() {
        let a = summary(Array1::zeros(3), Array2::eye(3));
        let b = summary(Array1::zeros(4), Array2::eye(4));
        assert!(matches!(frechet_distance(&a, &b), Err(Error::InvalidArgument(_))));
        let mut c = Array2::<f64>::eye(3);
        c[(0, 1)] = 0.5;
        let bad = summary(Array1::zeros(3), c);
        assert!(matches!(frechet_distance(&a, &bad), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn summarize_constant_images_zero_covariance_and_shapes() {
        let imgs: Vec<Array3<f32>> =
            (0..4).map(|_| Array3::from_elem((3, 8, 8), 0.25)).collect();
        let embedder = Embedder::build(&EmbedderSpec::identity_pool()).unwrap();
        let s = summarize(&imgs, &embedder).unwrap();
        assert_eq!(s.cov.dim(), (48, 48));
        assert!(s.cov.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(s.count, 4);
        // Fewer than two images is an error.
        assert!(matches!(
            summarize(&imgs[..1], &embedder),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn summarize_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let d = rand_distr::Uniform::new(-1.0f32, 1.0).unwrap();
        let imgs: Vec<Array3<f32>> = (0..6)
            .map(|_| Array3::from_shape_fn((3, 10, 12), |_| d.sample(&mut rng)))
            .collect();
        let embedder = Embedder::build(&EmbedderSpec::fixed_random_projection()).unwrap();
        let s1 = summarize(&imgs, &embedder).unwrap();
        let mut rev = imgs.clone();
        rev.reverse();
        let s2 = summarize(&rev, &embedder).unwrap();
        for (a, b) in s1.mean.iter().zip(s2.mean.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in s1.cov.iter().zip(s2.cov.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn fixed_projection_is_stable_across_builds() {
        let e1 = Embedder::build(&EmbedderSpec::fixed_random_projection()).unwrap();
        let e2 = Embedder::build(&EmbedderSpec::fixed_random_projection()).unwrap();
        let img = Array3::from_shape_fn((3, 7, 9), |(c, i, j)| {
            ((c + 2 * i + 3 * j) as f32 * 0.1).sin()
        });
        assert_eq!(e1.embed(&img).unwrap(), e2.embed(&img).unwrap());
        assert_eq!(e1.dim(), 64);
    }

    struct ConstSegmenter {
        label: u32,
    }
    impl Segmenter for ConstSegmenter {
        fn segment(&self, _p: &Path, image: &Array3<f32>) -> Result<Array2<u32>> {
            let (_, h, w) = image.dim();
            Ok(Array2::from_elem((h, w), self.label))
        }
    }

    struct QuarterSegmenter;
    impl Segmenter for QuarterSegmenter {
        fn segment(&self, _p: &Path, image: &Array3<f32>) -> Result<Array2<u32>> {
            let (_, h, w) = image.dim();
            Ok(Array2::from_shape_fn((h, w), |(i, j)| {
                if i < h / 2 && j < w / 2 {
                    7
                } else {
                    0
                }
            }))
        }
    }

    #[test]
    fn pixel_fraction_cases() {
        let imgs = vec![(PathBuf::from("a.png"), Array3::<f32>::zeros((3, 8, 8)))];
        let all = class_pixel_fraction(&imgs, &ConstSegmenter { label: 3 }, &[3]).unwrap();
        assert_eq!(all, 1.0);
        let quarter = class_pixel_fraction(&imgs, &QuarterSegmenter, &[7]).unwrap();
        assert_eq!(quarter, 0.25);
        let none = class_pixel_fraction(&imgs, &ConstSegmenter { label: 3 }, &[9]).unwrap();
        assert_eq!(none, 0.0);
    }

    fn tiny_gen(seed: u64) -> (Generator<f32>, HeadSet<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen: Generator<f32> = Generator::new(GeneratorSpec::resnet9(2), &mut rng).unwrap();
        let heads = HeadSet::new(&mut rng, &gen.tap_channels(), 8, 8);
        (gen, heads)
    }

    #[test]
    fn similarity_map_self_query_attains_maximum() {
        let (gen, heads) = tiny_gen(110);
        let mut rng = ChaCha8Rng::seed_from_u64(111);
        let d = rand_distr::Uniform::new(-1.0f32, 1.0).unwrap();
        let img = Array4::from_shape_fn((1, 3, 16, 16), |_| d.sample(&mut rng));
        // Identical input/output with shared weights: the query location must
        // be the argmax of its own similarity map.
        let layer = 3; // first residual block tap
        let loc = (1, 2);
        let heat = similarity_map(&gen, &heads, &img, &img, loc, layer, 0.07).unwrap();
        let max = heat.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(heat[(loc.0, loc.1)], max);
        assert!((max - 1.0).abs() < 1e-6, "max normalized to 1");
        let min = heat.iter().cloned().fold(f32::INFINITY, f32::min);
        assert!(min.abs() < 1e-6, "min normalized to 0");
        // Out-of-extent query rejected.
        assert!(matches!(
            similarity_map(&gen, &heads, &img, &img, (500, 0), layer, 0.07),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn pca_rendering_shared_basis_and_orthonormal_components() {
        let (gen, heads) = tiny_gen(112);
        let mut rng = ChaCha8Rng::seed_from_u64(113);
        let d = rand_distr::Uniform::new(-1.0f32, 1.0).unwrap();
        let a = Array3::from_shape_fn((3, 16, 16), |_| d.sample(&mut rng));
        let b = Array3::from_shape_fn((3, 16, 16), |_| d.sample(&mut rng));
        let r = pca_embedding_images(&gen, &heads, &[a.clone(), b], 4).unwrap();
        assert_eq!(r.images.len(), 2);
        for c1 in 0..3 {
            for c2 in 0..3 {
                let dot: f64 = (0..r.basis.ncols())
                    .map(|i| r.basis[(c1, i)] * r.basis[(c2, i)])
                    .sum();
                let expect = if c1 == c2 { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-6, "basis[{c1}].basis[{c2}] = {dot}");
            }
        }
        // Identical inputs produce identical renderings in the shared basis.
        let r2 = pca_embedding_images(&gen, &heads, &[a.clone(), a.clone()], 4).unwrap();
        assert_eq!(r2.images[0], r2.images[1]);
        assert!(r.images[0].iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn external_embedder_loads_saved_network_and_resizes() {
        // Build a tiny feature net, save it as a checkpoint, reload it as an
        // external embedder; covers the 299x299 resize path.
        let tmp = tempfile::tempdir().unwrap();
        crate::synthetic::write_dataset(tmp.path(), 2, 2, 32, 3).unwrap();
        let overrides = vec![
            "max_iterations=1".to_string(),
            "base_width=2".to_string(),
            "disc_base_width=2".to_string(),
            "embed_dim=8".to_string(),
            "hidden_dim=8".to_string(),
            "patches_per_layer=8".to_string(),
            "load_size=32".to_string(),
            "data.crop_size=32".to_string(),
        ];
        let cfg = crate::config::resolve_config(crate::config::Preset::Cut, None, &overrides)
            .unwrap()
            .0;
        let data = crate::trainer::TrainData::open(tmp.path(), &cfg).unwrap();
        let dirs = crate::config::run_dir_layout(&tmp.path().join("run"), false).unwrap();
        let mut t = crate::trainer::Trainer::new(cfg).unwrap();
        let report = crate::trainer::fit(&mut t, &data, &dirs).unwrap();

        let spec = EmbedderSpec::ExternalInception { weights: report.final_checkpoint.clone() };
        let e = Embedder::build(&spec).unwrap();
        let img = Array3::<f32>::zeros((3, 40, 50));
        let v = e.embed(&img).unwrap();
        assert_eq!(v.len(), e.dim());
        assert!(v.iter().all(|x| x.is_finite()));
        // Missing weights file is a config error naming the asset.
        let missing = Embedder::build(&EmbedderSpec::ExternalInception {
            weights: tmp.path().join("nope.ckpt"),
        });
        assert!(matches!(missing, Err(Error::Config(_))));
    }
}
