//! Dataset ingestion and augmentation: unpaired two-domain loading, the
//! flip-equivariance transform, patch-index sampling, and the single-image
//! crop/scale pipeline. The whole pipeline is a pure function of
//! (file lists, seed, iteration) so runs replay exactly from any point.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::networks::FeatureStack;
use crate::scalar::Scalar;
use crate::seeds::stream_rng;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Decode to RGB and scale 8-bit values onto [-1, 1] as `x / 127.5 - 1`.
pub fn load_image(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = p.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(out)
}

/// Clamp to [-1, 1] and quantize back to 8-bit RGB.
pub fn to_rgb_image(arr: &ndarray::ArrayView3<f32>) -> image::RgbImage {
    let (c, h, w) = arr.dim();
    assert_eq!(c, 3);
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ci: usize| {
            let v = arr[(ci, y as usize, x as usize)].clamp(-1.0, 1.0);
            ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn save_image(arr: &ndarray::ArrayView3<f32>, path: &Path) -> Result<()> {
    to_rgb_image(arr)
        .save(path)
        .map_err(crate::Error::Image)
}

/// Bilinear resample (half-pixel centers, the standard align-corners-false
/// convention).
pub fn resize_bilinear<F: Scalar>(x: &Array3<F>, oh: usize, ow: usize) -> Array3<F> {
    let (c, h, w) = x.dim();
    let mut y = Array3::<F>::zeros((c, oh, ow));
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oi in 0..oh {
        let fy = ((oi as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for oj in 0..ow {
            let fx = ((oj as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ci in 0..c {
                let a = x[(ci, y0, x0)].to_f64c();
                let b = x[(ci, y0, x1)].to_f64c();
                let d = x[(ci, y1, x0)].to_f64c();
                let e = x[(ci, y1, x1)].to_f64c();
                let top = a * (1.0 - wx) + b * wx;
                let bot = d * (1.0 - wx) + e * wx;
                y[(ci, oi, oj)] = F::from_f64c(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    y
}

pub fn hflip3<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h, w), |(ci, i, j)| x[(ci, i, w - 1 - j)])
}

fn crop3<F: Scalar>(x: &Array3<F>, top: usize, left: usize, h: usize, w: usize) -> Array3<F> {
    x.slice(ndarray::s![.., top..top + h, left..left + w]).to_owned()
}

fn to_batch<F: Scalar>(imgs: &[Array3<F>]) -> Array4<F> {
    let (c, h, w) = imgs[0].dim();
    let mut out = Array4::<F>::zeros((imgs.len(), c, h, w));
    for (n, img) in imgs.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), n).assign(img);
    }
    out
}

/// Discover image files under a directory. If a `manifest.txt` (one relative
/// path per line) is present it fixes the ordering; otherwise files are
/// sorted by name.
pub fn discover_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = dir.join("manifest.txt");
    if manifest.is_file() {
        let content = std::fs::read_to_string(&manifest)?;
        let files: Vec<PathBuf> = content
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| dir.join(l))
            .collect();
        return Ok(files);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Unpaired two-domain dataset; domains are sampled independently and one
/// epoch spans `max(|X|, |Y|)` iterations.
pub struct UnpairedDataset {
    pub domain_x: Vec<PathBuf>,
    pub domain_y: Vec<PathBuf>,
    pub load_size: usize,
    pub crop_size: usize,
    pub random_flip: bool,
    pub seed: u64,
}

impl UnpairedDataset {
    /// Standard layout: `<root>/<phase>A` and `<root>/<phase>B`.
    pub fn from_root(
        root: &Path,
        phase: &str,
        load_size: usize,
        crop_size: usize,
        random_flip: bool,
        seed: u64,
    ) -> Result<Self> {
        let dx = root.join(format!("{phase}A"));
        let dy = root.join(format!("{phase}B"));
        let domain_x = discover_images(&dx)?;
        let domain_y = discover_images(&dy)?;
        if domain_x.is_empty() || domain_y.is_empty() {
            return Err(Error::invalid_state(format!(
                "empty domain: {} has {} images, {} has {}",
                dx.display(),
                domain_x.len(),
                dy.display(),
                domain_y.len()
            )));
        }
        Ok(UnpairedDataset { domain_x, domain_y, load_size, crop_size, random_flip, seed })
    }

    pub fn epoch_len(&self) -> u64 {
        self.domain_x.len().max(self.domain_y.len()) as u64
    }

    fn pick_index(&self, side: &str, len: usize, iteration: u64) -> usize {
        let epoch = iteration / self.epoch_len();
        let within = (iteration % self.epoch_len()) as usize;
        if len as u64 == self.epoch_len() {
            // Fresh shuffle per epoch, derived from (seed, side, epoch).
            let mut order: Vec<usize> = (0..len).collect();
            let mut rng = stream_rng(self.seed, side, &[epoch]);
            order.shuffle(&mut rng);
            order[within]
        } else {
            // Smaller domain: uniform unaligned draw per iteration.
            let mut rng = stream_rng(self.seed, side, &[epoch, within as u64]);
            rng.random_range(0..len)
        }
    }

    fn load_one(
        &self,
        paths: &[PathBuf],
        start: usize,
        rng: &mut impl Rng,
    ) -> Result<Array3<f32>> {
        for attempt in 0..paths.len() {
            let idx = (start + attempt) % paths.len();
            match load_image(&paths[idx]) {
                Ok(img) => {
                    let (_, h, w) = img.dim();
                    let img = if h != self.load_size || w != self.load_size {
                        resize_bilinear(&img, self.load_size, self.load_size)
                    } else {
                        img
                    };
                    let max_off = self.load_size - self.crop_size;
                    let top = if max_off > 0 { rng.random_range(0..=max_off) } else { 0 };
                    let left = if max_off > 0 { rng.random_range(0..=max_off) } else { 0 };
                    let img = crop3(&img, top, left, self.crop_size, self.crop_size);
                    let img = if self.random_flip && rng.random_bool(0.5) {
                        hflip3(&img)
                    } else {
                        img
                    };
                    return Ok(img);
                }
                Err(e) => {
                    log::warn!("skipping unreadable image {}: {e}", paths[idx].display());
                }
            }
        }
        Err(Error::invalid_state("no readable image in domain"))
    }

    /// One (x, y) pair; a pure function of (file lists, seed, iteration).
    pub fn batch(&self, iteration: u64) -> Result<(Array4<f32>, Array4<f32>)> {
        if self.load_size < self.crop_size {
            return Err(Error::invalid_argument(format!(
                "load_size {} < crop_size {}",
                self.load_size, self.crop_size
            )));
        }
        let ix = self.pick_index("epoch_x", self.domain_x.len(), iteration);
        let iy = self.pick_index("epoch_y", self.domain_y.len(), iteration);
        let mut rng = stream_rng(self.seed, "aug", &[iteration]);
        let x = self.load_one(&self.domain_x, ix, &mut rng)?;
        let y = self.load_one(&self.domain_y, iy, &mut rng)?;
        Ok((to_batch(&[x]), to_batch(&[y])))
    }
}

/// Uniform unique location sampling per tap layer.
#[derive(Debug, Clone)]
pub struct IndexSampler {
    pub seed: u64,
    pub patches_per_layer: usize,
}

pub const DEFAULT_PATCHES_PER_LAYER: usize = 256;

impl IndexSampler {
    pub fn new(seed: u64, patches_per_layer: usize) -> Self {
        IndexSampler { seed, patches_per_layer }
    }

    /// Per-layer unique (row, col) lists; if a layer has fewer positions than
    /// requested, every position is used in natural order. The same list
    /// must be used for both embedding paths of a loss term.
    pub fn sample(&self, iteration: u64, layer_shapes: &[(usize, usize)]) -> Vec<Vec<(usize, usize)>> {
        layer_shapes
            .iter()
            .enumerate()
            .map(|(li, &(h, w))| {
                let total = h * w;
                if total <= self.patches_per_layer {
                    return (0..total).map(|p| (p / w, p % w)).collect();
                }
                let mut rng = stream_rng(self.seed, "indices", &[iteration, li as u64]);
                // Partial Fisher-Yates over the flat position range.
                let mut pool: Vec<u32> = (0..total as u32).collect();
                let mut out = Vec::with_capacity(self.patches_per_layer);
                for i in 0..self.patches_per_layer {
                    let j = rng.random_range(i..total);
                    pool.swap(i, j);
                    let p = pool[i] as usize;
                    out.push((p / w, p % w));
                }
                out
            })
            .collect()
    }
}

/// Mirror an image on the width axis when `apply` is set.
pub fn flip_equivariance_transform<F: Scalar>(apply: bool, image: &Array4<F>) -> Array4<F> {
    if !apply {
        return image.clone();
    }
    let (n, c, h, w) = image.dim();
    Array4::from_shape_fn((n, c, h, w), |(ni, ci, i, j)| image[(ni, ci, i, w - 1 - j)])
}

/// Mirror every tap feature map back: (h, w) -> (h, W_l - 1 - w).
pub fn unflip_features<F: Scalar>(features: &FeatureStack<F>) -> FeatureStack<F> {
    FeatureStack {
        maps: features
            .maps
            .iter()
            .map(|m| {
                let (n, c, h, w) = m.dim();
                Array4::from_shape_fn((n, c, h, w), |(ni, ci, i, j)| m[(ni, ci, i, w - 1 - j)])
            })
            .collect(),
    }
}

/// Single-image training batch parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SingleImageBatchSpec {
    pub scale_width_min: usize,
    pub scale_width_max: usize,
    pub crops_per_iteration: usize,
    pub crop_size: usize,
    pub tile_size: usize,
}

impl Default for SingleImageBatchSpec {
    fn default() -> Self {
        SingleImageBatchSpec {
            scale_width_min: 384,
            scale_width_max: 1024,
            crops_per_iteration: 16,
            crop_size: 128,
            tile_size: 64,
        }
    }
}

impl SingleImageBatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size % self.tile_size != 0 {
            return Err(Error::invalid_argument(format!(
                "crop size {} not divisible by tile size {}",
                self.crop_size, self.tile_size
            )));
        }
        if self.scale_width_min > self.scale_width_max || self.scale_width_min == 0 {
            return Err(Error::invalid_argument("bad scale width range"));
        }
        Ok(())
    }
}

fn scale_and_crop(
    image: &Array3<f32>,
    spec: &SingleImageBatchSpec,
    rng: &mut impl Rng,
) -> Result<Vec<Array3<f32>>> {
    let (_, h, w) = image.dim();
    let width = rng.random_range(spec.scale_width_min..=spec.scale_width_max);
    let height = ((h as f64) * (width as f64) / (w as f64)).round() as usize;
    if height < spec.crop_size || width < spec.crop_size {
        return Err(Error::invalid_argument(format!(
            "image scales to {width}x{height}, smaller than crop {}",
            spec.crop_size
        )));
    }
    let scaled = resize_bilinear(image, height, width);
    let mut crops = Vec::with_capacity(spec.crops_per_iteration);
    for _ in 0..spec.crops_per_iteration {
        let top = rng.random_range(0..=height - spec.crop_size);
        let left = rng.random_range(0..=width - spec.crop_size);
        crops.push(crop3(&scaled, top, left, spec.crop_size, spec.crop_size));
    }
    Ok(crops)
}

/// One single-image iteration: each domain image is rescaled to a random
/// width (aspect preserved) and `crops_per_iteration` random square crops are
/// taken. The discriminator consumer later splits crops into tiles.
pub fn single_image_batch(
    source: &Array3<f32>,
    target: &Array3<f32>,
    spec: &SingleImageBatchSpec,
    seed: u64,
    iteration: u64,
) -> Result<(Array4<f32>, Array4<f32>)> {
    spec.validate()?;
    let mut rng = stream_rng(seed, "single_image", &[iteration]);
    let src = scale_and_crop(source, spec, &mut rng)?;
    let tgt = scale_and_crop(target, spec, &mut rng)?;
    Ok((to_batch(&src), to_batch(&tgt)))
}
