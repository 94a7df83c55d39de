//! Procedural two-domain fixture data: gray ellipses on a noise background
//! (domain A) and the same geometry filled with stripe texture (domain B).
//! Used by the desk-scale training experiments and tests.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;

use crate::data::save_image;
use crate::error::Result;
use crate::seeds::stream_rng;

pub const DEFAULT_IMAGE_SIZE: usize = 64;

fn background(rng: &mut impl Rng, size: usize) -> Array3<f32> {
    let mut img = Array3::<f32>::zeros((3, size, size));
    for i in 0..size {
        for j in 0..size {
            let v = -0.1 + rng.random_range(-0.25..0.25);
            for c in 0..3 {
                img[(c, i, j)] = v;
            }
        }
    }
    img
}

struct EllipseGeom {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    theta: f64,
}

fn sample_geometry(rng: &mut impl Rng, size: usize) -> EllipseGeom {
    let s = size as f64;
    EllipseGeom {
        cy: s * rng.random_range(0.35..0.65),
        cx: s * rng.random_range(0.35..0.65),
        ry: s * rng.random_range(0.18..0.32),
        rx: s * rng.random_range(0.18..0.32),
        theta: rng.random_range(0.0..std::f64::consts::PI),
    }
}

fn inside(geom: &EllipseGeom, i: usize, j: usize) -> Option<f64> {
    let dy = i as f64 - geom.cy;
    let dx = j as f64 - geom.cx;
    let (s, c) = geom.theta.sin_cos();
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    let r = (u / geom.rx).powi(2) + (v / geom.ry).powi(2);
    (r <= 1.0).then_some(u)
}

/// One domain-A image: a solid gray ellipse over noise.
pub fn ellipse_image(seed: u64, index: u64, size: usize) -> Array3<f32> {
    let mut rng = stream_rng(seed, "ellipse_a", &[index]);
    let mut img = background(&mut rng, size);
    let geom = sample_geometry(&mut rng, size);
    let level = rng.random_range(0.35..0.75) as f32;
    for i in 0..size {
        for j in 0..size {
            if inside(&geom, i, j).is_some() {
                for c in 0..3 {
                    img[(c, i, j)] = level;
                }
            }
        }
    }
    img
}

/// One domain-B image: same geometry family, stripe-filled.
pub fn striped_ellipse_image(seed: u64, index: u64, size: usize) -> Array3<f32> {
    let mut rng = stream_rng(seed, "ellipse_b", &[index]);
    let mut img = background(&mut rng, size);
    let geom = sample_geometry(&mut rng, size);
    let _unused_level: f32 = rng.random_range(0.35..0.75);
    let period = rng.random_range(4.0..8.0);
    let bright = 0.85f32;
    let dark = -0.85f32;
    for i in 0..size {
        for j in 0..size {
            if let Some(u) = inside(&geom, i, j) {
                let band = ((u / period).floor() as i64).rem_euclid(2);
                let v = if band == 0 { bright } else { dark };
                for c in 0..3 {
                    img[(c, i, j)] = v;
                }
            }
        }
    }
    img
}

/// Write `train_count` + `test_count` images per domain under the standard
/// dataset layout (trainA/trainB/testA/testB).
pub fn write_dataset(
    root: &Path,
    train_count: usize,
    test_count: usize,
    size: usize,
    seed: u64,
) -> Result<()> {
    for (sub, count, offset, striped) in [
        ("trainA", train_count, 0u64, false),
        ("trainB", train_count, 100_000, true),
        ("testA", test_count, 200_000, false),
        ("testB", test_count, 300_000, true),
    ] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir)?;
        for i in 0..count {
            let idx = offset + i as u64;
            let img = if striped {
                striped_ellipse_image(seed, idx, size)
            } else {
                ellipse_image(seed, idx, size)
            };
            save_image(&img.view(), &dir.join(format!("img{i:04}.png")))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_are_in_range_and_deterministic() {
        let a = ellipse_image(1, 0, 32);
        let b = ellipse_image(1, 0, 32);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        let s = striped_ellipse_image(1, 0, 32);
        // Stripes produce both bright and dark pixels inside the ellipse.
        assert!(s.iter().any(|&v| v > 0.8));
        assert!(s.iter().any(|&v| v < -0.8));
        assert_ne!(a, s);
    }

    #[test]
    fn dataset_layout_written() {
        let tmp = tempfile::tempdir().unwrap();
        write_dataset(tmp.path(), 3, 2, 16, 5).unwrap();
        for sub in ["trainA", "trainB", "testA", "testB"] {
            let n = std::fs::read_dir(tmp.path().join(sub)).unwrap().count();
            assert_eq!(n, if sub.starts_with("train") { 3 } else { 2 });
        }
    }
}
