//! A procedural labeled image dataset for desk-scale experiments.
//!
//! Each image shows one object whose class fixes both its outline and its
//! light/dark surface pattern. Size, position, rotation and gray levels are
//! random, and the background is a mid-gray gradient with small clutter
//! patches and pixel noise. Colors are near-neutral with a slight random tint,
//! so neither color nor brightness identifies an image or a class.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use maskco_core::sampling::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::save_png;
use crate::error::{Error, Result};

pub const CLASSES: [&str; 10] = [
    "target-disk",
    "striped-square",
    "dotted-triangle",
    "plain-cross",
    "checkered-star",
    "spoked-ring",
    "hatched-hexagon",
    "fine-checker-ellipse",
    "wavy-diamond",
    "crosshatched-quad",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthConfig {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// 10,000 training and 2,000 validation images of 112 x 112 pixels.
    fn default() -> Self {
        SynthConfig { train_per_class: 1000, val_per_class: 200, size: 112, seed: 0 }
    }
}

fn shape(class: usize, u: f64, v: f64) -> bool {
    let rho = (u * u + v * v).sqrt();
    let (au, av) = (u.abs(), v.abs());
    match class {
        0 => rho <= 1.0,
        1 => au.max(av) <= 0.8,
        // Equilateral triangle inscribed in the unit circle, apex up.
        2 => v >= -0.5 && 3f64.sqrt() * au + v <= 1.0,
        3 => (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0),
        4 => rho <= 0.6 + 0.4 * (5.0 * v.atan2(u)).cos(),
        5 => (0.5..=1.0).contains(&rho),
        6 => av <= 0.87 && 3f64.sqrt() * au + av <= 1.74,
        7 => u * u + v * v / 0.45 <= 1.0,
        8 => au + av <= 1.0,
        9 => [(0.5, 0.5), (-0.5, 0.5), (0.5, -0.5), (-0.5, -0.5)]
            .iter()
            .any(|(cx, cy)| (u - cx).powi(2) + (v - cy).powi(2) <= 0.38f64.powi(2)),
        _ => unreachable!("class index out of range"),
    }
}

/// `true` where the primary color shows, `false` for the secondary one.
fn texture(class: usize, u: f64, v: f64) -> bool {
    let even = |t: f64| (t.floor() as i64).rem_euclid(2) == 0;
    match class {
        0 => even((u * u + v * v).sqrt() * 4.0),
        1 => even(v * 3.5),
        2 => {
            let (fu, fv) = ((u * 3.0).rem_euclid(1.0) - 0.5, (v * 3.0).rem_euclid(1.0) - 0.5);
            fu * fu + fv * fv > 0.09
        }
        3 => true,
        4 => even(u * 2.5) == even(v * 2.5),
        5 => even(v.atan2(u) * 8.0 / PI),
        6 => even((u + v) * 3.0),
        7 => even(u * 5.0) == even(v * 5.0),
        8 => even((u + 0.15 * (v * 9.0).sin()) * 4.0),
        9 => even(u * 4.0) && even(v * 4.0),
        _ => unreachable!("class index out of range"),
    }
}

/// Coverage of object-frame point `(u, v)` (unit = object radius): `None`
/// outside the object, else which of the two object colors shows.
fn coverage(class: usize, u: f64, v: f64) -> Option<bool> {
    shape(class, u, v).then(|| texture(class, u, v))
}

/// A gray of `level` with a small random tint.
fn tinted<R: Rng>(rng: &mut R, level: f64) -> [f64; 3] {
    [0, 1, 2].map(|_| level + rng.random_range(-0.05..0.05))
}

/// Renders one `size x size` image of `class`.
pub fn render<R: Rng>(class: usize, size: usize, rng: &mut R) -> Image {
    let s = size as f64;
    let bg = rng.random_range(0.3..0.5);
    let (c0, c1) = (tinted(rng, bg - 0.08), tinted(rng, bg + 0.08));
    let angle = rng.random_range(0.0..2.0 * PI);
    let (ga, gb) = (angle.cos(), angle.sin());
    let mut px: Vec<[f64; 3]> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 / s - 0.5, (i / size) as f64 / s - 0.5);
            let t = (x * ga + y * gb + 0.71) / 1.42;
            [0, 1, 2].map(|k| c0[k] * (1.0 - t) + c1[k] * t)
        })
        .collect();
    for _ in 0..rng.random_range(3..7) {
        let level = rng.random_range(0.2..0.7);
        let color = tinted(rng, level);
        let (w, h) = (rng.random_range(4.0..0.14 * s), rng.random_range(4.0..0.14 * s));
        let (x0, y0) = (rng.random_range(0.0..s - w), rng.random_range(0.0..s - h));
        for y in y0 as usize..(y0 + h) as usize {
            for x in x0 as usize..(x0 + w) as usize {
                px[y * size + x] = color;
            }
        }
    }
    let (light, dark) = (rng.random_range(0.75..0.95), rng.random_range(0.05..0.25));
    let (fg, fg2) = if rng.random_bool(0.5) {
        (tinted(rng, light), tinted(rng, dark))
    } else {
        (tinted(rng, dark), tinted(rng, light))
    };
    let r = rng.random_range(0.26..0.42) * s;
    let (cx, cy) = (rng.random_range(r..s - r), rng.random_range(r..s - r));
    let rot = rng.random_range(0.0..2.0 * PI);
    let (cr, sr) = (rot.cos(), rot.sin());
    // 3 x 3 supersampling for smooth edges.
    const SUB: usize = 3;
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0; 3];
            let mut hits = 0;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let dx = x as f64 + (sx as f64 + 0.5) / SUB as f64 - cx;
                    let dy = y as f64 + (sy as f64 + 0.5) / SUB as f64 - cy;
                    let (u, v) = ((cr * dx + sr * dy) / r, (-sr * dx + cr * dy) / r);
                    if let Some(first) = coverage(class, u, v) {
                        let c = if first { fg } else { fg2 };
                        (0..3).for_each(|k| acc[k] += c[k]);
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let p = &mut px[y * size + x];
                let a = hits as f64 / (SUB * SUB) as f64;
                for k in 0..3 {
                    p[k] = p[k] * (1.0 - a) + acc[k] / hits as f64 * a;
                }
            }
        }
    }
    let data = px
        .into_iter()
        .flat_map(|p| p.map(|v| (v + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0) as f32))
        .collect();
    Image::new(size, size, data).expect("size matches buffer")
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub train_dir: PathBuf,
    pub val_dir: PathBuf,
    pub num_train: usize,
    pub num_val: usize,
    pub config: SynthConfig,
}

/// Writes `train/` and `val/` class folders of PNG files under `out`.
pub fn write_dataset(out: &Path, cfg: &SynthConfig) -> Result<SynthSummary> {
    if cfg.size < 16 {
        return Err(Error::Config("synthetic images need at least 16 pixels".into()));
    }
    let splits = [("train", cfg.train_per_class, 0u64), ("val", cfg.val_per_class, 1u64)];
    for (split, per_class, split_id) in splits {
        for (class, name) in CLASSES.iter().enumerate() {
            let dir = out.join(split).join(format!("{class:02}-{name}"));
            std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
            for i in 0..per_class {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream((split_id << 48) | ((class as u64) << 32) | i as u64);
                let img = render(class, cfg.size, &mut rng);
                save_png(&dir.join(format!("{i:05}.png")), &img)?;
            }
        }
    }
    Ok(SynthSummary {
        train_dir: out.join("train"),
        val_dir: out.join("val"),
        num_train: cfg.train_per_class * CLASSES.len(),
        num_val: cfg.val_per_class * CLASSES.len(),
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coverage_examples() {
        assert_eq!(coverage(0, 0.0, 0.0), Some(true));
        assert_eq!(coverage(0, 0.8, 0.8), None);
        assert_eq!(coverage(0, 0.3, 0.0), Some(false));
        assert_eq!(coverage(2, 0.0, 0.99), Some(true));
        assert_eq!(coverage(2, 0.5, 0.5), None);
        assert_eq!(coverage(2, 0.0, -0.6), None);
        assert_eq!(coverage(3, 0.9, 0.0), Some(true));
        assert_eq!(coverage(3, 0.9, 0.9), None);
        assert_eq!(coverage(5, 0.0, 0.0), None);
        assert_eq!(coverage(8, 0.6, 0.6), None);
        assert!(coverage(4, 0.1, 0.1).is_some() && coverage(4, 0.5, 0.1) != coverage(4, 0.1, 0.1));
        assert_eq!(coverage(9, 0.0, 0.0), None);
    }

    #[test]
    fn rendering_is_seeded() {
        let a = render(3, 32, &mut ChaCha8Rng::seed_from_u64(5));
        let b = render(3, 32, &mut ChaCha8Rng::seed_from_u64(5));
        let c = render(3, 32, &mut ChaCha8Rng::seed_from_u64(6));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
