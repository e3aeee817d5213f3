//! Photometric augmentation following the MoCo v2 recipe: color jitter,
//! random grayscale, Gaussian blur, then per-channel normalization.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;

use super::image::Image;
use crate::{Real, Tensor};

/// ImageNet channel statistics.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    /// Blur sigma range in pixels of a 224-pixel view; scaled with the view.
    pub blur_sigma: [f64; 2],
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: [0.1, 2.0],
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl AugmentConfig {
    /// Geometry-only augmentation: no color, no blur.
    pub fn none() -> Self {
        AugmentConfig {
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            ..Self::default()
        }
    }
}

fn luma(p: &[f32]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn blend(img: &mut Image, factor: f32, other: impl Fn(&[f32], usize) -> f32) {
    for px in img.data_mut().chunks_exact_mut(3) {
        let o: [f32; 3] = core::array::from_fn(|k| other(px, k));
        for k in 0..3 {
            px[k] = (factor * px[k] + (1.0 - factor) * o[k]).clamp(0.0, 1.0);
        }
    }
}

fn adjust_hue(img: &mut Image, shift: f32) {
    for px in img.data_mut().chunks_exact_mut(3) {
        let (r, g, b) = (px[0], px[1], px[2]);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let delta = max - min;
        if delta <= 0.0 {
            continue;
        }
        let s = delta / max;
        let sector6 = if max == r {
            (g - b) / delta
        } else if max == g {
            2.0 + (b - r) / delta
        } else {
            4.0 + (r - g) / delta
        };
        let mut h = sector6 / 6.0 + shift;
        h -= Float::floor(h);
        let v = max;
        let h6 = h * 6.0;
        let sector = Float::floor(h6);
        let f = h6 - sector;
        let p = v * (1.0 - s);
        let q = v * (1.0 - s * f);
        let t = v * (1.0 - s * (1.0 - f));
        let (nr, ng, nb) = match sector as i32 % 6 {
            0 => (v, t, p),
            1 => (q, v, p),
            2 => (p, v, t),
            3 => (p, q, v),
            4 => (t, p, v),
            _ => (v, p, q),
        };
        px[0] = nr;
        px[1] = ng;
        px[2] = nb;
    }
}

/// Brightness, contrast, saturation and hue jitter in random order.
pub fn color_jitter<R: Rng + ?Sized>(img: &mut Image, cfg: &AugmentConfig, rng: &mut R) {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    for op in order {
        match op {
            0 if cfg.brightness > 0.0 => {
                let f = rng.random_range(1.0 - cfg.brightness..=1.0 + cfg.brightness);
                blend(img, f, |_, _| 0.0);
            }
            1 if cfg.contrast > 0.0 => {
                let f = rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast);
                let n = (img.width() * img.height()) as f32;
                let mean = img.data().chunks_exact(3).map(luma).sum::<f32>() / n;
                blend(img, f, |_, _| mean);
            }
            2 if cfg.saturation > 0.0 => {
                let f = rng.random_range(1.0 - cfg.saturation..=1.0 + cfg.saturation);
                blend(img, f, |px, _| luma(px));
            }
            3 if cfg.hue > 0.0 => {
                let shift = rng.random_range(-cfg.hue..=cfg.hue);
                adjust_hue(img, shift);
            }
            _ => {}
        }
    }
}

pub fn grayscale(img: &mut Image) {
    for px in img.data_mut().chunks_exact_mut(3) {
        let l = luma(px);
        px.fill(l);
    }
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(img: &mut Image, sigma: f64) {
    let radius = Float::ceil(3.0 * sigma).max(1.0) as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| Float::exp(-((i * i) as f64) / (2.0 * sigma * sigma)) as f32)
        .collect();
    let norm: f32 = kernel.iter().sum();
    let (w, h) = (img.width() as isize, img.height() as isize);
    let reflect = |i: isize, n: isize| -> usize {
        let mut i = i;
        if n == 1 {
            return 0;
        }
        loop {
            if i < 0 {
                i = -i;
            } else if i >= n {
                i = 2 * (n - 1) - i;
            } else {
                return i as usize;
            }
        }
    };
    let src = img.data().to_vec();
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = reflect(x + ki as isize - radius, w);
                let o = (y as usize * w as usize + sx) * 3;
                for c in 0..3 {
                    acc[c] += kv * src[o + c];
                }
            }
            let o = (y as usize * w as usize + x as usize) * 3;
            for c in 0..3 {
                tmp[o + c] = acc[c] / norm;
            }
        }
    }
    let out = img.data_mut();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = reflect(y + ki as isize - radius, h);
                let o = (sy * w as usize + x as usize) * 3;
                for c in 0..3 {
                    acc[c] += kv * tmp[o + c];
                }
            }
            let o = (y as usize * w as usize + x as usize) * 3;
            for c in 0..3 {
                out[o + c] = acc[c] / norm;
            }
        }
    }
}

/// Applies the random photometric pipeline in place.
pub fn photometric<R: Rng + ?Sized>(img: &mut Image, cfg: &AugmentConfig, rng: &mut R) {
    if rng.random_bool(cfg.jitter_prob.clamp(0.0, 1.0)) {
        color_jitter(img, cfg, rng);
    }
    if rng.random_bool(cfg.grayscale_prob.clamp(0.0, 1.0)) {
        grayscale(img);
    }
    if rng.random_bool(cfg.blur_prob.clamp(0.0, 1.0)) {
        let scale = img.width() as f64 / 224.0;
        let [lo, hi] = cfg.blur_sigma;
        let sigma = if hi > lo { rng.random_range(lo..hi) } else { lo } * scale;
        if sigma > 1e-3 {
            gaussian_blur(img, sigma);
        }
    }
}

/// Normalizes per channel and converts to a `[3, H, W]` tensor.
pub fn to_tensor<F: Real>(img: &Image, mean: &[f32; 3], std: &[f32; 3]) -> Tensor<F> {
    let (w, h) = (img.width(), img.height());
    let mut out = Tensor::zeros(&[3, h, w]);
    let dst = out.data_mut();
    for (p, px) in img.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            dst[c * h * w + p] = F::lit(((px[c] - mean[c]) / std[c]) as f64);
        }
    }
    out
}
