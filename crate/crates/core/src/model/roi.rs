//! RoI align: fixed-size bilinear pooling of box regions on a feature map.
//!
//! Pixel coordinates are mapped to feature coordinates with the pixel-center
//! convention, `u = x / stride - 0.5`, so feature cell `i` sits at the center
//! of the pixels it summarizes. Each of the `P x P` output cells averages a
//! `g x g` grid of bilinear samples. Samples farther than one cell outside the
//! map contribute zero; samples within one cell of the border are clamped to
//! it.

use alloc::vec::Vec;

use num_traits::Float;

use crate::error::shape_err;
use crate::geometry::BBox;
use crate::{Error, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiAlignConfig {
    /// Output resolution `P`.
    pub output_size: usize,
    /// Samples per output cell along each axis.
    pub sampling_ratio: usize,
    /// Pixels per feature cell.
    pub stride: f64,
}

impl RoiAlignConfig {
    pub fn new(stride: f64) -> Self {
        RoiAlignConfig { output_size: 7, sampling_ratio: 2, stride }
    }
}

/// A box on one image of the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roi {
    pub batch_index: usize,
    pub bbox: BBox,
}

/// Bilinear weights of one sample point: up to four `(cell, weight)` taps.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let empty = [(0, 0.0); 4];
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return empty;
    }
    let (mut y, mut x) = (y.max(0.0), x.max(0.0));
    let mut y0 = Float::floor(y) as usize;
    let mut x0 = Float::floor(x) as usize;
    let y1 = if y0 >= h - 1 {
        y0 = h - 1;
        y = y0 as f64;
        y0
    } else {
        y0 + 1
    };
    let x1 = if x0 >= w - 1 {
        x0 = w - 1;
        x = x0 as f64;
        x0
    } else {
        x0 + 1
    };
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    [(y0 * w + x0, hy * hx), (y0 * w + x1, hy * lx), (y1 * w + x0, ly * hx), (y1 * w + x1, ly * lx)]
}

/// Per-box pooling weights for maps of a given size. Each box gets a dense
/// `[H * W, P * P]` matrix (bilinear taps with the sample averaging folded
/// in), so pooling one box is a single small matrix product.
#[derive(Debug, Clone)]
pub struct RoiPlan {
    rois: Vec<Roi>,
    bins: usize,
    weights: Vec<f64>,
    map: [usize; 4],
}

impl RoiPlan {
    pub fn new(map_shape: &[usize], rois: &[Roi], cfg: &RoiAlignConfig) -> Result<Self> {
        let [n, c, h, w] = match *map_shape {
            [n, c, h, w] => [n, c, h, w],
            _ => return Err(shape_err!("roi align expects a 4-d map, got {map_shape:?}")),
        };
        let (p, g) = (cfg.output_size, cfg.sampling_ratio.max(1));
        let bins = p * p;
        let mut weights = alloc::vec![0.0; rois.len() * h * w * bins];
        let inv = 1.0 / (g * g) as f64;
        for (r, roi) in rois.iter().enumerate() {
            if roi.batch_index >= n {
                return Err(shape_err!("roi batch index {} out of range {n}", roi.batch_index));
            }
            let b = &roi.bbox;
            let (rw, rh) = (b.width() / cfg.stride, b.height() / cfg.stride);
            if !(rw >= 1e-6 && rh >= 1e-6) || !b.is_valid() {
                return Err(Error::DegenerateBox(alloc::format!("{:?} at stride {}", b, cfg.stride)));
            }
            let wr = &mut weights[r * h * w * bins..(r + 1) * h * w * bins];
            let (x0, y0) = (b.x1 / cfg.stride - 0.5, b.y1 / cfg.stride - 0.5);
            let (bin_w, bin_h) = (rw / p as f64, rh / p as f64);
            for py in 0..p {
                for px in 0..p {
                    let bin = py * p + px;
                    for iy in 0..g {
                        let y = y0 + py as f64 * bin_h + (iy as f64 + 0.5) * bin_h / g as f64;
                        for ix in 0..g {
                            let x = x0 + px as f64 * bin_w + (ix as f64 + 0.5) * bin_w / g as f64;
                            for (cell, wt) in bilinear_taps(y, x, h, w) {
                                wr[cell * bins + bin] += wt * inv;
                            }
                        }
                    }
                }
            }
        }
        Ok(RoiPlan { rois: rois.to_vec(), bins, weights, map: [n, c, h, w] })
    }

    fn weights<F: Real>(&self) -> Vec<F> {
        self.weights.iter().map(|&v| F::lit(v)).collect()
    }

    /// `[R, C, P, P]` pooled features.
    pub fn forward<F: Real>(&self, features: &Tensor<F>) -> Result<Tensor<F>> {
        if features.shape() != self.map {
            return Err(shape_err!("roi plan built for {:?}, got {:?}", self.map, features.shape()));
        }
        let [_, c, h, w] = self.map;
        let (hw, bins) = (h * w, self.bins);
        let p = Float::sqrt(bins as f64) as usize;
        let mut out = Tensor::zeros(&[self.rois.len(), c, p, p]);
        let wts = self.weights::<F>();
        let od = out.data_mut();
        for (r, roi) in self.rois.iter().enumerate() {
            let plane = features.item(roi.batch_index);
            let wr = &wts[r * hw * bins..(r + 1) * hw * bins];
            F::gemm(false, false, c, bins, hw, F::one(), plane, wr, F::zero(), &mut od[r * c * bins..(r + 1) * c * bins]);
        }
        Ok(out)
    }

    /// Gradient with respect to the feature map.
    pub fn backward<F: Real>(&self, dy: &Tensor<F>) -> Result<Tensor<F>> {
        let [n, c, h, w] = self.map;
        let (hw, bins) = (h * w, self.bins);
        if dy.len() != self.rois.len() * c * bins {
            return Err(shape_err!("roi align backward: gradient shape {:?}", dy.shape()));
        }
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        let wts = self.weights::<F>();
        for (r, roi) in self.rois.iter().enumerate() {
            let b = roi.batch_index;
            let wr = &wts[r * hw * bins..(r + 1) * hw * bins];
            let dyr = &dy.data()[r * c * bins..(r + 1) * c * bins];
            let dst = &mut dx.data_mut()[b * c * hw..(b + 1) * c * hw];
            F::gemm(false, true, c, hw, bins, F::one(), dyr, wr, F::one(), dst);
        }
        Ok(dx)
    }
}

/// One-shot RoI align, `[R, C, P, P]`.
pub fn roi_align<F: Real>(features: &Tensor<F>, rois: &[Roi], cfg: &RoiAlignConfig) -> Result<Tensor<F>> {
    RoiPlan::new(features.shape(), rois, cfg)?.forward(features)
}

/// Mean over the `P x P` cells: `[R, C, P, P]` to `[R, C]`.
pub fn pool_cells<F: Real>(cells: &Tensor<F>) -> Result<Tensor<F>> {
    crate::nn::global_avg_pool(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent interpolant: zero outside `[-1, n]`, border-clamped inside,
    /// bilinear between the four neighbouring cells.
    fn oracle_value(map: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
        if !(-1.0..=h as f64).contains(&y) || !(-1.0..=w as f64).contains(&x) {
            return 0.0;
        }
        let yc = y.clamp(0.0, (h - 1) as f64);
        let xc = x.clamp(0.0, (w - 1) as f64);
        let (ya, xa) = (yc.floor(), xc.floor());
        let (yb, xb) = ((ya + 1.0).min((h - 1) as f64), (xa + 1.0).min((w - 1) as f64));
        let at = |yy: f64, xx: f64| map[yy as usize * w + xx as usize];
        let (ty, tx) = (yc - ya, xc - xa);
        (1.0 - ty) * ((1.0 - tx) * at(ya, xa) + tx * at(ya, xb)) + ty * ((1.0 - tx) * at(yb, xa) + tx * at(yb, xb))
    }

    fn oracle_cell(map: &[f64], h: usize, w: usize, b: &BBox, stride: f64, p: usize, g: usize, py: usize, px: usize) -> f64 {
        let (x0, y0) = (b.x1 / stride - 0.5, b.y1 / stride - 0.5);
        let (bw, bh) = (b.width() / stride / p as f64, b.height() / stride / p as f64);
        let mut s = 0.0;
        for iy in 0..g {
            for ix in 0..g {
                let y = y0 + bh * (py as f64 + (iy as f64 + 0.5) / g as f64);
                let x = x0 + bw * (px as f64 + (ix as f64 + 0.5) / g as f64);
                s += oracle_value(map, h, w, y, x);
            }
        }
        s / (g * g) as f64
    }

    fn random_box(rng: &mut ChaCha8Rng, view: f64) -> BBox {
        let w = rng.random_range(2.0..view * 0.8);
        let h = rng.random_range(2.0..view * 0.8);
        BBox::from_xywh(rng.random_range(-8.0..view - w + 8.0), rng.random_range(-8.0..view - h + 8.0), w, h)
    }

    #[test]
    fn constant_map_gives_constant_cells() {
        let f = Tensor::<f64>::full(&[1, 2, 6, 6], 3.25);
        let cfg = RoiAlignConfig::new(16.0);
        let rois = [Roi { batch_index: 0, bbox: BBox::from_xywh(10.0, 12.0, 50.0, 40.0) }];
        let out = roi_align(&f, &rois, &cfg).unwrap();
        assert_eq!(out.shape(), &[1, 2, 7, 7]);
        assert!(out.data().iter().all(|&v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn linear_ramp_is_reproduced() {
        let (h, w) = (5, 8);
        let f = Tensor::<f64>::from_fn(&[1, 1, h, w], |i| (i % w) as f64);
        let cfg = RoiAlignConfig { output_size: 3, sampling_ratio: 2, stride: 4.0 };
        let b = BBox::from_xywh(6.0, 5.0, 14.0, 9.0);
        let out = roi_align(&f, &[Roi { batch_index: 0, bbox: b }], &cfg).unwrap();
        for py in 0..3 {
            for px in 0..3 {
                let mean_x: f64 = (0..2)
                    .map(|ix| b.x1 / 4.0 - 0.5 + (b.width() / 4.0 / 3.0) * (px as f64 + (ix as f64 + 0.5) / 2.0))
                    .sum::<f64>()
                    / 2.0;
                assert!((out.data()[py * 3 + px] - mean_x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let (n, c) = (2, 3);
            let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
            let stride = [4.0, 8.0, 16.0, 32.0][rng.random_range(0..4)];
            let f = Tensor::<f64>::from_fn(&[n, c, h, w], |_| rng.random_range(-2.0..2.0));
            let cfg = RoiAlignConfig { output_size: rng.random_range(1..8), sampling_ratio: 2, stride };
            let bbox = random_box(&mut rng, w as f64 * stride);
            let roi = Roi { batch_index: rng.random_range(0..n), bbox };
            let out = roi_align(&f, &[roi], &cfg).unwrap();
            let p = cfg.output_size;
            for ch in 0..c {
                let plane = f.item(roi.batch_index)[ch * h * w..(ch + 1) * h * w].to_vec();
                for py in 0..p {
                    for px in 0..p {
                        let want = oracle_cell(&plane, h, w, &bbox, stride, p, 2, py, px);
                        let got = out.data()[(ch * p + py) * p + px];
                        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
                    }
                }
            }
        }
    }

    #[test]
    fn degenerate_box_rejected() {
        let f = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        let roi = Roi { batch_index: 0, bbox: BBox { x1: 1.0, y1: 1.0, x2: 1.0 + 1e-9, y2: 5.0 } };
        assert!(matches!(roi_align(&f, &[roi], &RoiAlignConfig::new(32.0)), Err(Error::DegenerateBox(_))));
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <roi(f), g> == <f, roi^T(g)> for the linear map f -> roi(f)
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::<f64>::from_fn(&[2, 2, 4, 5], |_| rng.random_range(-1.0..1.0));
        let rois = vec![
            Roi { batch_index: 1, bbox: random_box(&mut rng, 80.0) },
            Roi { batch_index: 0, bbox: random_box(&mut rng, 80.0) },
        ];
        let plan = RoiPlan::new(f.shape(), &rois, &RoiAlignConfig::new(16.0)).unwrap();
        let y = plan.forward(&f).unwrap();
        let g = Tensor::<f64>::from_fn(y.shape(), |_| rng.random_range(-1.0..1.0));
        let dx = plan.backward(&g).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = f.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
