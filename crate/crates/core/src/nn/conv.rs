use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{ParamId, ParamSet, Registry};
use crate::error::shape_err;
use crate::{Real, Result, Tensor};

/// Output columns `lo..hi` whose input column `ox * s + kj - pad` lies in
/// `0..w`.
fn valid_cols(kj: usize, s: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if pad > kj { (pad - kj).div_ceil(s) } else { 0 };
    let hi = if w + pad > kj { ((w + pad - kj - 1) / s + 1).min(ow) } else { 0 };
    (lo.min(hi), hi)
}

/// Bias-free 2-d convolution, computed as im2col followed by one GEMM over the
/// whole batch.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Kaiming-normal (fan-out, ReLU gain) initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real, R: Rng + ?Sized>(
        reg: &mut Registry<'_, F, R>,
        name: String,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        zero_init: bool,
    ) -> Self {
        let shape = [cout, cin, kernel, kernel];
        let weight = if zero_init {
            reg.constant(name, &shape, 0.0)
        } else {
            let fan_out = (cout * kernel * kernel) as f64;
            reg.normal(name, &shape, num_traits::Float::sqrt(2.0 / fan_out))
        };
        Conv2d { weight, cin, cout, kernel, stride, pad }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn check_input<F: Real>(&self, x: &Tensor<F>) -> Result<(usize, usize, usize, usize)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.cin {
            return Err(shape_err!("conv expects {} input channels, got {}", self.cin, c));
        }
        if h + 2 * self.pad < self.kernel || w + 2 * self.pad < self.kernel {
            return Err(shape_err!("conv input {h}x{w} smaller than kernel {}", self.kernel));
        }
        Ok((n, c, h, w))
    }

    /// Columns laid out `[cin * k * k, n * oh * ow]`.
    fn im2col<F: Real>(&self, x: &Tensor<F>, n: usize, h: usize, w: usize) -> Vec<F> {
        let (oh, ow) = self.out_size(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let cols = n * oh * ow;
        let mut col = vec![F::zero(); self.cin * k * k * cols];
        let xd = x.data();
        for b in 0..n {
            for ci in 0..self.cin {
                let plane = &xd[(b * self.cin + ci) * h * w..(b * self.cin + ci + 1) * h * w];
                for ki in 0..k {
                    for kj in 0..k {
                        let row = (ci * k + ki) * k + kj;
                        let dst = &mut col[row * cols + b * oh * ow..row * cols + (b + 1) * oh * ow];
                        for oy in 0..oh {
                            let iy = (oy * s) as isize - p + ki as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                            let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                            let (lo, hi) = valid_cols(kj, s, self.pad, w, ow);
                            let first = lo * s + kj - self.pad;
                            if s == 1 {
                                out_row[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                            } else {
                                for (o, &v) in out_row[lo..hi].iter_mut().zip(src_row[first..].iter().step_by(s)) {
                                    *o = v;
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<F: Real>(&self, col: &[F], n: usize, h: usize, w: usize) -> Tensor<F> {
        let (oh, ow) = self.out_size(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let cols = n * oh * ow;
        let mut dx = Tensor::zeros(&[n, self.cin, h, w]);
        let xd = dx.data_mut();
        for b in 0..n {
            for ci in 0..self.cin {
                let plane = &mut xd[(b * self.cin + ci) * h * w..(b * self.cin + ci + 1) * h * w];
                for ki in 0..k {
                    for kj in 0..k {
                        let row = (ci * k + ki) * k + kj;
                        let src = &col[row * cols + b * oh * ow..row * cols + (b + 1) * oh * ow];
                        for oy in 0..oh {
                            let iy = (oy * s) as isize - p + ki as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                            let (lo, hi) = valid_cols(kj, s, self.pad, w, ow);
                            let first = lo * s + kj - self.pad;
                            for (d, &v) in dst_row[first..].iter_mut().step_by(s).zip(&src[oy * ow + lo..oy * ow + hi]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// NCHW batch to channel-major `[c, n * hw]`.
    fn to_channel_major<F: Real>(data: &[F], n: usize, c: usize, hw: usize) -> Vec<F> {
        let mut out = vec![F::zero(); data.len()];
        for b in 0..n {
            for ch in 0..c {
                out[ch * n * hw + b * hw..ch * n * hw + (b + 1) * hw]
                    .copy_from_slice(&data[(b * c + ch) * hw..(b * c + ch + 1) * hw]);
            }
        }
        out
    }

    fn from_channel_major<F: Real>(data: &[F], n: usize, c: usize, hw: usize) -> Vec<F> {
        let mut out = vec![F::zero(); data.len()];
        for b in 0..n {
            for ch in 0..c {
                out[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .copy_from_slice(&data[ch * n * hw + b * hw..ch * n * hw + (b + 1) * hw]);
            }
        }
        out
    }

    fn columns<F: Real>(&self, x: &Tensor<F>, n: usize, h: usize, w: usize) -> Vec<F> {
        if self.is_pointwise() {
            Self::to_channel_major(x.data(), n, self.cin, h * w)
        } else {
            self.im2col(x, n, h, w)
        }
    }

    pub fn forward<F: Real>(&self, params: &ParamSet<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (n, _, h, w) = self.check_input(x)?;
        let (oh, ow) = self.out_size(h, w);
        let kk = self.cin * self.kernel * self.kernel;
        let cols = n * oh * ow;
        let col = self.columns(x, n, h, w);
        let mut y = vec![F::zero(); self.cout * cols];
        F::gemm(false, false, self.cout, cols, kk, F::one(), params.get(self.weight).data(), &col, F::zero(), &mut y);
        Tensor::from_vec(&[n, self.cout, oh, ow], Self::from_channel_major(&y, n, self.cout, oh * ow))
    }

    /// Accumulates the weight gradient into `grads` and returns the input
    /// gradient when `need_dx` is set.
    pub fn backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        x: &Tensor<F>,
        dy: &Tensor<F>,
        grads: &mut ParamSet<F>,
        need_dx: bool,
    ) -> Result<Option<Tensor<F>>> {
        let (n, _, h, w) = self.check_input(x)?;
        let (oh, ow) = self.out_size(h, w);
        if dy.shape() != [n, self.cout, oh, ow] {
            return Err(shape_err!("conv backward: dy {:?} vs expected {:?}", dy.shape(), [n, self.cout, oh, ow]));
        }
        let kk = self.cin * self.kernel * self.kernel;
        let cols = n * oh * ow;
        let col = self.columns(x, n, h, w);
        let dy_cm = Self::to_channel_major(dy.data(), n, self.cout, oh * ow);
        F::gemm(false, true, self.cout, kk, cols, F::one(), &dy_cm, &col, F::one(), grads.get_mut(self.weight).data_mut());
        if !need_dx {
            return Ok(None);
        }
        let mut dcol = col;
        F::gemm(true, false, kk, cols, self.cout, F::one(), params.get(self.weight).data(), &dy_cm, F::zero(), &mut dcol);
        let dx = if self.is_pointwise() {
            Tensor::from_vec(&[n, self.cin, h, w], Self::from_channel_major(&dcol, n, self.cin, h * w))?
        } else {
            self.col2im(&dcol, n, h, w)
        };
        Ok(Some(dx))
    }
}
