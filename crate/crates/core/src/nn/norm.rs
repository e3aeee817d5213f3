use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use super::{ParamId, ParamSet, Pass, Registry};
use crate::error::shape_err;
use crate::{Real, Result, Tensor};

const EPS: f64 = 1e-5;
const STATS_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over `(N, H, W)` with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

/// What the backward pass needs from a batch-statistics forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<F> {
    xhat: Tensor<F>,
    inv_std: Vec<F>,
}

impl BatchNorm2d {
    pub fn new<F: Real, R: Rng + ?Sized>(reg: &mut Registry<'_, F, R>, name: &str, channels: usize, gamma: f64) -> Self {
        BatchNorm2d {
            weight: reg.constant(format!("{name}.weight"), &[channels], gamma),
            bias: reg.constant(format!("{name}.bias"), &[channels], 0.0),
            running_mean: reg.stat(format!("{name}.running_mean"), &[channels], 0.0),
            running_var: reg.stat(format!("{name}.running_var"), &[channels], 1.0),
            channels,
        }
    }

    pub fn forward<F: Real>(
        &self,
        params: &ParamSet<F>,
        stats: &mut ParamSet<F>,
        x: &Tensor<F>,
        pass: Pass,
    ) -> Result<(Tensor<F>, Option<BnCache<F>>)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(shape_err!("batch norm expects {} channels, got {c}", self.channels));
        }
        let hw = h * w;
        let gamma = params.get(self.weight).data();
        let beta = params.get(self.bias).data();
        let mut y = Tensor::zeros(x.shape());
        let xd = x.data();
        if !pass.batch_stats() {
            let mean = stats.get(self.running_mean).data();
            let var = stats.get(self.running_var).data();
            let yd = y.data_mut();
            for ch in 0..c {
                let inv = F::one() / Float::sqrt(var[ch] + F::lit(EPS));
                let (scale, shift) = (gamma[ch] * inv, beta[ch] - gamma[ch] * inv * mean[ch]);
                for b in 0..n {
                    let o = (b * c + ch) * hw;
                    for (yv, &xv) in yd[o..o + hw].iter_mut().zip(&xd[o..o + hw]) {
                        *yv = xv * scale + shift;
                    }
                }
            }
            return Ok((y, None));
        }

        let count = n * hw;
        let m = F::of(count);
        let mut means = vec![F::zero(); c];
        let mut vars = vec![F::zero(); c];
        for ch in 0..c {
            let mut s = F::zero();
            for b in 0..n {
                let o = (b * c + ch) * hw;
                s += xd[o..o + hw].iter().copied().sum::<F>();
            }
            let mean = s / m;
            let mut v = F::zero();
            for b in 0..n {
                let o = (b * c + ch) * hw;
                v += xd[o..o + hw].iter().map(|&t| (t - mean) * (t - mean)).sum::<F>();
            }
            means[ch] = mean;
            vars[ch] = v / m;
        }
        let inv_std: Vec<F> = vars.iter().map(|&v| F::one() / Float::sqrt(v + F::lit(EPS))).collect();
        let mut xhat = if pass.record() { Some(Tensor::zeros(x.shape())) } else { None };
        {
            let yd = y.data_mut();
            for ch in 0..c {
                for b in 0..n {
                    let o = (b * c + ch) * hw;
                    for i in o..o + hw {
                        let xh = (xd[i] - means[ch]) * inv_std[ch];
                        if let Some(t) = xhat.as_mut() {
                            t.data_mut()[i] = xh;
                        }
                        yd[i] = gamma[ch] * xh + beta[ch];
                    }
                }
            }
        }
        if pass.update_stats() {
            let mom = F::lit(STATS_MOMENTUM);
            let unbias = if count > 1 { m / F::of(count - 1) } else { F::one() };
            let rm = stats.get_mut(self.running_mean).data_mut();
            for (r, &mu) in rm.iter_mut().zip(&means) {
                *r = (F::one() - mom) * *r + mom * mu;
            }
            let rv = stats.get_mut(self.running_var).data_mut();
            for (r, &v) in rv.iter_mut().zip(&vars) {
                *r = (F::one() - mom) * *r + mom * v * unbias;
            }
        }
        Ok((y, xhat.map(|xhat| BnCache { xhat, inv_std })))
    }

    /// Backward through a batch-statistics forward pass.
    pub fn backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        cache: &BnCache<F>,
        dy: &Tensor<F>,
        grads: &mut ParamSet<F>,
    ) -> Result<Tensor<F>> {
        let (n, c, h, w) = dy.dims4()?;
        if dy.shape() != cache.xhat.shape() {
            return Err(shape_err!("batch norm backward: {:?} vs {:?}", dy.shape(), cache.xhat.shape()));
        }
        let hw = h * w;
        let m = F::of(n * hw);
        let gamma = params.get(self.weight).data();
        let (dyd, xh) = (dy.data(), cache.xhat.data());
        let mut dgamma = vec![F::zero(); c];
        let mut dbeta = vec![F::zero(); c];
        for ch in 0..c {
            for b in 0..n {
                let o = (b * c + ch) * hw;
                for i in o..o + hw {
                    dgamma[ch] += dyd[i] * xh[i];
                    dbeta[ch] += dyd[i];
                }
            }
        }
        let mut dx = Tensor::zeros(dy.shape());
        let dxd = dx.data_mut();
        for ch in 0..c {
            let k = gamma[ch] * cache.inv_std[ch] / m;
            for b in 0..n {
                let o = (b * c + ch) * hw;
                for i in o..o + hw {
                    dxd[i] = k * (m * dyd[i] - dbeta[ch] - xh[i] * dgamma[ch]);
                }
            }
        }
        for (g, d) in grads.get_mut(self.weight).data_mut().iter_mut().zip(&dgamma) {
            *g += *d;
        }
        for (g, d) in grads.get_mut(self.bias).data_mut().iter_mut().zip(&dbeta) {
            *g += *d;
        }
        Ok(dx)
    }
}
