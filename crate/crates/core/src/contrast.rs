//! Negative assembly (inter-/intra-image) and the InfoNCE loss.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::shape_err;
use crate::{Error, Real, Result, Tensor};

/// Which key-box embeddings serve as negatives for a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NegativeConfig {
    /// Negative boxes of every other image in the batch (`K1 = M (N - 1)`).
    pub use_inter: bool,
    /// The query image's own negative boxes (`K2 = M`).
    pub use_intra: bool,
}

impl Default for NegativeConfig {
    fn default() -> Self {
        NegativeConfig { use_inter: true, use_intra: false }
    }
}

impl NegativeConfig {
    pub fn inter() -> Self {
        Self::default()
    }

    pub fn intra() -> Self {
        NegativeConfig { use_inter: false, use_intra: true }
    }

    pub fn both() -> Self {
        NegativeConfig { use_inter: true, use_intra: true }
    }

    pub fn validate(&self, batch: usize) -> Result<()> {
        if !self.use_inter && !self.use_intra {
            return Err(Error::Config("at least one of inter/intra negatives must be enabled".into()));
        }
        if self.use_inter && batch < 2 {
            return Err(Error::Config(alloc::format!("inter-image negatives need at least 2 images, got {batch}")));
        }
        Ok(())
    }

    /// Negatives per query for `n` images with `m` negative boxes each.
    pub fn count(&self, n: usize, m: usize) -> usize {
        let inter = if self.use_inter { m * n.saturating_sub(1) } else { 0 };
        let intra = if self.use_intra { m } else { 0 };
        inter + intra
    }
}

/// Builds the `[N, K, d]` negative set from `[N, 1 + M, d]` key embeddings
/// (index 0 is each image's positive). Inter negatives come first, ordered by
/// image then box; intra negatives follow.
pub fn assemble_negatives<F: Real>(keys: &Tensor<F>, cfg: &NegativeConfig) -> Result<Tensor<F>> {
    let (n, m1, d) = match *keys.shape() {
        [n, m1, d] if m1 >= 2 => (n, m1, d),
        _ => return Err(shape_err!("keys must be [N, 1 + M, d] with M >= 1, got {:?}", keys.shape())),
    };
    cfg.validate(n)?;
    let m = m1 - 1;
    let k = cfg.count(n, m);
    let mut out = Vec::with_capacity(n * k * d);
    let negs_of = |j: usize| &keys.item(j)[d..];
    for i in 0..n {
        if cfg.use_inter {
            for j in (0..n).filter(|&j| j != i) {
                out.extend_from_slice(negs_of(j));
            }
        }
        if cfg.use_intra {
            out.extend_from_slice(negs_of(i));
        }
    }
    Tensor::from_vec(&[n, k, d], out)
}

/// Result of [`info_nce_loss`].
#[derive(Debug, Clone)]
pub struct LossOutput<F> {
    /// Batch mean.
    pub loss: F,
    pub per_sample: Vec<F>,
    /// `[N, 1 + K]` similarities divided by the temperature, positive first.
    pub logits: Tensor<F>,
    /// Gradient of `loss` with respect to `q`.
    pub grad_q: Tensor<F>,
}

impl<F: Real> LossOutput<F> {
    /// Fraction of queries whose positive has the largest logit.
    pub fn top1_accuracy(&self) -> f64 {
        top1_accuracy(&self.logits)
    }
}

pub fn top1_accuracy<F: Real>(logits: &Tensor<F>) -> f64 {
    let Ok((n, k1)) = logits.dims2() else { return 0.0 };
    if n == 0 {
        return 0.0;
    }
    let hits = logits
        .data()
        .chunks_exact(k1)
        .filter(|row| row[1..].iter().all(|&v| v < row[0]))
        .count();
    hits as f64 / n as f64
}

/// Cross-entropy over `[q.k+, q.neg_1, ..., q.neg_K] / tau` with the positive
/// at index 0, averaged over the batch.
///
/// `q`: `[N, d]`, `k_pos`: `[N, d]`, `negs`: `[N, K, d]`.
pub fn info_nce_loss<F: Real>(q: &Tensor<F>, k_pos: &Tensor<F>, negs: &Tensor<F>, tau: F) -> Result<LossOutput<F>> {
    let (n, d) = q.dims2()?;
    if k_pos.shape() != [n, d] {
        return Err(shape_err!("positive keys {:?} vs queries {:?}", k_pos.shape(), q.shape()));
    }
    let k = match *negs.shape() {
        [nn, k, dd] if nn == n && dd == d => k,
        _ => return Err(shape_err!("negatives {:?} vs queries {:?}", negs.shape(), q.shape())),
    };
    if !(tau > F::zero()) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let dot = |a: &[F], b: &[F]| a.iter().zip(b).map(|(&x, &y)| x * y).sum::<F>();
    let inv_n = F::one() / F::of(n);
    let mut logits = Tensor::zeros(&[n, k + 1]);
    let mut grad_q = Tensor::zeros(&[n, d]);
    let mut per_sample = Vec::with_capacity(n);
    let mut probs = vec![F::zero(); k + 1];
    for i in 0..n {
        let qi = q.item(i);
        let pos = k_pos.item(i);
        let neg = negs.item(i);
        let row = logits.item_mut(i);
        row[0] = dot(qi, pos) / tau;
        for j in 0..k {
            row[j + 1] = dot(qi, &neg[j * d..(j + 1) * d]) / tau;
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { step: 0 });
        }
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut z = F::zero();
        for (p, &l) in probs.iter_mut().zip(row.iter()) {
            *p = Float::exp(l - max);
            z += *p;
        }
        per_sample.push(max + Float::ln(z) - row[0]);
        probs.iter_mut().for_each(|p| *p /= z);
        // dL_i/dq = (sum_j p_j k_j - k+) / tau
        let g = grad_q.item_mut(i);
        let scale = inv_n / tau;
        for c in 0..d {
            let mut acc = (probs[0] - F::one()) * pos[c];
            for j in 0..k {
                acc += probs[j + 1] * neg[j * d + c];
            }
            g[c] = acc * scale;
        }
    }
    let loss = per_sample.iter().copied().sum::<F>() * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    Ok(LossOutput { loss, per_sample, logits, grad_q })
}
