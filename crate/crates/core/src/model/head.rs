use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::nn::{relu_backward, relu_in_place, Linear, ParamSet, Registry};
use crate::{Real, Result, Tensor};

/// Two-layer MLP projection head (`C_b → hidden → d`, ReLU between).
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct HeadCache<F> {
    input: Tensor<F>,
    hidden: Tensor<F>,
}

impl ProjectionHead {
    pub fn new<F: Real, R: Rng + ?Sized>(reg: &mut Registry<'_, F, R>, input: usize, hidden: usize, out: usize) -> Self {
        ProjectionHead { fc1: Linear::new(reg, "head.fc1", input, hidden), fc2: Linear::new(reg, "head.fc2", hidden, out) }
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.fan_out
    }

    pub fn forward<F: Real>(&self, params: &ParamSet<F>, x: &Tensor<F>) -> Result<(Tensor<F>, HeadCache<F>)> {
        let mut hidden = self.fc1.forward(params, x)?;
        relu_in_place(&mut hidden);
        let y = self.fc2.forward(params, &hidden)?;
        Ok((y, HeadCache { input: x.clone(), hidden }))
    }

    pub fn backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        cache: &HeadCache<F>,
        dy: &Tensor<F>,
        grads: &mut ParamSet<F>,
    ) -> Result<Tensor<F>> {
        let dh = self.fc2.backward(params, &cache.hidden, dy, grads)?;
        let dh = relu_backward(&cache.hidden, &dh);
        self.fc1.backward(params, &cache.input, &dh, grads)
    }
}

/// Row-wise L2 normalization; returns the unit rows and the original norms.
pub fn l2_normalize<F: Real>(z: &Tensor<F>) -> Result<(Tensor<F>, Vec<F>)> {
    let (_, d) = z.dims2()?;
    let mut y = z.clone();
    let mut norms = Vec::with_capacity(z.len() / d.max(1));
    for row in y.data_mut().chunks_exact_mut(d) {
        let n = Float::sqrt(row.iter().map(|&v| v * v).sum::<F>()).max(F::lit(1e-12));
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((y, norms))
}

/// `dz = (dy - y (y . dy)) / |z|`.
pub fn l2_normalize_backward<F: Real>(y: &Tensor<F>, norms: &[F], dy: &Tensor<F>) -> Result<Tensor<F>> {
    let (_, d) = y.dims2()?;
    let mut dz = dy.clone();
    for ((row, yr), &n) in dz.data_mut().chunks_exact_mut(d).zip(y.data().chunks_exact(d)).zip(norms) {
        let dot: F = row.iter().zip(yr).map(|(&a, &b)| a * b).sum();
        for (g, &yv) in row.iter_mut().zip(yr) {
            *g = (*g - yv * dot) / n;
        }
    }
    Ok(dz)
}
