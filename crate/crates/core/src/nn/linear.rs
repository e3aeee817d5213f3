use alloc::format;

use num_traits::Float;
use rand::Rng;

use super::{ParamId, ParamSet, Registry};
use crate::error::shape_err;
use crate::{Real, Result, Tensor};

/// Fully connected layer `y = x W^T + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` initialization of weight and bias.
    pub fn new<F: Real, R: Rng + ?Sized>(reg: &mut Registry<'_, F, R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / Float::sqrt(fan_in as f64);
        Linear {
            weight: reg.uniform(format!("{name}.weight"), &[fan_out, fan_in], bound),
            bias: reg.uniform(format!("{name}.bias"), &[fan_out], bound),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<F: Real>(&self, params: &ParamSet<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (rows, cols) = x.dims2()?;
        if cols != self.fan_in {
            return Err(shape_err!("linear expects {} inputs, got {cols}", self.fan_in));
        }
        let mut y = Tensor::zeros(&[rows, self.fan_out]);
        let bias = params.get(self.bias).data();
        for row in y.data_mut().chunks_exact_mut(self.fan_out) {
            row.copy_from_slice(bias);
        }
        F::gemm(false, true, rows, self.fan_out, self.fan_in, F::one(), x.data(), params.get(self.weight).data(), F::one(), y.data_mut());
        Ok(y)
    }

    pub fn backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        x: &Tensor<F>,
        dy: &Tensor<F>,
        grads: &mut ParamSet<F>,
    ) -> Result<Tensor<F>> {
        let (rows, _) = x.dims2()?;
        if dy.shape() != [rows, self.fan_out] {
            return Err(shape_err!("linear backward: dy {:?}", dy.shape()));
        }
        F::gemm(true, false, self.fan_out, self.fan_in, rows, F::one(), dy.data(), x.data(), F::one(), grads.get_mut(self.weight).data_mut());
        let db = grads.get_mut(self.bias).data_mut();
        for row in dy.data().chunks_exact(self.fan_out) {
            for (g, &d) in db.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(&[rows, self.fan_in]);
        F::gemm(false, false, rows, self.fan_in, self.fan_out, F::one(), dy.data(), params.get(self.weight).data(), F::zero(), dx.data_mut());
        Ok(dx)
    }
}
