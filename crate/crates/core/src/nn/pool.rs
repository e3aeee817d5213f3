use alloc::vec;
use alloc::vec::Vec;

use crate::error::shape_err;
use crate::{Real, Result, Tensor};

pub fn relu_in_place<F: Real>(x: &mut Tensor<F>) {
    for v in x.data_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Gradient of ReLU given its output `y`.
pub fn relu_backward<F: Real>(y: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let data = y.data().iter().zip(dy.data()).map(|(&a, &g)| if a > F::zero() { g } else { F::zero() }).collect();
    Tensor::from_vec(dy.shape(), data).expect("same shape")
}

/// Max pooling with square window, stride and zero-free (ignored) padding.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    argmax: Vec<u32>,
    input_shape: [usize; 4],
}

impl MaxPool2d {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward<F: Real>(&self, x: &Tensor<F>, record: bool) -> Result<(Tensor<F>, Option<MaxPoolCache>)> {
        let (n, c, h, w) = x.dims4()?;
        let (oh, ow) = self.out_size(h, w);
        let mut y = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = if record { vec![0u32; n * c * oh * ow] } else { Vec::new() };
        let (xd, yd) = (x.data(), y.data_mut());
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = F::neg_infinity();
                    let mut best_i = 0usize;
                    for ki in 0..self.kernel {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    yd[o] = best;
                    if record {
                        argmax[o] = best_i as u32;
                    }
                }
            }
        }
        let cache = record.then_some(MaxPoolCache { argmax, input_shape: [n, c, h, w] });
        Ok((y, cache))
    }

    pub fn backward<F: Real>(&self, cache: &MaxPoolCache, dy: &Tensor<F>) -> Result<Tensor<F>> {
        let [n, c, h, w] = cache.input_shape;
        if dy.len() != cache.argmax.len() {
            return Err(shape_err!("max pool backward: gradient size {} vs {}", dy.len(), cache.argmax.len()));
        }
        let per = dy.len() / (n * c);
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        let dxd = dx.data_mut();
        for plane in 0..n * c {
            for o in 0..per {
                let idx = plane * per + o;
                dxd[plane * h * w + cache.argmax[idx] as usize] += dy.data()[idx];
            }
        }
        Ok(dx)
    }
}

/// `[N, C, H, W]` to `[N, C]` spatial means.
pub fn global_avg_pool<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv = F::one() / F::of(hw);
    let data = x.data().chunks_exact(hw).map(|p| p.iter().copied().sum::<F>() * inv).collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward<F: Real>(dy: &Tensor<F>, h: usize, w: usize) -> Result<Tensor<F>> {
    let (n, c) = dy.dims2()?;
    let inv = F::one() / F::of(h * w);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for (plane, &g) in dx.data_mut().chunks_exact_mut(h * w).zip(dy.data()) {
        plane.fill(g * inv);
    }
    Ok(dx)
}
