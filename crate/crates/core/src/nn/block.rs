use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::{relu_backward, relu_in_place, BatchNorm2d, BnCache, Conv2d, ParamSet, Pass, Registry};
use crate::{Real, Result, Tensor};

/// Residual block: a chain of conv+BN stages with ReLU between them, a
/// shortcut (identity or 1x1 projection), and a ReLU after the sum.
///
/// The basic block has two 3x3 stages; the bottleneck has 1x1, 3x3, 1x1 with
/// the stride on the 3x3.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub stages: Vec<(Conv2d, BatchNorm2d)>,
    pub downsample: Option<(Conv2d, BatchNorm2d)>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<F> {
    input: Tensor<F>,
    /// Input of each conv stage and its batch-norm cache.
    stages: Vec<(Tensor<F>, BnCache<F>)>,
    shortcut: Option<BnCache<F>>,
    output: Tensor<F>,
}

impl ResidualBlock {
    fn projection<F: Real, R: Rng + ?Sized>(
        reg: &mut Registry<'_, F, R>,
        prefix: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Option<(Conv2d, BatchNorm2d)> {
        (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(reg, format!("{prefix}.downsample.0.weight"), cin, cout, 1, stride, 0, false),
                BatchNorm2d::new(reg, &format!("{prefix}.downsample.1"), cout, 1.0),
            )
        })
    }

    pub fn basic<F: Real, R: Rng + ?Sized>(
        reg: &mut Registry<'_, F, R>,
        prefix: &str,
        cin: usize,
        planes: usize,
        stride: usize,
    ) -> Self {
        let stages = alloc::vec![
            (
                Conv2d::new(reg, format!("{prefix}.conv1.weight"), cin, planes, 3, stride, 1, false),
                BatchNorm2d::new(reg, &format!("{prefix}.bn1"), planes, 1.0),
            ),
            (
                Conv2d::new(reg, format!("{prefix}.conv2.weight"), planes, planes, 3, 1, 1, false),
                BatchNorm2d::new(reg, &format!("{prefix}.bn2"), planes, 1.0),
            ),
        ];
        ResidualBlock { stages, downsample: Self::projection(reg, prefix, cin, planes, stride) }
    }

    /// 1x1 → 3x3 → 1x1 bottleneck with `planes * 4` output channels. With
    /// `zero_last` the final 1x1 conv starts at zero, making the block an
    /// identity map on non-negative inputs.
    pub fn bottleneck<F: Real, R: Rng + ?Sized>(
        reg: &mut Registry<'_, F, R>,
        prefix: &str,
        cin: usize,
        planes: usize,
        stride: usize,
        zero_last: bool,
    ) -> Self {
        let cout = planes * 4;
        let stages = alloc::vec![
            (
                Conv2d::new(reg, format!("{prefix}.conv1.weight"), cin, planes, 1, 1, 0, false),
                BatchNorm2d::new(reg, &format!("{prefix}.bn1"), planes, 1.0),
            ),
            (
                Conv2d::new(reg, format!("{prefix}.conv2.weight"), planes, planes, 3, stride, 1, false),
                BatchNorm2d::new(reg, &format!("{prefix}.bn2"), planes, 1.0),
            ),
            (
                Conv2d::new(reg, format!("{prefix}.conv3.weight"), planes, cout, 1, 1, 0, zero_last),
                BatchNorm2d::new(reg, &format!("{prefix}.bn3"), cout, 1.0),
            ),
        ];
        ResidualBlock { stages, downsample: Self::projection(reg, prefix, cin, cout, stride) }
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(0, |(c, _)| c.cout)
    }

    pub fn forward<F: Real>(
        &self,
        params: &ParamSet<F>,
        stats: &mut ParamSet<F>,
        x: &Tensor<F>,
        pass: Pass,
    ) -> Result<(Tensor<F>, Option<BlockCache<F>>)> {
        let record = pass.record();
        let mut stage_caches = Vec::new();
        let mut h = x.clone();
        let last = self.stages.len() - 1;
        for (i, (conv, bn)) in self.stages.iter().enumerate() {
            let z = conv.forward(params, &h)?;
            let (mut y, bc) = bn.forward(params, stats, &z, pass)?;
            if i != last {
                relu_in_place(&mut y);
            }
            if let Some(bc) = bc {
                stage_caches.push((h, bc));
            }
            h = y;
        }
        let shortcut_cache = match &self.downsample {
            Some((conv, bn)) => {
                let z = conv.forward(params, x)?;
                let (s, bc) = bn.forward(params, stats, &z, pass)?;
                h.add_assign(&s)?;
                bc
            }
            None => {
                h.add_assign(x)?;
                None
            }
        };
        relu_in_place(&mut h);
        let cache = record.then(|| BlockCache {
            input: x.clone(),
            stages: stage_caches,
            shortcut: shortcut_cache,
            output: h.clone(),
        });
        Ok((h, cache))
    }

    pub fn backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        cache: &BlockCache<F>,
        dout: &Tensor<F>,
        grads: &mut ParamSet<F>,
    ) -> Result<Tensor<F>> {
        let dz = relu_backward(&cache.output, dout);
        let mut g = dz.clone();
        for (i, ((conv, bn), (input, bc))) in self.stages.iter().zip(&cache.stages).enumerate().rev() {
            let dbn = bn.backward(params, bc, &g, grads)?;
            let dinput = conv.backward(params, input, &dbn, grads, true)?.expect("requested dx");
            g = if i > 0 { relu_backward(input, &dinput) } else { dinput };
        }
        let dshort = match (&self.downsample, &cache.shortcut) {
            (Some((conv, bn)), Some(bc)) => {
                let dbn = bn.backward(params, bc, &dz, grads)?;
                conv.backward(params, &cache.input, &dbn, grads, true)?.expect("requested dx")
            }
            _ => dz,
        };
        g.add_assign(&dshort)?;
        Ok(g)
    }
}
