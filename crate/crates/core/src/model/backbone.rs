use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::nn::{
    relu_backward, relu_in_place, BatchNorm2d, BlockCache, BnCache, Conv2d, MaxPool2d, MaxPoolCache, ParamSet, Pass,
    Registry, ResidualBlock,
};
use crate::error::shape_err;
use crate::{Error, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

/// Names of the five backbone stages, in order.
pub const STAGES: [&str; 5] = ["conv1", "conv2", "conv3", "conv4", "conv5"];
/// Output stride of each stage.
pub const STAGE_STRIDES: [usize; 5] = [4, 4, 8, 16, 32];

/// A ResNet layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneSpec {
    pub block: BlockKind,
    /// Residual blocks per stage, `conv2` through `conv5`.
    pub layers: [usize; 4],
    pub stem_width: usize,
    /// Bottleneck width per stage; stage outputs are `planes * expansion`.
    pub planes: [usize; 4],
}

impl BackboneSpec {
    pub fn resnet50() -> Self {
        BackboneSpec { block: BlockKind::Bottleneck, layers: [3, 4, 6, 3], stem_width: 64, planes: [64, 128, 256, 512] }
    }

    pub fn resnet18() -> Self {
        BackboneSpec { block: BlockKind::Basic, layers: [2, 2, 2, 2], stem_width: 64, planes: [64, 128, 256, 512] }
    }

    /// ResNet-18 layout at a quarter of the width.
    pub fn desk() -> Self {
        BackboneSpec { block: BlockKind::Basic, layers: [2, 2, 2, 2], stem_width: 16, planes: [16, 32, 64, 128] }
    }

    /// Smallest useful layout, for gradient checks.
    pub fn tiny() -> Self {
        BackboneSpec { block: BlockKind::Basic, layers: [1, 1, 1, 1], stem_width: 4, planes: [4, 4, 8, 8] }
    }

    /// Channel count of each stage output.
    pub fn stage_channels(&self) -> [usize; 5] {
        let e = self.block.expansion();
        [self.stem_width, self.planes[0] * e, self.planes[1] * e, self.planes[2] * e, self.planes[3] * e]
    }

    /// Channels of the final stage (`C_b`).
    pub fn out_channels(&self) -> usize {
        self.stage_channels()[4]
    }

    pub fn stage_index(name: &str) -> Result<usize> {
        STAGES.iter().position(|s| *s == name).ok_or_else(|| Error::LayerNotFound(name.into()))
    }
}

/// ResNet trunk producing the `conv1`..`conv5` stage outputs.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub spec: BackboneSpec,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    pool: MaxPool2d,
    layers: [Vec<ResidualBlock>; 4],
}

#[derive(Debug, Clone)]
pub struct BackboneCache<F> {
    stem_input: Tensor<F>,
    stem_bn: BnCache<F>,
    stem_act: Tensor<F>,
    pool: MaxPoolCache,
    blocks: [Vec<BlockCache<F>>; 4],
}

impl Backbone {
    pub fn new<F: Real, R: Rng + ?Sized>(reg: &mut Registry<'_, F, R>, spec: &BackboneSpec) -> Self {
        let stem_conv = Conv2d::new(reg, "conv1.weight".into(), 3, spec.stem_width, 7, 2, 3, false);
        let stem_bn = BatchNorm2d::new(reg, "bn1", spec.stem_width, 1.0);
        let mut cin = spec.stem_width;
        let layers = core::array::from_fn(|i| {
            (0..spec.layers[i])
                .map(|j| {
                    let stride = if i > 0 && j == 0 { 2 } else { 1 };
                    let prefix = format!("layer{}.{}", i + 1, j);
                    let block = match spec.block {
                        BlockKind::Basic => ResidualBlock::basic(reg, &prefix, cin, spec.planes[i], stride),
                        BlockKind::Bottleneck => {
                            ResidualBlock::bottleneck(reg, &prefix, cin, spec.planes[i], stride, false)
                        }
                    };
                    cin = block.out_channels();
                    block
                })
                .collect()
        });
        Backbone { spec: spec.clone(), stem_conv, stem_bn, pool: MaxPool2d { kernel: 3, stride: 2, pad: 1 }, layers }
    }

    /// Runs the trunk and returns the five stage outputs (`conv1`..`conv5`),
    /// stopping early after stage `last`.
    pub fn forward_stages<F: Real>(
        &self,
        params: &ParamSet<F>,
        stats: &mut ParamSet<F>,
        x: &Tensor<F>,
        pass: Pass,
        last: usize,
    ) -> Result<(Vec<Tensor<F>>, Option<BackboneCache<F>>)> {
        let (_, c, _, _) = x.dims4()?;
        if c != 3 {
            return Err(shape_err!("backbone expects 3 input channels, got {c}"));
        }
        let z = self.stem_conv.forward(params, x)?;
        let (mut a, bn_cache) = self.stem_bn.forward(params, stats, &z, pass)?;
        relu_in_place(&mut a);
        let (pooled, pool_cache) = self.pool.forward(&a, pass.record())?;
        let mut outs = alloc::vec![pooled];
        let mut block_caches: [Vec<BlockCache<F>>; 4] = Default::default();
        for (i, stage) in self.layers.iter().enumerate().take(last.min(4)) {
            let mut h = outs.last().unwrap().clone();
            for block in stage {
                let (y, bc) = block.forward(params, stats, &h, pass)?;
                if let Some(bc) = bc {
                    block_caches[i].push(bc);
                }
                h = y;
            }
            outs.push(h);
        }
        let cache = match (pass.record(), bn_cache, pool_cache) {
            (true, Some(stem_bn), Some(pool)) => Some(BackboneCache {
                stem_input: x.clone(),
                stem_bn,
                stem_act: a,
                pool,
                blocks: block_caches,
            }),
            _ => None,
        };
        Ok((outs, cache))
    }

    /// Final (`conv5`) feature map.
    pub fn forward<F: Real>(
        &self,
        params: &ParamSet<F>,
        stats: &mut ParamSet<F>,
        x: &Tensor<F>,
        pass: Pass,
    ) -> Result<(Tensor<F>, Option<BackboneCache<F>>)> {
        let (mut outs, cache) = self.forward_stages(params, stats, x, pass, 4)?;
        Ok((outs.pop().unwrap(), cache))
    }

    /// Backward from a gradient on `conv5`; returns the input gradient when
    /// `need_dx` is set.
    pub fn backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        cache: &BackboneCache<F>,
        dconv5: &Tensor<F>,
        grads: &mut ParamSet<F>,
        need_dx: bool,
    ) -> Result<Option<Tensor<F>>> {
        let mut g = dconv5.clone();
        for (stage, caches) in self.layers.iter().zip(&cache.blocks).rev() {
            for (block, bc) in stage.iter().zip(caches).rev() {
                g = block.backward(params, bc, &g, grads)?;
            }
        }
        let da = self.pool.backward(&cache.pool, &g)?;
        let dz = relu_backward(&cache.stem_act, &da);
        let dbn = self.stem_bn.backward(params, &cache.stem_bn, &dz, grads)?;
        self.stem_conv.backward(params, &cache.stem_input, &dbn, grads, need_dx)
    }
}
