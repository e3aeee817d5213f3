use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::nn::{BlockCache, ParamSet, Pass, Registry, ResidualBlock};
use crate::{Real, Result, Tensor};

/// Mask prediction head layout: `num_blocks` stride-1 bottleneck blocks
/// (`C_b → C_b/4 → C_b`) between the backbone and region pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MphConfig {
    pub num_blocks: usize,
    /// Start the last 1x1 conv of every block at zero.
    pub zero_init_last: bool,
}

impl Default for MphConfig {
    fn default() -> Self {
        MphConfig { num_blocks: 3, zero_init_last: false }
    }
}

#[derive(Debug, Clone)]
pub struct MaskPredictionHead {
    blocks: Vec<ResidualBlock>,
}

impl MaskPredictionHead {
    /// `channels` must be a multiple of 4 so the bottleneck preserves it.
    pub fn new<F: Real, R: Rng + ?Sized>(reg: &mut Registry<'_, F, R>, cfg: &MphConfig, channels: usize) -> Self {
        debug_assert_eq!(channels % 4, 0);
        let planes = channels / 4;
        let blocks = (0..cfg.num_blocks)
            .map(|i| ResidualBlock::bottleneck(reg, &format!("mph.{i}"), channels, planes, 1, cfg.zero_init_last))
            .collect();
        MaskPredictionHead { blocks }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward<F: Real>(
        &self,
        params: &ParamSet<F>,
        stats: &mut ParamSet<F>,
        x: &Tensor<F>,
        pass: Pass,
    ) -> Result<(Tensor<F>, Vec<BlockCache<F>>)> {
        let mut caches = Vec::new();
        if self.blocks.is_empty() {
            return Ok((x.clone(), caches));
        }
        let mut h = x.clone();
        for block in &self.blocks {
            let (y, c) = block.forward(params, stats, &h, pass)?;
            caches.extend(c);
            h = y;
        }
        Ok((h, caches))
    }

    pub fn backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        caches: &[BlockCache<F>],
        dy: &Tensor<F>,
        grads: &mut ParamSet<F>,
    ) -> Result<Tensor<F>> {
        let mut g = dy.clone();
        for (block, c) in self.blocks.iter().zip(caches).rev() {
            g = block.backward(params, c, &g, grads)?;
        }
        Ok(g)
    }
}
