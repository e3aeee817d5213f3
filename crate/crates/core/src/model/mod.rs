//! The Siamese encoder: backbone, mask prediction head (MPH), RoI-align region
//! pooling and the projection head, plus the online/target parameter pair.

mod backbone;
mod head;
mod mph;
pub mod roi;

use alloc::vec::Vec;

use rand::Rng;

pub use self::backbone::{Backbone, BackboneCache, BackboneSpec, BlockKind, STAGES, STAGE_STRIDES};
pub use self::head::{l2_normalize, l2_normalize_backward, HeadCache, ProjectionHead};
pub use self::mph::{MaskPredictionHead, MphConfig};
pub use self::roi::{pool_cells, roi_align, Roi, RoiAlignConfig, RoiPlan};
use crate::nn::{global_avg_pool_backward, BlockCache, ParamSet, Pass, Registry};
use crate::{Error, Real, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub mph: MphConfig,
    /// Projection output dimension `d`.
    pub embed_dim: usize,
    /// Projection hidden width; `None` means `C_b`.
    pub hidden_dim: Option<usize>,
    pub roi_output_size: usize,
    pub roi_sampling_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneSpec::resnet50(),
            mph: MphConfig::default(),
            embed_dim: 128,
            hidden_dim: None,
            roi_output_size: 7,
            roi_sampling_ratio: 2,
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig { backbone: BackboneSpec::desk(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let cb = self.backbone.out_channels();
        if self.mph.num_blocks > 0 && cb % 4 != 0 {
            return Err(Error::Config(alloc::format!("MPH needs C_b divisible by 4, got {cb}")));
        }
        if self.embed_dim == 0 || self.roi_output_size == 0 || self.roi_sampling_ratio == 0 {
            return Err(Error::Config("embed_dim, roi_output_size and roi_sampling_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn roi(&self) -> RoiAlignConfig {
        RoiAlignConfig {
            output_size: self.roi_output_size,
            sampling_ratio: self.roi_sampling_ratio,
            stride: STAGE_STRIDES[4] as f64,
        }
    }
}

/// Architecture of one branch. Holds no weights.
#[derive(Debug, Clone)]
pub struct MaskCoNet {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub mph: MaskPredictionHead,
    pub head: ProjectionHead,
}

/// Everything the backward pass of [`MaskCoNet::embed`] needs.
#[derive(Debug, Clone)]
pub struct EmbedCache<F> {
    backbone: BackboneCache<F>,
    mph: Vec<BlockCache<F>>,
    map_hw: (usize, usize),
    plan: RoiPlan,
    head: HeadCache<F>,
    embeddings: Tensor<F>,
    norms: Vec<F>,
}

impl<F> EmbedCache<F> {
    pub fn embeddings(&self) -> &Tensor<F> {
        &self.embeddings
    }
}

impl MaskCoNet {
    /// Builds the architecture and freshly initialized weights and running
    /// statistics.
    pub fn build<F: Real, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<(Self, ParamSet<F>, ParamSet<F>)> {
        cfg.validate()?;
        let mut reg = Registry::new(rng);
        let backbone = Backbone::new(&mut reg, &cfg.backbone);
        let cb = cfg.backbone.out_channels();
        let mph = MaskPredictionHead::new(&mut reg, &cfg.mph, cb);
        let head = ProjectionHead::new(&mut reg, cb, cfg.hidden_dim.unwrap_or(cb), cfg.embed_dim);
        let net = MaskCoNet { cfg: cfg.clone(), backbone, mph, head };
        Ok((net, reg.params, reg.stats))
    }

    /// Backbone then MPH: the map regions are pooled from.
    pub fn feature_map<F: Real>(
        &self,
        params: &ParamSet<F>,
        stats: &mut ParamSet<F>,
        x: &Tensor<F>,
        pass: Pass,
    ) -> Result<(Tensor<F>, Option<BackboneCache<F>>, Vec<BlockCache<F>>)> {
        let (c5, bcache) = self.backbone.forward(params, stats, x, pass)?;
        let (m, mcache) = self.mph.forward(params, stats, &c5, pass)?;
        Ok((m, bcache, mcache))
    }

    /// RoI align, cell averaging, projection and L2 normalization on an
    /// already computed feature map: `[R, d]` unit vectors.
    pub fn region_embed<F: Real>(
        &self,
        params: &ParamSet<F>,
        map: &Tensor<F>,
        rois: &[Roi],
    ) -> Result<(Tensor<F>, RoiPlan, HeadCache<F>, Vec<F>)> {
        let plan = RoiPlan::new(map.shape(), rois, &self.cfg.roi())?;
        let pooled = pool_cells(&plan.forward(map)?)?;
        let (z, hcache) = self.head.forward(params, &pooled)?;
        let (e, norms) = l2_normalize(&z)?;
        Ok((e, plan, hcache, norms))
    }

    /// Full path from pixels to region embeddings. With a recording pass the
    /// returned cache supports [`MaskCoNet::backward`].
    pub fn embed<F: Real>(
        &self,
        params: &ParamSet<F>,
        stats: &mut ParamSet<F>,
        x: &Tensor<F>,
        rois: &[Roi],
        pass: Pass,
    ) -> Result<(Tensor<F>, Option<EmbedCache<F>>)> {
        let (map, bcache, mcache) = self.feature_map(params, stats, x, pass)?;
        let (_, _, h, w) = map.dims4()?;
        let (e, plan, head, norms) = self.region_embed(params, &map, rois)?;
        let cache = bcache.map(|backbone| EmbedCache {
            backbone,
            mph: mcache,
            map_hw: (h, w),
            plan,
            head,
            embeddings: e.clone(),
            norms,
        });
        Ok((e, cache))
    }

    /// Accumulates parameter gradients for a gradient on the embeddings.
    /// Returns the input-pixel gradient when `need_dx` is set.
    pub fn backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        cache: &EmbedCache<F>,
        d_embed: &Tensor<F>,
        grads: &mut ParamSet<F>,
        need_dx: bool,
    ) -> Result<Option<Tensor<F>>> {
        let dz = l2_normalize_backward(&cache.embeddings, &cache.norms, d_embed)?;
        let dpooled = self.head.backward(params, &cache.head, &dz, grads)?;
        let p = self.cfg.roi_output_size;
        let dcells = global_avg_pool_backward(&dpooled, p, p)?;
        let dmap = cache.plan.backward(&dcells)?;
        debug_assert_eq!(dmap.shape()[2..], [cache.map_hw.0, cache.map_hw.1]);
        let dc5 = self.mph.backward(params, &cache.mph, &dmap, grads)?;
        self.backbone.backward(params, &cache.backbone, &dc5, grads, need_dx)
    }
}

/// Online and target weights (with their batch-norm running statistics) and
/// the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<F> {
    pub online: ParamSet<F>,
    pub target: ParamSet<F>,
    pub online_stats: ParamSet<F>,
    pub target_stats: ParamSet<F>,
    pub step: u64,
}

impl<F: Real> ModelState<F> {
    /// The target starts as an exact copy of the online weights.
    pub fn new(params: ParamSet<F>, stats: ParamSet<F>) -> Self {
        ModelState { target: params.clone(), target_stats: stats.clone(), online: params, online_stats: stats, step: 0 }
    }

    pub fn check(&self) -> Result<()> {
        self.online.check_isomorphic(&self.target)?;
        self.online_stats.check_isomorphic(&self.target_stats)
    }
}
