//! The training loop pieces: SGD with momentum and weight decay on the online
//! branch, the cosine schedule, the momentum (EMA) target update, and one
//! full training step.

use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contrast::{assemble_negatives, info_nce_loss, NegativeConfig};
use crate::error::shape_err;
use crate::model::{MaskCoNet, ModelConfig, ModelState, Roi};
use crate::nn::{ParamSet, Pass};
use crate::sampling::{PretrainBatch, SamplerConfig};
use crate::{Error, Real, Result, Tensor};

/// Training length, in epochs over the dataset or in optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Duration {
    Epochs(u64),
    Steps(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub duration: Duration,
    /// EMA coefficient `m` of the target update.
    pub ema_momentum: f64,
    pub cosine: bool,
    pub temperature: f64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub sampler: SamplerConfig,
    pub model: ModelConfig,
    pub negatives: NegativeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.03,
            sgd_momentum: 0.9,
            weight_decay: 0.001,
            batch_size: 256,
            duration: Duration::Epochs(100),
            ema_momentum: 0.999,
            cosine: true,
            temperature: 0.2,
            seed: 0,
            checkpoint_interval: 1000,
            sampler: SamplerConfig::default(),
            model: ModelConfig::default(),
            negatives: NegativeConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Quarter-width ResNet-18, 96-pixel views, batch 32.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 32,
            duration: Duration::Epochs(20),
            checkpoint_interval: 500,
            sampler: SamplerConfig::desk(),
            model: ModelConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be a finite non-negative number");
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad("ema_momentum must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) || self.weight_decay < 0.0 {
            return bad("sgd_momentum must lie in [0, 1) and weight_decay be non-negative");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        self.negatives.validate(self.batch_size)?;
        self.sampler.validate()?;
        self.model.validate()
    }

    /// Optimizer steps for a dataset of `num_images`.
    pub fn total_steps(&self, num_images: usize) -> u64 {
        match self.duration {
            Duration::Steps(s) => s,
            Duration::Epochs(e) => e * steps_per_epoch(num_images, self.batch_size),
        }
    }

    pub fn lr_at(&self, step: u64, total_steps: u64) -> f64 {
        if self.cosine {
            cosine_lr(step.min(total_steps), total_steps, self.base_lr)
        } else {
            self.base_lr
        }
    }
}

/// `base_lr * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + Float::cos(core::f64::consts::PI * t))
}

/// `target = m * target + (1 - m) * online`, elementwise.
pub fn ema_update<F: Real>(target: &mut ParamSet<F>, online: &ParamSet<F>, m: f64) -> Result<()> {
    target.check_isomorphic(online)?;
    if m == 1.0 {
        return Ok(());
    }
    let (mf, one_m) = (F::lit(m), F::lit(1.0 - m));
    for (t, o) in target.tensors_mut().iter_mut().zip(online.tensors()) {
        for (tv, &ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = if m == 0.0 { ov } else { mf * *tv + one_m * ov };
        }
    }
    Ok(())
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `buf = mu * buf + (g + wd * w)`, `w -= lr * buf`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<F> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: ParamSet<F>,
}

impl<F: Real> Sgd<F> {
    pub fn new(params: &ParamSet<F>, momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, buffers: params.zeros_like() }
    }

    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &ParamSet<F>, lr: f64) -> Result<()> {
        params.check_isomorphic(grads)?;
        params.check_isomorphic(&self.buffers)?;
        let (mu, wd, lr) = (F::lit(self.momentum), F::lit(self.weight_decay), F::lit(lr));
        for ((w, g), b) in params.tensors_mut().iter_mut().zip(grads.tensors()).zip(self.buffers.tensors_mut()) {
            for ((wv, &gv), bv) in w.data_mut().iter_mut().zip(g.data()).zip(b.data_mut()) {
                *bv = mu * *bv + gv + wd * *wv;
                if lr != F::zero() {
                    *wv -= lr * *bv;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// Step index the metrics belong to (before the counter increment).
    pub step: u64,
    pub loss: f64,
    /// Contrastive top-1: share of queries whose positive logit is largest.
    pub acc: f64,
    pub lr: f64,
}

/// Model, optimizer and schedule for a pretraining run.
#[derive(Debug, Clone)]
pub struct Trainer<F> {
    pub cfg: TrainConfig,
    pub net: MaskCoNet,
    pub state: ModelState<F>,
    pub optimizer: Sgd<F>,
    pub total_steps: u64,
}

impl<F: Real> Trainer<F> {
    /// Fresh weights drawn from the configured seed.
    pub fn new(cfg: TrainConfig, total_steps: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seed, Stream::Init, 0);
        let (net, params, stats) = MaskCoNet::build(&cfg.model, &mut rng)?;
        let optimizer = Sgd::new(&params, cfg.sgd_momentum, cfg.weight_decay);
        Ok(Trainer { state: ModelState::new(params, stats), net, optimizer, cfg, total_steps })
    }

    /// Reassembles a trainer from saved state.
    pub fn from_parts(cfg: TrainConfig, state: ModelState<F>, momentum: ParamSet<F>, total_steps: u64) -> Result<Self> {
        let fresh = Self::new(cfg, total_steps)?;
        state.check()?;
        fresh.state.online.check_isomorphic(&state.online)?;
        fresh.state.online_stats.check_isomorphic(&state.online_stats)?;
        state.online.check_isomorphic(&momentum)?;
        let optimizer = Sgd { buffers: momentum, ..fresh.optimizer };
        Ok(Trainer { state, optimizer, ..fresh })
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr_at(self.state.step, self.total_steps)
    }

    pub fn step(&mut self, batch: &PretrainBatch<F>) -> Result<StepMetrics> {
        let lr = self.lr();
        train_step(&self.net, &mut self.state, &mut self.optimizer, batch, &self.cfg, lr)
    }
}

/// One optimization step: query branch on online weights, key branch on
/// target weights (no gradient), in-batch negatives, InfoNCE, SGD on the
/// online weights, then the EMA update of the target.
pub fn train_step<F: Real>(
    net: &MaskCoNet,
    state: &mut ModelState<F>,
    optimizer: &mut Sgd<F>,
    batch: &PretrainBatch<F>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepMetrics> {
    let n = batch.len();
    cfg.negatives.validate(n)?;
    let m1 = 1 + cfg.sampler.num_neg_boxes;
    if batch.samples.iter().any(|s| s.neg_boxes.len() + 1 != m1) {
        return Err(shape_err!("every sample needs {} key boxes", m1));
    }
    let step = state.step;
    let with_step = |e: Error| match e {
        Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step },
        other => other,
    };

    let q_rois: Vec<Roi> = batch.samples.iter().enumerate().map(|(i, s)| Roi { batch_index: i, bbox: s.masked_box }).collect();
    let (q, cache) = net.embed(&state.online, &mut state.online_stats, &batch.queries, &q_rois, Pass::Train)?;
    let cache = cache.expect("training pass records");

    let k_rois: Vec<Roi> = batch
        .samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.key_boxes().into_iter().map(move |bbox| Roi { batch_index: i, bbox }))
        .collect();
    let (k, _) = net.embed(&state.target, &mut state.target_stats, &batch.keys, &k_rois, Pass::TrainNoGrad)?;
    let d = k.shape()[1];
    let k = k.reshape(&[n, m1, d])?;
    let k_pos = Tensor::from_vec(&[n, d], (0..n).flat_map(|i| k.item(i)[..d].to_vec()).collect())?;
    let negs = assemble_negatives(&k, &cfg.negatives)?;

    let out = info_nce_loss(&q, &k_pos, &negs, F::lit(cfg.temperature)).map_err(with_step)?;
    let mut grads = state.online.zeros_like();
    net.backward(&state.online, &cache, &out.grad_q, &mut grads, false)?;
    if grads.tensors().iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFiniteLoss { step });
    }
    optimizer.step(&mut state.online, &grads, lr)?;
    ema_update(&mut state.target, &state.online, cfg.ema_momentum)?;
    state.step += 1;
    Ok(StepMetrics { step, loss: out.loss.as_f64(), acc: out.top1_accuracy(), lr })
}

/// Independent random streams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Batch = 3,
    Analysis = 4,
}

/// RNG for `(seed, stream, index)`; resuming at any step reproduces the
/// same draws without carrying RNG state.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 56) ^ index);
    rng
}

pub fn steps_per_epoch(num_images: usize, batch_size: usize) -> u64 {
    ((num_images / batch_size.max(1)) as u64).max(1)
}

/// Image indices of the batch at `step`: each epoch is a fresh permutation of
/// the dataset, cut into full batches (the remainder is dropped).
pub fn batch_indices(seed: u64, step: u64, num_images: usize, batch_size: usize) -> Vec<usize> {
    let per_epoch = steps_per_epoch(num_images, batch_size);
    let (epoch, pos) = (step / per_epoch, (step % per_epoch) as usize);
    let mut order: Vec<usize> = (0..num_images).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Shuffle, epoch));
    let take = batch_size.min(num_images);
    order[pos * take..(pos + 1) * take].to_vec()
}
