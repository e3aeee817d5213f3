//! The pretraining driver: batch preparation, the step loop, periodic
//! checkpoints, the metrics log and resumption.
//!
//! Every batch is a pure function of `(seed, step)`: the image order comes
//! from a per-epoch permutation and each batch slot draws its views and
//! boxes from its own random stream. Worker threads therefore change only
//! how fast batches arrive, never their contents.

use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use maskco_core::sampling::{prepare_item, ImageSource, PretrainBatch};
use maskco_core::trainer::{batch_indices, stream_rng, Stream, TrainConfig, Trainer};

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{MetricRecord, MetricsLog};

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST_CHECKPOINT: &str = "checkpoint.safetensors";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Scalar type used for pretraining and saved checkpoints.
pub type Scalar = f32;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    /// Step counter of the final state.
    pub final_step: u64,
    /// Optimizer steps taken by this invocation.
    pub steps_run: u64,
    /// Steps whose batch ended up too small to train on.
    pub steps_skipped: u64,
    /// Images dropped by the sampler over this invocation.
    pub images_skipped: u64,
    pub last_loss: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl PretrainOutcome {
    pub fn artifacts(&self) -> Vec<PathBuf> {
        let mut all = self.checkpoints.clone();
        all.push(self.final_checkpoint.clone());
        all.push(self.metrics.clone());
        all
    }
}

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("step-{step:08}.safetensors"))
}

/// The checkpoint with the highest step under `out/checkpoints`.
pub fn latest_checkpoint(out: &Path) -> Option<PathBuf> {
    let entries = std::fs::read_dir(out.join(CHECKPOINT_DIR)).ok()?;
    entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?;
            let step: u64 = name.strip_prefix("step-")?.strip_suffix(".safetensors")?.parse().ok()?;
            Some((step, p))
        })
        .max_by_key(|(step, _)| *step)
        .map(|(_, p)| p)
}

/// The batch for `step`.
pub fn prepare_batch<S: ImageSource + ?Sized>(source: &S, cfg: &TrainConfig, step: u64) -> Result<PretrainBatch<Scalar>> {
    let indices = batch_indices(cfg.seed, step, source.len(), cfg.batch_size);
    let items = indices
        .iter()
        .enumerate()
        .map(|(slot, &i)| {
            let img = source.image(i)?;
            let mut rng = stream_rng(cfg.seed, Stream::Batch, (step << 16) | slot as u64);
            Ok(prepare_item(&img, &mut rng, &cfg.sampler))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut batch = PretrainBatch::from_items(items, cfg.sampler.view_size)?;
    batch.sources = batch.sources.iter().map(|&s| indices[s]).collect();
    Ok(batch)
}

/// Trains according to `config`, writing checkpoints and the metrics log
/// under `out`. With `resume`, training continues from the newest checkpoint
/// in `out` (if any) and the log is cut back to that step.
pub fn run_pretraining<S: ImageSource + Sync + ?Sized>(
    config: &RunConfig,
    source: &S,
    out: &Path,
    resume: bool,
) -> Result<PretrainOutcome> {
    let cfg = config.train_config()?;
    if source.is_empty() {
        return Err(maskco_core::Error::EmptyDataset.into());
    }
    cfg.negatives
        .validate(cfg.batch_size.min(source.len()))
        .map_err(|e| Error::Dataset(format!("dataset too small for the batch: {e}")))?;
    let total = cfg.total_steps(source.len());
    let mut trainer = match resume.then(|| latest_checkpoint(out)).flatten() {
        Some(path) => {
            log::info!("resuming from {}", path.display());
            let ck = Checkpoint::<Scalar>::load(&path)?;
            if ck.config.model != config.model {
                return Err(Error::checkpoint(&path, "model section differs from the run configuration"));
            }
            Trainer::from_parts(cfg.clone(), ck.state, ck.momentum, total)?
        }
        None => Trainer::new(cfg.clone(), total)?,
    };
    let start = trainer.state.step;
    let metrics_path = out.join(METRICS_FILE);
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    let mut log = MetricsLog::open(&metrics_path, start)?;
    let mut outcome = PretrainOutcome {
        final_step: start,
        steps_run: 0,
        steps_skipped: 0,
        images_skipped: 0,
        last_loss: None,
        checkpoints: Vec::new(),
        final_checkpoint: out.join(LATEST_CHECKPOINT),
        metrics: metrics_path,
    };
    let clock = Instant::now();
    let workers = config.train.workers;
    log::info!("training steps {start}..{total} on {} images with {workers} workers", source.len());

    let mut train_on = |batch: PretrainBatch<Scalar>, trainer: &mut Trainer<Scalar>, log: &mut MetricsLog| -> Result<()> {
        let step = trainer.state.step;
        outcome.images_skipped += batch.skipped as u64;
        if cfg.negatives.validate(batch.len()).is_err() {
            log::warn!("step {step}: only {} usable images, step skipped", batch.len());
            trainer.state.step += 1;
            outcome.steps_skipped += 1;
        } else {
            let m = trainer.step(&batch)?;
            outcome.steps_run += 1;
            outcome.last_loss = Some(m.loss);
            let wall_time = config.train.record_wall_time.then(|| clock.elapsed().as_secs_f64());
            log.append(&MetricRecord { step: m.step, loss: m.loss, acc: m.acc, lr: m.lr, skipped: batch.skipped, wall_time })?;
            if m.step % 10 == 0 || m.step + 1 == total {
                log::info!("step {}/{total} loss {:.4} acc {:.3} lr {:.5}", m.step, m.loss, m.acc, m.lr);
            }
        }
        let done = trainer.state.step;
        if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && done < total {
            log.flush()?;
            let path = checkpoint_path(out, done);
            snapshot(config, trainer).save(&path)?;
            outcome.checkpoints.push(path);
        }
        Ok(())
    };

    if workers == 0 || start >= total {
        for step in start..total {
            let batch = prepare_batch(source, &cfg, step)?;
            train_on(batch, &mut trainer, &mut log)?;
        }
    } else {
        std::thread::scope(|scope| -> Result<()> {
            let receivers: Vec<_> = (0..workers as u64)
                .map(|w| {
                    let (tx, rx) = mpsc::sync_channel(1);
                    let cfg = &cfg;
                    scope.spawn(move || {
                        for step in (start + w..total).step_by(workers) {
                            if tx.send(prepare_batch(source, cfg, step)).is_err() {
                                break;
                            }
                        }
                    });
                    rx
                })
                .collect();
            // Receivers drop when this closure returns, which stops the
            // producers early on error.
            for step in start..total {
                let batch = receivers[((step - start) % workers as u64) as usize]
                    .recv()
                    .map_err(|_| Error::Dataset("batch worker stopped".into()))??;
                train_on(batch, &mut trainer, &mut log)?;
            }
            Ok(())
        })?;
    }
    log.flush()?;

    let bytes = snapshot(config, &trainer).to_bytes();
    let last = checkpoint_path(out, trainer.state.step);
    write_atomic(&last, &bytes)?;
    write_atomic(&outcome.final_checkpoint, &bytes)?;
    if !outcome.checkpoints.contains(&last) {
        outcome.checkpoints.push(last);
    }
    outcome.final_step = trainer.state.step;
    Ok(outcome)
}

fn snapshot(config: &RunConfig, trainer: &Trainer<Scalar>) -> Checkpoint<Scalar> {
    Checkpoint { config: config.clone(), state: trainer.state.clone(), momentum: trainer.optimizer.buffers.clone() }
}
