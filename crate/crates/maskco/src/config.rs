//! The run configuration file: a TOML document whose sections mirror the
//! core configuration types. Missing keys take the core defaults; unknown
//! keys are rejected.

use std::path::Path;

use maskco_core::analysis::ProbeConfig;
use maskco_core::contrast::NegativeConfig;
use maskco_core::model::{BackboneSpec, ModelConfig, MphConfig};
use maskco_core::sampling::{AugmentConfig, SamplerConfig};
use maskco_core::trainer::{Duration, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DESK_SMALL: &str = include_str!("../configs/desk-small.toml");
pub const PAPER_SCALE: &str = include_str!("../configs/paper-scale.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub augment: AugmentSection,
    pub model: ModelSection,
    pub negatives: NegativeMode,
    pub probe: ProbeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_core(&TrainConfig::default(), &ProbeConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub base_lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Exactly one of `epochs` and `steps` should be set; `steps` wins.
    pub epochs: Option<u64>,
    pub steps: Option<u64>,
    pub ema_momentum: f64,
    pub cosine: bool,
    pub temperature: f64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    /// Batch-preparation threads; 0 prepares batches on the training thread.
    pub workers: usize,
    /// Include `wall_time` in the metrics log. Disable for byte-comparable logs.
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub view_size: usize,
    pub min_crop_area_frac: f64,
    pub crop_ratio: [f64; 2],
    pub flip_prob: f64,
    pub num_neg_boxes: usize,
    pub box_size_range: [f64; 2],
    pub neg_iou_max: f64,
    pub min_overlap_side: f64,
    pub max_attempts: usize,
    pub image_retries: usize,
    pub mask_enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Resnet50,
    Resnet18,
    /// ResNet-18 layout at a quarter of the width.
    Resnet18Quarter,
    Tiny,
}

impl Arch {
    pub fn spec(self) -> BackboneSpec {
        match self {
            Arch::Resnet50 => BackboneSpec::resnet50(),
            Arch::Resnet18 => BackboneSpec::resnet18(),
            Arch::Resnet18Quarter => BackboneSpec::desk(),
            Arch::Tiny => BackboneSpec::tiny(),
        }
    }

    fn of(spec: &BackboneSpec) -> Option<Self> {
        [Arch::Resnet50, Arch::Resnet18, Arch::Resnet18Quarter, Arch::Tiny].into_iter().find(|a| a.spec() == *spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Arch,
    pub mph_blocks: usize,
    pub mph_zero_init_last: bool,
    pub embed_dim: usize,
    /// Projection hidden width; defaults to the backbone output width.
    pub hidden_dim: Option<usize>,
    pub roi_output_size: usize,
    pub roi_sampling_ratio: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeMode {
    #[default]
    Inter,
    Intra,
    Both,
}

impl NegativeMode {
    pub fn config(self) -> NegativeConfig {
        match self {
            NegativeMode::Inter => NegativeConfig::inter(),
            NegativeMode::Intra => NegativeConfig::intra(),
            NegativeMode::Both => NegativeConfig::both(),
        }
    }

    fn of(cfg: &NegativeConfig) -> Self {
        match (cfg.use_inter, cfg.use_intra) {
            (true, true) => NegativeMode::Both,
            (false, true) => NegativeMode::Intra,
            _ => NegativeMode::Inter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub epochs: usize,
    pub milestones: Vec<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub view_size: usize,
    pub standardize: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        RunConfig::default().train
    }
}

impl Default for SamplerSection {
    fn default() -> Self {
        RunConfig::default().sampler
    }
}

impl Default for AugmentSection {
    fn default() -> Self {
        RunConfig::default().augment
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        RunConfig::default().model
    }
}

impl Default for ProbeSection {
    fn default() -> Self {
        RunConfig::default().probe
    }
}

impl RunConfig {
    pub fn from_core(t: &TrainConfig, p: &ProbeConfig) -> Self {
        let s = &t.sampler;
        let a = &s.augment;
        let m = &t.model;
        let (epochs, steps) = match t.duration {
            Duration::Epochs(e) => (Some(e), None),
            Duration::Steps(s) => (None, Some(s)),
        };
        RunConfig {
            train: TrainSection {
                base_lr: t.base_lr,
                sgd_momentum: t.sgd_momentum,
                weight_decay: t.weight_decay,
                batch_size: t.batch_size,
                epochs,
                steps,
                ema_momentum: t.ema_momentum,
                cosine: t.cosine,
                temperature: t.temperature,
                seed: t.seed,
                checkpoint_interval: t.checkpoint_interval,
                workers: 0,
                record_wall_time: true,
            },
            sampler: SamplerSection {
                view_size: s.view_size,
                min_crop_area_frac: s.min_crop_area_frac,
                crop_ratio: s.crop_ratio,
                flip_prob: s.flip_prob,
                num_neg_boxes: s.num_neg_boxes,
                box_size_range: s.box_size_range,
                neg_iou_max: s.neg_iou_max,
                min_overlap_side: s.min_overlap_side,
                max_attempts: s.max_attempts,
                image_retries: s.image_retries,
                mask_enabled: s.mask_enabled,
            },
            augment: AugmentSection {
                brightness: a.brightness,
                contrast: a.contrast,
                saturation: a.saturation,
                hue: a.hue,
                jitter_prob: a.jitter_prob,
                grayscale_prob: a.grayscale_prob,
                blur_prob: a.blur_prob,
                blur_sigma: a.blur_sigma,
                mean: a.mean,
                std: a.std,
            },
            model: ModelSection {
                arch: Arch::of(&m.backbone).unwrap_or(Arch::Resnet50),
                mph_blocks: m.mph.num_blocks,
                mph_zero_init_last: m.mph.zero_init_last,
                embed_dim: m.embed_dim,
                hidden_dim: m.hidden_dim,
                roi_output_size: m.roi_output_size,
                roi_sampling_ratio: m.roi_sampling_ratio,
            },
            negatives: NegativeMode::of(&t.negatives),
            probe: ProbeSection {
                epochs: p.epochs,
                milestones: p.milestones.clone(),
                lr: p.lr,
                momentum: p.momentum,
                weight_decay: p.weight_decay,
                batch_size: p.batch_size,
                view_size: p.view_size,
                standardize: p.standardize,
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// A shipped preset by name: `desk-small` or `paper-scale`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk-small" => Self::parse(DESK_SMALL),
            "paper-scale" => Self::parse(PAPER_SCALE),
            _ => Err(Error::Config(format!("unknown preset `{name}` (expected desk-small or paper-scale)"))),
        }
    }

    /// A preset name or a path to a TOML file.
    pub fn resolve(spec: &str) -> Result<Self> {
        match spec {
            "desk-small" | "paper-scale" => Self::preset(spec),
            path => Self::load(Path::new(path)),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            backbone: m.arch.spec(),
            mph: MphConfig { num_blocks: m.mph_blocks, zero_init_last: m.mph_zero_init_last },
            embed_dim: m.embed_dim,
            hidden_dim: m.hidden_dim,
            roi_output_size: m.roi_output_size,
            roi_sampling_ratio: m.roi_sampling_ratio,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let (s, a) = (&self.sampler, &self.augment);
        SamplerConfig {
            min_crop_area_frac: s.min_crop_area_frac,
            crop_ratio: s.crop_ratio,
            flip_prob: s.flip_prob,
            view_size: s.view_size,
            num_neg_boxes: s.num_neg_boxes,
            box_size_range: s.box_size_range,
            neg_iou_max: s.neg_iou_max,
            min_overlap_side: s.min_overlap_side,
            max_attempts: s.max_attempts,
            image_retries: s.image_retries,
            mask_enabled: s.mask_enabled,
            augment: AugmentConfig {
                brightness: a.brightness,
                contrast: a.contrast,
                saturation: a.saturation,
                hue: a.hue,
                jitter_prob: a.jitter_prob,
                grayscale_prob: a.grayscale_prob,
                blur_prob: a.blur_prob,
                blur_sigma: a.blur_sigma,
                mean: a.mean,
                std: a.std,
            },
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let duration = match (t.steps, t.epochs) {
            (Some(s), _) => Duration::Steps(s),
            (None, Some(e)) => Duration::Epochs(e),
            (None, None) => return Err(Error::Config("train.epochs or train.steps must be set".into())),
        };
        let cfg = TrainConfig {
            base_lr: t.base_lr,
            sgd_momentum: t.sgd_momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            duration,
            ema_momentum: t.ema_momentum,
            cosine: t.cosine,
            temperature: t.temperature,
            seed: t.seed,
            checkpoint_interval: t.checkpoint_interval,
            sampler: self.sampler_config(),
            model: self.model_config(),
            negatives: self.negatives.config(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn probe_config(&self) -> ProbeConfig {
        let p = &self.probe;
        ProbeConfig {
            epochs: p.epochs,
            milestones: p.milestones.clone(),
            lr: p.lr,
            momentum: p.momentum,
            weight_decay: p.weight_decay,
            batch_size: p.batch_size,
            view_size: p.view_size,
            standardize: p.standardize,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        let desk = RunConfig::preset("desk-small").unwrap();
        let t = desk.train_config().unwrap();
        assert_eq!(t.model, ModelConfig::desk());
        assert_eq!(t.sampler, SamplerConfig::desk());
        assert_eq!(t.batch_size, 32);
        assert_eq!(desk.probe_config(), ProbeConfig::desk());

        let paper = RunConfig::preset("paper-scale").unwrap();
        let t = paper.train_config().unwrap();
        let want = TrainConfig::default();
        assert_eq!(t, want);
        assert_eq!((t.base_lr, t.sgd_momentum, t.weight_decay, t.batch_size), (0.03, 0.9, 0.001, 256));
        assert_eq!(t.duration, Duration::Epochs(100));
        assert_eq!(paper.probe_config(), ProbeConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::preset("desk-small").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn missing_keys_take_defaults_and_unknown_keys_fail() {
        let cfg = RunConfig::parse("[train]\nsteps = 5\n").unwrap();
        assert_eq!(cfg.train.steps, Some(5));
        assert_eq!(cfg.sampler, RunConfig::default().sampler);
        assert!(matches!(RunConfig::parse("[train]\nstepz = 5\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::preset("huge"), Err(Error::Config(_))));
    }
}
