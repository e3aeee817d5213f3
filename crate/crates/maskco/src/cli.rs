//! Subcommands of the `maskco` binary.
//!
//! Every command resolves its configuration (preset or file, then flag
//! overrides), writes a `manifest.json` into its output directory before
//! doing any work, and rewrites it with the produced artifacts at the end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use maskco_core::analysis::{
    dataset_distance_scan, mph_response_maps, response_mask_side, train_linear_probes, DistanceReport, FrozenBackbone,
    ProbeResult, ResponseMaps,
};
use maskco_core::model::{Backbone, BackboneSpec, MaskCoNet, STAGES};
use maskco_core::nn::{ParamSet, Registry};
use maskco_core::sampling::augment::to_tensor;
use maskco_core::sampling::Image;
use maskco_core::trainer::{stream_rng, Stream};
use serde::Serialize;

use crate::checkpoint::{build_model, load_backbone_weights, write_atomic, Checkpoint};
use crate::config::{NegativeMode, RunConfig};
use crate::dataset::{load_image, save_png, ImageFolder};
use crate::error::{Error, Result};
use crate::manifest::RunManifest;
use crate::pretrain::{run_pretraining, Scalar};
use crate::synth::{write_dataset, SynthConfig};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "MASKCO_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "maskco", version, about = "Contrastive mask prediction pretraining and analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Self-supervised pretraining on an image folder.
    Pretrain(PretrainArgs),
    /// Linear probes on frozen backbone stages.
    Probe(ProbeArgs),
    /// Mean feature distance between random crop pairs of a dataset.
    AnalyzeDistance(DistanceArgs),
    /// Backbone and mask-prediction-head response maps for one image.
    VisualizeMph(VisualizeArgs),
    /// Writes the procedural labeled dataset used for desk-scale runs.
    SynthData(SynthArgs),
    /// Prints a resolved configuration as TOML.
    ShowConfig(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Preset name (desk-small, paper-scale) or path to a TOML file.
    #[arg(long, default_value = "desk-small")]
    pub config: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory. Defaults to `$MASKCO_OUTPUT_ROOT/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Image folder (flat or one subdirectory per class).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long, conflicts_with = "steps")]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Disables query masking.
    #[arg(long)]
    pub no_mask: bool,
    /// Number of residual blocks in the mask prediction head.
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=4))]
    pub mph_blocks: Option<u64>,
    #[arg(long, value_enum)]
    pub negatives: Option<NegativeMode>,
    /// Batch-preparation threads; 0 prepares batches on the training thread.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    /// Leave `wall_time` out of the metrics log.
    #[arg(long)]
    pub no_wall_time: bool,
    /// Continue from the newest checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Decode the whole dataset into memory first.
    #[arg(long)]
    pub preload: bool,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Pretraining checkpoint; its stored configuration replaces `--config`.
    #[arg(long, required_unless_present = "random_init")]
    pub checkpoint: Option<PathBuf>,
    /// Probe a freshly initialized backbone instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub random_init: bool,
    /// Labeled training split (one subdirectory per class).
    #[arg(long)]
    pub train: PathBuf,
    /// Labeled held-out split.
    #[arg(long)]
    pub val: PathBuf,
    /// Stages to probe, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = ["conv4".to_string(), "conv5".to_string()])]
    pub layers: Vec<String>,
    /// Probe conv1 through conv5.
    #[arg(long)]
    pub all_layers: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DistanceArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// MaskCo checkpoint whose online backbone encodes the crops.
    #[arg(long, conflicts_with_all = ["resnet50", "random_init"])]
    pub checkpoint: Option<PathBuf>,
    /// Safetensors file of a torchvision ResNet-50.
    #[arg(long, conflicts_with = "random_init")]
    pub resnet50: Option<PathBuf>,
    /// Use a freshly initialized backbone of the configured architecture.
    #[arg(long)]
    pub random_init: bool,
    #[arg(long, default_value_t = 1000)]
    pub pairs: usize,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 200)]
    pub val_per_class: usize,
    #[arg(long, default_value_t = 112)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Runs a parsed command and returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain(a) => pretrain(a),
        Command::Probe(a) => probe(a),
        Command::AnalyzeDistance(a) => analyze_distance(a),
        Command::VisualizeMph(a) => visualize_mph(a),
        Command::SynthData(a) => synth_data(a),
        Command::ShowConfig(a) => {
            print!("{}", resolve_config(&a)?.to_toml());
            Ok(())
        }
    }
}

fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::resolve(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn output_dir(common: &CommonArgs, command: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(command)
    })
}

/// Writes the manifest, runs `work`, then records its outcome.
fn with_manifest(
    command: &str,
    cfg: &RunConfig,
    out: &Path,
    inputs: Vec<PathBuf>,
    work: impl FnOnce() -> Result<Vec<PathBuf>>,
) -> Result<()> {
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    let mut manifest = RunManifest::new(command, cfg, out);
    manifest.inputs = inputs;
    manifest.write()?;
    let outcome = work();
    manifest.finish(&outcome)?;
    outcome.map(|_| ())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("plain report");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn open_dataset(path: &Path, preload: bool) -> Result<ImageFolder> {
    let mut ds = ImageFolder::open(path)?;
    if preload {
        ds.preload()?;
    }
    Ok(ds)
}

/// Applies the pretraining flags to `cfg`.
pub fn apply_pretrain_overrides(cfg: &mut RunConfig, a: &PretrainArgs) {
    let t = &mut cfg.train;
    if let Some(s) = a.steps {
        t.steps = Some(s);
    }
    if let Some(e) = a.epochs {
        t.epochs = Some(e);
        t.steps = None;
    }
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    if let Some(w) = a.workers {
        t.workers = w;
    }
    if let Some(i) = a.checkpoint_interval {
        t.checkpoint_interval = i;
    }
    if a.no_wall_time {
        t.record_wall_time = false;
    }
    if a.no_mask {
        cfg.sampler.mask_enabled = false;
    }
    if let Some(m) = a.mph_blocks {
        cfg.model.mph_blocks = m as usize;
    }
    if let Some(n) = a.negatives {
        cfg.negatives = n;
    }
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.common)?;
    apply_pretrain_overrides(&mut cfg, &a);
    cfg.train_config()?;
    let out = output_dir(&a.common, "pretrain");
    let ds = open_dataset(&a.data, a.preload)?;
    with_manifest("pretrain", &cfg, &out, vec![a.data.clone()], || {
        let outcome = run_pretraining(&cfg, &ds, &out, a.resume)?;
        log::info!(
            "finished at step {} ({} steps run, {} images skipped)",
            outcome.final_step,
            outcome.steps_run,
            outcome.images_skipped
        );
        Ok(outcome.artifacts())
    })
}

/// Serializable form of a probe result.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub layer: String,
    pub top1: f64,
    pub train_top1: f64,
    pub num_train: usize,
    pub num_test: usize,
    pub epochs: usize,
    pub view_size: usize,
    /// `checkpoint` path or `random-init`.
    pub encoder: String,
    pub seed: u64,
}

impl ProbeReport {
    fn new(r: &ProbeResult, encoder: &str, seed: u64) -> Self {
        ProbeReport {
            layer: r.layer.clone(),
            top1: r.top1,
            train_top1: r.train_top1,
            num_train: r.num_train,
            num_test: r.num_test,
            epochs: r.config.epochs,
            view_size: r.config.view_size,
            encoder: encoder.into(),
            seed,
        }
    }
}

/// Online backbone weights of a checkpoint, or fresh ones.
fn encoder_weights(checkpoint: Option<&Path>, cfg: &RunConfig) -> Result<(RunConfig, MaskCoNet, ParamSet<Scalar>, ParamSet<Scalar>)> {
    match checkpoint {
        Some(path) => {
            let ck = Checkpoint::<Scalar>::load(path)?;
            let (net, _, _) = build_model::<Scalar>(&ck.config)?;
            Ok((ck.config, net, ck.state.online, ck.state.online_stats))
        }
        None => {
            let (net, params, stats) = build_model::<Scalar>(cfg)?;
            Ok((cfg.clone(), net, params, stats))
        }
    }
}

fn labeled(path: &Path) -> Result<ImageFolder> {
    let ds = open_dataset(path, true)?;
    if !ds.is_labeled() {
        return Err(Error::Dataset(format!("{} has unlabeled images; expected one subdirectory per class", path.display())));
    }
    Ok(ds)
}

fn probe(a: ProbeArgs) -> Result<()> {
    let requested = resolve_config(&a.common)?;
    let out = output_dir(&a.common, "probe");
    let (mut cfg, net, params, stats) = encoder_weights(a.checkpoint.as_deref(), &requested)?;
    if let Some(seed) = a.common.seed {
        cfg.train.seed = seed;
    }
    if let Some(e) = a.epochs {
        cfg.probe.epochs = e;
    }
    let layers: Vec<String> = if a.all_layers { STAGES.iter().map(|s| s.to_string()).collect() } else { a.layers.clone() };
    for l in &layers {
        BackboneSpec::stage_index(l)?;
    }
    let (train, val) = (labeled(&a.train)?, labeled(&a.val)?);
    let mut inputs = vec![a.train.clone(), a.val.clone()];
    inputs.extend(a.checkpoint.clone());
    let encoder_name = a.checkpoint.as_ref().map_or("random-init".to_string(), |p| p.display().to_string());
    with_manifest("probe", &cfg, &out, inputs, || {
        let encoder = FrozenBackbone::new(&net.backbone, &params, &stats);
        let layer_refs: Vec<&str> = layers.iter().map(String::as_str).collect();
        let mut rng = stream_rng(cfg.train.seed, Stream::Analysis, 0);
        let norm = (&cfg.augment.mean, &cfg.augment.std);
        let results = train_linear_probes(&encoder, &train, &val, &layer_refs, &cfg.probe_config(), norm, &mut rng)?;
        let mut artifacts = Vec::new();
        for r in &results {
            log::info!("{}: top-1 {:.4} (train {:.4})", r.layer, r.top1, r.train_top1);
            let path = out.join(format!("probe-{}.json", r.layer));
            write_json(&path, &ProbeReport::new(r, &encoder_name, cfg.train.seed))?;
            artifacts.push(path);
        }
        Ok(artifacts)
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DistanceJson {
    pub dataset: String,
    pub encoder: String,
    pub seed: u64,
    pub view_size: usize,
    pub num_pairs: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub distances: Vec<f64>,
}

impl DistanceJson {
    fn new(r: &DistanceReport, encoder: &str, seed: u64, view_size: usize) -> Self {
        DistanceJson {
            dataset: r.dataset.clone(),
            encoder: encoder.into(),
            seed,
            view_size,
            num_pairs: r.num_pairs,
            mean: r.mean,
            min: r.min(),
            max: r.max(),
            distances: r.distances.clone(),
        }
    }
}

fn resnet50_from(path: &Path) -> Result<(Backbone, ParamSet<Scalar>, ParamSet<Scalar>)> {
    let mut rng = stream_rng(0, Stream::Init, 0);
    let mut reg = Registry::new(&mut rng);
    let backbone = Backbone::new(&mut reg, &BackboneSpec::resnet50());
    let (mut params, mut stats) = (reg.params, reg.stats);
    load_backbone_weights(path, &mut params, &mut stats)?;
    Ok((backbone, params, stats))
}

fn analyze_distance(a: DistanceArgs) -> Result<()> {
    let cfg = resolve_config(&a.common)?;
    let out = output_dir(&a.common, "analyze-distance");
    if a.checkpoint.is_none() && a.resnet50.is_none() && !a.random_init {
        return Err(Error::Config("pass --checkpoint, --resnet50 or --random-init".into()));
    }
    let ds = open_dataset(&a.data, false)?;
    let (backbone, params, stats, encoder_name) = match &a.resnet50 {
        Some(p) => {
            let (b, pa, st) = resnet50_from(p)?;
            (b, pa, st, format!("resnet50:{}", p.display()))
        }
        None => {
            let (_, net, pa, st) = encoder_weights(a.checkpoint.as_deref(), &cfg)?;
            let name = a.checkpoint.as_ref().map_or("random-init".into(), |p| p.display().to_string());
            (net.backbone, pa, st, name)
        }
    };
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.checkpoint.clone().into_iter().chain(a.resnet50.clone()));
    with_manifest("analyze-distance", &cfg, &out, inputs, || {
        let encoder = FrozenBackbone::new(&backbone, &params, &stats);
        let mut rng = stream_rng(cfg.train.seed, Stream::Analysis, 1);
        let name = a.data.display().to_string();
        let sampler = cfg.sampler_config();
        let report = dataset_distance_scan(&name, &ds, &encoder, &sampler, &mut rng, a.pairs)?;
        log::info!("mean distance {:.4} over {} pairs", report.mean, report.num_pairs);
        let path = out.join("distance.json");
        write_json(&path, &DistanceJson::new(&report, &encoder_name, cfg.train.seed, sampler.view_size))?;
        Ok(vec![path])
    })
}

/// Response ratios (masked-region mean over the rest) of the four maps.
#[derive(Debug, Clone, Serialize)]
pub struct ResponseRatios {
    pub conv5_unmasked: Option<f64>,
    pub mph_unmasked: Option<f64>,
    pub conv5_masked: Option<f64>,
    pub mph_masked: Option<f64>,
    pub mask: [f64; 4],
    pub view_size: usize,
}

/// Min-max normalized heat map on a black, red, yellow, white ramp.
pub fn heatmap(map: &[f64], side: usize) -> Image {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = map
        .iter()
        .flat_map(|&v| {
            let t = ((v - lo) / span).clamp(0.0, 1.0) as f32 * 3.0;
            [t.min(1.0), (t - 1.0).clamp(0.0, 1.0), (t - 2.0).clamp(0.0, 1.0)]
        })
        .collect();
    Image::new(side, side, data).expect("square map")
}

/// Center view of `img` at the configured probe resolution.
pub fn center_view(img: &Image, cfg: &RunConfig) -> maskco_core::Tensor<Scalar> {
    let v = cfg.sampler.view_size;
    let t = maskco_core::analysis::eval_transform(img.width(), img.height(), v);
    to_tensor(&img.render_view(&t), &cfg.augment.mean, &cfg.augment.std)
}

fn visualize_mph(a: VisualizeArgs) -> Result<()> {
    let requested = resolve_config(&a.common)?;
    let out = output_dir(&a.common, "visualize-mph");
    let (cfg, net, params, stats) = encoder_weights(Some(&a.checkpoint), &requested)?;
    let img = load_image(&a.image).map_err(|e| match e {
        Error::Image { .. } | Error::Io { .. } => Error::Config(e.to_string()),
        other => other,
    })?;
    with_manifest("visualize-mph", &cfg, &out, vec![a.checkpoint.clone(), a.image.clone()], || {
        let view = center_view(&img, &cfg);
        let v = cfg.sampler.view_size;
        let resp = mph_response_maps(&net, &params, &stats, &view, response_mask_side(v))?;
        let mut artifacts = Vec::new();
        let maps: [(&str, &ResponseMaps); 2] = [("unmasked", &resp.unmasked), ("masked", &resp.masked)];
        for (tag, m) in maps {
            for (layer, map) in [("conv5", &m.conv5), ("mph", &m.mph)] {
                let path = out.join(format!("{layer}-{tag}.png"));
                save_png(&path, &heatmap(map.data(), v))?;
                artifacts.push(path);
            }
        }
        let ratios = ResponseRatios {
            conv5_unmasked: resp.unmasked.conv5_ratio,
            mph_unmasked: resp.unmasked.mph_ratio,
            conv5_masked: resp.masked.conv5_ratio,
            mph_masked: resp.masked.mph_ratio,
            mask: resp.mask.as_array(),
            view_size: v,
        };
        let path = out.join("ratios.json");
        write_json(&path, &ratios)?;
        artifacts.push(path);
        Ok(artifacts)
    })
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig { train_per_class: a.train_per_class, val_per_class: a.val_per_class, size: a.size, seed: a.seed };
    let summary = write_dataset(&a.out, &cfg)?;
    write_json(&a.out.join("synth.json"), &summary)?;
    log::info!("wrote {} training and {} validation images", summary.num_train, summary.num_val);
    Ok(())
}
