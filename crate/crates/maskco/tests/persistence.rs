mod common;

use common::{Fixture, TINY_CONFIG};
use maskco::checkpoint::Checkpoint;
use maskco::config::RunConfig;
use maskco::dataset::ImageFolder;
use maskco::pretrain::{checkpoint_path, latest_checkpoint, run_pretraining, Scalar};

fn setup() -> (Fixture, RunConfig, ImageFolder) {
    let fx = Fixture::new(2, 1);
    let cfg = RunConfig::parse(TINY_CONFIG).unwrap();
    let ds = ImageFolder::open(&fx.path("flat")).unwrap();
    (fx, cfg, ds)
}

fn with_steps(cfg: &RunConfig, steps: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.train.steps = Some(steps);
    c
}

#[test]
fn save_load_save_is_byte_identical() {
    let (fx, cfg, ds) = setup();
    let out = fx.path("run");
    run_pretraining(&cfg, &ds, &out, false).unwrap();
    let path = out.join("checkpoint.safetensors");
    let first = std::fs::read(&path).unwrap();
    let ck = Checkpoint::<Scalar>::load(&path).unwrap();
    assert_eq!(ck.state.step, 2);
    assert_eq!(ck.config, cfg);
    assert_eq!(ck.to_bytes(), first);
    let again = fx.path("again.safetensors");
    ck.save(&again).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), first);
}

#[test]
fn resume_with_nothing_left_preserves_state() {
    let (fx, cfg, ds) = setup();
    let out = fx.path("run");
    run_pretraining(&cfg, &ds, &out, false).unwrap();
    let before = std::fs::read(out.join("checkpoint.safetensors")).unwrap();
    let log_before = std::fs::read(out.join("metrics.jsonl")).unwrap();
    let outcome = run_pretraining(&cfg, &ds, &out, true).unwrap();
    assert_eq!(outcome.steps_run, 0);
    assert_eq!(std::fs::read(out.join("checkpoint.safetensors")).unwrap(), before);
    assert_eq!(std::fs::read(out.join("metrics.jsonl")).unwrap(), log_before);
    let a = Checkpoint::<Scalar>::load(&out.join("checkpoint.safetensors")).unwrap();
    let b = Checkpoint::<Scalar>::load(&checkpoint_path(&out, 2)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fixed_seed_runs_log_identically() {
    let (fx, cfg, ds) = setup();
    let cfg = with_steps(&cfg, 3);
    let mut logs = Vec::new();
    for (name, workers) in [("a", 0), ("b", 0), ("c", 2)] {
        let mut c = cfg.clone();
        c.train.workers = workers;
        let out = fx.path(name);
        run_pretraining(&c, &ds, &out, false).unwrap();
        logs.push(std::fs::read(out.join("metrics.jsonl")).unwrap());
    }
    assert_eq!(logs[0].iter().filter(|&&b| b == b'\n').count(), 3);
    assert_eq!(logs[0], logs[1]);
    assert_eq!(logs[0], logs[2], "worker threads must not change batch contents");
}

#[test]
fn interrupted_and_resumed_run_matches_uninterrupted() {
    let (fx, cfg, ds) = setup();
    let full = with_steps(&cfg, 4);
    run_pretraining(&full, &ds, &fx.path("straight"), false).unwrap();

    // Stop after two steps, then continue with the full schedule.
    let out = fx.path("split");
    run_pretraining(&full, &ds, &out, false).unwrap();
    for s in [3, 4] {
        std::fs::remove_file(checkpoint_path(&out, s)).unwrap();
    }
    assert_eq!(latest_checkpoint(&out), Some(checkpoint_path(&out, 2)));
    let outcome = run_pretraining(&full, &ds, &out, true).unwrap();
    assert_eq!(outcome.steps_run, 2);

    let a = std::fs::read(fx.path("straight/checkpoint.safetensors")).unwrap();
    let b = std::fs::read(out.join("checkpoint.safetensors")).unwrap();
    assert_eq!(a, b);
    let la = std::fs::read(fx.path("straight/metrics.jsonl")).unwrap();
    let lb = std::fs::read(out.join("metrics.jsonl")).unwrap();
    assert_eq!(la, lb);
}

#[test]
fn checkpoints_follow_the_interval() {
    let (fx, cfg, ds) = setup();
    let mut c = with_steps(&cfg, 5);
    c.train.checkpoint_interval = 2;
    let out = fx.path("run");
    let outcome = run_pretraining(&c, &ds, &out, false).unwrap();
    let want: Vec<_> = [2, 4, 5].iter().map(|&s| checkpoint_path(&out, s)).collect();
    assert_eq!(outcome.checkpoints, want);
    assert!(want.iter().all(|p| p.is_file()));
}

#[test]
fn resuming_with_another_architecture_fails() {
    let (fx, cfg, ds) = setup();
    let out = fx.path("run");
    run_pretraining(&cfg, &ds, &out, false).unwrap();
    let mut other = cfg.clone();
    other.model.embed_dim = 32;
    let err = run_pretraining(&other, &ds, &out, true).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn bad_checkpoints_are_rejected() {
    let (fx, cfg, ds) = setup();
    let out = fx.path("run");
    run_pretraining(&cfg, &ds, &out, false).unwrap();
    let bytes = std::fs::read(out.join("checkpoint.safetensors")).unwrap();
    let cut = fx.path("cut.safetensors");
    std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    assert!(Checkpoint::<Scalar>::load(&cut).is_err());
    let plain = fx.path("plain.safetensors");
    std::fs::write(&plain, b"\x08\0\0\0\0\0\0\0{}      ").unwrap();
    assert!(Checkpoint::<Scalar>::load(&plain).is_err());
}
