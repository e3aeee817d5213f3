#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maskco::dataset::save_png;
use maskco::synth::render;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A configuration small enough to train in well under a second per step.
pub const TINY_CONFIG: &str = r#"
[train]
batch_size = 4
steps = 2
checkpoint_interval = 1
record_wall_time = false
seed = 3

[sampler]
view_size = 64
num_neg_boxes = 4
box_size_range = [12.0, 28.0]
min_overlap_side = 20.0

[model]
arch = "tiny"
mph_blocks = 1
embed_dim = 16
hidden_dim = 8

[probe]
epochs = 3
milestones = [2]
batch_size = 8
view_size = 32
"#;

pub struct Fixture {
    pub dir: tempfile::TempDir,
}

impl Fixture {
    /// `train/` and `val/` with `per_class` images in each of `classes`
    /// folders, a flat `flat/` folder, an empty `empty/` folder and
    /// `tiny.toml`.
    pub fn new(classes: usize, per_class: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for split in ["train", "val"] {
            for c in 0..classes {
                let d = dir.path().join(split).join(format!("class{c}"));
                std::fs::create_dir_all(&d).unwrap();
                for i in 0..per_class {
                    save_png(&d.join(format!("{i}.png")), &render(c, 64, &mut rng)).unwrap();
                }
            }
        }
        let flat = dir.path().join("flat");
        std::fs::create_dir_all(&flat).unwrap();
        for i in 0..4 {
            save_png(&flat.join(format!("{i}.png")), &render(i % 10, 64, &mut rng)).unwrap();
        }
        std::fs::create_dir_all(dir.path().join("empty")).unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY_CONFIG).unwrap();
        Fixture { dir }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn config(&self) -> String {
        self.path("tiny.toml").display().to_string()
    }
}

pub fn maskco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskco"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("MASKCO_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn files_with_ext(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    v.sort();
    v
}
