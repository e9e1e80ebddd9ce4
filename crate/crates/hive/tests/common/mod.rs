#![allow(dead_code)]

use std::path::{Path, PathBuf};

use hive::core::selector::TrainConfig;
use hive::core::trajectory::SynthConfig;
use hive::core::TrajectoryConfig;
use hive::pipeline;

pub const R: usize = 8;
pub const SEED: u64 = 7;
pub const EXAMPLES: usize = 60;
pub const K: usize = 4;

pub fn synth_config() -> SynthConfig {
    SynthConfig {
        trajectory: TrajectoryConfig {
            num_steps: 4,
            num_layers: 3,
            hidden_dim: 16,
            max_changed_positions: 4,
            seq_len: 12,
            seed: 11,
            change_prob: 0.3,
        },
        positive_rate: 0.5,
        planted_pairs: vec![(3, 1)],
        signal_strength: 4.0,
    }
}

pub fn train_config() -> TrainConfig {
    TrainConfig { epochs: 3, batch_size: 16, k: K, gate_hidden: 16, probe_hidden: 16, step_dim: 4, layer_dim: 4, ..TrainConfig::default() }
}

/// Paths of a complete small pipeline run under one temporary directory.
pub struct Fixture {
    pub tmp: tempfile::TempDir,
    pub traj: PathBuf,
    pub store: PathBuf,
    pub ckpt: PathBuf,
    pub evidence: PathBuf,
    pub dataset: PathBuf,
}

impl Fixture {
    pub fn root(&self) -> &Path {
        self.tmp.path()
    }
}

/// Trajectories and a feature store only.
pub fn store_fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let f = Fixture {
        traj: root.join("traj"),
        store: root.join("store"),
        ckpt: root.join("sel.ckpt"),
        evidence: root.join("evidence"),
        dataset: root.join("dataset"),
        tmp,
    };
    pipeline::synth(&synth_config(), &f.traj, EXAMPLES).unwrap();
    pipeline::build_features(&f.traj, &f.store, R, SEED).unwrap();
    f
}

/// Store, checkpoint, exported evidence for every split and packed datasets.
pub fn full_fixture() -> Fixture {
    let f = store_fixture();
    pipeline::train(&f.store, &f.ckpt, &train_config()).unwrap();
    for split in pipeline::SPLITS {
        pipeline::export(&f.store, &f.ckpt, split, &f.evidence, true).unwrap();
    }
    pipeline::pack(&f.evidence, &f.store.join(hive::store::META_FILE), &f.dataset).unwrap();
    f
}

/// Every regular file under `dir`, relative path first, sorted.
pub fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).unwrap();
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}
