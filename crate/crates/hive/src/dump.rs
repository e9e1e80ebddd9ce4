//! On-disk trajectory dumps: one directory per example holding
//! `traj_meta.json` and `hidden.bin`.
//!
//! `hidden.bin` is the concatenation over steps of little-endian `f32`
//! arrays shaped `[L, |cap_t|, d]`, where `|cap_t|` is the number of captured
//! positions of step `t` listed in the metadata.

use std::fs;
use std::path::{Path, PathBuf};

use hive_core::trajectory::{balanced_labels, synth_trajectory, CaptureSet, SynthConfig, TrajectoryStep};
use hive_core::{Label, Trajectory, TrajectoryConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{decode_le, encode_le, read_bytes, to_json_bytes, write_bytes, write_json};

pub const META_FILE: &str = "traj_meta.json";
pub const HIDDEN_FILE: &str = "hidden.bin";
pub const SYNTH_CONFIG_FILE: &str = "synth_config.json";
const FORMAT: &str = "hive-trajectory";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StepMeta {
    forward_id: u32,
    token_ids: Vec<u32>,
    last_position: u32,
    changed_positions: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DumpMeta {
    format: String,
    version: u32,
    example_id: String,
    question: String,
    base_answer: String,
    #[serde(default)]
    gold_answers: Vec<String>,
    label: Label,
    planted_pairs: Option<Vec<(u32, u32)>>,
    config: TrajectoryConfig,
    steps: Vec<StepMeta>,
}

/// A trajectory together with the reference answers recorded next to it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDump {
    pub trajectory: Trajectory,
    pub gold_answers: Vec<String>,
}

/// Writes one example directory. The trajectory is validated first, so a dump
/// never contains NaN or mis-shaped hidden states.
pub fn write_dump(dir: &Path, traj: &Trajectory, gold_answers: &[String]) -> Result<()> {
    traj.validate()?;
    let meta = DumpMeta {
        format: FORMAT.into(),
        version: VERSION,
        example_id: traj.example_id.clone(),
        question: traj.question.clone(),
        base_answer: traj.base_answer.clone(),
        gold_answers: gold_answers.to_vec(),
        label: traj.label,
        planted_pairs: traj.planted_pairs.clone(),
        config: traj.config.clone(),
        steps: traj
            .steps
            .iter()
            .map(|s| StepMeta {
                forward_id: s.forward_id,
                token_ids: s.token_ids.clone(),
                last_position: s.capture.last_position(),
                changed_positions: s.capture.changed_positions().to_vec(),
            })
            .collect(),
    };
    let hidden: Vec<u8> = traj.steps.iter().flat_map(|s| encode_le(&s.hidden)).collect();
    write_bytes(&dir.join(HIDDEN_FILE), &hidden)?;
    write_bytes(&dir.join(META_FILE), &to_json_bytes(&meta))
}

/// Reads and fully validates one example directory.
pub fn read_dump(dir: &Path) -> Result<TrajectoryDump> {
    let meta_path = dir.join(META_FILE);
    let bytes = read_bytes(&meta_path)?;
    let meta: DumpMeta = serde_json::from_slice(&bytes).map_err(|e| Error::header(&meta_path, e.to_string()))?;
    if meta.format != FORMAT || meta.version != VERSION {
        return Err(Error::header(&meta_path, format!("expected {FORMAT} v{VERSION}, found {} v{}", meta.format, meta.version)));
    }
    let cfg = &meta.config;
    if meta.steps.len() != cfg.num_steps {
        return Err(Error::header(&meta_path, format!("{} steps listed, config says {}", meta.steps.len(), cfg.num_steps)));
    }
    let hidden_path = dir.join(HIDDEN_FILE);
    let raw = read_bytes(&hidden_path)?;
    let mut offset = 0;
    let mut steps = Vec::with_capacity(meta.steps.len());
    for (t, s) in meta.steps.into_iter().enumerate() {
        let capture = CaptureSet::new(s.last_position, s.changed_positions, cfg.max_changed_positions)?;
        let count = cfg.num_layers * capture.len() * cfg.hidden_dim;
        let len = (count * 4).min(raw.len() - offset);
        let hidden = decode_le::<f32>(&raw[offset..offset + len], count, &hidden_path, &format!("step {t}"))?;
        offset += len;
        steps.push(TrajectoryStep { forward_id: s.forward_id, token_ids: s.token_ids, capture, hidden });
    }
    if offset != raw.len() {
        return Err(Error::Format(format!("{}: {} trailing bytes after the last step", hidden_path.display(), raw.len() - offset)));
    }
    let trajectory = Trajectory {
        config: meta.config,
        example_id: meta.example_id,
        question: meta.question,
        base_answer: meta.base_answer,
        label: meta.label,
        planted_pairs: meta.planted_pairs,
        steps,
    };
    trajectory.validate()?;
    Ok(TrajectoryDump { trajectory, gold_answers: meta.gold_answers })
}

/// Example directories under `root` (those holding a metadata file), sorted
/// by name.
pub fn list_dumps(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(Error::io(root))? {
        let path = entry.map_err(Error::io(root))?.path();
        if path.join(META_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Synthesizes `count` examples into `out/<example_id>/` in parallel and
/// records the configuration in `out/synth_config.json`.
pub fn synth_to_dir(cfg: &SynthConfig, count: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let labels = balanced_labels(count, cfg.positive_rate, cfg.trajectory.seed)?;
    write_json(&out.join(SYNTH_CONFIG_FILE), cfg)?;
    labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| {
            let traj = synth_trajectory(&cfg.trajectory, i as u64, label, &cfg.planted_pairs, cfg.signal_strength)?;
            let dir = out.join(&traj.example_id);
            write_dump(&dir, &traj, &[])?;
            Ok(dir)
        })
        .collect()
}
