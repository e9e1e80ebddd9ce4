//! One function per pipeline stage, operating on paths. The command-line
//! front end is a thin wrapper over these.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use hive_core::metrics::ThresholdStrategy;
use hive_core::selector::{train_selector, TrainConfig, TrainReport};
use hive_core::trajectory::SynthConfig;
use hive_core::{OporpProjector, TrajectoryConfig};
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::dump::{list_dumps, read_dump, synth_to_dir, SYNTH_CONFIG_FILE};
use crate::error::{bail, Error, Result};
use crate::io::{read_json, read_jsonl, write_bytes, write_json, write_jsonl};
use crate::scoring::{evaluate_predictions, EvaluationReport};
use crate::shard::{aggregate_selection_pattern, export_split, grid_csv, DEFAULT_SHARD_SIZE, INDEX_FILE};
use crate::store::{FeatureStore, MetaRecord, StoreWriter};
use crate::verifier::run::{read_responses, run_external_command, write_requests};
use crate::verifier::{eval_structured, pack_dataset, run_mock, PredictionRecord, StructuredPrediction, StructuredReport, VerifierExample};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Writes `count` synthetic trajectory dumps under `out`.
pub fn synth(cfg: &SynthConfig, out: &Path, count: usize) -> Result<usize> {
    Ok(synth_to_dir(cfg, count, out)?.len())
}

/// Projects every dump under `traj_dir` into the store at `out`, creating or
/// extending it. Dumps are read and projected in parallel chunks and
/// appended in name order.
pub fn build_features(traj_dir: &Path, out: &Path, r: usize, seed: u64) -> Result<FeatureStore> {
    const CHUNK: usize = 256;
    let dirs = list_dumps(traj_dir)?;
    let config: TrajectoryConfig = match dirs.first() {
        Some(first) => read_dump(first)?.trajectory.config,
        None => {
            let path = traj_dir.join(SYNTH_CONFIG_FILE);
            if !path.exists() {
                bail!(Input, "{} holds no trajectory dumps and no {SYNTH_CONFIG_FILE}", traj_dir.display());
            }
            read_json::<SynthConfig>(&path)?.trajectory
        }
    };
    let projector = OporpProjector::new(config.num_layers, config.hidden_dim, r, seed)?;
    let mut writer = StoreWriter::open(out, config.num_steps, config.max_capture(), projector)?;
    for chunk in dirs.chunks(CHUNK) {
        let w = &writer;
        let packed = chunk
            .par_iter()
            .map(|dir| {
                let dump = read_dump(dir)?;
                if w.contains(&dump.trajectory.example_id) {
                    return Ok(None);
                }
                let row = w.pack(&dump)?;
                Ok(Some((dump, row)))
            })
            .collect::<Result<Vec<_>>>()?;
        let packed: Vec<_> = packed.into_iter().flatten().collect();
        let added = writer.append(&packed)?;
        log::info!("appended {added} rows (store now has {})", writer.dims().rows);
    }
    writer.finish()
}

/// Report path written next to a checkpoint: `sel.ckpt` → `sel.report.json`.
pub fn report_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("report.json")
}

/// Trains on every row of the store, then writes the checkpoint and its
/// report.
pub fn train(store_dir: &Path, ckpt_path: &Path, cfg: &TrainConfig) -> Result<(Checkpoint, TrainReport)> {
    let store = FeatureStore::open(store_dir)?;
    let data = store.selector_dataset()?;
    let (model, report) = train_selector(&data, cfg)?;
    let ckpt = Checkpoint::new(&store, model, cfg.clone(), &report);
    ckpt.save(ckpt_path)?;
    write_json(&report_path(ckpt_path), &report)?;
    Ok((ckpt, report))
}

pub fn export(store_dir: &Path, ckpt_path: &Path, split: &str, out: &Path, include_act: bool) -> Result<Vec<PathBuf>> {
    let store = FeatureStore::open(store_dir)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    export_split(&store, &ckpt, split, out, include_act, DEFAULT_SHARD_SIZE)
}

/// Packs every exported split found under `evidence_dir`. Returns
/// `(split, records)` pairs.
pub fn pack(evidence_dir: &Path, meta_path: &Path, out: &Path) -> Result<Vec<(String, usize)>> {
    let meta: Vec<MetaRecord> = read_jsonl(meta_path)?;
    let splits: Vec<&str> = SPLITS.into_iter().filter(|s| evidence_dir.join(s).join(INDEX_FILE).is_file()).collect();
    if splits.is_empty() {
        bail!(Input, "{} holds no exported split", evidence_dir.display());
    }
    splits.into_iter().map(|s| Ok((s.to_string(), pack_dataset(&evidence_dir.join(s), &meta, out)?))).collect()
}

fn dataset_root(data: &Path) -> PathBuf {
    match data.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// How `run_verifier` obtains predictions.
#[derive(Debug, Clone)]
pub enum VerifierMode {
    /// Least-squares mock fitted on the given training file.
    Mock { train: PathBuf },
    /// Writes `request`; runs `command` if given; reads `response`.
    External { command: Option<String>, request: PathBuf, response: PathBuf },
}

/// Produces a predictions file for `data`. Returns `None` when an external
/// run stopped after writing its request file because no response exists
/// yet.
pub fn run_verifier(mode: &VerifierMode, data: &Path, out: &Path) -> Result<Option<Vec<PredictionRecord>>> {
    let examples: Vec<VerifierExample> = read_jsonl(data)?;
    let root = dataset_root(data);
    let preds = match mode {
        VerifierMode::Mock { train } => {
            let train_examples: Vec<VerifierExample> = read_jsonl(train)?;
            run_mock(&train_examples, &examples, &root)?
        }
        VerifierMode::External { command, request, response } => {
            write_requests(request, &examples, &root)?;
            if let Some(cmd) = command {
                run_external_command(cmd, request, response)?;
            } else if !response.exists() {
                return Ok(None);
            }
            read_responses(response, &examples)?
        }
    };
    write_jsonl(out, &preds)?;
    Ok(Some(preds))
}

/// Scores a predictions file against the targets of a packed dataset,
/// matching records by example id.
pub fn evaluate_structured_files(preds_path: &Path, targets_path: &Path) -> Result<StructuredReport> {
    let preds: Vec<PredictionRecord> = read_jsonl(preds_path)?;
    let targets: Vec<VerifierExample> = read_jsonl(targets_path)?;
    let mut by_id: HashMap<&str, &PredictionRecord> = preds.iter().map(|p| (p.example_id.as_str(), p)).collect();
    if by_id.len() != preds.len() {
        bail!(Input, "{}: duplicate example ids", preds_path.display());
    }
    let mut aligned = Vec::with_capacity(targets.len());
    let mut target_json = Vec::with_capacity(targets.len());
    for t in &targets {
        let Some(p) = by_id.remove(t.example_id.as_str()) else {
            bail!(Input, "no prediction for {}", t.example_id);
        };
        aligned.push(StructuredPrediction::from_raw(p.raw_text.clone(), p.z0, p.z1));
        target_json.push(t.target_json()?);
    }
    if !by_id.is_empty() {
        bail!(Input, "{} predictions have no target", by_id.len());
    }
    eval_structured(&aligned, &target_json)
}

pub fn evaluate_files(scores: &Path, val: Option<&Path>, strategy: ThresholdStrategy, threshold: f64) -> Result<EvaluationReport> {
    let test: Vec<PredictionRecord> = read_jsonl(scores)?;
    let val: Option<Vec<PredictionRecord>> = val.map(read_jsonl).transpose()?;
    evaluate_predictions(&test, val.as_deref(), strategy, threshold)
}

/// Selection-pattern grid of an exported split, written as CSV; returns the
/// grid and its shape.
pub fn selection_grid(split_dir: &Path, csv_path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let (grid, n, l) = aggregate_selection_pattern(split_dir)?;
    write_bytes(csv_path, grid_csv(&grid, n, l).as_bytes())?;
    Ok((grid, n, l))
}

/// Text table of a selection grid, one row per step.
pub fn render_grid(grid: &[f64], num_steps: usize, num_layers: usize) -> String {
    let mut out = String::from("step\\layer");
    for l in 0..num_layers {
        out.push_str(&format!(" {l:>6}"));
    }
    out.push('\n');
    for t in 0..num_steps {
        out.push_str(&format!("{t:>10}"));
        for l in 0..num_layers {
            out.push_str(&format!(" {:>6.3}", grid[t * num_layers + l]));
        }
        out.push('\n');
    }
    out
}

/// Pairs ranked by selection frequency, most frequent first.
pub fn top_pairs(grid: &[f64], num_layers: usize, count: usize) -> Vec<((usize, usize), f64)> {
    let mut ranked: Vec<(usize, f64)> = grid.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(count).map(|(j, f)| ((j / num_layers, j % num_layers), f)).collect()
}

pub fn read_train_config(path: &Path) -> Result<TrainConfig> {
    let cfg: TrainConfig = read_json(path)?;
    cfg.validate().map_err(Error::from)?;
    Ok(cfg)
}
