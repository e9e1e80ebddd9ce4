//! Packing exported evidence and metadata into verifier JSONL datasets.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use hive_core::Label;
use serde::{Deserialize, Serialize};

use super::prompt::{render_prompt, Message};
use super::target::{HallucinationType, TargetJson};
use crate::error::{bail, Error, Result};
use crate::io::{to_json_bytes, to_jsonl_bytes, write_bytes};
use crate::shard::{EvidenceShard, ShardIndex};
use crate::store::MetaRecord;

/// Where an example's evidence lives, relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidencePointer {
    pub shard_path_relative: String,
    pub row_index: usize,
    pub pairs: Vec<(u32, u32)>,
    pub w_top: Vec<f32>,
    pub cap_lens: Vec<i16>,
}

/// One line of `train.jsonl` / `val.jsonl` / `test.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierExample {
    pub example_id: String,
    pub split: String,
    pub label: Label,
    pub messages: Vec<Message>,
    /// Canonical [`TargetJson`] text.
    pub target: String,
    pub evidence: EvidencePointer,
}

impl VerifierExample {
    pub fn target_json(&self) -> Result<TargetJson> {
        TargetJson::from_json(&self.target)
    }

    pub fn user_message(&self) -> Result<&str> {
        match self.messages.iter().find(|m| m.role == "user") {
            Some(m) => Ok(&m.content),
            None => bail!(Input, "{}: record has no user message", self.example_id),
        }
    }
}

/// Contents of `<split>.stats.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackStats {
    pub split: String,
    pub records: usize,
    pub hallucinated: usize,
    pub correct: usize,
    pub k: usize,
    pub hallucination_types: BTreeMap<HallucinationType, usize>,
}

fn absolute(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).map_err(Error::io(path))
}

/// Builds the records of one exported split. `dataset_root` is the directory
/// the pointers are made relative to.
pub fn build_examples(split_dir: &Path, meta: &[MetaRecord], dataset_root: &Path) -> Result<(Vec<VerifierExample>, PackStats)> {
    let index = ShardIndex::open(split_dir)?;
    let by_id: HashMap<&str, &MetaRecord> = meta.iter().map(|m| (m.example_id.as_str(), m)).collect();
    let unresolved: Vec<&str> = index.examples.iter().map(|e| e.example_id.as_str()).filter(|id| !by_id.contains_key(id)).collect();
    if !unresolved.is_empty() {
        bail!(Packing, "example ids not found in metadata: {}", unresolved.join(", "));
    }
    let shards: HashMap<String, EvidenceShard> = index.shards.iter().cloned().zip(index.load_shards(split_dir)?).collect();
    let split_abs = absolute(split_dir)?;
    let root_abs = absolute(dataset_root)?;

    let mut stats =
        PackStats { split: index.split.clone(), records: 0, hallucinated: 0, correct: 0, k: index.k, hallucination_types: BTreeMap::new() };
    let mut out = Vec::with_capacity(index.examples.len());
    for entry in &index.examples {
        let Some(shard) = shards.get(&entry.shard) else {
            bail!(Packing, "{}: index names unknown shard {}", entry.example_id, entry.shard);
        };
        if shard.manifest.example_ids.get(entry.row) != Some(&entry.example_id) {
            bail!(Packing, "{}: index row {} of {} holds another example", entry.example_id, entry.row, entry.shard);
        }
        let m = by_id[entry.example_id.as_str()];
        let pairs = shard.pairs(entry.row);
        let target = TargetJson::synthetic(&m.example_id, m.label, &m.base_answer, pairs.clone());
        target.validate()?;
        let rel = pathdiff::diff_paths(split_abs.join(&entry.shard), &root_abs)
            .ok_or_else(|| Error::Packing(format!("cannot express {} relative to the dataset root", entry.shard)))?;
        stats.records += 1;
        if m.label.is_hallucinated() {
            stats.hallucinated += 1;
        } else {
            stats.correct += 1;
        }
        *stats.hallucination_types.entry(target.hallucination_type).or_default() += 1;
        out.push(VerifierExample {
            example_id: m.example_id.clone(),
            split: index.split.clone(),
            label: m.label,
            messages: render_prompt(&m.question, &m.base_answer, &pairs, index.k)?,
            target: target.to_canonical(),
            evidence: EvidencePointer {
                shard_path_relative: rel.to_string_lossy().replace('\\', "/"),
                row_index: entry.row,
                pairs,
                w_top: shard.w_top_row(entry.row).to_vec(),
                cap_lens: shard.cap_lens_row(entry.row).to_vec(),
            },
        });
    }
    Ok((out, stats))
}

/// Writes `<out>/<split>.jsonl` and `<out>/<split>.stats.json` for one
/// exported split and returns the record count.
pub fn pack_dataset(split_dir: &Path, meta: &[MetaRecord], out: &Path) -> Result<usize> {
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let (records, stats) = build_examples(split_dir, meta, out)?;
    write_bytes(&out.join(format!("{}.jsonl", stats.split)), &to_jsonl_bytes(&records))?;
    write_bytes(&out.join(format!("{}.stats.json", stats.split)), &to_json_bytes(&stats))?;
    Ok(records.len())
}

/// Loads the shard a pointer names, relative to `dataset_root`.
pub fn resolve_shard(dataset_root: &Path, pointer: &EvidencePointer) -> Result<EvidenceShard> {
    let dir = dataset_root.join(&pointer.shard_path_relative);
    EvidenceShard::open(&dir).map_err(|e| Error::Runtime(format!("evidence pointer {} does not resolve: {e}", dir.display())))
}

/// Checks that a pointer dereferences to a row with the record's pairs,
/// weights and capture lengths.
pub fn check_pointer(shard: &EvidenceShard, example: &VerifierExample) -> Result<()> {
    let p = &example.evidence;
    let row = p.row_index;
    if row >= shard.len() || shard.manifest.example_ids[row] != example.example_id {
        bail!(Runtime, "{}: pointer row {row} holds another example", example.example_id);
    }
    if shard.pairs(row) != p.pairs || shard.w_top_row(row) != p.w_top.as_slice() || shard.cap_lens_row(row) != p.cap_lens.as_slice() {
        bail!(Runtime, "{}: pointer arrays disagree with the record", example.example_id);
    }
    Ok(())
}
