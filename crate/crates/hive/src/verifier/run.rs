//! Verifier execution: the built-in least-squares mock and the file-based
//! adapter for external verifiers.
//!
//! External contract. The request file holds one JSON object per example:
//! `{"example_id", "messages", "evidence", "evidence_root"}`, where
//! `evidence` is the record's pointer and `evidence_root` the absolute
//! directory it is relative to. The external process answers with one line
//! per request, in the same order:
//! `{"example_id": str, "raw_text": str, "z0": real, "z1": real}`, where
//! `z0`/`z1` are the already aggregated logits of the decision digits 0 and 1.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use hive_core::linalg::cholesky_solve;
use hive_core::metrics::decision_logit_score;
use hive_core::Label;
use serde::{Deserialize, Serialize};

use super::pack::{check_pointer, resolve_shard, EvidencePointer, VerifierExample};
use super::prompt::{base_answer_of, Message};
use super::target::{rationale_for, EvidencePairs, HallucinationType, TargetJson};
use crate::error::{bail, Error, Result};
use crate::io::{read_jsonl, write_jsonl};
use crate::shard::EvidenceShard;

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub example_id: String,
    pub label: Label,
    pub raw_text: String,
    pub z0: f64,
    pub z1: f64,
    /// Hallucination score `p0 = sigmoid(z0 - z1)`.
    pub s: f64,
}

impl PredictionRecord {
    pub fn new(example: &VerifierExample, raw_text: String, z0: f64, z1: f64) -> Result<Self> {
        Ok(Self { example_id: example.example_id.clone(), label: example.label, raw_text, z0, z1, s: decision_logit_score(z0, z1)? })
    }
}

/// Loads shards on demand, keyed by their path relative to the dataset root.
pub struct ShardCache {
    root: PathBuf,
    shards: HashMap<String, EvidenceShard>,
}

impl ShardCache {
    pub fn new(dataset_root: &Path) -> Self {
        Self { root: dataset_root.to_path_buf(), shards: HashMap::new() }
    }

    /// Resolves and checks an example's pointer; returns its evidence row.
    pub fn evidence(&mut self, example: &VerifierExample) -> Result<EvidenceRow<'_>> {
        let key = &example.evidence.shard_path_relative;
        if !self.shards.contains_key(key) {
            let shard = resolve_shard(&self.root, &example.evidence)?;
            self.shards.insert(key.clone(), shard);
        }
        let shard = &self.shards[key];
        check_pointer(shard, example)?;
        let row = example.evidence.row_index;
        Ok(EvidenceRow { two_stream: shard.two_stream_row(row), w_top: shard.w_top_row(row), r: shard.manifest.r })
    }
}

/// One exported example: `[K, 2r]` two-stream features and the selector's
/// top-K weights.
#[derive(Debug, Clone, Copy)]
pub struct EvidenceRow<'a> {
    pub two_stream: &'a [f32],
    pub w_top: &'a [f32],
    pub r: usize,
}

impl EvidenceRow<'_> {
    /// Mean of the K two-stream vectors, weighted by the exported top-K
    /// weights; uniform if those sum to zero.
    pub fn pooled(&self) -> Vec<f64> {
        let width = 2 * self.r;
        let total: f64 = self.w_top.iter().map(|&w| f64::from(w)).sum();
        let k = self.w_top.len();
        let mut out = vec![0.0; width];
        for (unit, &w) in self.two_stream.chunks_exact(width).zip(self.w_top) {
            let w = if total > 0.0 { f64::from(w) / total } else { 1.0 / k as f64 };
            out.iter_mut().zip(unit).for_each(|(o, &x)| *o += w * f64::from(x));
        }
        out
    }
}

/// Linear read of pooled evidence: `margin = scale * (w·x + b)`, positive
/// for "correct".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockVerifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub scale: f64,
}

/// Ridge strength relative to the number of training examples.
const RIDGE: f64 = 1e-3;

impl MockVerifier {
    /// Closed-form ridge regression of ±1 targets (+1 = correct) on the
    /// pooled features, with the intercept unpenalized. The calibration scale
    /// makes the training margins unit-variance.
    pub fn fit(train: &[VerifierExample], cache: &mut ShardCache) -> Result<Self> {
        if train.is_empty() {
            bail!(Input, "mock verifier needs at least one training example");
        }
        let mut xs = Vec::with_capacity(train.len());
        for ex in train {
            xs.push(cache.evidence(ex)?.pooled());
        }
        let dim = xs[0].len() + 1;
        let mut a = vec![0.0; dim * dim];
        let mut b = vec![0.0; dim];
        for (x, ex) in xs.iter().zip(train) {
            let y = if ex.label.is_hallucinated() { -1.0 } else { 1.0 };
            let aug: Vec<f64> = x.iter().copied().chain([1.0]).collect();
            for i in 0..dim {
                b[i] += aug[i] * y;
                for j in 0..dim {
                    a[i * dim + j] += aug[i] * aug[j];
                }
            }
        }
        let lambda = RIDGE * train.len() as f64;
        for i in 0..dim - 1 {
            a[i * dim + i] += lambda;
        }
        a[dim * dim - 1] += 1e-9;
        let sol = cholesky_solve(&a, &b, dim)?;
        let (weights, bias) = (sol[..dim - 1].to_vec(), sol[dim - 1]);
        let raw: Vec<f64> = xs.iter().map(|x| x.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>() + bias).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let std = (raw.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / raw.len() as f64).sqrt();
        Ok(Self { weights, bias, scale: if std > 0.0 { 1.0 / std } else { 1.0 } })
    }

    pub fn margin(&self, evidence: &EvidenceRow<'_>) -> f64 {
        let x = evidence.pooled();
        self.scale * (x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.bias)
    }

    /// Canonical JSON answer with `z0 = -margin/2`, `z1 = margin/2`.
    pub fn predict(&self, example: &VerifierExample, cache: &mut ShardCache) -> Result<PredictionRecord> {
        let margin = self.margin(&cache.evidence(example)?);
        let decision = u8::from(margin > 0.0);
        let base_answer = base_answer_of(example.user_message()?)
            .ok_or_else(|| Error::Runtime(format!("{}: user message lacks a base answer", example.example_id)))?;
        let target = TargetJson {
            decision,
            hallucination_type: if decision == 1 { HallucinationType::None } else { HallucinationType::for_example(&example.example_id) },
            evidence: EvidencePairs { pairs: example.evidence.pairs.clone() },
            rationale: rationale_for(decision, base_answer),
        };
        PredictionRecord::new(example, target.to_canonical(), -margin / 2.0, margin / 2.0)
    }
}

/// Fits the mock on `train` and predicts every example of `data`.
pub fn run_mock(train: &[VerifierExample], data: &[VerifierExample], dataset_root: &Path) -> Result<Vec<PredictionRecord>> {
    let mut cache = ShardCache::new(dataset_root);
    let mock = MockVerifier::fit(train, &mut cache)?;
    data.iter().map(|ex| mock.predict(ex, &mut cache)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierRequest {
    pub example_id: String,
    pub messages: Vec<Message>,
    pub evidence: EvidencePointer,
    pub evidence_root: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierResponse {
    pub example_id: String,
    pub raw_text: String,
    pub z0: f64,
    pub z1: f64,
}

pub fn write_requests(path: &Path, data: &[VerifierExample], dataset_root: &Path) -> Result<()> {
    let root = std::fs::canonicalize(dataset_root).map_err(Error::io(dataset_root))?;
    let requests: Vec<VerifierRequest> = data
        .iter()
        .map(|ex| VerifierRequest {
            example_id: ex.example_id.clone(),
            messages: ex.messages.clone(),
            evidence: ex.evidence.clone(),
            evidence_root: root.display().to_string(),
        })
        .collect();
    write_jsonl(path, &requests)
}

/// Reads a response file and pairs it with the requested examples; ids must
/// match line by line and logits must be finite.
pub fn read_responses(path: &Path, data: &[VerifierExample]) -> Result<Vec<PredictionRecord>> {
    let responses: Vec<VerifierResponse> = read_jsonl(path)?;
    if responses.len() != data.len() {
        bail!(Runtime, "{}: {} responses for {} requests", path.display(), responses.len(), data.len());
    }
    responses
        .into_iter()
        .zip(data)
        .map(|(resp, ex)| {
            if resp.example_id != ex.example_id {
                bail!(Runtime, "response for {} arrived where {} was requested", resp.example_id, ex.example_id);
            }
            PredictionRecord::new(ex, resp.raw_text, resp.z0, resp.z1)
        })
        .collect()
}

/// Runs `command` (split on whitespace) with the request and response paths
/// appended as its last two arguments.
pub fn run_external_command(command: &str, request: &Path, response: &Path) -> Result<()> {
    let mut parts = command.split_whitespace();
    let Some(program) = parts.next() else {
        bail!(Input, "external verifier command is empty");
    };
    let status = Command::new(program)
        .args(parts)
        .arg(request)
        .arg(response)
        .status()
        .map_err(|e| Error::Runtime(format!("failed to start {program}: {e}")))?;
    if !status.success() {
        bail!(Runtime, "external verifier exited with {status}");
    }
    Ok(())
}
