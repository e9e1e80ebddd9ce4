//! Denoising trajectories: data model, capture-set construction and a
//! deterministic synthesizer with planted hallucination signals.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::rng::SplitMix64;

/// Size of the synthetic token vocabulary.
pub const VOCAB_SIZE: u32 = 1024;

/// Ground-truth label of a generated answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Hallucinated = 0,
    Correct = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn is_hallucinated(self) -> bool {
        self == Label::Hallucinated
    }
}

impl From<Label> for u8 {
    fn from(label: Label) -> u8 {
        label as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Hallucinated),
            1 => Ok(Label::Correct),
            other => Err(Error::Input(format!("label must be 0 or 1, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub num_steps: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub max_changed_positions: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Per-position probability that a token is revised between retained forwards.
    pub change_prob: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self { num_steps: 8, num_layers: 8, hidden_dim: 128, max_changed_positions: 16, seq_len: 32, seed: 42, change_prob: 0.2 }
    }
}

impl TrajectoryConfig {
    /// Capture-slot budget: changed positions plus the last-token slot.
    pub fn max_capture(&self) -> usize {
        1 + self.max_changed_positions
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 || self.num_layers == 0 || self.hidden_dim == 0 || self.seq_len == 0 {
            bail!(Input, "num_steps, num_layers, hidden_dim and seq_len must all be >= 1");
        }
        if !(0.0..=1.0).contains(&self.change_prob) {
            bail!(Input, "change_prob {} outside [0, 1]", self.change_prob);
        }
        Ok(())
    }
}

/// Token positions captured at one retained forward. The last-token position
/// always occupies the final slot of [`CaptureSet::positions`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureSet {
    last_position: u32,
    changed_positions: Vec<u32>,
    positions: Vec<u32>,
}

impl CaptureSet {
    pub fn new(last_position: u32, changed_positions: Vec<u32>, max_changed: usize) -> Result<Self> {
        if changed_positions.len() > max_changed {
            bail!(Shape, "{} changed positions exceed the cap of {max_changed}", changed_positions.len());
        }
        if changed_positions.windows(2).any(|w| w[0] >= w[1]) {
            bail!(Input, "changed positions must be strictly increasing");
        }
        if changed_positions.contains(&last_position) {
            bail!(Input, "last position {last_position} also listed as changed");
        }
        let mut positions = changed_positions.clone();
        positions.push(last_position);
        Ok(Self { last_position, changed_positions, positions })
    }

    pub fn last_position(&self) -> u32 {
        self.last_position
    }

    pub fn changed_positions(&self) -> &[u32] {
        &self.changed_positions
    }

    /// Changed positions in ascending order followed by the last position.
    pub fn positions(&self) -> &[u32] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub forward_id: u32,
    pub token_ids: Vec<u32>,
    pub capture: CaptureSet,
    /// Row-major `[L, |capture|, d]`.
    pub hidden: Vec<f32>,
}

impl TrajectoryStep {
    /// Hidden vector at `(layer, slot)`.
    pub fn hidden_at(&self, layer: usize, slot: usize, d: usize) -> &[f32] {
        let m = self.capture.len();
        let start = (layer * m + slot) * d;
        &self.hidden[start..start + d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub config: TrajectoryConfig,
    pub example_id: String,
    pub question: String,
    pub base_answer: String,
    pub label: Label,
    pub planted_pairs: Option<Vec<(u32, u32)>>,
    /// Retained forwards, oldest first.
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    /// Checks every structural invariant against the embedded config.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.steps.len() != cfg.num_steps {
            bail!(Shape, "{} steps, config says {}", self.steps.len(), cfg.num_steps);
        }
        for (t, step) in self.steps.iter().enumerate() {
            if step.token_ids.len() != cfg.seq_len {
                bail!(Shape, "step {t}: {} tokens, expected {}", step.token_ids.len(), cfg.seq_len);
            }
            if step.capture.len() > cfg.max_capture() {
                bail!(Shape, "step {t}: {} capture slots exceed max_M = {}", step.capture.len(), cfg.max_capture());
            }
            if step.capture.positions().iter().any(|&p| p as usize >= cfg.seq_len) {
                bail!(Shape, "step {t}: capture position outside sequence");
            }
            let want = cfg.num_layers * step.capture.len() * cfg.hidden_dim;
            if step.hidden.len() != want {
                bail!(Shape, "step {t}: hidden has {} values, expected {want}", step.hidden.len());
            }
            if step.hidden.iter().any(|v| !v.is_finite()) {
                bail!(NonFinite, "step {t}: hidden state contains NaN or infinity");
            }
        }
        if let Some(pairs) = &self.planted_pairs {
            check_pairs(pairs, cfg)?;
        }
        Ok(())
    }
}

fn check_pairs(pairs: &[(u32, u32)], cfg: &TrajectoryConfig) -> Result<()> {
    for &(t, l) in pairs {
        if t as usize >= cfg.num_steps || l as usize >= cfg.num_layers {
            bail!(Input, "planted pair ({t}, {l}) outside [0,{})x[0,{})", cfg.num_steps, cfg.num_layers);
        }
    }
    Ok(())
}

/// Positions whose token changed between two forwards, excluding the
/// last-token position and keeping only the `cap` smallest indices.
pub fn compute_changed_positions(prev: &[u32], cur: &[u32], last_position: usize, cap: usize) -> Result<Vec<u32>> {
    if prev.len() != cur.len() {
        bail!(Input, "token sequences differ in length ({} vs {})", prev.len(), cur.len());
    }
    if last_position >= cur.len() {
        bail!(Input, "last position {last_position} outside sequence of length {}", cur.len());
    }
    Ok(prev.iter().zip(cur).enumerate().filter(|&(i, (a, b))| a != b && i != last_position).map(|(i, _)| i as u32).take(cap).collect())
}

/// Requested class balance for a synthetic dataset: exactly
/// `round(count * positive_rate)` examples get [`Label::Correct`], assigned by
/// a seeded shuffle.
pub fn balanced_labels(count: usize, positive_rate: f64, seed: u64) -> Result<Vec<Label>> {
    if !(0.0..=1.0).contains(&positive_rate) {
        bail!(Input, "positive rate {positive_rate} outside [0, 1]");
    }
    let positives = libm::round(count as f64 * positive_rate) as usize;
    let mut labels: Vec<Label> = (0..count).map(|i| if i < positives { Label::Correct } else { Label::Hallucinated }).collect();
    SplitMix64::new(seed).fork(LABEL_STREAM).shuffle(&mut labels);
    Ok(labels)
}

const LABEL_STREAM: u64 = 0x4C41_4245_4C53; // "LABELS"
const DIRECTION_STREAM: u64 = 1 << 63;

/// Unit-norm class-discriminative direction for `layer`, shared by every
/// example synthesized from the same dataset seed.
pub fn signal_direction(seed: u64, layer: usize, d: usize) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed).fork(DIRECTION_STREAM | layer as u64);
    let mut v: Vec<f64> = (0..d).map(|_| rng.next_normal()).collect();
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Generates one synthetic trajectory.
///
/// Hidden states are i.i.d. standard normal. For hallucinated examples every
/// captured vector at a planted `(step, layer)` pair is shifted by
/// `signal_strength` times the layer's [`signal_direction`]. `example_index`
/// selects the example's random stream within the dataset seed.
pub fn synth_trajectory(
    config: &TrajectoryConfig,
    example_index: u64,
    label: Label,
    planted_pairs: &[(u32, u32)],
    signal_strength: f64,
) -> Result<Trajectory> {
    config.validate()?;
    check_pairs(planted_pairs, config)?;
    if !signal_strength.is_finite() || signal_strength < 0.0 {
        bail!(Input, "signal strength must be finite and >= 0, got {signal_strength}");
    }
    let (n, l, d, seq_len) = (config.num_steps, config.num_layers, config.hidden_dim, config.seq_len);
    let mut rng = SplitMix64::new(config.seed).fork(example_index);

    let directions: Vec<Vec<f64>> = if label.is_hallucinated() && signal_strength > 0.0 {
        (0..l).map(|layer| signal_direction(config.seed, layer, d)).collect()
    } else {
        Vec::new()
    };

    let mut tokens: Vec<u32> = (0..seq_len).map(|_| rng.below(u64::from(VOCAB_SIZE)) as u32).collect();
    let mut steps = Vec::with_capacity(n);
    for t in 0..n {
        let prev = tokens.clone();
        for tok in tokens.iter_mut() {
            if rng.next_f64() < config.change_prob {
                let shift = 1 + rng.below(u64::from(VOCAB_SIZE) - 1) as u32;
                *tok = (*tok + shift) % VOCAB_SIZE;
            }
        }
        // The answer grows by one token per retained forward.
        let last = (seq_len.saturating_sub(n) + t).min(seq_len - 1);
        let changed = compute_changed_positions(&prev, &tokens, last, config.max_changed_positions)?;
        let capture = CaptureSet::new(last as u32, changed, config.max_changed_positions)?;
        let m = capture.len();

        let mut hidden = vec![0f32; l * m * d];
        for layer in 0..l {
            let planted = !directions.is_empty() && planted_pairs.contains(&(t as u32, layer as u32));
            for slot in 0..m {
                let row = &mut hidden[(layer * m + slot) * d..(layer * m + slot + 1) * d];
                for (k, h) in row.iter_mut().enumerate() {
                    let mut v = rng.next_normal();
                    if planted {
                        v += signal_strength * directions[layer][k];
                    }
                    *h = v as f32;
                }
            }
        }
        steps.push(TrajectoryStep { forward_id: (n + t) as u32, token_ids: tokens.clone(), capture, hidden });
    }

    Ok(Trajectory {
        config: config.clone(),
        example_id: format!("synth-{example_index:06}"),
        question: format!("Synthetic question {example_index}?"),
        base_answer: format!("Synthetic answer {example_index}."),
        label,
        planted_pairs: Some(planted_pairs.to_vec()),
        steps,
    })
}

/// Convenience parameters for synthesizing a whole dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub trajectory: TrajectoryConfig,
    pub positive_rate: f64,
    pub planted_pairs: Vec<(u32, u32)>,
    pub signal_strength: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { trajectory: TrajectoryConfig::default(), positive_rate: 0.5, planted_pairs: vec![(7, 3)], signal_strength: 4.0 }
    }
}

impl SynthConfig {
    /// Lazily yields `count` trajectories with balanced labels.
    pub fn generate(&self, count: usize) -> Result<impl Iterator<Item = Result<Trajectory>> + '_> {
        let labels = balanced_labels(count, self.positive_rate, self.trajectory.seed)?;
        Ok(labels
            .into_iter()
            .enumerate()
            .map(move |(i, label)| synth_trajectory(&self.trajectory, i as u64, label, &self.planted_pairs, self.signal_strength)))
    }
}
