//! Detection metrics with hallucinated answers as the positive class.
//!
//! Scores are hallucination scores: larger means "more likely hallucinated".
//! Every function here takes [`Label`]s and treats [`Label::Hallucinated`] as
//! positive, so the verifier's `decision = 1 = correct` convention never leaks
//! into the metric code.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::selector::loss::sigmoid;
use crate::trajectory::Label;

/// `s = p0 = exp(z0) / (exp(z0) + exp(z1)) = sigmoid(z0 - z1)`.
pub fn decision_logit_score(z0: f64, z1: f64) -> Result<f64> {
    if !z0.is_finite() || !z1.is_finite() {
        bail!(NonFinite, "decision logits must be finite (z0 = {z0}, z1 = {z1})");
    }
    Ok(sigmoid(z0 - z1))
}

fn check_pairs(scores: &[f64], labels: &[Label]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        bail!(Input, "{} scores for {} labels", scores.len(), labels.len());
    }
    if scores.iter().any(|s| s.is_nan()) {
        bail!(NonFinite, "scores contain NaN");
    }
    let pos = labels.iter().filter(|l| l.is_hallucinated()).count();
    Ok((pos, labels.len() - pos))
}

fn require_both(pos: usize, neg: usize) -> Result<()> {
    if pos == 0 || neg == 0 {
        bail!(Metric, "both classes are required ({pos} hallucinated, {neg} correct)");
    }
    Ok(())
}

/// Probability that a random hallucinated example outscores a random correct
/// one, ties counting one half (Mann-Whitney U with mid-ranks).
pub fn auroc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (pos, neg) = check_pairs(scores, labels)?;
    require_both(pos, neg)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based mid-rank of the tie block i..=j
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let block_pos = order[i..=j].iter().filter(|&&k| labels[k].is_hallucinated()).count();
        rank_sum += mid * block_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Area under the precision-recall curve as average precision:
/// `Σ (R_i − R_{i−1}) P_i` over distinct score thresholds, descending. Tied
/// scores enter as one block.
pub fn auprc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (pos, neg) = check_pairs(scores, labels)?;
    require_both(pos, neg)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            if labels[k].is_hallucinated() {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdStrategy {
    BestF1,
    Youden,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    Val,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    /// F1 or `TPR − FPR` reached on the selection set.
    pub objective: f64,
    /// All scores were equal; the threshold is that common score.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    /// Predict hallucinated when `score >= threshold`.
    pub fn at(scores: &[f64], labels: &[Label], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l.is_hallucinated()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        Self::ratio(self.tn, self.tn + self.fp)
    }

    pub fn accuracy(&self) -> f64 {
        Self::ratio(self.tp + self.tn, self.total())
    }

    pub fn f1(&self) -> f64 {
        Self::ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn balanced_accuracy(&self) -> f64 {
        (self.recall() + self.specificity()) / 2.0
    }
}

/// Picks a decision threshold on validation scores. Candidates are `-∞`,
/// midpoints between adjacent distinct scores, and `+∞`; ties in the
/// objective go to the smaller threshold.
pub fn select_threshold(scores: &[f64], labels: &[Label], strategy: ThresholdStrategy) -> Result<ThresholdChoice> {
    let (pos, neg) = check_pairs(scores, labels)?;
    require_both(pos, neg)?;
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup();
    if distinct.len() == 1 {
        let c = Confusion::at(scores, labels, distinct[0]);
        let objective = objective(&c, strategy);
        return Ok(ThresholdChoice { threshold: distinct[0], objective, degenerate: true });
    }
    let mut candidates = Vec::with_capacity(distinct.len() + 1);
    candidates.push(f64::NEG_INFINITY);
    candidates.extend(distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    candidates.push(f64::INFINITY);

    // Sweep ascending thresholds; predicted positives are the scores >= t.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut c = Confusion { tp: pos, fp: neg, tn: 0, fn_: 0 };
    let mut cursor = 0;
    let mut best = ThresholdChoice { threshold: f64::NEG_INFINITY, objective: f64::NEG_INFINITY, degenerate: false };
    for &t in &candidates {
        while cursor < order.len() && scores[order[cursor]] < t {
            if labels[order[cursor]].is_hallucinated() {
                c.tp -= 1;
                c.fn_ += 1;
            } else {
                c.fp -= 1;
                c.tn += 1;
            }
            cursor += 1;
        }
        let value = objective(&c, strategy);
        if value > best.objective {
            best.threshold = t;
            best.objective = value;
        }
    }
    Ok(best)
}

fn objective(c: &Confusion, strategy: ThresholdStrategy) -> f64 {
    match strategy {
        ThresholdStrategy::BestF1 => c.f1(),
        ThresholdStrategy::Youden => c.recall() - (1.0 - c.specificity()),
    }
}

/// Threshold-free and thresholded detection metrics for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` when the split holds a single class.
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub threshold: f64,
    pub threshold_source: ThresholdSource,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub specificity: f64,
    pub confusion: Confusion,
}

/// Applies a fixed threshold (`s >= threshold` ⇒ hallucinated) and fills every
/// report field.
pub fn thresholded_metrics(scores: &[f64], labels: &[Label], threshold: f64, source: ThresholdSource) -> Result<MetricsReport> {
    let (pos, neg) = check_pairs(scores, labels)?;
    if scores.is_empty() {
        bail!(Metric, "empty score set");
    }
    if threshold.is_nan() {
        bail!(Input, "threshold is NaN");
    }
    let both = pos > 0 && neg > 0;
    let c = Confusion::at(scores, labels, threshold);
    Ok(MetricsReport {
        auroc: if both { Some(auroc(scores, labels)?) } else { None },
        auprc: if both { Some(auprc(scores, labels)?) } else { None },
        threshold,
        threshold_source: source,
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
        accuracy: c.accuracy(),
        balanced_accuracy: c.balanced_accuracy(),
        specificity: c.specificity(),
        confusion: c,
    })
}
