//! Detection reports from verifier predictions, with validation-to-test
//! threshold transfer.

use hive_core::metrics::{select_threshold, thresholded_metrics, MetricsReport, ThresholdChoice, ThresholdSource, ThresholdStrategy};
use hive_core::Label;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::verifier::PredictionRecord;

pub const POSITIVE_CLASS: &str = "hallucinated (label 0)";
pub const DECISION_CONVENTION: &str = "decision 0 = wrong/hallucinated, 1 = correct/non-hallucinated";
pub const SCORE_DEFINITION: &str = "s = p0 = exp(z0) / (exp(z0) + exp(z1))";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub positive_class: String,
    pub decision_convention: String,
    pub score: String,
    pub strategy: Option<ThresholdStrategy>,
    /// Threshold chosen on the validation predictions, when given.
    pub threshold_selection: Option<ThresholdChoice>,
    pub val: Option<MetricsReport>,
    pub test: MetricsReport,
}

fn scores_and_labels(records: &[PredictionRecord]) -> Result<(Vec<f64>, Vec<Label>)> {
    if let Some(r) = records.iter().find(|r| !(0.0..=1.0).contains(&r.s)) {
        bail!(Input, "{}: score {} outside [0, 1]", r.example_id, r.s);
    }
    Ok((records.iter().map(|r| r.s).collect(), records.iter().map(|r| r.label).collect()))
}

/// With validation predictions the threshold is selected there by `strategy`
/// and applied unchanged to the test predictions; otherwise
/// `fixed_threshold` is used.
pub fn evaluate_predictions(
    test: &[PredictionRecord],
    val: Option<&[PredictionRecord]>,
    strategy: ThresholdStrategy,
    fixed_threshold: f64,
) -> Result<EvaluationReport> {
    let (ts, tl) = scores_and_labels(test)?;
    let (choice, val_report, threshold, source) = match val {
        Some(v) => {
            let (vs, vl) = scores_and_labels(v)?;
            let choice = select_threshold(&vs, &vl, strategy)?;
            let report = thresholded_metrics(&vs, &vl, choice.threshold, ThresholdSource::Val)?;
            (Some(choice), Some(report), choice.threshold, ThresholdSource::Val)
        }
        None => (None, None, fixed_threshold, ThresholdSource::Fixed),
    };
    Ok(EvaluationReport {
        positive_class: POSITIVE_CLASS.into(),
        decision_convention: DECISION_CONVENTION.into(),
        score: SCORE_DEFINITION.into(),
        strategy: val.map(|_| strategy),
        threshold_selection: choice,
        val: val_report,
        test: thresholded_metrics(&ts, &tl, threshold, source)?,
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

/// Multi-line text rendering of one metrics report.
pub fn render_metrics(name: &str, m: &MetricsReport) -> String {
    let c = m.confusion;
    format!(
        "{name}: AUROC {} AUPRC {} | threshold {:.4} ({:?}) | P {:.4} R {:.4} F1 {:.4} Acc {:.4} BalAcc {:.4} Spec {:.4} | TP {} FP {} TN {} FN {}\n",
        fmt_opt(m.auroc),
        fmt_opt(m.auprc),
        m.threshold,
        m.threshold_source,
        m.precision,
        m.recall,
        m.f1,
        m.accuracy,
        m.balanced_accuracy,
        m.specificity,
        c.tp,
        c.fp,
        c.tn,
        c.fn_
    )
}
