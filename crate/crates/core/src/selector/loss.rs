//! Selector objective: weighted sigmoid cross-entropy plus an entropy penalty
//! on the selected weights.

use super::gating::entropy;

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Components of the selector loss for one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub classification: f64,
    pub entropy: f64,
    pub total: f64,
    /// `dL/dlogit`.
    pub d_logit: f64,
}

/// `target` is 1 for label-1 (correct) examples; `pos_weight` multiplies the
/// label-1 term.
pub fn selector_loss(logit: f64, target: u8, w_top: &[f64], lambda_ent: f64, pos_weight: f64) -> LossParts {
    let (classification, d_logit) =
        if target == 1 { (pos_weight * softplus(-logit), pos_weight * (sigmoid(logit) - 1.0)) } else { (softplus(logit), sigmoid(logit)) };
    let ent = entropy(w_top);
    LossParts { classification, entropy: ent, total: classification + lambda_ent * ent, d_logit }
}
