//! Softmax over all step-layer scores and straight-through top-K selection.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

/// Result of [`softmax_topk`].
#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    /// `softmax(scores / τ)` over all `T` pairs.
    pub w_all: Vec<f64>,
    /// Flat indices of the `K` largest scores, in descending score order
    /// (ties broken by the smaller index).
    pub indices: Vec<usize>,
    /// `w_all` restricted to `indices` and renormalized, aligned with `indices`.
    pub w_top: Vec<f64>,
}

/// Indices of the `k` largest scores, descending; equal scores rank the
/// smaller flat index first.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

fn softmax_scaled(scores: &[f64], inv_tau: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = scores.iter().map(|&s| libm::exp((s - max) * inv_tau)).collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= z);
    w
}

/// Normalizes flattened gate scores and picks the top-`k` support.
///
/// The forward value of the selected weights is `mask ⊙ w_all` renormalized to
/// sum to one, which equals a softmax over the selected scores alone. The
/// backward pass ([`topk_backward`]) differentiates exactly this map with the
/// mask held constant.
pub fn softmax_topk(scores: &[f64], k: usize, tau: f64) -> Result<TopK> {
    if k == 0 || k > scores.len() {
        bail!(Input, "top-K budget {k} must lie in [1, {}]", scores.len());
    }
    if !tau.is_finite() || tau <= 0.0 {
        bail!(Input, "temperature must be positive, got {tau}");
    }
    if scores.iter().any(|s| !s.is_finite()) {
        bail!(NonFinite, "gate scores contain NaN or infinity");
    }
    let w_all = softmax_scaled(scores, 1.0 / tau);
    let indices = top_k_indices(scores, k);
    let selected: Vec<f64> = indices.iter().map(|&j| scores[j]).collect();
    // Renormalizing the masked softmax equals a softmax over the selected
    // scores; computing it directly avoids underflow of tiny w_all entries.
    let w_top = softmax_scaled(&selected, 1.0 / tau);
    Ok(TopK { w_all, indices, w_top })
}

/// Gradient of the loss w.r.t. all `T` scores given `dL/dw_top`.
/// Non-selected scores receive zero because the mask is constant.
pub fn topk_backward(sel: &TopK, d_w_top: &[f64], tau: f64, num_pairs: usize) -> Vec<f64> {
    let inner: f64 = sel.w_top.iter().zip(d_w_top).map(|(w, g)| w * g).sum();
    let mut d_scores = vec![0.0; num_pairs];
    for ((&j, &w), &g) in sel.indices.iter().zip(&sel.w_top).zip(d_w_top) {
        d_scores[j] = w * (g - inner) / tau;
    }
    d_scores
}

/// Shannon entropy `-Σ w log w` with `0 log 0 = 0`.
pub fn entropy(w: &[f64]) -> f64 {
    -w.iter().filter(|&&x| x > 0.0).map(|&x| x * libm::log(x)).sum::<f64>()
}

/// `d entropy / d w_j = -(log w_j + 1)`; zero weights contribute zero.
pub fn entropy_grad(w: &[f64]) -> Vec<f64> {
    w.iter().map(|&x| if x > 0.0 { -(libm::log(x) + 1.0) } else { 0.0 }).collect()
}
