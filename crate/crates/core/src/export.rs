//! Aggregation of exported top-K selections.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

/// Fraction of examples selecting each pair, row-major `[N, L]`.
///
/// Each inner slice lists one example's selected flat pair indices. The grid
/// sums to `K` when every example selects `K` distinct pairs.
pub fn selection_pattern(selections: &[Vec<usize>], num_steps: usize, num_layers: usize) -> Result<Vec<f64>> {
    if selections.is_empty() {
        bail!(Input, "selection pattern needs at least one example");
    }
    let pairs = num_steps * num_layers;
    let mut counts = vec![0u64; pairs];
    for sel in selections {
        for &j in sel {
            if j >= pairs {
                bail!(Input, "pair index {j} outside grid of {pairs}");
            }
            counts[j] += 1;
        }
    }
    let n = selections.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}
