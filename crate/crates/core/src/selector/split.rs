use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng::SplitMix64;
use crate::trajectory::Label;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.7, val: 0.1, test: 0.2 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            bail!(Input, "split fractions {parts:?} must be in [0, 1] and sum to 1");
        }
        Ok(())
    }
}

/// Dataset positions (not row ids) of each split, ascending by row id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

const SPLIT_STREAM: u64 = 0x0053_504C_4954; // "SPLIT"

/// Stratified split. Within each class the examples are ordered by row id,
/// shuffled with the class's fork of `seed`, and cut into
/// `round(n * train)` / `round(n * val)` / remainder. When a class has at
/// least three examples every split receives at least one of them.
pub fn stratified_split(labels: &[Label], row_ids: &[u32], fractions: SplitFractions, seed: u64) -> Result<Splits> {
    fractions.validate()?;
    if labels.len() != row_ids.len() {
        bail!(Shape, "{} labels for {} row ids", labels.len(), row_ids.len());
    }
    let root = SplitMix64::new(seed).fork(SPLIT_STREAM);
    let mut splits = Splits::default();
    for class in [Label::Hallucinated, Label::Correct] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.sort_by_key(|&i| row_ids[i]);
        root.fork(u64::from(class.as_u8())).shuffle(&mut members);
        let n = members.len();
        let mut n_train = libm::round(n as f64 * fractions.train) as usize;
        let mut n_val = libm::round(n as f64 * fractions.val) as usize;
        if n_train + n_val > n {
            n_val = n - n_train.min(n);
            n_train = n_train.min(n);
        }
        if n >= 3 {
            // Guarantee non-empty splits whenever the class is large enough.
            n_train = n_train.clamp(1, n - 2);
            n_val = n_val.clamp(1, n - n_train - 1);
        }
        splits.train.extend_from_slice(&members[..n_train]);
        splits.val.extend_from_slice(&members[n_train..n_train + n_val]);
        splits.test.extend_from_slice(&members[n_train + n_val..]);
    }
    for part in [&mut splits.train, &mut splits.val, &mut splits.test] {
        part.sort_by_key(|&i| row_ids[i]);
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n_pos: usize, n_neg: usize) -> Vec<Label> {
        let mut v = Vec::new();
        v.extend(core::iter::repeat_n(Label::Correct, n_pos));
        v.extend(core::iter::repeat_n(Label::Hallucinated, n_neg));
        v
    }

    #[test]
    fn proportions_and_partition() {
        let l = labels(500, 500);
        let ids: Vec<u32> = (0..1000).collect();
        let s = stratified_split(&l, &ids, SplitFractions::default(), 42).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (700, 100, 200));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        let pos_val = s.val.iter().filter(|&&i| l[i] == Label::Correct).count();
        assert_eq!(pos_val, 50);
    }

    #[test]
    fn small_classes_fill_every_split() {
        let l = labels(3, 4);
        let ids: Vec<u32> = (0..7).collect();
        let s = stratified_split(&l, &ids, SplitFractions::default(), 1).unwrap();
        for part in [&s.train, &s.val, &s.test] {
            assert!(part.iter().any(|&i| l[i] == Label::Correct));
            assert!(part.iter().any(|&i| l[i] == Label::Hallucinated));
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let l = labels(40, 40);
        let ids: Vec<u32> = (0..80).collect();
        let a = stratified_split(&l, &ids, SplitFractions::default(), 5).unwrap();
        let b = stratified_split(&l, &ids, SplitFractions::default(), 5).unwrap();
        let c = stratified_split(&l, &ids, SplitFractions::default(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn bad_fractions_rejected() {
        let f = SplitFractions { train: 0.5, val: 0.5, test: 0.5 };
        assert!(stratified_split(&[], &[], f, 0).is_err());
    }
}
