use half::f16;
use hive_core::export::selection_pattern;
use hive_core::features::{build_two_stream, pack_row, ActView, StoreDims};
use hive_core::metrics::auroc;
use hive_core::rng::SplitMix64;
use hive_core::selector::random_support;
use hive_core::trajectory::{balanced_labels, compute_changed_positions, synth_trajectory, SynthConfig};
use hive_core::{Label, OporpProjector, Trajectory, TrajectoryConfig};
use proptest::prelude::*;

fn small_config(seed: u64) -> TrajectoryConfig {
    TrajectoryConfig { num_steps: 4, num_layers: 3, hidden_dim: 16, max_changed_positions: 5, seq_len: 12, seed, change_prob: 0.3 }
}

proptest! {
    #[test]
    fn changed_positions_match_a_naive_scan(
        pair in (1usize..64).prop_flat_map(|n| (
            proptest::collection::vec(0u32..4, n),
            proptest::collection::vec(0u32..4, n),
            0..n,
        )),
        cap in 0usize..20,
    ) {
        let (prev, cur, last) = pair;
        let mut want = Vec::new();
        for i in 0..prev.len() {
            if prev[i] != cur[i] && i != last && want.len() < cap {
                want.push(i as u32);
            }
        }
        prop_assert_eq!(compute_changed_positions(&prev, &cur, last, cap).unwrap(), want);
    }

    #[test]
    fn last_capture_slot_is_the_last_position(seed in any::<u64>(), index in 0u64..1000, hallucinated in any::<bool>()) {
        let cfg = small_config(seed);
        let label = if hallucinated { Label::Hallucinated } else { Label::Correct };
        let t = synth_trajectory(&cfg, index, label, &[(1, 2)], 2.0).unwrap();
        t.validate().unwrap();
        for step in &t.steps {
            let pos = step.capture.positions();
            prop_assert_eq!(*pos.last().unwrap(), step.capture.last_position());
            prop_assert!(pos.len() <= cfg.max_capture());
            let changed = step.capture.changed_positions();
            prop_assert!(changed.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(!changed.contains(&step.capture.last_position()));
        }
    }

    #[test]
    fn labels_are_balanced_within_one(count in 0usize..500, rate in 0.0f64..=1.0, seed in any::<u64>()) {
        let labels = balanced_labels(count, rate, seed).unwrap();
        let pos = labels.iter().filter(|l| **l == Label::Correct).count() as f64;
        prop_assert!((pos - count as f64 * rate).abs() <= 1.0);
    }
}

#[test]
fn synthesis_is_reproducible() {
    let cfg = SynthConfig::default();
    let a: Vec<Trajectory> = cfg.generate(6).unwrap().map(Result::unwrap).collect();
    let b: Vec<Trajectory> = cfg.generate(6).unwrap().map(Result::unwrap).collect();
    assert_eq!(a, b);
    assert_ne!(a[0].steps[0].hidden, a[1].steps[0].hidden);
}

#[test]
fn synthesized_hidden_states_are_standard_normal() {
    let cfg = small_config(3);
    let t = synth_trajectory(&cfg, 0, Label::Correct, &[], 0.0).unwrap();
    let values: Vec<f64> = t.steps.iter().flat_map(|s| s.hidden.iter().map(|&x| f64::from(x))).collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 5.0 / n.sqrt(), "mean {mean}");
    assert!((var - 1.0).abs() < 0.1, "var {var}");
}

/// Nearest-class-mean linear probe fitted on the first half, scored on the
/// second half.
fn probe_auroc(features: &[Vec<f64>], labels: &[Label]) -> f64 {
    let half = features.len() / 2;
    let d = features[0].len();
    let mut means = [vec![0.0; d], vec![0.0; d]];
    let mut counts = [0.0; 2];
    for (x, l) in features[..half].iter().zip(&labels[..half]) {
        let c = l.as_u8() as usize;
        counts[c] += 1.0;
        means[c].iter_mut().zip(x).for_each(|(m, v)| *m += v);
    }
    for c in 0..2 {
        means[c].iter_mut().for_each(|m| *m /= counts[c]);
    }
    let w: Vec<f64> = means[0].iter().zip(&means[1]).map(|(a, b)| a - b).collect();
    let mid: Vec<f64> = means[0].iter().zip(&means[1]).map(|(a, b)| (a + b) / 2.0).collect();
    let scores: Vec<f64> = features[half..].iter().map(|x| x.iter().zip(&mid).zip(&w).map(|((v, m), w)| (v - m) * w).sum()).collect();
    auroc(&scores, &labels[half..]).unwrap()
}

#[test]
fn planted_pair_is_linearly_recoverable_and_others_are_not() {
    let cfg = SynthConfig::default();
    let tc = cfg.trajectory.clone();
    let data: Vec<Trajectory> = cfg.generate(800).unwrap().map(Result::unwrap).collect();
    let labels: Vec<Label> = data.iter().map(|t| t.label).collect();
    let last_token = |step: usize, layer: usize| -> Vec<Vec<f64>> {
        data.iter()
            .map(|t| {
                let s = &t.steps[step];
                let m = s.capture.len();
                s.hidden_at(layer, m - 1, tc.hidden_dim).iter().map(|&x| f64::from(x)).collect()
            })
            .collect()
    };
    let planted = probe_auroc(&last_token(7, 3), &labels);
    let control = probe_auroc(&last_token(0, 0), &labels);
    assert!(planted > 0.95, "planted pair AUROC {planted}");
    assert!(control < 0.6, "control pair AUROC {control}");
}

#[test]
fn zero_signal_makes_labels_indistinguishable() {
    let cfg = small_config(5);
    let a = synth_trajectory(&cfg, 3, Label::Hallucinated, &[(1, 1)], 0.0).unwrap();
    let b = synth_trajectory(&cfg, 3, Label::Correct, &[(1, 1)], 0.0).unwrap();
    assert_eq!(a.steps, b.steps);
}

/// Two-stream oracle computed directly from the trajectory's projected
/// hidden states.
#[test]
fn two_stream_matches_projected_trajectory() {
    let cfg = small_config(9);
    let r = 8;
    let proj = OporpProjector::new(cfg.num_layers, cfg.hidden_dim, r, 1).unwrap();
    let trajs: Vec<Trajectory> = (0..3).map(|i| synth_trajectory(&cfg, i, Label::Hallucinated, &[(2, 0)], 1.0).unwrap()).collect();
    let max_m = cfg.max_capture();
    let mut act = Vec::new();
    let mut cap = Vec::new();
    for t in &trajs {
        let row = pack_row(t, &proj, max_m).unwrap();
        act.extend(row.act);
        cap.extend(row.cap_len);
    }
    let dims = StoreDims { rows: 3, steps: cfg.num_steps, layers: cfg.num_layers, max_m, r };
    let view = ActView::new(dims, &act, &cap).unwrap();
    let mut buf = vec![0.0; r];
    for (row, t) in trajs.iter().enumerate() {
        let (g, diag) = build_two_stream(&view, row).unwrap();
        assert!(diag.empty_steps.is_empty());
        for (step_idx, step) in t.steps.iter().enumerate() {
            let m = step.capture.len();
            for l in 0..cfg.num_layers {
                let proj_slot = |slot: usize, buf: &mut Vec<f64>| {
                    proj.project_vector(l, step.hidden_at(l, slot, cfg.hidden_dim), buf);
                    buf.iter().map(|&x| f16::from_f64(x).to_f64()).collect::<Vec<f64>>()
                };
                let last = proj_slot(m - 1, &mut buf);
                let mut chg = vec![0.0; r];
                for slot in 0..m - 1 {
                    chg.iter_mut().zip(proj_slot(slot, &mut buf)).for_each(|(c, v)| *c += v);
                }
                if m > 1 {
                    chg.iter_mut().for_each(|c| *c /= (m - 1) as f64);
                }
                let pair = g.pair(step_idx * cfg.num_layers + l);
                for i in 0..r {
                    assert_eq!(pair[i], last[i]);
                    assert!((pair[r + i] - chg[i]).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn empty_and_single_slot_steps() {
    let dims = StoreDims { rows: 1, steps: 2, layers: 1, max_m: 3, r: 2 };
    let mut act = vec![f16::ZERO; dims.row_len()];
    // Step 1 has one slot holding (1.5, -2).
    act[6] = f16::from_f64(1.5);
    act[7] = f16::from_f64(-2.0);
    let cap = [0i16, 1];
    let view = ActView::new(dims, &act, &cap).unwrap();
    let (g, diag) = build_two_stream(&view, 0).unwrap();
    assert_eq!(diag.empty_steps, vec![0]);
    assert_eq!(g.pair(0), &[0.0, 0.0, 0.0, 0.0]);
    assert_eq!(g.pair(1), &[1.5, -2.0, 0.0, 0.0]);
}

#[test]
fn out_of_range_capture_lengths_are_rejected() {
    let dims = StoreDims { rows: 1, steps: 2, layers: 1, max_m: 3, r: 2 };
    let act = vec![f16::ZERO; dims.row_len()];
    assert!(ActView::new(dims, &act, &[4, 1]).is_err());
    assert!(ActView::new(dims, &act, &[-1, 1]).is_err());
    assert!(ActView::new(dims, &act[1..], &[1, 1]).is_err());
}

#[test]
fn random_support_is_uniform_within_binomial_bounds() {
    let (pairs, k, n) = (64usize, 16usize, 4000u32);
    let selections: Vec<Vec<usize>> = (0..n).map(|row| random_support(42, row, pairs, k)).collect();
    for s in &selections {
        let mut u = s.clone();
        u.sort();
        u.dedup();
        assert_eq!(u.len(), k);
    }
    let grid = selection_pattern(&selections, 8, 8).unwrap();
    assert!((grid.iter().sum::<f64>() - k as f64).abs() < 1e-9);
    let p = k as f64 / pairs as f64;
    let sigma = (p * (1.0 - p) / f64::from(n)).sqrt();
    for &cell in &grid {
        assert!((cell - p).abs() <= 3.5 * sigma, "cell {cell} vs {p} ± {sigma}");
    }
}

#[test]
fn random_support_depends_on_seed_and_row() {
    let a = random_support(1, 5, 64, 16);
    assert_eq!(a, random_support(1, 5, 64, 16));
    assert_ne!(a, random_support(2, 5, 64, 16));
    assert_ne!(a, random_support(1, 6, 64, 16));
}

#[test]
fn selection_pattern_of_a_single_example_is_an_indicator() {
    let mut rng = SplitMix64::new(4);
    let sel = random_support(rng.next_u64(), 0, 12, 5);
    let grid = selection_pattern(core::slice::from_ref(&sel), 3, 4).unwrap();
    assert_eq!(grid.iter().filter(|&&x| x == 1.0).count(), 5);
    assert_eq!(grid.iter().filter(|&&x| x == 0.0).count(), 7);
    assert!(selection_pattern(&[], 3, 4).is_err());
}
