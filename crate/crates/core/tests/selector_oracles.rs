#![allow(clippy::needless_range_loop)]

use hive_core::features::TwoStream;
use hive_core::rng::SplitMix64;
use hive_core::selector::{entropy, selector_loss, softmax_topk, top_k_indices, ModelConfig, SelectorModel};
use proptest::prelude::*;

fn features(steps: usize, layers: usize, r: usize, seed: u64) -> TwoStream {
    let mut rng = SplitMix64::new(seed);
    TwoStream { steps, layers, r, data: (0..steps * layers * 2 * r).map(|_| rng.next_normal()).collect() }
}

fn config() -> ModelConfig {
    let mut c = ModelConfig::new(3, 4, 5);
    c.gate_hidden = 7;
    c.probe_hidden = 6;
    c.step_dim = 2;
    c.layer_dim = 3;
    c.k = 4;
    c
}

/// Independent two-layer MLP: `b2 + Σ_h w2[h] relu(b1[h] + Σ_i x[i] w1[i][h])`.
fn mlp(x: &[f64], w1: &[f64], b1: &[f64], w2: &[f64], b2: f64) -> f64 {
    let hidden = b1.len();
    let mut out = b2;
    for h in 0..hidden {
        let mut pre = b1[h];
        for (i, xi) in x.iter().enumerate() {
            pre += xi * w1[i * hidden + h];
        }
        out += w2[h] * pre.max(0.0);
    }
    out
}

fn input_row(model: &SelectorModel, g: &TwoStream, t: usize, l: usize) -> Vec<f64> {
    let mut x = g.pair(t * g.layers + l).to_vec();
    x.extend_from_slice(model.step_embedding(t));
    x.extend_from_slice(model.layer_embedding(l));
    x
}

#[test]
fn gate_scores_match_mlp_oracle() {
    let model = SelectorModel::init(config(), 17).unwrap();
    let g = features(3, 4, 5, 1);
    let p = model.params();
    let lay = model.layout();
    let scores = model.gate_scores(&g).unwrap();
    for t in 0..3 {
        for l in 0..4 {
            let x = input_row(&model, &g, t, l);
            let want = mlp(&x, &p[lay.gate_w1.clone()], &p[lay.gate_b1.clone()], &p[lay.gate_w2.clone()], p[lay.gate_b2.start]);
            assert!((scores[t * 4 + l] - want).abs() <= 1e-10);
        }
    }
}

#[test]
fn zero_gate_weights_score_every_pair_at_the_bias() {
    let mut model = SelectorModel::init(config(), 2).unwrap();
    let lay = model.layout().clone();
    for r in [lay.gate_w1.clone(), lay.gate_b1.clone(), lay.gate_w2.clone()] {
        model.params_mut()[r].iter_mut().for_each(|x| *x = 0.0);
    }
    model.params_mut()[lay.gate_b2.start] = 0.375;
    let scores = model.gate_scores(&features(3, 4, 5, 8)).unwrap();
    assert!(scores.iter().all(|&s| s == 0.375));
}

#[test]
fn permuting_layers_permutes_scores() {
    let model = SelectorModel::init(config(), 23).unwrap();
    let g = features(3, 4, 5, 4);
    let perm = [2, 0, 3, 1];
    let c = model.config().clone();
    let lay = model.layout().clone();
    // Permute both the features and the layer embeddings.
    let mut g2 = g.clone();
    let mut p2 = model.params().to_vec();
    for t in 0..3 {
        for l in 0..4 {
            let src = g.pair(t * 4 + perm[l]).to_vec();
            let w = 2 * c.r;
            g2.data[(t * 4 + l) * w..(t * 4 + l + 1) * w].copy_from_slice(&src);
        }
    }
    for l in 0..4 {
        let dst = lay.layer_emb.start + l * c.layer_dim;
        p2[dst..dst + c.layer_dim].copy_from_slice(model.layer_embedding(perm[l]));
    }
    let permuted = SelectorModel::from_params(c, p2).unwrap();
    let a = model.gate_scores(&g).unwrap();
    let b = permuted.gate_scores(&g2).unwrap();
    for t in 0..3 {
        for l in 0..4 {
            assert!((b[t * 4 + l] - a[t * 4 + perm[l]]).abs() <= 1e-12);
        }
    }
}

#[test]
fn pool_and_probe_match_oracle() {
    let model = SelectorModel::init(config(), 31).unwrap();
    let g = features(3, 4, 5, 9);
    let u = model.augmented_inputs(&g).unwrap();
    let p = model.params();
    let lay = model.layout();
    let input = model.config().input_dim();
    let support = [7, 2, 11];
    let weights = [0.5, 0.3, 0.2];
    let mut m = vec![0.0; input];
    for (&j, &w) in support.iter().zip(&weights) {
        for i in 0..input {
            m[i] += w * u[j * input + i];
        }
    }
    let want = mlp(&m, &p[lay.probe_w1.clone()], &p[lay.probe_b1.clone()], &p[lay.probe_w2.clone()], p[lay.probe_b2.start]);
    let got = model.pool_and_probe(&u, &weights, &support).unwrap();
    assert!((got - want).abs() <= 1e-10);

    // A single pair with weight one pools to that pair's input.
    let x = input_row(&model, &g, 1, 3);
    let single = mlp(&x, &p[lay.probe_w1.clone()], &p[lay.probe_b1.clone()], &p[lay.probe_w2.clone()], p[lay.probe_b2.start]);
    assert!((model.pool_and_probe(&u, &[1.0], &[7]).unwrap() - single).abs() <= 1e-10);
    assert!(model.pool_and_probe(&u, &[], &[]).is_err());
}

#[test]
fn k_one_selects_the_global_argmax() {
    let mut c = config();
    c.k = 1;
    let model = SelectorModel::init(c, 5).unwrap();
    for seed in 0..20 {
        let g = features(3, 4, 5, seed);
        let scores = model.gate_scores(&g).unwrap();
        let argmax = (0..scores.len()).fold(0, |b, j| if scores[j] > scores[b] { j } else { b });
        let trace = model.forward(&g, hive_core::selector::Mode::Eval, hive_core::selector::Selection::Learned).unwrap();
        assert_eq!(trace.selection.indices, vec![argmax]);
        assert_eq!(trace.selection.w_top, vec![1.0]);
    }
}

#[test]
fn uniform_weights_have_entropy_ln_k_and_loss_adds_it() {
    for k in [1usize, 2, 5, 16, 64] {
        let w = vec![1.0 / k as f64; k];
        assert!((entropy(&w) - (k as f64).ln()).abs() <= 1e-12);
    }
    // logit -0.8, label 0, λ = 0.01, K = 16 uniform:
    // softplus(-0.8) = ln(1 + e^-0.8) = 0.37110066594777...; total adds 0.01 ln 16.
    let w = vec![1.0 / 16.0; 16];
    let l = selector_loss(-0.8, 0, &w, 0.01, 1.0);
    let cls = (1.0 + (-0.8f64).exp()).ln();
    assert!((cls - 0.371_100_665_947_777_7).abs() <= 1e-12);
    assert!((l.classification - cls).abs() <= 1e-15);
    assert!((l.total - (cls + 0.01 * 16f64.ln())).abs() <= 1e-12);
}

fn scores_strategy() -> impl Strategy<Value = (Vec<f64>, usize)> {
    (2usize..64).prop_flat_map(|t| (proptest::collection::vec(-10.0f64..10.0, t), 1..=t))
}

proptest! {
    #[test]
    fn topk_is_shift_invariant((s, k) in scores_strategy(), c in -50.0f64..50.0, tau in 0.1f64..5.0) {
        let a = softmax_topk(&s, k, tau).unwrap();
        let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
        let b = softmax_topk(&shifted, k, tau).unwrap();
        prop_assert_eq!(&a.indices, &b.indices);
        for (x, y) in a.w_top.iter().zip(&b.w_top) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn selected_weights_form_a_distribution((s, k) in scores_strategy(), tau in 0.1f64..5.0) {
        let sel = softmax_topk(&s, k, tau).unwrap();
        prop_assert_eq!(sel.indices.len(), k);
        prop_assert!((sel.w_top.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!((sel.w_all.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(sel.w_top.iter().all(|&w| w >= 0.0));
        prop_assert!(sel.w_top.windows(2).all(|p| p[0] >= p[1]));
        let mut uniq = sel.indices.clone();
        uniq.sort();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), k);
        // Every selected score is at least every unselected score.
        let min_sel = sel.indices.iter().map(|&j| s[j]).fold(f64::INFINITY, f64::min);
        for j in 0..s.len() {
            if !sel.indices.contains(&j) {
                prop_assert!(s[j] <= min_sel);
            }
        }
        prop_assert_eq!(top_k_indices(&s, k), sel.indices);
    }

    #[test]
    fn entropy_is_bounded_by_ln_k((s, k) in scores_strategy(), tau in 0.1f64..5.0) {
        let sel = softmax_topk(&s, k, tau).unwrap();
        let h = entropy(&sel.w_top);
        prop_assert!(h >= -1e-15 && h <= (k as f64).ln() + 1e-12);
    }
}
