use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use super::gating::{entropy_grad, softmax_topk, topk_backward, TopK};
use super::loss::{selector_loss, LossParts};
use crate::error::{bail, Result};
use crate::features::TwoStream;
use crate::rng::SplitMix64;

/// Architecture of the step-layer selector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_steps: usize,
    pub num_layers: usize,
    pub r: usize,
    pub step_dim: usize,
    pub layer_dim: usize,
    pub gate_hidden: usize,
    pub probe_hidden: usize,
    pub k: usize,
    pub temperature: f64,
    pub dropout: f64,
}

impl ModelConfig {
    /// Defaults for an `N x L` grid of `r`-dimensional evidence.
    pub fn new(num_steps: usize, num_layers: usize, r: usize) -> Self {
        Self {
            num_steps,
            num_layers,
            r,
            step_dim: 16,
            layer_dim: 16,
            gate_hidden: 128,
            probe_hidden: 512,
            k: 16,
            temperature: 1.0,
            dropout: 0.2,
        }
    }

    /// Width of `ũ = [g ; a_t ; b_ℓ]`.
    pub fn input_dim(&self) -> usize {
        2 * self.r + self.step_dim + self.layer_dim
    }

    pub fn num_pairs(&self) -> usize {
        self.num_steps * self.num_layers
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 || self.num_layers == 0 || self.r == 0 {
            bail!(Input, "selector grid and evidence width must be non-empty");
        }
        if self.gate_hidden == 0 || self.probe_hidden == 0 {
            bail!(Input, "hidden widths must be >= 1");
        }
        if self.k == 0 || self.k > self.num_pairs() {
            bail!(Input, "K = {} must lie in [1, {}]", self.k, self.num_pairs());
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            bail!(Input, "temperature must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Input, "dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self)
    }
}

/// Offsets of each tensor inside the flat parameter vector, in storage order.
/// Dense weights are input-major: `w[i * out + o]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub step_emb: Range<usize>,
    pub layer_emb: Range<usize>,
    pub gate_w1: Range<usize>,
    pub gate_b1: Range<usize>,
    pub gate_w2: Range<usize>,
    pub gate_b2: Range<usize>,
    pub probe_w1: Range<usize>,
    pub probe_b1: Range<usize>,
    pub probe_w2: Range<usize>,
    pub probe_b2: Range<usize>,
    pub total: usize,
}

impl ParamLayout {
    fn new(c: &ModelConfig) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let input = c.input_dim();
        let step_emb = take(c.num_steps * c.step_dim);
        let layer_emb = take(c.num_layers * c.layer_dim);
        let gate_w1 = take(input * c.gate_hidden);
        let gate_b1 = take(c.gate_hidden);
        let gate_w2 = take(c.gate_hidden);
        let gate_b2 = take(1);
        let probe_w1 = take(input * c.probe_hidden);
        let probe_b1 = take(c.probe_hidden);
        let probe_w2 = take(c.probe_hidden);
        let probe_b2 = take(1);
        Self { step_emb, layer_emb, gate_w1, gate_b1, gate_w2, gate_b2, probe_w1, probe_b1, probe_w2, probe_b2, total: at }
    }

    /// `(name, range)` for every tensor, in storage order.
    pub fn named(&self) -> [(&'static str, Range<usize>); 10] {
        [
            ("step_emb", self.step_emb.clone()),
            ("layer_emb", self.layer_emb.clone()),
            ("gate_w1", self.gate_w1.clone()),
            ("gate_b1", self.gate_b1.clone()),
            ("gate_w2", self.gate_w2.clone()),
            ("gate_b2", self.gate_b2.clone()),
            ("probe_w1", self.probe_w1.clone()),
            ("probe_b1", self.probe_b1.clone()),
            ("probe_w2", self.probe_w2.clone()),
            ("probe_b2", self.probe_b2.clone()),
        ]
    }
}

/// How the pooled support is chosen.
#[derive(Debug, Clone, Copy)]
pub enum Selection<'a> {
    /// Gate scores, softmax and top-K.
    Learned,
    /// Externally fixed support with uniform weights (random-K baseline).
    Fixed(&'a [usize]),
}

/// Dropout control for a forward pass.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut SplitMix64),
}

/// Activations recorded by [`SelectorModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `[T, input]`
    pub u: Vec<f64>,
    gate_pre: Vec<f64>,
    gate_act: Vec<f64>,
    gate_scale: Vec<f64>,
    pub scores: Vec<f64>,
    pub selection: TopK,
    learned: bool,
    pub pooled: Vec<f64>,
    probe_pre: Vec<f64>,
    probe_act: Vec<f64>,
    probe_scale: Vec<f64>,
    pub logit: f64,
}

/// How the gate receives gradient through the top-K mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateGradient {
    /// Scores are differentiated as if every pair were pooled with `w_all`,
    /// so unselected pairs still receive a learning signal.
    #[default]
    StraightThrough,
    /// Exact derivative of the forward map with the mask held constant.
    Exact,
}

/// Options for [`SelectorModel::backward`].
#[derive(Debug, Clone, Copy)]
pub struct BackwardOptions {
    pub gate_gradient: GateGradient,
    pub lambda_ent: f64,
    pub pos_weight: f64,
    pub freeze_embeddings: bool,
    /// Multiplier applied to every accumulated gradient (batch averaging).
    pub scale: f64,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self { gate_gradient: GateGradient::default(), lambda_ent: 0.0, pos_weight: 1.0, freeze_embeddings: false, scale: 1.0 }
    }
}

/// Gate MLP, probe MLP and step/layer embeddings in one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorModel {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<f64>,
}

fn uniform_fill(rng: &mut SplitMix64, out: &mut [f64], bound: f64) {
    out.iter_mut().for_each(|x| *x = (2.0 * rng.next_f64() - 1.0) * bound);
}

/// `out[o] += Σ_i x[i] * w[i * width + o]`
#[inline]
fn affine_accumulate(x: &[f64], w: &[f64], width: usize, out: &mut [f64]) {
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * width..(i + 1) * width];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

const EMBEDDING_INIT_STD: f64 = 1.0;

impl SelectorModel {
    /// Embeddings are standard normal; dense layers are uniform in
    /// `±1/sqrt(fan_in)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut params = vec![0.0; layout.total];
        let root = SplitMix64::new(seed);
        let input = config.input_dim() as f64;
        for (stream, (name, range)) in layout.named().into_iter().enumerate() {
            let mut rng = root.fork(stream as u64);
            let slot = &mut params[range];
            match name {
                "step_emb" | "layer_emb" => slot.iter_mut().for_each(|x| *x = EMBEDDING_INIT_STD * rng.next_normal()),
                "gate_w1" | "gate_b1" | "probe_w1" | "probe_b1" => uniform_fill(&mut rng, slot, 1.0 / libm::sqrt(input)),
                "gate_w2" | "gate_b2" => uniform_fill(&mut rng, slot, 1.0 / libm::sqrt(config.gate_hidden as f64)),
                _ => uniform_fill(&mut rng, slot, 1.0 / libm::sqrt(config.probe_hidden as f64)),
            }
        }
        Ok(Self { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if params.len() != layout.total {
            bail!(Shape, "{} parameters supplied, architecture needs {}", params.len(), layout.total);
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn step_embedding(&self, t: usize) -> &[f64] {
        let d = self.config.step_dim;
        &self.params[self.layout.step_emb.start + t * d..][..d]
    }

    pub fn layer_embedding(&self, l: usize) -> &[f64] {
        let d = self.config.layer_dim;
        &self.params[self.layout.layer_emb.start + l * d..][..d]
    }

    fn check_input(&self, g: &TwoStream) -> Result<()> {
        let c = &self.config;
        if g.steps != c.num_steps || g.layers != c.num_layers || g.r != c.r {
            bail!(
                Shape,
                "features are [{}, {}, 2*{}], selector expects [{}, {}, 2*{}]",
                g.steps,
                g.layers,
                g.r,
                c.num_steps,
                c.num_layers,
                c.r
            );
        }
        Ok(())
    }

    /// `ũ_j = [g_j ; a_t ; b_ℓ]` for every flat pair `j = t * L + ℓ`.
    pub fn augmented_inputs(&self, g: &TwoStream) -> Result<Vec<f64>> {
        self.check_input(g)?;
        let c = &self.config;
        let input = c.input_dim();
        let mut u = vec![0.0; c.num_pairs() * input];
        for t in 0..c.num_steps {
            for l in 0..c.num_layers {
                let j = t * c.num_layers + l;
                let row = &mut u[j * input..(j + 1) * input];
                row[..2 * c.r].copy_from_slice(g.pair(j));
                row[2 * c.r..2 * c.r + c.step_dim].copy_from_slice(self.step_embedding(t));
                row[2 * c.r + c.step_dim..].copy_from_slice(self.layer_embedding(l));
            }
        }
        Ok(u)
    }

    fn dropout_scales(&self, n: usize, mode: &mut Mode<'_>) -> Vec<f64> {
        match mode {
            Mode::Train(rng) if self.config.dropout > 0.0 => {
                let p = self.config.dropout;
                let keep = 1.0 / (1.0 - p);
                (0..n).map(|_| if rng.next_f64() < p { 0.0 } else { keep }).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Gate scores for all pairs (flattened `[N, L]`), evaluation mode.
    pub fn gate_scores(&self, g: &TwoStream) -> Result<Vec<f64>> {
        let u = self.augmented_inputs(g)?;
        let (scores, _, _, _) = self.gate_forward(&u, &mut Mode::Eval);
        Ok(scores)
    }

    fn gate_forward(&self, u: &[f64], mode: &mut Mode<'_>) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let c = &self.config;
        let (input, hidden, pairs) = (c.input_dim(), c.gate_hidden, c.num_pairs());
        let w1 = &self.params[self.layout.gate_w1.clone()];
        let b1 = &self.params[self.layout.gate_b1.clone()];
        let w2 = &self.params[self.layout.gate_w2.clone()];
        let b2 = self.params[self.layout.gate_b2.start];
        let mut pre = vec![0.0; pairs * hidden];
        for j in 0..pairs {
            let out = &mut pre[j * hidden..(j + 1) * hidden];
            out.copy_from_slice(b1);
            affine_accumulate(&u[j * input..(j + 1) * input], w1, hidden, out);
        }
        let scale = self.dropout_scales(pairs * hidden, mode);
        let mut act: Vec<f64> = pre.iter().map(|&x| x.max(0.0)).collect();
        if !scale.is_empty() {
            act.iter_mut().zip(&scale).for_each(|(a, s)| *a *= s);
        }
        let scores = (0..pairs).map(|j| b2 + act[j * hidden..(j + 1) * hidden].iter().zip(w2).map(|(a, w)| a * w).sum::<f64>()).collect();
        (scores, pre, act, scale)
    }

    /// Weighted pool `m = Σ w_j ũ_j` over `support`, then the probe logit.
    /// `u` is `[T, input]` as returned by [`Self::augmented_inputs`].
    pub fn pool_and_probe(&self, u: &[f64], weights: &[f64], support: &[usize]) -> Result<f64> {
        if support.is_empty() {
            bail!(Input, "pooling support is empty");
        }
        if weights.len() != support.len() {
            bail!(Shape, "{} weights for {} supported pairs", weights.len(), support.len());
        }
        let pooled = self.pool(u, weights, support);
        Ok(self.probe_forward(&pooled, &mut Mode::Eval).3)
    }

    fn pool(&self, u: &[f64], weights: &[f64], support: &[usize]) -> Vec<f64> {
        let input = self.config.input_dim();
        let mut m = vec![0.0; input];
        for (&j, &w) in support.iter().zip(weights) {
            for (mi, &x) in m.iter_mut().zip(&u[j * input..(j + 1) * input]) {
                *mi += w * x;
            }
        }
        m
    }

    fn probe_forward(&self, m: &[f64], mode: &mut Mode<'_>) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64) {
        let hidden = self.config.probe_hidden;
        let w1 = &self.params[self.layout.probe_w1.clone()];
        let mut pre = self.params[self.layout.probe_b1.clone()].to_vec();
        affine_accumulate(m, w1, hidden, &mut pre);
        let scale = self.dropout_scales(hidden, mode);
        let mut act: Vec<f64> = pre.iter().map(|&x| x.max(0.0)).collect();
        if !scale.is_empty() {
            act.iter_mut().zip(&scale).for_each(|(a, s)| *a *= s);
        }
        let w2 = &self.params[self.layout.probe_w2.clone()];
        let logit = self.params[self.layout.probe_b2.start] + act.iter().zip(w2).map(|(a, w)| a * w).sum::<f64>();
        (pre, act, scale, logit)
    }

    /// Full forward pass, recording everything [`Self::backward`] needs.
    pub fn forward(&self, g: &TwoStream, mut mode: Mode<'_>, selection: Selection<'_>) -> Result<Trace> {
        let u = self.augmented_inputs(g)?;
        let c = &self.config;
        let (scores, gate_pre, gate_act, gate_scale) = match selection {
            Selection::Learned => self.gate_forward(&u, &mut mode),
            Selection::Fixed(_) => (Vec::new(), Vec::new(), Vec::new(), Vec::new()),
        };
        let (sel, learned) = match selection {
            Selection::Learned => (softmax_topk(&scores, c.k, c.temperature)?, true),
            Selection::Fixed(idx) => {
                if idx.is_empty() || idx.iter().any(|&j| j >= c.num_pairs()) {
                    bail!(Input, "fixed support must be non-empty and within [0, {})", c.num_pairs());
                }
                let w = 1.0 / idx.len() as f64;
                (TopK { w_all: Vec::new(), indices: idx.to_vec(), w_top: vec![w; idx.len()] }, false)
            }
        };
        let pooled = self.pool(&u, &sel.w_top, &sel.indices);
        let (probe_pre, probe_act, probe_scale, logit) = self.probe_forward(&pooled, &mut mode);
        Ok(Trace { u, gate_pre, gate_act, gate_scale, scores, selection: sel, learned, pooled, probe_pre, probe_act, probe_scale, logit })
    }

    /// Evaluation-mode logit with top-K pooling.
    pub fn predict_logit(&self, g: &TwoStream) -> Result<f64> {
        Ok(self.forward(g, Mode::Eval, Selection::Learned)?.logit)
    }

    /// Diagnostic soft-aggregation logit: pools every pair with `w_all`.
    pub fn predict_logit_soft(&self, g: &TwoStream) -> Result<f64> {
        let u = self.augmented_inputs(g)?;
        let (scores, ..) = self.gate_forward(&u, &mut Mode::Eval);
        let sel = softmax_topk(&scores, 1, self.config.temperature)?;
        let all: Vec<usize> = (0..scores.len()).collect();
        self.pool_and_probe(&u, &sel.w_all, &all)
    }

    /// Accumulates `scale * dL/dθ` into `grad` and returns the loss parts.
    ///
    /// The top-K mask recorded in `trace` is treated as constant. With
    /// [`GateGradient::Exact`] only selected scores receive gradient; with
    /// [`GateGradient::StraightThrough`] every score does. Embeddings receive
    /// gradient through both the gate input and the pooled probe input.
    pub fn backward(&self, trace: &Trace, target: u8, opts: BackwardOptions, grad: &mut [f64]) -> LossParts {
        let c = &self.config;
        let lay = &self.layout;
        let input = c.input_dim();
        let sel = &trace.selection;
        let lambda = if trace.learned { opts.lambda_ent } else { 0.0 };
        let loss = selector_loss(trace.logit, target, &sel.w_top, lambda, opts.pos_weight);
        let s = opts.scale;
        let dz = loss.d_logit;

        // Probe.
        let ph = c.probe_hidden;
        grad[lay.probe_b2.start] += s * dz;
        let pw2 = &self.params[lay.probe_w2.clone()];
        let mut d_pre = vec![0.0; ph];
        for h in 0..ph {
            grad[lay.probe_w2.start + h] += s * dz * trace.probe_act[h];
            if trace.probe_pre[h] > 0.0 {
                let keep = if trace.probe_scale.is_empty() { 1.0 } else { trace.probe_scale[h] };
                d_pre[h] = dz * pw2[h] * keep;
            }
        }
        let pw1 = &self.params[lay.probe_w1.clone()];
        let mut d_m = vec![0.0; input];
        for i in 0..input {
            let mi = trace.pooled[i];
            let row = lay.probe_w1.start + i * ph;
            let wrow = &pw1[i * ph..(i + 1) * ph];
            let mut acc = 0.0;
            for h in 0..ph {
                grad[row + h] += s * mi * d_pre[h];
                acc += wrow[h] * d_pre[h];
            }
            d_m[i] = acc;
        }
        for h in 0..ph {
            grad[lay.probe_b1.start + h] += s * d_pre[h];
        }

        // Pooling: m = Σ_j w_j ũ_j over the selected support.
        let pairs = c.num_pairs();
        let mut d_u = vec![0.0; pairs * input];
        let mut d_w = vec![0.0; sel.indices.len()];
        for (a, (&j, &w)) in sel.indices.iter().zip(&sel.w_top).enumerate() {
            let uj = &trace.u[j * input..(j + 1) * input];
            d_w[a] = uj.iter().zip(&d_m).map(|(x, g)| x * g).sum();
            for (du, &g) in d_u[j * input..(j + 1) * input].iter_mut().zip(&d_m) {
                *du = w * g;
            }
        }

        if trace.learned {
            let d_ent: Vec<f64> =
                if lambda != 0.0 { entropy_grad(&sel.w_top).into_iter().map(|e| lambda * e).collect() } else { vec![0.0; d_w.len()] };
            let d_scores = match opts.gate_gradient {
                GateGradient::Exact => {
                    let total: Vec<f64> = d_w.iter().zip(&d_ent).map(|(p, e)| p + e).collect();
                    topk_backward(sel, &total, c.temperature, pairs)
                }
                GateGradient::StraightThrough => {
                    // The entropy term depends on w_top alone and keeps its
                    // exact gradient; the pooling term uses the soft pool.
                    let mut d_scores = topk_backward(sel, &d_ent, c.temperature, pairs);
                    let d_w_all: Vec<f64> =
                        (0..pairs).map(|j| trace.u[j * input..(j + 1) * input].iter().zip(&d_m).map(|(x, g)| x * g).sum()).collect();
                    let inner: f64 = sel.w_all.iter().zip(&d_w_all).map(|(w, g)| w * g).sum();
                    for ((ds, &w), &g) in d_scores.iter_mut().zip(&sel.w_all).zip(&d_w_all) {
                        *ds += w * (g - inner) / c.temperature;
                    }
                    d_scores
                }
            };
            let gh = c.gate_hidden;
            let gw1 = &self.params[lay.gate_w1.clone()];
            let gw2 = &self.params[lay.gate_w2.clone()];
            let mut d_hidden = vec![0.0; gh];
            for (j, &ds) in d_scores.iter().enumerate() {
                if ds == 0.0 {
                    continue;
                }
                grad[lay.gate_b2.start] += s * ds;
                let act = &trace.gate_act[j * gh..(j + 1) * gh];
                let pre = &trace.gate_pre[j * gh..(j + 1) * gh];
                for h in 0..gh {
                    grad[lay.gate_w2.start + h] += s * ds * act[h];
                    d_hidden[h] = if pre[h] > 0.0 {
                        let keep = if trace.gate_scale.is_empty() { 1.0 } else { trace.gate_scale[j * gh + h] };
                        ds * gw2[h] * keep
                    } else {
                        0.0
                    };
                    grad[lay.gate_b1.start + h] += s * d_hidden[h];
                }
                let uj = &trace.u[j * input..(j + 1) * input];
                let du = &mut d_u[j * input..(j + 1) * input];
                for i in 0..input {
                    let row = lay.gate_w1.start + i * gh;
                    let wrow = &gw1[i * gh..(i + 1) * gh];
                    let ui = uj[i];
                    let mut acc = 0.0;
                    for h in 0..gh {
                        grad[row + h] += s * ui * d_hidden[h];
                        acc += wrow[h] * d_hidden[h];
                    }
                    du[i] += acc;
                }
            }
        }

        if !opts.freeze_embeddings {
            let off = 2 * c.r;
            for j in 0..pairs {
                let (t, l) = (j / c.num_layers, j % c.num_layers);
                let du = &d_u[j * input..(j + 1) * input];
                let se = lay.step_emb.start + t * c.step_dim;
                for q in 0..c.step_dim {
                    grad[se + q] += s * du[off + q];
                }
                let le = lay.layer_emb.start + l * c.layer_dim;
                for q in 0..c.layer_dim {
                    grad[le + q] += s * du[off + c.step_dim + q];
                }
            }
        }
        loss
    }

    /// Loss of one example under evaluation mode; used by gradient checks.
    pub fn loss(&self, g: &TwoStream, target: u8, selection: Selection<'_>, opts: BackwardOptions) -> Result<LossParts> {
        let trace = self.forward(g, Mode::Eval, selection)?;
        let lambda = if trace.learned { opts.lambda_ent } else { 0.0 };
        Ok(selector_loss(trace.logit, target, &trace.selection.w_top, lambda, opts.pos_weight))
    }
}
