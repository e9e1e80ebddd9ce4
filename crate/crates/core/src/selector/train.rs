//! Mini-batch AdamW training of the selector with validation early stopping.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::loss::sigmoid;
use super::model::{BackwardOptions, GateGradient, Mode, ModelConfig, Selection, SelectorModel};
use super::optim::AdamW;
use super::split::{stratified_split, SplitFractions, Splits};
use crate::error::{bail, Error, Result};
use crate::features::TwoStream;
use crate::metrics::{auroc, Confusion};
use crate::rng::SplitMix64;
use crate::trajectory::Label;

/// How the pooled evidence support is chosen during training and inference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Learned,
    /// K uniformly random pairs per example (seeded by row id), uniform weights.
    RandomK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_ent: f64,
    pub pos_reweight: bool,
    pub split: SplitFractions,
    pub patience: usize,
    pub seed: u64,
    pub k: usize,
    pub temperature: f64,
    pub dropout: f64,
    pub step_dim: usize,
    pub layer_dim: usize,
    pub gate_hidden: usize,
    pub probe_hidden: usize,
    pub selection: SelectionMode,
    pub gate_gradient: GateGradient,
    pub freeze_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 128,
            epochs: 30,
            lambda_ent: 1e-3,
            pos_reweight: false,
            split: SplitFractions::default(),
            patience: 10,
            seed: 42,
            k: 16,
            temperature: 1.0,
            dropout: 0.2,
            step_dim: 16,
            layer_dim: 16,
            gate_hidden: 128,
            probe_hidden: 512,
            selection: SelectionMode::Learned,
            gate_gradient: GateGradient::StraightThrough,
            freeze_embeddings: false,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, num_steps: usize, num_layers: usize, r: usize) -> ModelConfig {
        ModelConfig {
            num_steps,
            num_layers,
            r,
            step_dim: self.step_dim,
            layer_dim: self.layer_dim,
            gate_hidden: self.gate_hidden,
            probe_hidden: self.probe_hidden,
            k: self.k,
            temperature: self.temperature,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        if self.patience == 0 {
            bail!(Input, "patience must be >= 1");
        }
        if self.batch_size == 0 {
            bail!(Input, "batch size must be >= 1");
        }
        if [self.lr, self.weight_decay, self.lambda_ent].iter().any(|x| x.is_nan() || *x < 0.0) {
            bail!(Input, "lr, weight decay and entropy weight must be non-negative");
        }
        Ok(())
    }
}

/// Two-stream features and labels aligned by position.
#[derive(Debug, Clone, Default)]
pub struct SelectorDataset {
    pub features: Vec<TwoStream>,
    pub labels: Vec<Label>,
    pub row_ids: Vec<u32>,
}

impl SelectorDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

const RANDOM_K_STREAM: u64 = 0x0052_414E_444B; // "RANDK"

/// Random-K baseline support for one example: `k` distinct flat pair indices
/// drawn without replacement from `[0, num_pairs)`.
pub fn random_support(seed: u64, row_id: u32, num_pairs: usize, k: usize) -> Vec<usize> {
    let mut rng = SplitMix64::new(seed).fork(RANDOM_K_STREAM).fork(u64::from(row_id));
    let mut all: Vec<usize> = (0..num_pairs).collect();
    for i in 0..k.min(num_pairs) {
        let j = i + rng.below((num_pairs - i) as u64) as usize;
        all.swap(i, j);
    }
    all.truncate(k);
    all
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub examples: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub f1: f64,
    /// `None` when the split holds a single class.
    pub auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: SplitMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub examples: usize,
    pub hallucinated: usize,
    pub correct: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub pos_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub dataset: DatasetStats,
    pub hyperparameters: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub train: SplitMetrics,
    pub val: SplitMetrics,
    pub test: SplitMetrics,
    pub splits: Splits,
}

/// Stateful trainer; [`train_selector`] drives it to completion.
pub struct Trainer<'a> {
    data: &'a SelectorDataset,
    cfg: TrainConfig,
    model: SelectorModel,
    opt: AdamW,
    splits: Splits,
    pos_weight: f64,
    root: SplitMix64,
    grad: Vec<f64>,
}

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;

impl<'a> Trainer<'a> {
    pub fn new(data: &'a SelectorDataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let first = data.features.first().ok_or_else(|| Error::Training("dataset is empty".into()))?;
        if data.features.len() != data.labels.len() || data.labels.len() != data.row_ids.len() {
            bail!(Shape, "features, labels and row ids are misaligned");
        }
        let hallucinated = data.labels.iter().filter(|l| l.is_hallucinated()).count();
        let correct = data.len() - hallucinated;
        if hallucinated < 2 || correct < 2 {
            bail!(
                Training,
                "need at least two examples per class, found {hallucinated} hallucinated and {correct} correct; \
                 a single-class dataset gives the probe nothing to separate"
            );
        }
        let splits = stratified_split(&data.labels, &data.row_ids, cfg.split, cfg.seed)?;
        let train_pos = splits.train.iter().filter(|&&i| data.labels[i] == Label::Correct).count();
        let train_neg = splits.train.len() - train_pos;
        let pos_weight = if cfg.pos_reweight && train_pos > 0 { train_neg as f64 / train_pos as f64 } else { 1.0 };
        let root = SplitMix64::new(cfg.seed);
        let model_cfg = cfg.model_config(first.steps, first.layers, first.r);
        let model = SelectorModel::init(model_cfg, root.fork(INIT_STREAM).next_u64())?;
        let n = model.params().len();
        let opt = AdamW::new(n, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps);
        Ok(Self { data, cfg, model, opt, splits, pos_weight, root, grad: vec![0.0; n] })
    }

    pub fn model(&self) -> &SelectorModel {
        &self.model
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn pos_weight(&self) -> f64 {
        self.pos_weight
    }

    fn backward_options(&self, scale: f64) -> BackwardOptions {
        BackwardOptions {
            gate_gradient: self.cfg.gate_gradient,
            lambda_ent: self.cfg.lambda_ent,
            pos_weight: self.pos_weight,
            freeze_embeddings: self.cfg.freeze_embeddings,
            scale,
        }
    }

    fn support(&self, index: usize) -> Option<Vec<usize>> {
        match self.cfg.selection {
            SelectionMode::Learned => None,
            SelectionMode::RandomK => {
                Some(random_support(self.cfg.seed, self.data.row_ids[index], self.model.config().num_pairs(), self.cfg.k))
            }
        }
    }

    /// One AdamW step on the mean loss of `batch`; returns that mean loss.
    pub fn step_batch(&mut self, batch: &[usize]) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        let opts = self.backward_options(1.0 / batch.len() as f64);
        let mut rng = self.root.fork(DROPOUT_STREAM).fork(self.opt.steps_taken());
        let mut total = 0.0;
        for &i in batch {
            let support = self.support(i);
            let selection = support.as_deref().map_or(Selection::Learned, Selection::Fixed);
            let trace = self.model.forward(&self.data.features[i], Mode::Train(&mut rng), selection)?;
            let loss = self.model.backward(&trace, self.data.labels[i].as_u8(), opts, &mut self.grad);
            total += loss.total;
        }
        self.opt.step(self.model.params_mut(), &self.grad);
        if self.model.params().iter().any(|p| !p.is_finite()) {
            bail!(Training, "non-finite parameter after optimizer step {}", self.opt.steps_taken());
        }
        Ok(total / batch.len() as f64)
    }

    /// One pass over the shuffled training split; returns the mean batch loss.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<f64> {
        let mut order = self.splits.train.clone();
        self.root.fork(SHUFFLE_STREAM).fork(epoch as u64).shuffle(&mut order);
        let mut sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(self.cfg.batch_size) {
            sum += self.step_batch(batch)?;
            batches += 1;
        }
        Ok(if batches == 0 { 0.0 } else { sum / batches as f64 })
    }

    /// Evaluation-mode metrics of the current model on dataset positions.
    pub fn evaluate(&self, indices: &[usize]) -> Result<SplitMetrics> {
        evaluate_model(&self.model, self.data, indices, &self.cfg, self.pos_weight)
    }
}

/// Hallucination score of a probe logit (the probe predicts "correct").
pub fn hallucination_score(logit: f64) -> f64 {
    sigmoid(-logit)
}

/// Metrics of `model` on the given dataset positions. Predictions count as
/// hallucinated when the hallucination score is at least 0.5.
pub fn evaluate_model(
    model: &SelectorModel,
    data: &SelectorDataset,
    indices: &[usize],
    cfg: &TrainConfig,
    pos_weight: f64,
) -> Result<SplitMetrics> {
    let opts = BackwardOptions { lambda_ent: cfg.lambda_ent, pos_weight, ..BackwardOptions::default() };
    let mut scores = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    let mut loss = 0.0;
    for &i in indices {
        let support = match cfg.selection {
            SelectionMode::Learned => None,
            SelectionMode::RandomK => Some(random_support(cfg.seed, data.row_ids[i], model.config().num_pairs(), cfg.k)),
        };
        let selection = support.as_deref().map_or(Selection::Learned, Selection::Fixed);
        let trace = model.forward(&data.features[i], Mode::Eval, selection)?;
        let lambda = if support.is_some() { 0.0 } else { opts.lambda_ent };
        loss += super::loss::selector_loss(trace.logit, data.labels[i].as_u8(), &trace.selection.w_top, lambda, opts.pos_weight).total;
        scores.push(hallucination_score(trace.logit));
        labels.push(data.labels[i]);
    }
    let confusion = Confusion::at(&scores, &labels, 0.5);
    let both = labels.iter().any(|l| l.is_hallucinated()) && labels.iter().any(|l| !l.is_hallucinated());
    Ok(SplitMetrics {
        examples: indices.len(),
        loss: if indices.is_empty() { 0.0 } else { loss / indices.len() as f64 },
        accuracy: confusion.accuracy(),
        f1: confusion.f1(),
        auroc: if both { Some(auroc(&scores, &labels)?) } else { None },
    })
}

/// Trains with early stopping on validation AUROC (validation loss breaks
/// ties) and returns the best checkpoint with its report.
pub fn train_selector(data: &SelectorDataset, cfg: &TrainConfig) -> Result<(SelectorModel, TrainReport)> {
    let mut trainer = Trainer::new(data, cfg.clone())?;
    let mut history = Vec::new();
    let initial = trainer.evaluate(&trainer.splits.val)?;
    let mut best_key = (initial.auroc.unwrap_or(f64::NEG_INFINITY), initial.loss);
    let mut best_model = trainer.model.clone();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        let train_loss = trainer.run_epoch(epoch)?;
        epochs_run = epoch;
        let val = trainer.evaluate(&trainer.splits.val)?;
        let key = (val.auroc.unwrap_or(f64::NEG_INFINITY), val.loss);
        let improved = key.0 > best_key.0 + 1e-12 || ((key.0 - best_key.0).abs() <= 1e-12 && key.1 < best_key.1);
        history.push(EpochRecord { epoch, train_loss, val });
        if improved {
            best_key = key;
            best_model = trainer.model.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let pos_weight = trainer.pos_weight;
    let splits = trainer.splits.clone();
    let eval = |idx: &[usize]| evaluate_model(&best_model, data, idx, cfg, pos_weight);
    let hallucinated = data.labels.iter().filter(|l| l.is_hallucinated()).count();
    let report = TrainReport {
        dataset: DatasetStats {
            examples: data.len(),
            hallucinated,
            correct: data.len() - hallucinated,
            train: splits.train.len(),
            val: splits.val.len(),
            test: splits.test.len(),
            pos_weight,
        },
        hyperparameters: cfg.clone(),
        history,
        best_epoch,
        epochs_run,
        stopped_early,
        train: eval(&splits.train)?,
        val: eval(&splits.val)?,
        test: eval(&splits.test)?,
        splits,
    };
    if !report.test.loss.is_finite() {
        return Err(Error::Training(format!("non-finite test loss {}", report.test.loss)));
    }
    Ok((best_model, report))
}
