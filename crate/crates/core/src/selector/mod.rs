//! Time-aware step-layer evidence selector.
//!
//! Each candidate pair `(t, ℓ)` is represented by its two-stream feature
//! concatenated with learned step and layer embeddings. A shared gate MLP
//! scores every pair, a softmax over all pairs is restricted to the top-K and
//! renormalized, and a probe MLP classifies the weighted pool of the selected
//! inputs. Gradients are analytic and checked against finite differences.

pub mod gating;
pub mod loss;
mod model;
pub mod optim;
pub mod split;
mod train;

pub use gating::{entropy, softmax_topk, top_k_indices, TopK};
pub use loss::{selector_loss, LossParts};
pub use model::{BackwardOptions, GateGradient, Mode, ModelConfig, ParamLayout, Selection, SelectorModel, Trace};
pub use optim::AdamW;
pub use split::{stratified_split, SplitFractions, Splits};
pub use train::{
    evaluate_model, hallucination_score, random_support, train_selector, DatasetStats, EpochRecord, SelectionMode, SelectorDataset,
    SplitMetrics, TrainConfig, TrainReport, Trainer,
};
