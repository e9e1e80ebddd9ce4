//! Verifier datasets, execution and structured evaluation.

pub mod pack;
pub mod prompt;
pub mod run;
pub mod structured;
pub mod target;

pub use pack::{build_examples, pack_dataset, EvidencePointer, PackStats, VerifierExample};
pub use prompt::{render_prompt, Message};
pub use run::{run_mock, EvidenceRow, MockVerifier, PredictionRecord, VerifierRequest, VerifierResponse};
pub use structured::{eval_structured, parse_first_json, StructuredPrediction, StructuredReport};
pub use target::{HallucinationType, TargetJson};
