//! Allocation-only core of the hidden-evidence hallucination detector.
//!
//! Everything here is pure computation over in-memory buffers: trajectory
//! synthesis, per-layer random projection to half precision, two-stream
//! feature construction, the step-layer selector with its training loop, and
//! the detection metrics. File formats, memory mapping and the command-line
//! front end live in the `hive` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;
pub mod export;
pub mod features;
pub mod linalg;
pub mod metrics;
pub mod oporp;
pub mod rng;
pub mod selector;
pub mod trajectory;

pub use error::{Error, Result};
pub use features::{build_two_stream, ActView, StoreDims, TwoStream};
pub use metrics::{auprc, auroc, decision_logit_score, select_threshold, thresholded_metrics, MetricsReport};
pub use oporp::{OporpConfig, OporpProjector};
pub use trajectory::{Label, Trajectory, TrajectoryConfig};
