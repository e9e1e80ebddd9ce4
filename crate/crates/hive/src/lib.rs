//! File formats, verifier packing and evaluation, and the pipeline behind the
//! `hive` command.
//!
//! The pipeline runs trajectory dumps → feature store → trained selector →
//! evidence shards → verifier JSONL → predictions → reports. Every artifact is
//! a directory or file with a documented little-endian or JSON layout, so
//! each stage can be re-run or replaced independently.

pub mod checkpoint;
pub mod dump;
pub mod error;
pub mod io;
pub mod oporp_file;
pub mod pipeline;
pub mod scoring;
pub mod shard;
pub mod store;
pub mod verifier;

pub use error::{Error, Result};
pub use hive_core as core;
