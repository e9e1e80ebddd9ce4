//! Selector checkpoint container.
//!
//! Layout: magic `HIVESELC`, little-endian `u64` header length, the UTF-8 JSON
//! header, then `param_count` little-endian binary32 parameters in the order
//! given by `param_order` (each block row-major). The header records the
//! evidence dims, projector identity, architecture, training
//! hyperparameters, split membership by row id and the epoch history.

use std::path::Path;

use hive_core::selector::{EpochRecord, ModelConfig, SelectorModel, TrainConfig, TrainReport};
use hive_core::{OporpConfig, StoreDims};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::io::{decode_le, encode_le, read_bytes, write_bytes};
use crate::store::FeatureStore;

const MAGIC: &[u8; 8] = b"HIVESELC";
const FORMAT: &str = "hive-selector";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Split membership as store row ids, ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRowIds {
    pub train: Vec<i32>,
    pub val: Vec<i32>,
    pub test: Vec<i32>,
}

impl SplitRowIds {
    pub fn get(&self, split: &str) -> Result<&[i32]> {
        match split {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => bail!(Input, "unknown split {other:?}; expected train, val or test"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub dims: StoreDims,
    pub oporp: OporpConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub param_count: usize,
    pub param_order: Vec<ParamBlock>,
    pub splits: SplitRowIds,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// A trained selector with the context needed to apply it to a store.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: SelectorModel,
}

impl Checkpoint {
    /// Packages a training result; split positions are translated to the
    /// store's row ids.
    pub fn new(store: &FeatureStore, model: SelectorModel, train: TrainConfig, report: &TrainReport) -> Self {
        let ids = |pos: &[usize]| -> Vec<i32> {
            let mut v: Vec<i32> = pos.iter().map(|&p| store.row_ids()[p]).collect();
            v.sort_unstable();
            v
        };
        let layout = model.layout();
        let header = CheckpointHeader {
            format: FORMAT.into(),
            version: VERSION,
            dims: store.dims(),
            oporp: store.manifest().oporp,
            model: model.config().clone(),
            train,
            param_count: layout.total,
            param_order: layout
                .named()
                .into_iter()
                .map(|(name, r)| ParamBlock { name: name.into(), offset: r.start, len: r.len() })
                .collect(),
            splits: SplitRowIds { train: ids(&report.splits.train), val: ids(&report.splits.val), test: ids(&report.splits.test) },
            history: report.history.clone(),
            best_epoch: report.best_epoch,
        };
        // Parameters are stored in binary32; keep the in-memory model identical
        // to what a reload produces.
        let params = model.params().iter().map(|&p| f64::from(p as f32)).collect();
        let model = SelectorModel::from_params(header.model.clone(), params).expect("same architecture");
        Self { header, model }
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("serializable header");
        let params: Vec<f32> = self.model.params().iter().map(|&p| p as f32).collect();
        let mut out = Vec::with_capacity(16 + header.len() + params.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend(encode_le(&params));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        if bytes.len() < 16 {
            return Err(Error::Truncated { path: path.to_path_buf(), section: "preamble".into() });
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::header(path, "bad magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() - 16 < len {
            return Err(Error::Truncated { path: path.to_path_buf(), section: "header".into() });
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + len]).map_err(|e| Error::header(path, e.to_string()))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::header(path, format!("expected {FORMAT} v{VERSION}")));
        }
        let layout = header.model.layout();
        if layout.total != header.param_count {
            return Err(Error::header(path, "param_count disagrees with the architecture"));
        }
        let order: Vec<(String, usize, usize)> = layout.named().into_iter().map(|(n, r)| (n.to_string(), r.start, r.len())).collect();
        let listed: Vec<(String, usize, usize)> = header.param_order.iter().map(|b| (b.name.clone(), b.offset, b.len)).collect();
        if order != listed {
            return Err(Error::header(path, "param_order disagrees with the architecture"));
        }
        let params = decode_le::<f32>(&bytes[16 + len..], header.param_count, path, "parameters")?;
        if params.iter().any(|p| !p.is_finite()) {
            bail!(Format, "{}: non-finite parameter", path.display());
        }
        let model = SelectorModel::from_params(header.model.clone(), params.into_iter().map(f64::from).collect())?;
        Ok(Self { header, model })
    }

    /// Fails unless the checkpoint was trained on evidence shaped like `store`.
    pub fn check_store(&self, store: &FeatureStore) -> Result<()> {
        let (a, b) = (self.header.dims, store.dims());
        if (a.steps, a.layers, a.max_m, a.r) != (b.steps, b.layers, b.max_m, b.r) || self.header.oporp != store.manifest().oporp {
            bail!(
                Format,
                "checkpoint expects dims {a:?} with projector {:?}; store has {b:?} with {:?}",
                self.header.oporp,
                store.manifest().oporp
            );
        }
        Ok(())
    }
}
