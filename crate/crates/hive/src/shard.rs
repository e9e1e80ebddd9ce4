//! Evidence shards: the top-K step-layer units chosen by a trained selector.
//!
//! `export_split` writes `<out>/<split>/shard_NNNNN/` directories, each with a
//! `manifest.json` and one little-endian file per array, and finally
//! `<out>/<split>/index.json` mapping every example id to `(shard, row)`.
//! Examples are ordered by row id and cut into shards of at most
//! [`DEFAULT_SHARD_SIZE`] examples.
//!
//! Arrays of a shard with `E` examples:
//!
//! | name | dtype | shape |
//! |------|-------|-------|
//! | `flat_pair_idx` | int32 | `[E, K]` |
//! | `step_ids` | int32 | `[E, K]` |
//! | `layer_ids` | int32 | `[E, K]` |
//! | `w_top` | float32 | `[E, K]` |
//! | `forward_ids` | int32 | `[E, K]` |
//! | `cap_lens` | int16 | `[E, K]` |
//! | `two_stream` | float32 | `[E, K, 2r]` |
//! | `act_top` (optional) | float16 | `[E, K, max_M, r]` |
//!
//! Example `manifest.json` (arrays abbreviated):
//!
//! ```json
//! {
//!   "format": "hive-evidence-shard",
//!   "version": 1,
//!   "split": "test",
//!   "shard": "shard_00000",
//!   "examples": 400,
//!   "k": 16,
//!   "num_steps": 8,
//!   "num_layers": 8,
//!   "max_m": 17,
//!   "r": 64,
//!   "example_ids": ["synth-000003", "..."],
//!   "row_ids": [3, "..."],
//!   "source_store": { "path": "store", "rows": 2000, "oporp": { "num_layers": 8, "hidden_dim": 128, "r": 64, "seed": 42 } },
//!   "arrays": [
//!     { "name": "flat_pair_idx", "file": "flat_pair_idx.i32.bin", "dtype": "int32", "shape": [400, 16] },
//!     { "name": "two_stream", "file": "two_stream.f32.bin", "dtype": "float32", "shape": [400, 16, 128] }
//!   ]
//! }
//! ```

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use half::f16;
use hive_core::export::selection_pattern;
use hive_core::selector::softmax_topk;
use hive_core::OporpConfig;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{bail, Error, Result};
use crate::io::{decode_le, encode_le, read_bytes, read_json, to_json_bytes, write_bytes, LeScalar};
use crate::store::FeatureStore;

pub const DEFAULT_SHARD_SIZE: usize = 512;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const INDEX_FILE: &str = "index.json";
const FORMAT: &str = "hive-evidence-shard";
const INDEX_FORMAT: &str = "hive-evidence-index";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreRef {
    pub path: String,
    pub rows: usize,
    pub oporp: OporpConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub format: String,
    pub version: u32,
    pub split: String,
    pub shard: String,
    pub examples: usize,
    pub k: usize,
    pub num_steps: usize,
    pub num_layers: usize,
    pub max_m: usize,
    pub r: usize,
    pub example_ids: Vec<String>,
    pub row_ids: Vec<i32>,
    pub source_store: StoreRef,
    pub arrays: Vec<ArraySpec>,
}

/// All arrays of one shard, row-major per example.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceShard {
    pub manifest: ShardManifest,
    pub flat_pair_idx: Vec<i32>,
    pub step_ids: Vec<i32>,
    pub layer_ids: Vec<i32>,
    pub w_top: Vec<f32>,
    pub forward_ids: Vec<i32>,
    pub cap_lens: Vec<i16>,
    pub two_stream: Vec<f32>,
    pub act_top: Option<Vec<f16>>,
}

fn spec<T: LeScalar>(name: &str, ext: &str, shape: Vec<usize>) -> ArraySpec {
    ArraySpec { name: name.into(), file: format!("{name}.{ext}.bin"), dtype: T::DTYPE.into(), shape }
}

impl EvidenceShard {
    pub fn len(&self) -> usize {
        self.manifest.examples
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn k_range(&self, row: usize) -> std::ops::Range<usize> {
        let k = self.manifest.k;
        row * k..(row + 1) * k
    }

    /// `(step, layer)` pairs of one example in exported order.
    pub fn pairs(&self, row: usize) -> Vec<(u32, u32)> {
        self.k_range(row).map(|i| (self.step_ids[i] as u32, self.layer_ids[i] as u32)).collect()
    }

    pub fn flat_indices(&self, row: usize) -> Vec<usize> {
        self.flat_pair_idx[self.k_range(row)].iter().map(|&j| j as usize).collect()
    }

    pub fn w_top_row(&self, row: usize) -> &[f32] {
        &self.w_top[self.k_range(row)]
    }

    pub fn cap_lens_row(&self, row: usize) -> &[i16] {
        &self.cap_lens[self.k_range(row)]
    }

    /// `[K, 2r]` two-stream features of one example.
    pub fn two_stream_row(&self, row: usize) -> &[f32] {
        let w = self.manifest.k * 2 * self.manifest.r;
        &self.two_stream[row * w..(row + 1) * w]
    }

    fn array_specs(&self) -> Vec<ArraySpec> {
        let m = &self.manifest;
        let (e, k) = (m.examples, m.k);
        let mut specs = vec![
            spec::<i32>("flat_pair_idx", "i32", vec![e, k]),
            spec::<i32>("step_ids", "i32", vec![e, k]),
            spec::<i32>("layer_ids", "i32", vec![e, k]),
            spec::<f32>("w_top", "f32", vec![e, k]),
            spec::<i32>("forward_ids", "i32", vec![e, k]),
            spec::<i16>("cap_lens", "i16", vec![e, k]),
            spec::<f32>("two_stream", "f32", vec![e, k, 2 * m.r]),
        ];
        if self.act_top.is_some() {
            specs.push(spec::<f16>("act_top", "f16", vec![e, k, m.max_m, m.r]));
        }
        specs
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut manifest = self.manifest.clone();
        manifest.arrays = self.array_specs();
        for a in &manifest.arrays {
            let bytes = match a.name.as_str() {
                "flat_pair_idx" => encode_le(&self.flat_pair_idx),
                "step_ids" => encode_le(&self.step_ids),
                "layer_ids" => encode_le(&self.layer_ids),
                "w_top" => encode_le(&self.w_top),
                "forward_ids" => encode_le(&self.forward_ids),
                "cap_lens" => encode_le(&self.cap_lens),
                "two_stream" => encode_le(&self.two_stream),
                _ => encode_le(self.act_top.as_deref().unwrap_or_default()),
            };
            write_bytes(&dir.join(&a.file), &bytes)?;
        }
        write_bytes(&dir.join(MANIFEST_FILE), &to_json_bytes(&manifest))
    }

    /// Reads a shard and checks its internal consistency.
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let manifest: ShardManifest = read_json(&path)?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::header(&path, format!("expected {FORMAT} v{VERSION}")));
        }
        let find = |name: &str| manifest.arrays.iter().find(|a| a.name == name);
        fn load<T: LeScalar>(dir: &Path, a: Option<&ArraySpec>, name: &str) -> Result<Vec<T>> {
            let Some(a) = a else {
                bail!(Format, "{}: shard lacks array {name}", dir.display());
            };
            if a.dtype != T::DTYPE {
                bail!(Format, "{}: array {name} has dtype {}, expected {}", dir.display(), a.dtype, T::DTYPE);
            }
            let path = dir.join(&a.file);
            decode_le(&read_bytes(&path)?, a.shape.iter().product(), &path, name)
        }
        let act_top = match find("act_top") {
            Some(a) => Some(load::<f16>(dir, Some(a), "act_top")?),
            None => None,
        };
        let shard = Self {
            flat_pair_idx: load(dir, find("flat_pair_idx"), "flat_pair_idx")?,
            step_ids: load(dir, find("step_ids"), "step_ids")?,
            layer_ids: load(dir, find("layer_ids"), "layer_ids")?,
            w_top: load(dir, find("w_top"), "w_top")?,
            forward_ids: load(dir, find("forward_ids"), "forward_ids")?,
            cap_lens: load(dir, find("cap_lens"), "cap_lens")?,
            two_stream: load(dir, find("two_stream"), "two_stream")?,
            act_top,
            manifest,
        };
        shard.validate(dir)?;
        Ok(shard)
    }

    fn validate(&self, dir: &Path) -> Result<()> {
        let m = &self.manifest;
        if self.array_specs() != m.arrays {
            bail!(Format, "{}: array shapes disagree with examples = {}, K = {}", dir.display(), m.examples, m.k);
        }
        if m.example_ids.len() != m.examples || m.row_ids.len() != m.examples {
            bail!(Format, "{}: {} example ids for {} examples", dir.display(), m.example_ids.len(), m.examples);
        }
        for i in 0..m.examples * m.k {
            let (t, l, j) = (self.step_ids[i], self.layer_ids[i], self.flat_pair_idx[i]);
            if t < 0 || l < 0 || t as usize >= m.num_steps || l as usize >= m.num_layers || j != t * m.num_layers as i32 + l {
                bail!(Format, "{}: entry {i} has inconsistent pair ({t}, {l}) / {j}", dir.display());
            }
            if self.cap_lens[i] < 0 || self.cap_lens[i] as usize > m.max_m {
                bail!(Format, "{}: entry {i} has cap_len {} outside [0, {}]", dir.display(), self.cap_lens[i], m.max_m);
            }
        }
        for row in 0..m.examples {
            let sum: f64 = self.w_top_row(row).iter().map(|&w| f64::from(w)).sum();
            if (sum - 1.0).abs() > 1e-5 {
                bail!(Format, "{}: weights of row {row} sum to {sum}", dir.display());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub example_id: String,
    pub shard: String,
    pub row: usize,
}

/// Contents of `<split>/index.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardIndex {
    pub format: String,
    pub version: u32,
    pub split: String,
    pub k: usize,
    pub num_steps: usize,
    pub num_layers: usize,
    pub shards: Vec<String>,
    pub examples: Vec<IndexEntry>,
}

impl ShardIndex {
    pub fn open(split_dir: &Path) -> Result<Self> {
        let path = split_dir.join(INDEX_FILE);
        let index: Self = read_json(&path)?;
        if index.format != INDEX_FORMAT || index.version != VERSION {
            return Err(Error::header(&path, format!("expected {INDEX_FORMAT} v{VERSION}")));
        }
        Ok(index)
    }

    /// Opens every shard listed, in order.
    pub fn load_shards(&self, split_dir: &Path) -> Result<Vec<EvidenceShard>> {
        self.shards.par_iter().map(|s| EvidenceShard::open(&split_dir.join(s))).collect()
    }
}

fn shard_name(i: usize) -> String {
    format!("shard_{i:05}")
}

/// Applies the checkpoint's selector to every example of `split` and writes
/// shards plus the index under `out_dir/<split>/`. Returns the shard
/// directories.
pub fn export_split(
    store: &FeatureStore,
    ckpt: &Checkpoint,
    split: &str,
    out_dir: &Path,
    include_act: bool,
    shard_size: usize,
) -> Result<Vec<PathBuf>> {
    ckpt.check_store(store)?;
    if shard_size == 0 {
        bail!(Input, "shard size must be >= 1");
    }
    let positions: HashMap<i32, usize> = store.row_ids().iter().enumerate().map(|(p, &id)| (id, p)).collect();
    let mut rows: Vec<i32> = ckpt.header.splits.get(split)?.to_vec();
    rows.sort_unstable();
    let missing: Vec<i32> = rows.iter().copied().filter(|id| !positions.contains_key(id)).collect();
    if !missing.is_empty() {
        bail!(Format, "store lacks row ids {missing:?} named by the checkpoint's {split} split");
    }
    let dims = store.dims();
    let model = &ckpt.model;
    let cfg = model.config();
    let (k, r, layers) = (cfg.k, dims.r, dims.layers);
    let view = store.view();

    struct Picked {
        indices: Vec<usize>,
        w_top: Vec<f64>,
        two_stream: Vec<f32>,
    }
    let picked: Vec<Picked> = rows
        .par_iter()
        .map(|id| {
            let pos = positions[id];
            let g = store.two_stream(pos)?;
            let sel = softmax_topk(&model.gate_scores(&g)?, k, cfg.temperature)?;
            let two_stream = sel.indices.iter().flat_map(|&j| g.pair(j).iter().map(|&x| x as f32)).collect();
            Ok(Picked { indices: sel.indices, w_top: sel.w_top, two_stream })
        })
        .collect::<Result<_>>()?;

    let split_dir = out_dir.join(split);
    let source_store = StoreRef { path: store.dir().display().to_string(), rows: store.len(), oporp: store.manifest().oporp };
    let chunks: Vec<(usize, &[i32], &[Picked])> =
        rows.chunks(shard_size).zip(picked.chunks(shard_size)).enumerate().map(|(i, (ids, p))| (i, ids, p)).collect();
    let shards = chunks
        .par_iter()
        .map(|&(i, ids, picks)| {
            let mut shard = EvidenceShard {
                manifest: ShardManifest {
                    format: FORMAT.into(),
                    version: VERSION,
                    split: split.into(),
                    shard: shard_name(i),
                    examples: ids.len(),
                    k,
                    num_steps: dims.steps,
                    num_layers: layers,
                    max_m: dims.max_m,
                    r,
                    example_ids: ids.iter().map(|id| store.meta()[positions[id]].example_id.clone()).collect(),
                    row_ids: ids.to_vec(),
                    source_store: source_store.clone(),
                    arrays: Vec::new(),
                },
                flat_pair_idx: Vec::new(),
                step_ids: Vec::new(),
                layer_ids: Vec::new(),
                w_top: Vec::new(),
                forward_ids: Vec::new(),
                cap_lens: Vec::new(),
                two_stream: Vec::new(),
                act_top: include_act.then(Vec::new),
            };
            for (id, p) in ids.iter().zip(picks) {
                let pos = positions[id];
                let meta = &store.meta()[pos];
                for (&j, &w) in p.indices.iter().zip(&p.w_top) {
                    let (t, l) = (j / layers, j % layers);
                    shard.flat_pair_idx.push(j as i32);
                    shard.step_ids.push(t as i32);
                    shard.layer_ids.push(l as i32);
                    shard.w_top.push(w as f32);
                    shard.forward_ids.push(meta.forward_ids[t] as i32);
                    shard.cap_lens.push(view.cap_len(pos, t) as i16);
                    if let Some(act) = shard.act_top.as_mut() {
                        act.extend_from_slice(view.unit(pos, t, l));
                    }
                }
                shard.two_stream.extend_from_slice(&p.two_stream);
            }
            let dir = split_dir.join(shard_name(i));
            shard.write(&dir)?;
            Ok(dir)
        })
        .collect::<Result<Vec<_>>>()?;

    let index = ShardIndex {
        format: INDEX_FORMAT.into(),
        version: VERSION,
        split: split.into(),
        k,
        num_steps: dims.steps,
        num_layers: layers,
        shards: (0..chunks.len()).map(shard_name).collect(),
        examples: rows
            .iter()
            .enumerate()
            .map(|(n, id)| IndexEntry {
                example_id: store.meta()[positions[id]].example_id.clone(),
                shard: shard_name(n / shard_size),
                row: n % shard_size,
            })
            .collect(),
    };
    write_bytes(&split_dir.join(INDEX_FILE), &to_json_bytes(&index))?;
    Ok(shards)
}

/// Fraction of a split's examples selecting each `(step, layer)` pair,
/// row-major `[N, L]`.
pub fn aggregate_selection_pattern(split_dir: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let index = ShardIndex::open(split_dir)?;
    let shards = index.load_shards(split_dir)?;
    let selections: Vec<Vec<usize>> = shards.iter().flat_map(|s| (0..s.len()).map(move |row| s.flat_indices(row))).collect();
    let grid = selection_pattern(&selections, index.num_steps, index.num_layers)?;
    Ok((grid, index.num_steps, index.num_layers))
}

/// CSV with a `step` column and one column per layer.
pub fn grid_csv(grid: &[f64], num_steps: usize, num_layers: usize) -> String {
    let mut out = String::from("step");
    for l in 0..num_layers {
        out.push_str(&format!(",layer_{l}"));
    }
    out.push('\n');
    for t in 0..num_steps {
        out.push_str(&t.to_string());
        for l in 0..num_layers {
            out.push_str(&format!(",{}", grid[t * num_layers + l]));
        }
        out.push('\n');
    }
    out
}
