//! Memory-mapped feature store in `[S, N, L, max_M, r]` layout.
//!
//! A store directory holds five files plus the projector checkpoint:
//!
//! | file | contents |
//! |------|----------|
//! | `features_act.f16.mmap` | little-endian binary16 `[S, N, L, max_M, r]` |
//! | `features_cap_len.i16.mmap` | little-endian `i16` `[S, N]` |
//! | `features_row_ids.i32.mmap` | little-endian `i32` `[S]` |
//! | `features_meta.json` | file names, dtypes, dims and projector identity |
//! | `meta.jsonl` | one [`MetaRecord`] per row, in row order |
//!
//! Example `features_meta.json`:
//!
//! ```json
//! {
//!   "format": "hive-feature-store",
//!   "version": 1,
//!   "files": {
//!     "act": "features_act.f16.mmap",
//!     "cap_len": "features_cap_len.i16.mmap",
//!     "row_ids": "features_row_ids.i32.mmap",
//!     "meta": "meta.jsonl",
//!     "oporp": "oporp_L8_d128_r64_seed42.bin"
//!   },
//!   "dtypes": { "act": "float16", "cap_len": "int16", "row_ids": "int32" },
//!   "dims": { "S": 2000, "N": 8, "L": 8, "max_M": 17, "r": 64 },
//!   "layout": {
//!     "act": ["S", "N", "L", "max_M", "r"],
//!     "cap_len": ["S", "N"],
//!     "row_ids": ["S"]
//!   },
//!   "byte_order": "little",
//!   "oporp": { "num_layers": 8, "hidden_dim": 128, "r": 64, "seed": 42 }
//! }
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use half::f16;
use hive_core::features::{pack_row, PackedRow};
use hive_core::selector::SelectorDataset;
use hive_core::{build_two_stream, ActView, Label, OporpConfig, OporpProjector, StoreDims, Trajectory, TwoStream};
use memmap2::Mmap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dump::TrajectoryDump;
use crate::error::{bail, Error, Result};
use crate::io::{append_bytes, decode_le, encode_le, read_bytes, read_json, to_json_bytes, to_jsonl_bytes, write_bytes, LeScalar};
use crate::oporp_file::{checkpoint_name, load_projector, save_projector};

pub const ACT_FILE: &str = "features_act.f16.mmap";
pub const CAP_LEN_FILE: &str = "features_cap_len.i16.mmap";
pub const ROW_IDS_FILE: &str = "features_row_ids.i32.mmap";
pub const MANIFEST_FILE: &str = "features_meta.json";
pub const META_FILE: &str = "meta.jsonl";
const FORMAT: &str = "hive-feature-store";
const VERSION: u32 = 1;

/// Per-row metadata, one JSON line per store row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub example_id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub base_answer: String,
    pub label: Label,
    /// Forward-pass id of each retained step.
    pub forward_ids: Vec<u32>,
    pub kept_changed_positions: Vec<Vec<u32>>,
    /// Captured token positions per step, last position in the final slot.
    pub kept_capture_positions: Vec<Vec<u32>>,
    pub oporp_config: OporpConfig,
    pub feature_row: usize,
}

impl MetaRecord {
    pub fn from_trajectory(traj: &Trajectory, gold_answers: &[String], oporp_config: OporpConfig, feature_row: usize) -> Self {
        Self {
            example_id: traj.example_id.clone(),
            question: traj.question.clone(),
            gold_answers: gold_answers.to_vec(),
            base_answer: traj.base_answer.clone(),
            label: traj.label,
            forward_ids: traj.steps.iter().map(|s| s.forward_id).collect(),
            kept_changed_positions: traj.steps.iter().map(|s| s.capture.changed_positions().to_vec()).collect(),
            kept_capture_positions: traj.steps.iter().map(|s| s.capture.positions().to_vec()).collect(),
            oporp_config,
            feature_row,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreFiles {
    pub act: String,
    pub cap_len: String,
    pub row_ids: String,
    pub meta: String,
    pub oporp: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreDtypes {
    pub act: String,
    pub cap_len: String,
    pub row_ids: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreLayout {
    pub act: Vec<String>,
    pub cap_len: Vec<String>,
    pub row_ids: Vec<String>,
}

/// Contents of `features_meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format: String,
    pub version: u32,
    pub files: StoreFiles,
    pub dtypes: StoreDtypes,
    pub dims: StoreDims,
    pub layout: StoreLayout,
    pub byte_order: String,
    pub oporp: OporpConfig,
}

fn names(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl StoreManifest {
    pub fn new(dims: StoreDims, oporp: OporpConfig) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            files: StoreFiles {
                act: ACT_FILE.into(),
                cap_len: CAP_LEN_FILE.into(),
                row_ids: ROW_IDS_FILE.into(),
                meta: META_FILE.into(),
                oporp: checkpoint_name(&oporp),
            },
            dtypes: StoreDtypes { act: f16::DTYPE.into(), cap_len: i16::DTYPE.into(), row_ids: i32::DTYPE.into() },
            dims,
            layout: StoreLayout { act: names(&["S", "N", "L", "max_M", "r"]), cap_len: names(&["S", "N"]), row_ids: names(&["S"]) },
            byte_order: "little".into(),
            oporp,
        }
    }

    fn check(&self, path: &Path) -> Result<()> {
        let want = Self::new(self.dims, self.oporp);
        if self.format != want.format || self.version != want.version {
            return Err(Error::header(path, format!("expected {FORMAT} v{VERSION}")));
        }
        if self.dtypes != want.dtypes || self.layout != want.layout || self.byte_order != want.byte_order {
            return Err(Error::header(path, "unsupported dtypes, layout or byte order"));
        }
        let d = self.dims;
        if self.oporp.num_layers != d.layers || self.oporp.r != d.r {
            bail!(Format, "{}: projector {:?} does not match dims {:?}", path.display(), self.oporp, d);
        }
        Ok(())
    }
}

enum ActStorage {
    Mapped(Mmap),
    Owned(Vec<f16>),
}

/// A validated, read-only feature store. The act tensor is memory-mapped.
pub struct FeatureStore {
    dir: PathBuf,
    manifest: StoreManifest,
    act: ActStorage,
    cap_len: Vec<i16>,
    row_ids: Vec<i32>,
    meta: Vec<MetaRecord>,
}

fn file_len(path: &Path) -> Result<u64> {
    Ok(fs::metadata(path).map_err(Error::io(path))?.len())
}

fn check_size(path: &Path, count: usize, width: usize) -> Result<()> {
    let have = file_len(path)?;
    let want = (count * width) as u64;
    if have != want {
        bail!(Format, "{} holds {have} bytes, dims imply {want}", path.display());
    }
    Ok(())
}

impl FeatureStore {
    /// Maps the store at `dir` and re-validates every invariant: file sizes
    /// against dims, capture lengths in `[0, max_M]`, zero padding beyond each
    /// capture length, unique row ids and metadata aligned with rows.
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: StoreManifest = read_json(&manifest_path)?;
        manifest.check(&manifest_path)?;
        let d = manifest.dims;
        let act_path = dir.join(&manifest.files.act);
        let cap_path = dir.join(&manifest.files.cap_len);
        let rows_path = dir.join(&manifest.files.row_ids);
        check_size(&act_path, d.rows * d.row_len(), 2)?;
        check_size(&cap_path, d.rows * d.steps, 2)?;
        check_size(&rows_path, d.rows, 4)?;

        let act = if d.rows == 0 {
            ActStorage::Owned(Vec::new())
        } else {
            let file = fs::File::open(&act_path).map_err(Error::io(&act_path))?;
            // SAFETY: the store is immutable once written; readers never
            // mutate the mapping.
            let map = unsafe { Mmap::map(&file) }.map_err(Error::io(&act_path))?;
            if cfg!(target_endian = "little") && bytemuck::try_cast_slice::<u8, f16>(&map).is_ok() {
                ActStorage::Mapped(map)
            } else {
                ActStorage::Owned(decode_le(&map, d.rows * d.row_len(), &act_path, "act")?)
            }
        };
        let cap_len = decode_le::<i16>(&read_bytes(&cap_path)?, d.rows * d.steps, &cap_path, "cap_len")?;
        let row_ids = decode_le::<i32>(&read_bytes(&rows_path)?, d.rows, &rows_path, "row_ids")?;
        let meta_path = dir.join(&manifest.files.meta);
        let meta: Vec<MetaRecord> = crate::io::read_jsonl(&meta_path)?;

        let store = Self { dir: dir.to_path_buf(), manifest, act, cap_len, row_ids, meta };
        store.validate()?;
        Ok(store)
    }

    fn validate(&self) -> Result<()> {
        let d = self.dims();
        let view = ActView::new(d, self.act(), &self.cap_len).map_err(|e| Error::Format(format!("{}: {e}", self.dir.display())))?;
        let mut seen = HashSet::with_capacity(d.rows);
        if let Some(id) = self.row_ids.iter().find(|&&id| id < 0 || !seen.insert(id)) {
            bail!(Format, "row id {id} is negative or repeated");
        }
        if self.meta.len() != d.rows {
            bail!(Format, "{} metadata records for S = {}", self.meta.len(), d.rows);
        }
        for (s, m) in self.meta.iter().enumerate() {
            if m.feature_row != s {
                bail!(Format, "metadata line {} names feature_row {}", s + 1, m.feature_row);
            }
            if m.oporp_config != self.manifest.oporp {
                bail!(Format, "row {s}: projector {:?} differs from store {:?}", m.oporp_config, self.manifest.oporp);
            }
            if m.forward_ids.len() != d.steps || m.kept_capture_positions.len() != d.steps || m.kept_changed_positions.len() != d.steps {
                bail!(Format, "row {s}: metadata does not list {} steps", d.steps);
            }
            for t in 0..d.steps {
                let m_t = view.cap_len(s, t);
                if m.kept_capture_positions[t].len() != m_t {
                    bail!(Format, "row {s} step {t}: cap_len {m_t} but {} capture positions", m.kept_capture_positions[t].len());
                }
                for l in 0..d.layers {
                    if view.unit(s, t, l)[m_t * d.r..].iter().any(|v| v.to_bits() != 0) {
                        bail!(Format, "row {s} step {t} layer {l}: padding beyond cap_len is not zero");
                    }
                }
            }
        }
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn dims(&self) -> StoreDims {
        self.manifest.dims
    }

    pub fn len(&self) -> usize {
        self.manifest.dims.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn act(&self) -> &[f16] {
        match &self.act {
            ActStorage::Mapped(m) => bytemuck::cast_slice(m),
            ActStorage::Owned(v) => v,
        }
    }

    pub fn cap_len(&self) -> &[i16] {
        &self.cap_len
    }

    pub fn row_ids(&self) -> &[i32] {
        &self.row_ids
    }

    pub fn meta(&self) -> &[MetaRecord] {
        &self.meta
    }

    pub fn view(&self) -> ActView<'_> {
        ActView::new(self.dims(), self.act(), &self.cap_len).expect("validated on open")
    }

    /// Loads the projector checkpoint named in the manifest.
    pub fn projector(&self) -> Result<OporpProjector> {
        load_projector(&self.dir.join(&self.manifest.files.oporp))
    }

    pub fn two_stream(&self, row: usize) -> Result<TwoStream> {
        Ok(build_two_stream(&self.view(), row)?.0)
    }

    /// Store position of every row id.
    pub fn position_of(&self, row_id: i32) -> Option<usize> {
        self.row_ids.iter().position(|&r| r == row_id)
    }

    /// Two-stream features, labels and row ids of every row, built in
    /// parallel.
    pub fn selector_dataset(&self) -> Result<SelectorDataset> {
        let view = self.view();
        let features = (0..self.len()).into_par_iter().map(|s| Ok(build_two_stream(&view, s)?.0)).collect::<Result<Vec<_>>>()?;
        Ok(SelectorDataset {
            features,
            labels: self.meta.iter().map(|m| m.label).collect(),
            row_ids: self.row_ids.iter().map(|&r| r as u32).collect(),
        })
    }

    /// Re-encodes every file of this store into `dir`.
    pub fn write_copy(&self, dir: &Path) -> Result<()> {
        let files = &self.manifest.files;
        write_bytes(&dir.join(&files.act), &encode_le(self.act()))?;
        write_bytes(&dir.join(&files.cap_len), &encode_le(&self.cap_len))?;
        write_bytes(&dir.join(&files.row_ids), &encode_le(&self.row_ids))?;
        write_bytes(&dir.join(&files.meta), &to_jsonl_bytes(&self.meta))?;
        save_projector(&dir.join(&files.oporp), &self.projector()?)?;
        write_bytes(&dir.join(MANIFEST_FILE), &to_json_bytes(&self.manifest))
    }
}

/// Appends rows to a store directory, creating it on first use.
///
/// Opening an existing store checks that its dims and projector match, then
/// truncates any bytes appended after the last committed manifest, so an
/// interrupted run can simply be repeated. Examples whose id is already stored
/// are skipped, which makes re-running with the same inputs a no-op.
pub struct StoreWriter {
    dir: PathBuf,
    manifest: StoreManifest,
    projector: OporpProjector,
    known: HashSet<String>,
    dirty: bool,
}

impl StoreWriter {
    /// `steps` and `max_m` fix the row shape; layers and `r` come from the
    /// projector.
    pub fn open(dir: &Path, steps: usize, max_m: usize, projector: OporpProjector) -> Result<Self> {
        let pc = projector.config();
        let dims = StoreDims { rows: 0, steps, layers: pc.num_layers, max_m, r: pc.r };
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            let manifest = StoreManifest::new(dims, pc);
            for name in [&manifest.files.act, &manifest.files.cap_len, &manifest.files.row_ids, &manifest.files.meta] {
                write_bytes(&dir.join(name), &[])?;
            }
            save_projector(&dir.join(&manifest.files.oporp), &projector)?;
            write_bytes(&manifest_path, &to_json_bytes(&manifest))?;
            return Ok(Self { dir: dir.to_path_buf(), manifest, projector, known: HashSet::new(), dirty: false });
        }
        let manifest: StoreManifest = read_json(&manifest_path)?;
        manifest.check(&manifest_path)?;
        let have = manifest.dims;
        if (have.steps, have.layers, have.max_m, have.r) != (steps, pc.num_layers, max_m, pc.r) || manifest.oporp != pc {
            bail!(
                Format,
                "existing store has dims {have:?} and projector {:?}; new rows need N = {steps}, L = {}, max_M = {max_m}, r = {} and {pc:?}",
                manifest.oporp,
                pc.num_layers,
                pc.r
            );
        }
        let stored = load_projector(&dir.join(&manifest.files.oporp))?;
        if stored.matrices() != projector.matrices() {
            bail!(Format, "stored projector matrices differ from the supplied projector");
        }
        let writer = Self { dir: dir.to_path_buf(), manifest, projector, known: HashSet::new(), dirty: false };
        writer.rollback_uncommitted()?;
        let store = FeatureStore::open(dir)?;
        Ok(Self { known: store.meta.iter().map(|m| m.example_id.clone()).collect(), ..writer })
    }

    fn rollback_uncommitted(&self) -> Result<()> {
        let d = self.manifest.dims;
        let files = &self.manifest.files;
        for (name, len) in [(&files.act, d.rows * d.row_len() * 2), (&files.cap_len, d.rows * d.steps * 2), (&files.row_ids, d.rows * 4)] {
            let path = self.dir.join(name);
            if file_len(&path)? > len as u64 {
                let f = fs::OpenOptions::new().write(true).open(&path).map_err(Error::io(&path))?;
                f.set_len(len as u64).map_err(Error::io(&path))?;
            }
        }
        let meta_path = self.dir.join(&files.meta);
        let text = fs::read_to_string(&meta_path).map_err(Error::io(&meta_path))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() > d.rows {
            let kept: String = lines[..d.rows].iter().map(|l| format!("{l}\n")).collect();
            write_bytes(&meta_path, kept.as_bytes())?;
        }
        Ok(())
    }

    pub fn projector(&self) -> &OporpProjector {
        &self.projector
    }

    pub fn dims(&self) -> StoreDims {
        self.manifest.dims
    }

    pub fn contains(&self, example_id: &str) -> bool {
        self.known.contains(example_id)
    }

    /// Projects one trajectory into store layout without touching the store.
    pub fn pack(&self, dump: &TrajectoryDump) -> Result<PackedRow> {
        let d = self.manifest.dims;
        if dump.trajectory.config.num_steps != d.steps {
            bail!(Format, "{}: {} steps, store has N = {}", dump.trajectory.example_id, dump.trajectory.config.num_steps, d.steps);
        }
        Ok(pack_row(&dump.trajectory, &self.projector, d.max_m)?)
    }

    /// Appends packed rows in order, skipping ids already present. Returns
    /// the number of rows written.
    pub fn append(&mut self, rows: &[(TrajectoryDump, PackedRow)]) -> Result<usize> {
        let d = self.manifest.dims;
        let (mut act, mut cap, mut ids, mut meta) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut next = d.rows;
        for (dump, row) in rows {
            let id = &dump.trajectory.example_id;
            if self.known.contains(id) {
                continue;
            }
            if row.act.len() != d.row_len() || row.cap_len.len() != d.steps {
                bail!(Format, "{id}: packed row does not match store dims {d:?}");
            }
            act.extend(encode_le(&row.act));
            cap.extend(encode_le(&row.cap_len));
            ids.extend(encode_le(&[i32::try_from(next).map_err(|_| Error::Format("store exceeds i32 rows".into()))?]));
            meta.push(MetaRecord::from_trajectory(&dump.trajectory, &dump.gold_answers, self.manifest.oporp, next));
            self.known.insert(id.clone());
            next += 1;
        }
        let added = next - d.rows;
        if added == 0 {
            return Ok(0);
        }
        let files = &self.manifest.files;
        append_bytes(&self.dir.join(&files.act), &act)?;
        append_bytes(&self.dir.join(&files.cap_len), &cap)?;
        append_bytes(&self.dir.join(&files.row_ids), &ids)?;
        append_bytes(&self.dir.join(&files.meta), &to_jsonl_bytes(&meta))?;
        self.manifest.dims.rows = next;
        self.dirty = true;
        Ok(added)
    }

    /// Commits the manifest (only if rows were added) and reopens the store.
    pub fn finish(self) -> Result<FeatureStore> {
        if self.dirty {
            write_bytes(&self.dir.join(MANIFEST_FILE), &to_json_bytes(&self.manifest))?;
        }
        FeatureStore::open(&self.dir)
    }
}

/// Writes (or extends) a store from trajectories sharing `(N, L, d)`.
/// Projection runs in parallel over chunks; rows are appended in input order.
pub fn write_features<I>(dir: &Path, dumps: I, projector: OporpProjector, steps: usize, max_m: usize) -> Result<FeatureStore>
where
    I: IntoIterator<Item = Result<TrajectoryDump>>,
{
    const CHUNK: usize = 256;
    let mut writer = StoreWriter::open(dir, steps, max_m, projector)?;
    let mut pending = Vec::with_capacity(CHUNK);
    let flush = |writer: &mut StoreWriter, pending: &mut Vec<TrajectoryDump>| -> Result<()> {
        let packed = pending.par_drain(..).map(|dump| writer.pack(&dump).map(|row| (dump, row))).collect::<Result<Vec<_>>>()?;
        writer.append(&packed)?;
        Ok(())
    };
    for dump in dumps {
        let dump = dump?;
        if writer.contains(&dump.trajectory.example_id) {
            continue;
        }
        pending.push(dump);
        if pending.len() == CHUNK {
            flush(&mut writer, &mut pending)?;
        }
    }
    flush(&mut writer, &mut pending)?;
    writer.finish()
}
