//! Compressed evidence tensor layout and two-stream feature construction.

use alloc::vec;
use alloc::vec::Vec;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::oporp::OporpProjector;
use crate::trajectory::Trajectory;

/// Symbolic dimensions `(S, N, L, max_M, r)` of the evidence tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreDims {
    #[serde(rename = "S")]
    pub rows: usize,
    #[serde(rename = "N")]
    pub steps: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "max_M")]
    pub max_m: usize,
    pub r: usize,
}

impl StoreDims {
    /// Number of candidate step-layer units `T = N * L`.
    pub fn pairs(&self) -> usize {
        self.steps * self.layers
    }

    /// Half-precision values per example row.
    pub fn row_len(&self) -> usize {
        self.steps * self.layers * self.max_m * self.r
    }

    /// Values in one step-layer unit (`max_M * r`).
    pub fn unit_len(&self) -> usize {
        self.max_m * self.r
    }
}

/// One example's evidence in store layout: `[N, L, max_M, r]` half-precision
/// values (unused slots zero) and `[N]` capture lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedRow {
    pub act: Vec<f16>,
    pub cap_len: Vec<i16>,
}

/// Projects every retained step of `traj` and lays it out as one store row.
pub fn pack_row(traj: &Trajectory, projector: &OporpProjector, max_m: usize) -> Result<PackedRow> {
    traj.validate()?;
    let cfg = &traj.config;
    let pc = projector.config();
    if pc.num_layers != cfg.num_layers || pc.hidden_dim != cfg.hidden_dim {
        bail!(
            Shape,
            "projector is for L = {}, d = {}; trajectory has L = {}, d = {}",
            pc.num_layers,
            pc.hidden_dim,
            cfg.num_layers,
            cfg.hidden_dim
        );
    }
    let (n, l, r) = (cfg.num_steps, cfg.num_layers, pc.r);
    let mut act = vec![f16::ZERO; n * l * max_m * r];
    let mut cap_len = Vec::with_capacity(n);
    for (t, step) in traj.steps.iter().enumerate() {
        let m = step.capture.len();
        if m > max_m {
            bail!(Shape, "step {t} captures {m} positions, store allows {max_m}");
        }
        let projected = projector.project(&step.hidden, m)?;
        for layer in 0..l {
            let dst = ((t * l + layer) * max_m) * r;
            let src = layer * m * r;
            act[dst..dst + m * r].copy_from_slice(&projected[src..src + m * r]);
        }
        cap_len.push(m as i16);
    }
    Ok(PackedRow { act, cap_len })
}

/// Borrowed view over an `[S, N, L, max_M, r]` tensor and its `[S, N]`
/// capture lengths.
#[derive(Debug, Clone, Copy)]
pub struct ActView<'a> {
    dims: StoreDims,
    act: &'a [f16],
    cap_len: &'a [i16],
}

impl<'a> ActView<'a> {
    pub fn new(dims: StoreDims, act: &'a [f16], cap_len: &'a [i16]) -> Result<Self> {
        if act.len() != dims.rows * dims.row_len() {
            bail!(Shape, "act tensor has {} values, dims imply {}", act.len(), dims.rows * dims.row_len());
        }
        if cap_len.len() != dims.rows * dims.steps {
            bail!(Shape, "cap_len has {} entries, dims imply {}", cap_len.len(), dims.rows * dims.steps);
        }
        if let Some(i) = cap_len.iter().position(|&c| c < 0 || c as usize > dims.max_m) {
            bail!(Shape, "cap_len[{}, {}] = {} outside [0, {}]", i / dims.steps.max(1), i % dims.steps.max(1), cap_len[i], dims.max_m);
        }
        Ok(Self { dims, act, cap_len })
    }

    pub fn dims(&self) -> StoreDims {
        self.dims
    }

    pub fn cap_len(&self, row: usize, step: usize) -> usize {
        self.cap_len[row * self.dims.steps + step] as usize
    }

    /// All `max_M` slots of unit `(row, step, layer)`, row-major `[max_M, r]`.
    pub fn unit(&self, row: usize, step: usize, layer: usize) -> &'a [f16] {
        let d = self.dims;
        let start = ((row * d.steps + step) * d.layers + layer) * d.unit_len();
        &self.act[start..start + d.unit_len()]
    }
}

/// Two-stream features of one example: row-major `[N, L, 2r]` holding
/// `[u_last ; u_chg]` per step-layer pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStream {
    pub steps: usize,
    pub layers: usize,
    pub r: usize,
    pub data: Vec<f64>,
}

impl TwoStream {
    pub fn feature_dim(&self) -> usize {
        2 * self.r
    }

    /// Feature of flat pair index `j = step * L + layer`.
    pub fn pair(&self, flat: usize) -> &[f64] {
        let w = self.feature_dim();
        &self.data[flat * w..(flat + 1) * w]
    }
}

/// Steps whose capture length was zero; their features are zero-filled.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TwoStreamDiagnostics {
    pub empty_steps: Vec<usize>,
}

/// Builds `g[t, ℓ] = [u_last ; u_chg]` for one stored row. The last-token
/// feature is the final filled slot (`cap_len - 1`); the changed-token feature
/// is the mean of the slots before it, or zero when there are none.
pub fn build_two_stream(view: &ActView<'_>, row: usize) -> Result<(TwoStream, TwoStreamDiagnostics)> {
    let d = view.dims();
    if row >= d.rows {
        bail!(Input, "row {row} out of range for store with S = {}", d.rows);
    }
    let r = d.r;
    let mut data = vec![0.0; d.pairs() * 2 * r];
    let mut diag = TwoStreamDiagnostics::default();
    for t in 0..d.steps {
        let m = view.cap_len(row, t);
        if m == 0 {
            diag.empty_steps.push(t);
            continue;
        }
        for l in 0..d.layers {
            let unit = view.unit(row, t, l);
            let out = &mut data[(t * d.layers + l) * 2 * r..(t * d.layers + l + 1) * 2 * r];
            let (last, chg) = out.split_at_mut(r);
            for (o, v) in last.iter_mut().zip(&unit[(m - 1) * r..m * r]) {
                *o = v.to_f64();
            }
            if m > 1 {
                for slot in 0..m - 1 {
                    for (o, v) in chg.iter_mut().zip(&unit[slot * r..(slot + 1) * r]) {
                        *o += v.to_f64();
                    }
                }
                let inv = 1.0 / (m - 1) as f64;
                chg.iter_mut().for_each(|x| *x *= inv);
            }
        }
    }
    Ok((TwoStream { steps: d.steps, layers: d.layers, r, data }, diag))
}
