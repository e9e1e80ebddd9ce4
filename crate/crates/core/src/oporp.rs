//! Per-layer orthogonalized Gaussian random projection.

use alloc::vec::Vec;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::linalg::orthonormalize_columns;
use crate::rng::SplitMix64;

/// Identity of a projector; one checkpoint exists per distinct value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OporpConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub r: usize,
    pub seed: u64,
}

/// One `[d, r]` matrix per layer, stored row-major, with orthonormal columns
/// scaled by `sqrt(d / r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OporpProjector {
    config: OporpConfig,
    matrices: Vec<f64>,
}

impl OporpProjector {
    /// Builds the projector: for each layer a Gaussian `d x r` matrix from the
    /// layer's fork of `seed`, orthonormalized by QR (positive R diagonal) and
    /// scaled by `sqrt(d / r)`.
    pub fn new(num_layers: usize, hidden_dim: usize, r: usize, seed: u64) -> Result<Self> {
        if r == 0 || num_layers == 0 {
            bail!(Input, "projection needs r >= 1 and at least one layer");
        }
        if r > hidden_dim {
            bail!(Input, "projection dimension r = {r} exceeds hidden dimension d = {hidden_dim}");
        }
        let scale = libm::sqrt(hidden_dim as f64 / r as f64);
        let root = SplitMix64::new(seed);
        let mut matrices = Vec::with_capacity(num_layers * hidden_dim * r);
        for layer in 0..num_layers {
            let mut rng = root.fork(layer as u64);
            let mut m: Vec<f64> = (0..hidden_dim * r).map(|_| rng.next_normal()).collect();
            orthonormalize_columns(&mut m, hidden_dim, r)?;
            m.iter_mut().for_each(|x| *x *= scale);
            matrices.extend_from_slice(&m);
        }
        Ok(Self { config: OporpConfig { num_layers, hidden_dim, r, seed }, matrices })
    }

    /// Rebuilds a projector from stored matrices.
    pub fn from_parts(config: OporpConfig, matrices: Vec<f64>) -> Result<Self> {
        let want = config.num_layers * config.hidden_dim * config.r;
        if matrices.len() != want {
            bail!(Shape, "projector holds {} values, expected {want}", matrices.len());
        }
        Ok(Self { config, matrices })
    }

    pub fn config(&self) -> OporpConfig {
        self.config
    }

    pub fn matrices(&self) -> &[f64] {
        &self.matrices
    }

    /// Row-major `[d, r]` matrix of `layer`.
    pub fn layer(&self, layer: usize) -> &[f64] {
        let size = self.config.hidden_dim * self.config.r;
        &self.matrices[layer * size..(layer + 1) * size]
    }

    /// `Π_ℓᵀ v` in double precision.
    pub fn project_vector(&self, layer: usize, v: &[f32], out: &mut [f64]) {
        let r = self.config.r;
        let mat = self.layer(layer);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &x) in v.iter().enumerate() {
            let x = f64::from(x);
            let row = &mat[i * r..(i + 1) * r];
            for (o, &p) in out.iter_mut().zip(row) {
                *o += x * p;
            }
        }
    }

    /// Projects `[L, M, d]` hidden states to `[L, M, r]` half precision
    /// (round-to-nearest-even from the exact double-precision product).
    pub fn project(&self, hidden: &[f32], slots: usize) -> Result<Vec<f16>> {
        let OporpConfig { num_layers: l, hidden_dim: d, r, .. } = self.config;
        if hidden.len() != l * slots * d {
            bail!(Shape, "hidden has {} values, expected [{l}, {slots}, {d}]", hidden.len());
        }
        if hidden.iter().any(|v| !v.is_finite()) {
            bail!(NonFinite, "hidden states contain NaN or infinity");
        }
        let mut out = Vec::with_capacity(l * slots * r);
        let mut buf = alloc::vec![0.0; r];
        for layer in 0..l {
            for slot in 0..slots {
                let start = (layer * slots + slot) * d;
                self.project_vector(layer, &hidden[start..start + d], &mut buf);
                out.extend(buf.iter().map(|&x| f16::from_f64(x)));
            }
        }
        Ok(out)
    }
}
