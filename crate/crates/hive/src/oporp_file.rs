//! Binary container for projector matrices.
//!
//! Layout (little-endian): magic `HIVEOPRP`, `u32` version, `u32` L, `u32` d,
//! `u32` r, `u64` seed, then the `[L, d, r]` matrices as `f64`. Loading
//! reproduces the matrices bit-exactly.

use std::path::Path;

use hive_core::{OporpConfig, OporpProjector};

use crate::error::{Error, Result};
use crate::io::{decode_le, encode_le, read_bytes, write_bytes};

const MAGIC: &[u8; 8] = b"HIVEOPRP";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 4 + 8;

/// Conventional file name of the checkpoint for one configuration.
pub fn checkpoint_name(cfg: &OporpConfig) -> String {
    format!("oporp_L{}_d{}_r{}_seed{}.bin", cfg.num_layers, cfg.hidden_dim, cfg.r, cfg.seed)
}

pub fn encode_projector(p: &OporpProjector) -> Vec<u8> {
    let c = p.config();
    let mut out = Vec::with_capacity(HEADER_LEN + p.matrices().len() * 8);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, c.num_layers as u32, c.hidden_dim as u32, c.r as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
    out.extend(encode_le(p.matrices()));
    out
}

pub fn save_projector(path: &Path, p: &OporpProjector) -> Result<()> {
    write_bytes(path, &encode_projector(p))
}

pub fn load_projector(path: &Path) -> Result<OporpProjector> {
    let bytes = read_bytes(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { path: path.to_path_buf(), section: "header".into() });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::header(path, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    if word(0) != VERSION {
        return Err(Error::header(path, format!("unsupported version {}", word(0))));
    }
    let config = OporpConfig {
        num_layers: word(1) as usize,
        hidden_dim: word(2) as usize,
        r: word(3) as usize,
        seed: u64::from_le_bytes(bytes[24..32].try_into().unwrap()),
    };
    let count = config.num_layers * config.hidden_dim * config.r;
    let matrices = decode_le::<f64>(&bytes[HEADER_LEN..], count, path, "matrices")?;
    Ok(OporpProjector::from_parts(config, matrices)?)
}

/// Loads the checkpoint for `cfg` from `dir`, creating it when absent. An
/// existing file whose header names another configuration is a format error.
pub fn load_or_create(dir: &Path, cfg: OporpConfig) -> Result<OporpProjector> {
    let path = dir.join(checkpoint_name(&cfg));
    if path.exists() {
        let p = load_projector(&path)?;
        if p.config() != cfg {
            return Err(Error::Format(format!("{} holds {:?}, expected {cfg:?}", path.display(), p.config())));
        }
        return Ok(p);
    }
    let p = OporpProjector::new(cfg.num_layers, cfg.hidden_dim, cfg.r, cfg.seed)?;
    save_projector(&path, &p)?;
    Ok(p)
}
