//! Little-endian array encoding and JSON file helpers shared by every format.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use half::f16;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Fixed-width scalar with a little-endian byte encoding.
pub trait LeScalar: Copy {
    const SIZE: usize;
    const DTYPE: &'static str;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

macro_rules! le_scalar {
    ($t:ty, $dtype:literal) => {
        impl LeScalar for $t {
            const SIZE: usize = std::mem::size_of::<$t>();
            const DTYPE: &'static str = $dtype;
            fn put(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn get(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("chunk width"))
            }
        }
    };
}

le_scalar!(f16, "float16");
le_scalar!(f32, "float32");
le_scalar!(f64, "float64");
le_scalar!(i16, "int16");
le_scalar!(i32, "int32");
le_scalar!(u32, "uint32");
le_scalar!(u64, "uint64");

pub fn encode_le<T: LeScalar>(values: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * T::SIZE);
    values.iter().for_each(|v| v.put(&mut out));
    out
}

/// Decodes exactly `count` values; a short buffer is reported as truncation of
/// `section`.
pub fn decode_le<T: LeScalar>(bytes: &[u8], count: usize, path: &Path, section: &str) -> Result<Vec<T>> {
    let want = count * T::SIZE;
    if bytes.len() < want {
        return Err(Error::Truncated { path: path.to_path_buf(), section: format!("{section} ({} of {want} bytes)", bytes.len()) });
    }
    if bytes.len() > want {
        return Err(Error::Format(format!("{}: {section} holds {} bytes, expected {want}", path.display(), bytes.len())));
    }
    Ok(bytes.chunks_exact(T::SIZE).map(T::get).collect())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(Error::io(path))
}

/// Writes `bytes`, creating parent directories as needed.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    fs::write(path, bytes).map_err(Error::io(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(Error::json(path))
}

/// Pretty-printed JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable value");
    bytes.push(b'\n');
    bytes
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, &to_json_bytes(value))
}

/// One compact JSON value per line.
pub fn to_jsonl_bytes<T: Serialize>(values: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        serde_json::to_writer(&mut out, v).expect("serializable value");
        out.push(b'\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, values: &[T]) -> Result<()> {
    write_bytes(path, &to_jsonl_bytes(values))
}

/// Parses every non-empty line; errors name the offending line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(value);
    }
    Ok(out)
}

pub(crate) fn append_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).create(true).open(path).map_err(Error::io(path))?;
    f.write_all(bytes).map_err(Error::io(path))
}
