//! VMRT binary tensor files and checkpoint directories.
//!
//! Layout of a VMRT file, all integers little-endian:
//!
//! ```text
//!   b"VMRT" | version: u8 = 1 | dtype: u8 (0 f32, 1 f64) | rank: u8
//!   | rank × dim: u32 | row-major data
//! ```
//!
//! A checkpoint directory holds one `.vmrt` file per parameter, a
//! `manifest.json` mapping parameter name to `{file, shape, dtype}` and a
//! free-form `meta.json`.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VMRT";
pub const VERSION: u8 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const META: &str = "meta.json";

/// Serialize with the element type of `T`.
pub fn encode<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank {} exceeds 255", t.rank())))?;
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, T::DTYPE.code(), rank]);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Parse a VMRT buffer. Data stored as the other float width is converted.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let bad = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(bad("missing VMRT magic"));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[5])))?;
    let rank = bytes[6] as usize;
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = bytes[7..header].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize).collect();
    let n: usize = shape.iter().product();
    let body = &bytes[header..];
    if body.len() != n * dtype.size() {
        return Err(Error::Format(format!("expected {} data bytes for shape {shape:?}, found {}", n * dtype.size(), body.len())));
    }
    let data: Vec<T> = match dtype {
        DType::F32 => body.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        DType::F64 => body.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    };
    if shape.is_empty() {
        return Ok(Tensor::scalar(data[0]));
    }
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t)?)?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

/// Write every parameter plus `meta` into `dir`, creating it if needed.
pub fn save_checkpoint<T: Scalar>(dir: impl AsRef<Path>, store: &ParamStore<T>, meta: &serde_json::Value) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = IndexMap::new();
    for (i, (name, t)) in store.iter().enumerate() {
        let file = format!("{i:04}.vmrt");
        write_tensor(dir.join(&file), t)?;
        manifest.insert(name.to_string(), ManifestEntry { file, shape: t.shape().to_vec(), dtype: T::DTYPE });
    }
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join(META), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`], checking every tensor
/// against its manifest shape.
pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<(ParamStore<T>, serde_json::Value)> {
    let dir = dir.as_ref();
    let manifest: IndexMap<String, ManifestEntry> = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let mut store = ParamStore::new();
    for (name, entry) in manifest {
        let t: Tensor<T> = read_tensor(dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!("{name}: manifest shape {:?}, file shape {:?}", entry.shape, t.shape())));
        }
        store.insert(name, t);
    }
    let meta = match fs::read_to_string(dir.join(META)) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => serde_json::Value::Null,
        Err(e) => return Err(e.into()),
    };
    Ok((store, meta))
}
