//! Binary tensor files: an 8-byte magic, a little-endian u64 header length,
//! a JSON header, then every tensor as little-endian f64 in header order.
//! Values are widened to f64 on write so f32 and f64 models share files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CLZFMR\x00\x01";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    scalar: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    /// Copies into `slot`, which must already have the stored shape.
    pub fn assign_to<T: Scalar>(&self, slot: &mut Tensor<T>) -> Result<()> {
        if slot.shape() != self.shape.as_slice() {
            return Err(Error::CheckpointShape {
                name: self.name.clone(),
                expected: slot.shape().to_vec(),
                found: self.shape.clone(),
            });
        }
        for (dst, &src) in slot.data_mut().iter_mut().zip(&self.data) {
            *dst = T::of(src);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub scalar: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedArray>,
}

pub fn write_tensor_file<T: Scalar>(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(&str, &Tensor<T>)],
) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        scalar: T::NAME.to_string(),
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let total: usize = tensors.iter().map(|(_, t)| t.numel()).sum();
    let mut buf = Vec::with_capacity(16 + json.len() + total * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in tensors {
        for &x in t.data() {
            buf.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    // Write to a sibling and rename so a crash never leaves a torn file.
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<TensorFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::CheckpointFormat(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body_start])
        .map_err(|e| bad(&format!("unreadable header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {}", header.format_version)));
    }
    let mut off = body_start;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = off
            .checked_add(n * 8)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(&format!("truncated data for {}", entry.name)))?;
        let data = bytes[off..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        off = end;
        tensors.push(NamedArray {
            name: entry.name,
            shape: entry.shape,
            data,
        });
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(TensorFile {
        scalar: header.scalar,
        meta: header.meta,
        tensors,
    })
}
