//! Binary storage of named `f64` arrays plus JSON manifests.
//!
//! An array file is a sequence of records. Each record is a little-endian
//! `u32` header length, a JSON header `{"name", "shape"}`, then the values as
//! little-endian `f64`. Values round-trip bit-exactly.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use motif_nn::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{MotifError, Result};

const MAGIC: &[u8; 8] = b"MOTIFARR";

#[derive(Serialize, Deserialize)]
struct Header {
    name: String,
    shape: Vec<usize>,
}

pub fn write_arrays<'a>(
    path: &Path,
    arrays: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| MotifError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| MotifError::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    for (name, t) in arrays {
        let header = serde_json::to_vec(&Header {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        })
        .expect("header serializes");
        w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads every record; any truncation or malformed header fails the whole
/// read with the offending record named.
pub fn read_arrays(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| MotifError::io(path, e))?;
    decode_arrays(&bytes)
}

pub fn decode_arrays(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(MotifError::parse("file header", "missing array-file magic"));
    }
    let mut pos = MAGIC.len();
    let mut out = Vec::new();
    while pos < bytes.len() {
        let label = match out.last() {
            Some((name, _)) => format!("record #{} (after {name})", out.len()),
            None => format!("record #{}", out.len()),
        };
        let take = |pos: usize, n: usize| -> Result<&[u8]> {
            bytes
                .get(pos..pos + n)
                .ok_or_else(|| MotifError::parse(label.clone(), "truncated"))
        };
        let len = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
        pos += 4;
        let header: Header = serde_json::from_slice(take(pos, len)?)
            .map_err(|e| MotifError::parse(label.clone(), e))?;
        pos += len;
        let n: usize = header.shape.iter().product();
        let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| {
            MotifError::parse(
                header.name.clone(),
                format!("truncated: expected {n} values"),
            )
        })?;
        pos += 8 * n;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((header.name, Tensor::new(&header.shape, data)));
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("manifest serializes");
    fs::write(path, text).map_err(|e| MotifError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| MotifError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| MotifError::parse(path.display().to_string(), e))
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| MotifError::io(path, e))
}
