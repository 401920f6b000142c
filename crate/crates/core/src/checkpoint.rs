//! Checkpoint directories: a JSON manifest plus a named-array file.

use std::path::Path;

use motif_nn::ParamSet;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{MotifError, Result};
use crate::store;

const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";

pub fn save<M: Serialize>(dir: &Path, manifest: &M, params: &ParamSet) -> Result<()> {
    store::ensure_dir(dir)?;
    store::write_arrays(&dir.join(PARAMS), params.iter())?;
    store::write_json(&dir.join(MANIFEST), manifest)
}

pub fn load_manifest<M: DeserializeOwned>(dir: &Path) -> Result<M> {
    store::read_json(&dir.join(MANIFEST))
}

/// Fills `params` (already built with the right names and shapes) from disk.
pub fn load_params(dir: &Path, params: &mut ParamSet) -> Result<()> {
    let arrays = store::read_arrays(&dir.join(PARAMS))?;
    params
        .load(arrays.iter().map(|(n, t)| (n.as_str(), t)))
        .map_err(|e| MotifError::parse(dir.join(PARAMS).display().to_string(), e))
}

/// SHA-256 over parameter names, shapes and exact values.
pub fn params_digest(params: &ParamSet) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// SHA-256 of the stored files of a checkpoint directory.
pub fn file_digest(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in [MANIFEST, PARAMS] {
        let p = dir.join(name);
        let bytes = std::fs::read(&p).map_err(|e| MotifError::io(&p, e))?;
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}
