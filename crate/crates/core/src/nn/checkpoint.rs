//! Checkpoint persistence: a JSON manifest listing named blocks with shapes
//! and offsets, next to a binary file of raw f64 little-endian payloads.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::ParamStore;
use crate::nn::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the payload file, in f64 elements.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    /// Optimizer steps applied to the stored parameters.
    step: u64,
    /// Total payload length in f64 elements.
    payload_len: usize,
    blocks: Vec<BlockEntry>,
}

fn manifest_path(base: &Path) -> PathBuf {
    base.with_extension("json")
}

fn payload_path(base: &Path) -> PathBuf {
    base.with_extension("bin")
}

/// Writes `<base>.json` and `<base>.bin`. Blocks are emitted in name order.
pub fn save(base: &Path, step: u64, store: &ParamStore) -> Result<()> {
    if let Some(dir) = base.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut blocks = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0;
    for (name, t) in store.iter() {
        blocks.push(BlockEntry { name: name.to_string(), rows: t.rows(), cols: t.cols(), offset });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    let manifest = Manifest { step, payload_len: offset, blocks };
    fs::write(manifest_path(base), serde_json::to_vec_pretty(&manifest).expect("manifest json"))?;
    fs::write(payload_path(base), payload)?;
    Ok(())
}

/// Loads a checkpoint pair, validating block shapes against the payload.
pub fn load(base: &Path) -> Result<(u64, ParamStore)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path(base))?)
        .map_err(|e| Error::Data(format!("bad checkpoint manifest {}: {e}", base.display())))?;
    let payload = fs::read(payload_path(base))?;
    if payload.len() != manifest.payload_len * 8 {
        return Err(Error::Data(format!(
            "checkpoint payload {} holds {} bytes, manifest expects {}",
            base.display(),
            payload.len(),
            manifest.payload_len * 8
        )));
    }
    let mut store = ParamStore::new();
    for b in &manifest.blocks {
        let len = b.rows * b.cols;
        let end = (b.offset + len) * 8;
        if end > payload.len() {
            return Err(Error::Data(format!("block `{}` overruns checkpoint payload", b.name)));
        }
        let data: Vec<f64> = payload[b.offset * 8..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::from_vec(b.rows, b.cols, data)?;
        if store.contains(&b.name) {
            return Err(Error::Data(format!("duplicate block `{}` in checkpoint", b.name)));
        }
        store.insert(&b.name, t);
    }
    Ok((manifest.step, store))
}
