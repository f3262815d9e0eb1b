//! Checkpoint container: named f64 arrays plus free-form JSON metadata.
//!
//! Layout: magic `FACT`, format version u32 LE, metadata length u64 LE,
//! metadata JSON bytes, then for each array (sorted by name) the values as
//! f64 LE. Array names, shapes, and order live in the metadata under
//! `arrays`, so the file is self-describing.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::ParamStore;
use super::tape::Tensor;

const MAGIC: &[u8; 4] = b"FACT";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CkptError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a checkpoint (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unsupported checkpoint version {version}")]
    BadVersion { path: String, version: u32 },
    #[error("{path}: malformed metadata: {source}")]
    BadMeta {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: array payload truncated")]
    Truncated { path: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CkptMeta {
    arrays: BTreeMap<String, ArrayEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

fn io_err(path: &Path, source: std::io::Error) -> CkptError {
    CkptError::Io { path: path.display().to_string(), source }
}

/// Serialize every parameter in `store` plus caller metadata.
///
/// # Errors
///
/// Filesystem failures only; the format itself cannot fail to encode.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    meta: &serde_json::Value,
) -> Result<(), CkptError> {
    let mut arrays = BTreeMap::new();
    for (name, tensor) in store.iter() {
        arrays.insert(name.to_string(), ArrayEntry { shape: tensor.shape.clone() });
    }
    let meta_json = serde_json::to_vec(&CkptMeta { arrays, meta: meta.clone() })
        .expect("checkpoint metadata always serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    // BTreeMap iteration order matches the sorted `arrays` listing.
    for (_, tensor) in store.iter() {
        for &v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&out).map_err(|e| io_err(path, e))
}

/// Load a checkpoint into a fresh [`ParamStore`], returning caller metadata.
///
/// # Errors
///
/// [`CkptError`] on unreadable, truncated, or non-checkpoint files.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value), CkptError> {
    let mut f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    let p = || path.display().to_string();
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(CkptError::BadMagic { path: p() });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CkptError::BadVersion { path: p(), version });
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + meta_len {
        return Err(CkptError::Truncated { path: p() });
    }
    let meta: CkptMeta = serde_json::from_slice(&bytes[16..16 + meta_len])
        .map_err(|e| CkptError::BadMeta { path: p(), source: e })?;
    let mut store = ParamStore::new();
    let mut offset = 16 + meta_len;
    for (name, entry) in &meta.arrays {
        let n: usize = entry.shape.iter().product();
        let end = offset + 8 * n;
        if bytes.len() < end {
            return Err(CkptError::Truncated { path: p() });
        }
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.set_raw(name, Tensor::new(data, entry.shape.clone()));
        offset = end;
    }
    Ok((store, meta.meta))
}

/// SHA-256 of the checkpoint file, hex-encoded; recorded into result tables.
///
/// # Errors
///
/// Filesystem failures.
pub fn checkpoint_file_hash(path: &Path) -> Result<String, CkptError> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
