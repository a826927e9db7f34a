//! Versioned model checkpoints: a manifest plus the flat parameter vector.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a parameter vector over its little-endian bit patterns.
pub fn params_digest(params: &[f64]) -> String {
    let bytes: Vec<u8> = params.iter().flat_map(|p| p.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub kind: String,
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub patch_size: Option<usize>,
    pub seed: u64,
    pub epochs: usize,
    pub params_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Envelope<M> {
    manifest: CheckpointManifest,
    model: M,
}

pub fn save_checkpoint<M: Serialize>(
    path: impl AsRef<Path>,
    manifest: &CheckpointManifest,
    model: &M,
) -> Result<()> {
    let env = Envelope {
        manifest: manifest.clone(),
        model,
    };
    if let Some(dir) = path.as_ref().parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec(&env)?)?;
    Ok(())
}

/// Loads a checkpoint and checks version, kind and parameter hash.
pub fn load_checkpoint<M: DeserializeOwned>(
    path: impl AsRef<Path>,
    kind: &str,
    params_of: impl Fn(&M) -> &[f64],
) -> Result<(CheckpointManifest, M)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let env: Envelope<M> = serde_json::from_slice(&fs::read(path)?)?;
    let m = &env.manifest;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", m.version)));
    }
    if m.kind != kind {
        return Err(Error::Checkpoint(format!("expected {kind}, found {}", m.kind)));
    }
    if params_digest(params_of(&env.model)) != m.params_sha256 {
        return Err(Error::Checkpoint("parameter hash mismatch".into()));
    }
    Ok((env.manifest, env.model))
}
