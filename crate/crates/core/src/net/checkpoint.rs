//! Network checkpoints: a JSON document holding the format version, every
//! layer's shape with its row-major weights and biases, and the
//! hyperparameters that produced it. Floats are written in shortest
//! round-trip form, so save followed by load is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::NetworkParams;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub params: NetworkParams,
    #[serde(default)]
    pub hyperparameters: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: NetworkParams, hyperparameters: serde_json::Value) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            params,
            hyperparameters,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("checkpoint serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let err = |message: String| Error::Checkpoint {
            path: origin.to_path_buf(),
            message,
        };
        let ckpt: Checkpoint = serde_json::from_slice(bytes).map_err(|e| err(e.to_string()))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(err(format!(
                "unsupported format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        ckpt.params.validate().map_err(|e| err(e.to_string()))?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Hex SHA-256 of a byte string.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
