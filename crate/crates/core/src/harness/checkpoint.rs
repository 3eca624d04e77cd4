//! Run-state checkpoints: a JSON envelope around a hashed JSON payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::pipeline::RunState;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Envelope {
    format_version: u32,
    config_hash: String,
    payload_sha256: String,
    /// Serialized `RunState`.
    payload: String,
}

pub fn to_string(state: &RunState, config_hash: &str) -> Result<String> {
    let payload = serde_json::to_string(state).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let env = Envelope {
        format_version: FORMAT_VERSION,
        config_hash: config_hash.to_string(),
        payload_sha256: hex::encode(Sha256::digest(payload.as_bytes())),
        payload,
    };
    serde_json::to_string(&env).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn from_str(text: &str, config_hash: &str) -> Result<RunState> {
    let env: Envelope =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
    if env.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            env.format_version
        )));
    }
    if env.config_hash != config_hash {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: checkpoint {} vs current {config_hash}",
            env.config_hash
        )));
    }
    let digest = hex::encode(Sha256::digest(env.payload.as_bytes()));
    if digest != env.payload_sha256 {
        return Err(Error::Checkpoint(format!(
            "payload digest {digest} does not match recorded {}",
            env.payload_sha256
        )));
    }
    serde_json::from_str(&env.payload).map_err(|e| Error::Checkpoint(format!("bad payload: {e}")))
}

/// Writes through a temporary file and a rename.
pub fn save(path: &Path, state: &RunState, config_hash: &str) -> Result<()> {
    let text = to_string(state, config_hash)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, config_hash: &str) -> Result<RunState> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text, config_hash)
}
