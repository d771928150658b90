//! Versioned JSON envelopes for trained artifacts.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    config_hash: String,
    payload: T,
}

pub fn save<T: Serialize>(path: &Path, format: &str, config_hash: &str, payload: &T) -> Result<()> {
    let env = Envelope {
        format: format.to_string(),
        version: CHECKPOINT_VERSION,
        config_hash: config_hash.to_string(),
        payload,
    };
    fs::write(path, serde_json::to_string(&env)?)?;
    Ok(())
}

/// Loads a payload, naming `stage` when the file is missing. Returns the
/// embedded config hash alongside.
pub fn load<T: DeserializeOwned>(path: &Path, format: &str, stage: &str) -> Result<(String, T)> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.to_path_buf(),
            stage: stage.to_string(),
        },
        _ => Error::Io(e),
    })?;
    let env: Envelope<serde_json::Value> = serde_json::from_str(&text)?;
    if env.format != format {
        return Err(Error::Config(format!(
            "{} holds a {} artifact, expected {format}",
            path.display(),
            env.format
        )));
    }
    if env.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: env.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok((env.config_hash, serde_json::from_value(env.payload)?))
}
