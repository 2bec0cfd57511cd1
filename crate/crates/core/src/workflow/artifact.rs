//! Versioned, digest-checked JSON artifacts.
//!
//! On disk an artifact is `{"kind", "payload", "sha256", "version"}`; the
//! digest covers the compact JSON serialization of the payload.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Envelope {
    version: u32,
    kind: String,
    sha256: String,
    payload: Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Artifact bytes for `value`.
pub fn encode_artifact<T: Serialize>(kind: &str, value: &T) -> Result<Vec<u8>> {
    let payload = serde_json::to_value(value)?;
    let sha256 = sha256_hex(&serde_json::to_vec(&payload)?);
    let env = Envelope {
        version: ARTIFACT_VERSION,
        kind: kind.to_string(),
        sha256,
        payload,
    };
    let mut bytes = serde_json::to_vec(&env)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn decode_artifact<T: DeserializeOwned>(kind: &str, bytes: &[u8]) -> Result<T> {
    let raw: Value = serde_json::from_slice(bytes)
        .map_err(|e| Error::CorruptArtifact(format!("unreadable JSON ({e})")))?;
    // version first so a future format is reported as such even if the
    // rest of the envelope changed shape
    let version = raw
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::CorruptArtifact("missing version".into()))?;
    if version != ARTIFACT_VERSION as u64 {
        return Err(Error::UnsupportedVersion(
            version.min(u32::MAX as u64) as u32
        ));
    }
    let env: Envelope = serde_json::from_value(raw)
        .map_err(|e| Error::CorruptArtifact(format!("bad envelope ({e})")))?;
    if env.kind != kind {
        return Err(Error::CorruptArtifact(format!(
            "expected kind {kind:?}, found {:?}",
            env.kind
        )));
    }
    let actual = sha256_hex(&serde_json::to_vec(&env.payload)?);
    if actual != env.sha256 {
        return Err(Error::CorruptArtifact(format!(
            "digest mismatch: recorded {}, computed {actual}",
            env.sha256
        )));
    }
    serde_json::from_value(env.payload)
        .map_err(|e| Error::CorruptArtifact(format!("payload does not match {kind} ({e})")))
}

/// Writes the artifact and returns the file digest.
pub fn save_artifact<T: Serialize>(
    path: impl AsRef<Path>,
    kind: &str,
    value: &T,
) -> Result<String> {
    let bytes = encode_artifact(kind, value)?;
    if let Some(dir) = path.as_ref().parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_artifact<T: DeserializeOwned>(path: impl AsRef<Path>, kind: &str) -> Result<T> {
    decode_artifact(kind, &fs::read(path)?)
}
