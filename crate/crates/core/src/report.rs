//! Versioned JSON report envelope shared by every command.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{format_err, Result};

pub const REPORT_FORMAT: &str = "glitchlab-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub command: String,
    /// Fully resolved configuration and seed of the run.
    pub manifest: serde_json::Value,
    pub payload: serde_json::Value,
    /// SHA-256 of the canonical payload encoding.
    pub payload_digest: String,
    /// Wall-clock seconds per phase; excluded from the digest.
    pub timings: BTreeMap<String, f64>,
}

/// Canonical bytes of a payload: compact JSON with sorted object keys.
pub fn canonical_bytes(value: &serde_json::Value) -> Vec<u8> {
    // serde_json's default map is ordered, so to_vec is already canonical
    serde_json::to_vec(value).expect("JSON value serializes")
}

pub fn payload_digest(value: &serde_json::Value) -> String {
    sha256_hex(&canonical_bytes(value))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Report {
    pub fn new(
        command: &str,
        manifest: &impl Serialize,
        payload: &impl Serialize,
        timings: BTreeMap<String, f64>,
    ) -> Result<Self> {
        let manifest = serde_json::to_value(manifest).map_err(|e| format_err(0, e.to_string()))?;
        let payload = serde_json::to_value(payload).map_err(|e| format_err(0, e.to_string()))?;
        Ok(Self {
            format: REPORT_FORMAT.into(),
            command: command.into(),
            payload_digest: payload_digest(&payload),
            manifest,
            payload,
            timings,
        })
    }

    pub fn payload_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.payload.clone()).map_err(|e| format_err(0, format!("report payload: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| format_err(0, e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let r: Report = serde_json::from_str(&text).map_err(|e| format_err(e.column() as u64, format!("report: {e}")))?;
        if r.format != REPORT_FORMAT {
            return Err(format_err(0, format!("expected format {REPORT_FORMAT}, found {}", r.format)));
        }
        if payload_digest(&r.payload) != r.payload_digest {
            return Err(format_err(0, "report payload digest mismatch"));
        }
        Ok(r)
    }
}
