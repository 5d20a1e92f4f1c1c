//! JSON-lines result records. Every record carries the config hash and
//! seed that produced it; a run truncates its records file and then
//! appends one line per result, so identical reruns produce identical
//! files.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone, Serialize)]
pub struct ResultRecord {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pass: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Short content hash of the raw config bytes.
pub fn config_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    hex[..12].to_string()
}

pub struct RecordWriter {
    file: std::fs::File,
}

impl RecordWriter {
    /// Creates (truncating) the records file.
    pub fn create(path: &Path) -> Result<Self> {
        Ok(RecordWriter { file: std::fs::File::create(path)? })
    }

    pub fn append(&mut self, record: &ResultRecord) -> Result<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        self.file.write_all(line.as_bytes())?;
        self.file.write_all(b"\n")?;
        Ok(())
    }
}
