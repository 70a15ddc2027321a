//! Persistence: atomic file writes, CSV tables stamped with the config hash,
//! and run manifests.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::LabError;

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), LabError> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| LabError::Io(format!("{}: {e}", dir.display())))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| LabError::Io(format!("{}: {e}", dir.display())))?;
    tmp.write_all(bytes).map_err(|e| LabError::Io(e.to_string()))?;
    tmp.as_file().sync_all().map_err(|e| LabError::Io(e.to_string()))?;
    tmp.persist(path).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// A CSV table whose first column is always `config_hash`.
pub struct Table {
    hash: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(hash: &str, columns: &[&str]) -> Self {
        let mut header = vec!["config_hash".to_string()];
        header.extend(columns.iter().map(|c| c.to_string()));
        Self { hash: hash.to_string(), header, rows: Vec::new() }
    }

    pub fn with_columns(hash: &str, columns: Vec<String>) -> Self {
        let mut header = vec!["config_hash".to_string()];
        header.extend(columns);
        Self { hash: hash.to_string(), header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len() + 1, self.header.len());
        let mut full = vec![self.hash.clone()];
        full.extend(row);
        self.rows.push(full);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, LabError> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.header).map_err(|e| LabError::Io(e.to_string()))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| LabError::Io(e.to_string()))?;
        }
        w.into_inner().map_err(|e| LabError::Io(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<(), LabError> {
        write_atomic(path, &self.to_bytes()?)
    }
}

/// Shortest representation that parses back to the same value, with an
/// exponent for very small or large magnitudes.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config_hash: String,
    pub config: Value,
    pub status: String,
    pub exit_code: i32,
    pub error: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub tolerances: BTreeMap<String, f64>,
    pub threads: usize,
    pub outputs: Vec<String>,
    pub statistics: Value,
    pub summary: BTreeMap<String, Value>,
    /// Timestamp fields; everything else is reproducible.
    pub started_unix: f64,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn file_name(subcommand: &str) -> String {
        format!("{subcommand}.manifest.json")
    }

    pub fn write(&self, dir: &Path) -> Result<(), LabError> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| LabError::Io(e.to_string()))?;
        text.push('\n');
        write_atomic(&dir.join(Self::file_name(&self.subcommand)), text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| LabError::Validation(format!("{}: {e}", path.display())))
    }
}
