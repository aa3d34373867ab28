//! CSV tables, seed statistics and run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Mean and standard error (sample standard deviation over `√m`); the error
/// is zero for a single value.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let m = values.len();
    if m == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    if m == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    (mean, (var / m as f64).sqrt())
}

/// A table with a fixed header; cells are written in shortest round-trip form.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Table {
            header: header.iter().map(|s| s.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn num(x: f64) -> String {
    format!("{x}")
}

pub fn int(x: usize) -> String {
    x.to_string()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything needed to reproduce and interpret a run. The timestamp is the
/// only field that differs between identical invocations.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub kind: String,
    pub instance: String,
    pub spec_sha256: String,
    pub spec: serde_json::Value,
    pub seeds: Vec<u64>,
    pub created_unix_secs: u64,
    /// Derived constants: mixing times, mismatch ratios, λ_min, horizons,
    /// bound constants.
    pub derived: BTreeMap<String, serde_json::Value>,
    /// Why optional outputs (such as bound columns) were left out.
    pub notes: Vec<String>,
    pub files: Vec<String>,
    pub exit_status: i32,
}

impl Manifest {
    pub fn new(kind: &str, instance: &str, spec: serde_json::Value, seeds: Vec<u64>) -> Self {
        let canonical = serde_json::to_vec(&spec).expect("JSON value serializes");
        Manifest {
            kind: kind.to_string(),
            instance: instance.to_string(),
            spec_sha256: sha256_hex(&canonical),
            spec,
            seeds,
            created_unix_secs: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            derived: BTreeMap::new(),
            notes: Vec::new(),
            files: Vec::new(),
            exit_status: 0,
        }
    }

    pub fn derive<T: Serialize>(&mut self, key: &str, value: T) {
        self.derived
            .insert(key.to_string(), serde_json::to_value(value).expect("derived value serializes"));
    }

    pub fn note(&mut self, msg: impl Into<String>) {
        self.notes.push(msg.into());
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

/// Collects tables under a run directory and records them in the manifest.
pub struct Emitter {
    pub dir: PathBuf,
    pub written: Vec<PathBuf>,
}

impl Emitter {
    pub fn new(dir: PathBuf) -> Self {
        Emitter { dir, written: Vec::new() }
    }

    pub fn table(&mut self, rel: &str, table: &Table, manifest: &mut Manifest) -> Result<()> {
        let path = self.dir.join(rel);
        table.write(&path)?;
        manifest.files.push(rel.to_string());
        self.written.push(path);
        Ok(())
    }

    pub fn finish(mut self, manifest: &Manifest) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(&self.dir)?;
        self.written.push(manifest.write(&self.dir)?);
        Ok(self.written)
    }
}
