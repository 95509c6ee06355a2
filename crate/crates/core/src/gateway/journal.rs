//! Append-only provenance journal: one JSON line per gateway call.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::BackendKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub seq: u64,
    pub unix_time: f64,
    pub kind: BackendKind,
    /// Enhancement method, or empty.
    #[serde(default)]
    pub method: String,
    /// Served in-process rather than by a backend.
    #[serde(default)]
    pub native: bool,
    pub endpoint: String,
    pub request_digest: String,
    pub input_digests: Vec<String>,
    pub params: serde_json::Value,
    pub attempts: u32,
    pub ok: bool,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub output_digests: Vec<String>,
    /// Response in wire shape, with images replaced by `image_files`
    /// relative to the journal's directory.
    #[serde(default)]
    pub response: Option<serde_json::Value>,
}

pub struct Journal {
    path: PathBuf,
    state: Mutex<(File, u64)>,
}

impl Journal {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let next = match File::open(&path) {
            Ok(f) => BufReader::new(f).lines().count() as u64,
            Err(_) => 0,
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Journal {
            path,
            state: Mutex::new((file, next)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Directory that relative paths in records are resolved against.
    pub fn base_dir(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }

    /// Stamps sequence number and time, then appends the record.
    pub fn append(&self, mut record: JournalRecord) -> Result<()> {
        let mut guard = self.state.lock().expect("journal lock");
        record.seq = guard.1;
        record.unix_time = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        let mut line = serde_json::to_vec(&record)?;
        line.push(b'\n');
        guard.0.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        guard.0.flush().map_err(|e| Error::io(&self.path, e))?;
        guard.1 += 1;
        Ok(())
    }
}

pub fn read_journal(path: impl AsRef<Path>) -> Result<Vec<JournalRecord>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
