//! Append-only results ledger: one JSON object per line.
//!
//! Appends from concurrent trial workers in one process serialize through
//! an internal lock, and the file opens in append mode so separate
//! processes interleave whole lines. A scan never fails on dirty data: a
//! crash-truncated final line or a malformed row is skipped and counted.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::DataError;

/// Shared append handle for one ledger file.
#[derive(Debug)]
pub struct Ledger {
    path: PathBuf,
    file: Mutex<File>,
}

/// Result of reading a ledger: the complete records in file order plus the
/// number of lines that failed to parse.
#[derive(Debug)]
pub struct Scan<T> {
    pub rows: Vec<T>,
    pub skipped: usize,
}

impl Ledger {
    /// Open (creating if absent) a ledger for appending.
    pub fn open(path: impl AsRef<Path>) -> Result<Ledger, DataError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Ledger {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Append one record as a single line and flush it.
    pub fn append<T: Serialize>(&self, row: &T) -> Result<(), DataError> {
        let mut line = serde_json::to_string(row)?;
        line.push('\n');
        let mut file = self.file.lock().expect("ledger lock poisoned");
        file.write_all(line.as_bytes())?;
        file.flush()?;
        Ok(())
    }

    /// Read back every complete record in this ledger.
    pub fn scan<T: DeserializeOwned>(&self) -> Result<Scan<T>, DataError> {
        scan(&self.path)
    }
}

/// Read all complete records from a ledger file. A missing file is an
/// empty ledger.
pub fn scan<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Scan<T>, DataError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(e.into()),
    };
    let mut rows = Vec::new();
    let mut skipped = 0;
    for line in text.split('\n') {
        if line.is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(row) => rows.push(row),
            Err(_) => skipped += 1,
        }
    }
    Ok(Scan { rows, skipped })
}
