//! Run-directory persistence: paths, locking, append-only trial logs,
//! manifest I/O.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::TrialRecord;

use super::{RunError, RunManifest};

/// The well-known files of a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn trials(&self) -> PathBuf {
        self.root.join("trials.jsonl")
    }
    pub fn errors(&self) -> PathBuf {
        self.root.join("errors.jsonl")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }
    pub fn lock(&self) -> PathBuf {
        self.root.join("lock")
    }
}

// ─── Locking ────────────────────────────────────────────────────────────────

/// Pid-file lock guarding a run directory. A lock whose owning process is
/// gone counts as stale and is taken over; the file is removed on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(path: &Path) -> Result<Self, RunError> {
        if let Ok(text) = std::fs::read_to_string(path) {
            if let Ok(pid) = text.trim().parse::<u32>() {
                if pid != std::process::id() && process_alive(pid) {
                    return Err(RunError::LockHeld {
                        path: path.display().to_string(),
                        pid,
                    });
                }
            }
            // Unreadable content or a dead owner: stale, take over.
        }
        std::fs::write(path, std::process::id().to_string())
            .map_err(|source| RunError::io(path, source))?;
        Ok(Self {
            path: path.to_path_buf(),
        })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn process_alive(pid: u32) -> bool {
    Path::new(&format!("/proc/{pid}")).exists()
}

// ─── Trial log ──────────────────────────────────────────────────────────────

/// Loads every record from a `trials.jsonl`, in file order.
///
/// A truncated final line (no trailing newline — the writer died mid-line)
/// is dropped silently so the run can resume; corruption anywhere else is an
/// error, because it means records were lost in the middle of the log.
pub fn load_trials(path: &Path) -> Result<Vec<TrialRecord>, RunError> {
    let text = match std::fs::read_to_string(path) {
        Ok(text) => text,
        Err(err) if err.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => return Err(RunError::io(path, source)),
    };
    let ends_clean = text.is_empty() || text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::with_capacity(lines.len());
    for (index, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TrialRecord>(line) {
            Ok(record) => records.push(record),
            Err(err) => {
                let is_last = index + 1 == lines.len();
                if is_last && !ends_clean {
                    break; // torn tail from a crashed writer; rewritten on resume
                }
                return Err(RunError::CorruptTrials {
                    path: path.display().to_string(),
                    line: index + 1,
                    message: err.to_string(),
                });
            }
        }
    }
    Ok(records)
}

/// A failed trial attempt, as logged to `errors.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureRecord {
    pub trial_id: String,
    pub message: String,
    pub timestamp: chrono::DateTime<chrono::Utc>,
}

/// Line-buffered append writer that flushes after every record, so a crash
/// can cost at most the line being written.
pub(crate) struct JsonlWriter {
    writer: BufWriter<File>,
    path: PathBuf,
}

impl JsonlWriter {
    pub(crate) fn append(path: &Path) -> Result<Self, RunError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| RunError::io(path, source))?;
        Ok(Self {
            writer: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub(crate) fn write_line<T: Serialize>(&mut self, value: &T) -> Result<(), RunError> {
        let line = serde_json::to_string(value).expect("records are always serializable");
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.write_all(b"\n"))
            .and_then(|_| self.writer.flush())
            .map_err(|source| RunError::io(&self.path, source))
    }
}

// ─── Manifest and snapshots ─────────────────────────────────────────────────

/// Atomic JSON write: temp file in the same directory, then rename.
pub(crate) fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let json = serde_json::to_string_pretty(value).expect("always serializable");
    write_bytes_atomic(path, json.as_bytes())
}

pub(crate) fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let temp = path.with_extension("tmp");
    std::fs::write(&temp, bytes).map_err(|source| RunError::io(&temp, source))?;
    std::fs::rename(&temp, path).map_err(|source| RunError::io(path, source))
}

/// Reads a run manifest, or `None` when the file does not exist yet.
pub fn read_manifest(path: &Path) -> Result<Option<RunManifest>, RunError> {
    let text = match std::fs::read_to_string(path) {
        Ok(text) => text,
        Err(err) if err.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(source) => return Err(RunError::io(path, source)),
    };
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|err| RunError::CorruptTrials {
            path: path.display().to_string(),
            line: 0,
            message: err.to_string(),
        })
}
