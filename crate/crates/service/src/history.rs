//! Append-only operation history.
//!
//! `history.ndjson` holds one JSON entry per line. After every `interval`
//! entries a checkpoint line `{"checkpoint":n,"sha256":"…"}` records the
//! running SHA-256 over all entry lines so far, so that edits anywhere
//! before the last checkpoint are detected on load.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const HISTORY_FILE: &str = "history.ndjson";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub seq: u64,
    /// Unix time (s); never decreases along the log.
    pub timestamp: f64,
    pub user: String,
    pub action: String,
    pub target: String,
    pub params: Value,
    pub outcome: String,
}

#[derive(Debug, Error)]
pub enum HistoryError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
}

#[derive(Deserialize)]
struct Checkpoint {
    checkpoint: u64,
    sha256: String,
}

#[derive(Debug)]
pub struct HistoryLog {
    path: PathBuf,
    file: File,
    interval: usize,
    entries: Vec<HistoryEntry>,
    hasher: Sha256,
}

impl HistoryLog {
    /// Opens or creates the log in `dir`, verifying every checkpoint.
    pub fn open(dir: &Path, interval: usize) -> Result<Self, HistoryError> {
        let path = dir.join(HISTORY_FILE);
        let io = |source| HistoryError::Io {
            path: path.clone(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut entries = Vec::new();
        let mut hasher = Sha256::new();
        let mut clean_len = 0usize;
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(io)?;
            let corrupt = |line: usize, reason: String| HistoryError::Corrupt {
                path: path.clone(),
                line,
                reason,
            };
            let mut offset = 0;
            for (i, raw) in text.split_inclusive('\n').enumerate() {
                offset += raw.len();
                let line = raw.trim_end_matches('\n');
                if !raw.ends_with('\n') {
                    // A torn final write; everything before it is intact.
                    break;
                }
                if line.is_empty() {
                    clean_len = offset;
                    continue;
                }
                if line.starts_with("{\"checkpoint\"") {
                    let cp: Checkpoint =
                        serde_json::from_str(line).map_err(|e| corrupt(i + 1, e.to_string()))?;
                    if cp.checkpoint != entries.len() as u64 {
                        return Err(corrupt(i + 1, format!("checkpoint after {} entries claims {}", entries.len(), cp.checkpoint)));
                    }
                    if hex::encode(hasher.clone().finalize()) != cp.sha256 {
                        return Err(corrupt(i + 1, "checksum mismatch".into()));
                    }
                } else {
                    let e: HistoryEntry = serde_json::from_str(line).map_err(|e| corrupt(i + 1, e.to_string()))?;
                    if e.seq != entries.len() as u64 {
                        return Err(corrupt(i + 1, format!("expected seq {}, found {}", entries.len(), e.seq)));
                    }
                    hasher.update(line.as_bytes());
                    hasher.update(b"\n");
                    entries.push(e);
                }
                clean_len = offset;
            }
            if clean_len != text.len() {
                let f = OpenOptions::new().write(true).open(&path).map_err(io)?;
                f.set_len(clean_len as u64).map_err(io)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        Ok(HistoryLog {
            path,
            file,
            interval: interval.max(1),
            entries,
            hasher,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(
        &mut self,
        timestamp: f64,
        user: &str,
        action: &str,
        target: &str,
        params: Value,
        outcome: &str,
    ) -> Result<&HistoryEntry, HistoryError> {
        let last = self.entries.last().map_or(f64::MIN, |e| e.timestamp);
        let entry = HistoryEntry {
            seq: self.entries.len() as u64,
            timestamp: timestamp.max(last),
            user: user.into(),
            action: action.into(),
            target: target.into(),
            params,
            outcome: outcome.into(),
        };
        let line = serde_json::to_string(&entry).expect("entry serializes");
        let mut out = format!("{line}\n");
        self.hasher.update(out.as_bytes());
        let n = self.entries.len() + 1;
        if n % self.interval == 0 {
            out.push_str(&format!(
                "{{\"checkpoint\":{n},\"sha256\":\"{}\"}}\n",
                hex::encode(self.hasher.clone().finalize())
            ));
        }
        let path = self.path.clone();
        self.file
            .write_all(out.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|source| HistoryError::Io { path, source })?;
        self.entries.push(entry);
        Ok(self.entries.last().expect("just pushed"))
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Most recent `limit` entries, oldest first.
    pub fn tail(&self, limit: usize) -> &[HistoryEntry] {
        &self.entries[self.entries.len().saturating_sub(limit)..]
    }

    /// Per-target call counts and failures, for maintenance reports.
    pub fn stats(&self) -> BTreeMap<String, TargetStats> {
        let mut out: BTreeMap<String, TargetStats> = BTreeMap::new();
        for e in &self.entries {
            let s = out.entry(e.target.clone()).or_default();
            s.calls += 1;
            if e.outcome != "ok" {
                s.failures += 1;
            }
            s.last_used = e.timestamp;
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub calls: u64,
    pub failures: u64,
    pub last_used: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn fill(log: &mut HistoryLog, n: usize) {
        for i in 0..n {
            log.append(i as f64, "u", "stage_command", "g0_x", json!({"i": i}), "ok").unwrap();
        }
    }

    #[test]
    fn reopen_recovers_everything() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = HistoryLog::open(dir.path(), 4).unwrap();
        fill(&mut log, 10);
        let before = log.entries().to_vec();
        drop(log);
        let log = HistoryLog::open(dir.path(), 4).unwrap();
        assert_eq!(log.entries(), &before[..]);
        let text = std::fs::read_to_string(dir.path().join(HISTORY_FILE)).unwrap();
        assert_eq!(text.lines().filter(|l| l.contains("checkpoint")).count(), 2);
    }

    #[test]
    fn timestamps_never_decrease() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = HistoryLog::open(dir.path(), 4).unwrap();
        log.append(10.0, "u", "a", "t", json!(null), "ok").unwrap();
        let e = log.append(5.0, "u", "a", "t", json!(null), "ok").unwrap();
        assert_eq!(e.timestamp, 10.0);
    }

    #[test]
    fn edit_before_checkpoint_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = HistoryLog::open(dir.path(), 4).unwrap();
        fill(&mut log, 8);
        drop(log);
        let path = dir.path().join(HISTORY_FILE);
        let text = std::fs::read_to_string(&path).unwrap().replacen("\"i\":1", "\"i\":7", 1);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(HistoryLog::open(dir.path(), 4), Err(HistoryError::Corrupt { line: 5, .. })));
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = HistoryLog::open(dir.path(), 4).unwrap();
        fill(&mut log, 3);
        drop(log);
        let path = dir.path().join(HISTORY_FILE);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"seq\":3,\"times").unwrap();
        drop(f);
        let mut log = HistoryLog::open(dir.path(), 4).unwrap();
        assert_eq!(log.len(), 3);
        fill(&mut log, 2);
        drop(log);
        assert_eq!(HistoryLog::open(dir.path(), 4).unwrap().len(), 5);
    }
}
