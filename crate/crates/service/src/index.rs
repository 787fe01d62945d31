//! Catalogue of scans and retrieval results kept under the data directory.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const INDEX_FILE: &str = "datasets.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Scan,
    Retrieval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub kind: RecordKind,
    pub path: PathBuf,
    pub created: f64,
    pub user: String,
    pub complete: bool,
    /// Scan mode, steps, frame count or the retrieval inputs.
    pub summary: serde_json::Value,
}

#[derive(Debug)]
pub struct DatasetIndex {
    path: PathBuf,
    records: Vec<DatasetRecord>,
}

impl DatasetIndex {
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(INDEX_FILE);
        let records = if path.exists() {
            serde_json::from_str(&std::fs::read_to_string(&path)?)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?
        } else {
            Vec::new()
        };
        Ok(DatasetIndex { path, records })
    }

    pub fn records(&self) -> &[DatasetRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&DatasetRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Inserts or replaces the record with the same id and persists.
    pub fn upsert(&mut self, record: DatasetRecord) -> std::io::Result<()> {
        match self.records.iter_mut().find(|r| r.id == record.id) {
            Some(r) => *r = record,
            None => self.records.push(record),
        }
        self.persist()
    }

    fn persist(&self) -> std::io::Result<()> {
        let tmp = self.path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&self.records)?)?;
        std::fs::rename(&tmp, &self.path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsert_persists_and_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let mut idx = DatasetIndex::open(dir.path()).unwrap();
        let mut r = DatasetRecord {
            id: "scan-1".into(),
            kind: RecordKind::Scan,
            path: dir.path().join("scans/scan-1"),
            created: 1.0,
            user: "u".into(),
            complete: false,
            summary: serde_json::json!({"steps": 8}),
        };
        idx.upsert(r.clone()).unwrap();
        r.complete = true;
        idx.upsert(r.clone()).unwrap();
        let back = DatasetIndex::open(dir.path()).unwrap();
        assert_eq!(back.records(), &[r]);
    }
}
