//! Append-only JSONL store of query records.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::{QueryKey, QueryRecord, TransportStatus};
use crate::error::StorageError;

#[derive(Debug, Default)]
pub struct QueryCache {
    path: Option<PathBuf>,
    records: HashMap<QueryKey, QueryRecord>,
    writer: Option<BufWriter<File>>,
}

impl QueryCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (creating if needed) an on-disk cache and load every record.
    ///
    /// An unterminated last line is a torn write from an interrupted run; it is
    /// dropped and the file truncated so appends resume cleanly. Any other
    /// unparsable line is an error naming that line.
    pub fn open(path: &Path) -> Result<Self, StorageError> {
        let io_err = |source| StorageError::Io {
            path: path.to_owned(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(io_err)?;

        let mut records = HashMap::new();
        let mut reader = BufReader::new(&file);
        let mut buf = String::new();
        let mut offset: u64 = 0;
        let mut line_no = 0;
        let mut torn_at = None;
        loop {
            buf.clear();
            let n = reader.read_line(&mut buf).map_err(io_err)?;
            if n == 0 {
                break;
            }
            line_no += 1;
            let terminated = buf.ends_with('\n');
            let line = buf.trim_end_matches(['\n', '\r']);
            if line.trim().is_empty() {
                offset += n as u64;
                continue;
            }
            match serde_json::from_str::<QueryRecord>(line) {
                Ok(rec) => insert_loaded(&mut records, rec).map_err(|message| StorageError::Corrupt {
                    path: path.to_owned(),
                    line: line_no,
                    message,
                })?,
                Err(_) if !terminated => {
                    torn_at = Some(offset);
                    break;
                }
                Err(e) => {
                    return Err(StorageError::Corrupt {
                        path: path.to_owned(),
                        line: line_no,
                        message: e.to_string(),
                    })
                }
            }
            offset += n as u64;
        }
        drop(reader);
        if let Some(at) = torn_at {
            log::warn!("{}: dropping torn final line {line_no}", path.display());
            file.set_len(at).map_err(io_err)?;
            file.seek(SeekFrom::End(0)).map_err(io_err)?;
        } else if offset > 0 && !ends_with_newline(path).map_err(io_err)? {
            // A complete record without its newline; terminate it before appending.
            file.write_all(b"\n").map_err(io_err)?;
        }
        Ok(Self {
            path: Some(path.to_owned()),
            records,
            writer: Some(BufWriter::new(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &QueryKey) -> Option<&QueryRecord> {
        self.records.get(key)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &QueryRecord> {
        self.records.values()
    }

    pub fn keys_for_model<'a>(&'a self, model_id: &'a str) -> impl Iterator<Item = &'a QueryKey> + 'a {
        self.records.keys().filter(move |k| k.model_id == model_id)
    }

    /// Append a record. A key may only be re-recorded when its previous
    /// record was a terminal failure.
    pub fn insert(&mut self, record: QueryRecord) -> Result<(), StorageError> {
        let key = record.key();
        if let Some(prev) = self.records.get(&key) {
            if prev.transport_status != TransportStatus::Failed {
                return Ok(());
            }
        }
        if let Some(w) = self.writer.as_mut() {
            let path = self.path.clone().unwrap_or_default();
            let line = serde_json::to_string(&record).expect("record serializes");
            w.write_all(line.as_bytes())
                .and_then(|_| w.write_all(b"\n"))
                .map_err(|source| StorageError::Io { path, source })?;
        }
        self.records.insert(key, record);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), StorageError> {
        if let Some(w) = self.writer.as_mut() {
            let path = self.path.clone().unwrap_or_default();
            w.flush().map_err(|source| StorageError::Io { path, source })?;
        }
        Ok(())
    }

    /// Drop all in-memory records for a model (on-disk lines are untouched).
    pub fn evict_model(&mut self, model_id: &str) {
        self.records.retain(|k, _| k.model_id != model_id);
    }
}

impl Drop for QueryCache {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

fn insert_loaded(records: &mut HashMap<QueryKey, QueryRecord>, rec: QueryRecord) -> Result<(), String> {
    let key = rec.key();
    match records.get(&key) {
        Some(prev) if prev.transport_status != TransportStatus::Failed => {
            Err(format!("duplicate key {key} after a successful record"))
        }
        _ => {
            records.insert(key, rec);
            Ok(())
        }
    }
}

fn ends_with_newline(path: &Path) -> std::io::Result<bool> {
    use std::io::Read;
    let mut f = File::open(path)?;
    let len = f.metadata()?.len();
    if len == 0 {
        return Ok(true);
    }
    f.seek(SeekFrom::Start(len - 1))?;
    let mut b = [0u8; 1];
    f.read_exact(&mut b)?;
    Ok(b[0] == b'\n')
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(position: usize, status: TransportStatus) -> QueryRecord {
        QueryRecord {
            model_id: "m".into(),
            text_id: "t".into(),
            position,
            length: 4,
            template_id: 1,
            raw_response: "word".into(),
            normalized_answer: if status == TransportStatus::Failed { String::new() } else { "word".into() },
            correct: status != TransportStatus::Failed,
            timestamp_ms: 0,
            transport_status: status,
            attempts: 1,
        }
    }

    #[test]
    fn reopen_restores_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        {
            let mut c = QueryCache::open(&path).unwrap();
            c.insert(rec(5, TransportStatus::Ok)).unwrap();
            c.insert(rec(6, TransportStatus::Ok)).unwrap();
        }
        let c = QueryCache::open(&path).unwrap();
        assert_eq!(c.len(), 2);
        let line = std::fs::read_to_string(&path).unwrap();
        assert!(line.starts_with("{\"model_id\":\"m\",\"text_id\":\"t\",\"position\":5,\"length\":4,\"template_id\":1,"));
    }

    #[test]
    fn corrupt_middle_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let good = serde_json::to_string(&rec(5, TransportStatus::Ok)).unwrap();
        std::fs::write(&path, format!("{good}\nnot json\n{good}\n")).unwrap();
        let err = QueryCache::open(&path).unwrap_err();
        assert!(matches!(err, StorageError::Corrupt { line: 2, .. }), "{err}");
    }

    #[test]
    fn torn_tail_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let good = serde_json::to_string(&rec(5, TransportStatus::Ok)).unwrap();
        std::fs::write(&path, format!("{good}\n{{\"model_id\":\"m\",\"te")).unwrap();
        {
            let mut c = QueryCache::open(&path).unwrap();
            assert_eq!(c.len(), 1);
            c.insert(rec(7, TransportStatus::Ok)).unwrap();
        }
        let c = QueryCache::open(&path).unwrap();
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn failed_records_can_be_superseded() {
        let mut c = QueryCache::in_memory();
        c.insert(rec(5, TransportStatus::Failed)).unwrap();
        c.insert(rec(5, TransportStatus::Ok)).unwrap();
        assert!(c.get(&rec(5, TransportStatus::Ok).key()).unwrap().correct);
        // But a good record is never overwritten.
        c.insert(rec(5, TransportStatus::Failed)).unwrap();
        assert!(c.get(&rec(5, TransportStatus::Ok).key()).unwrap().correct);
    }

    #[test]
    fn duplicate_successful_key_on_disk_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let good = serde_json::to_string(&rec(5, TransportStatus::Ok)).unwrap();
        std::fs::write(&path, format!("{good}\n{good}\n")).unwrap();
        assert!(matches!(QueryCache::open(&path), Err(StorageError::Corrupt { line: 2, .. })));
    }
}
