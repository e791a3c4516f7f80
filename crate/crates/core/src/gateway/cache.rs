//! Content-addressed response cache.
//!
//! Entries live in an in-memory index and, when a directory is configured,
//! in an append-only JSONL ledger (`responses.jsonl`) that is replayed on
//! open. A torn final line from a crash is skipped with a warning.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::GatewayError;

const LEDGER: &str = "responses.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CachedValue {
    Chat {
        text: String,
        prompt_tokens: u64,
        completion_tokens: u64,
    },
    Embedding {
        vector: Vec<f64>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct LedgerRow {
    key: String,
    #[serde(flatten)]
    value: CachedValue,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub entries: u64,
    pub hits: u64,
    pub misses: u64,
    /// Serialized size of the live entries.
    pub bytes: u64,
}

#[derive(Debug, Default)]
struct Index {
    values: HashMap<String, (CachedValue, u64)>,
    bytes: u64,
}

#[derive(Debug)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    index: Mutex<Index>,
    ledger: Mutex<Option<File>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            index: Mutex::new(Index::default()),
            ledger: Mutex::new(None),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    /// Open (creating if needed) a ledger-backed cache in `dir`.
    pub fn open(dir: &Path) -> Result<Self, GatewayError> {
        let cache_err = |e: std::io::Error| GatewayError::Cache(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(cache_err)?;
        let path = dir.join(LEDGER);
        let mut index = Index::default();
        if path.exists() {
            let file = File::open(&path).map_err(cache_err)?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(cache_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<LedgerRow>(&line) {
                    Ok(row) => {
                        let size = line.len() as u64 + 1;
                        if let Some((_, old)) = index.values.insert(row.key, (row.value, size)) {
                            index.bytes -= old;
                        }
                        index.bytes += size;
                    }
                    Err(e) => log::warn!("{}:{}: skipping unreadable cache row: {e}", path.display(), i + 1),
                }
            }
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(cache_err)?;
        // terminate a torn tail so the next append starts on its own line
        let raw = fs::read(&path).map_err(cache_err)?;
        if raw.last().is_some_and(|&b| b != b'\n') {
            file.write_all(b"\n").map_err(cache_err)?;
        }
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            index: Mutex::new(index),
            ledger: Mutex::new(Some(file)),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Look up `key`, counting a hit or miss.
    pub fn get(&self, key: &str) -> Option<CachedValue> {
        let found = self
            .index
            .lock()
            .expect("cache index poisoned")
            .values
            .get(key)
            .map(|(v, _)| v.clone());
        match found {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        found
    }

    pub fn put(&self, key: &str, value: CachedValue) -> Result<(), GatewayError> {
        let row = LedgerRow {
            key: key.to_string(),
            value,
        };
        let mut line = serde_json::to_string(&row).expect("ledger row serializes");
        line.push('\n');
        if let Some(file) = self.ledger.lock().expect("cache ledger poisoned").as_mut() {
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| GatewayError::Cache(e.to_string()))?;
        }
        let size = line.len() as u64;
        let mut index = self.index.lock().expect("cache index poisoned");
        if let Some((_, old)) = index.values.insert(row.key, (row.value, size)) {
            index.bytes -= old;
        }
        index.bytes += size;
        Ok(())
    }

    /// Drop every entry, truncating the ledger. Hit/miss counters are kept.
    pub fn clear(&self) -> Result<(), GatewayError> {
        let mut ledger = self.ledger.lock().expect("cache ledger poisoned");
        if let Some(dir) = &self.dir {
            let file = File::create(dir.join(LEDGER)).map_err(|e| GatewayError::Cache(e.to_string()))?;
            drop(file);
            *ledger = Some(
                OpenOptions::new()
                    .append(true)
                    .open(dir.join(LEDGER))
                    .map_err(|e| GatewayError::Cache(e.to_string()))?,
            );
        }
        let mut index = self.index.lock().expect("cache index poisoned");
        index.values.clear();
        index.bytes = 0;
        Ok(())
    }

    pub fn stats(&self) -> CacheStats {
        let index = self.index.lock().expect("cache index poisoned");
        CacheStats {
            entries: index.values.len() as u64,
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            bytes: index.bytes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chat(text: &str) -> CachedValue {
        CachedValue::Chat {
            text: text.into(),
            prompt_tokens: 1,
            completion_tokens: 1,
        }
    }

    #[test]
    fn counters() {
        let c = ResponseCache::in_memory();
        assert_eq!(c.stats(), CacheStats::default());
        assert!(c.get("k").is_none());
        c.put("k", chat("v")).unwrap();
        assert_eq!(c.get("k"), Some(chat("v")));
        let s = c.stats();
        assert_eq!((s.entries, s.hits, s.misses), (1, 1, 1));
        assert!(s.bytes > 0);
        c.clear().unwrap();
        let s = c.stats();
        assert_eq!((s.entries, s.bytes), (0, 0));
        assert_eq!((s.hits, s.misses), (1, 1));
    }

    #[test]
    fn ledger_replays_and_survives_torn_line() {
        let dir = tempfile::tempdir().unwrap();
        {
            let c = ResponseCache::open(dir.path()).unwrap();
            c.put("a", chat("x")).unwrap();
            c.put("b", CachedValue::Embedding { vector: vec![1.0, 2.0] }).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(dir.path().join(LEDGER)).unwrap();
        f.write_all(b"{\"key\":\"c\",\"kin").unwrap();
        drop(f);

        let c = ResponseCache::open(dir.path()).unwrap();
        assert_eq!(c.stats().entries, 2);
        assert_eq!(c.get("a"), Some(chat("x")));
        assert_eq!(c.get("b"), Some(CachedValue::Embedding { vector: vec![1.0, 2.0] }));

        c.clear().unwrap();
        drop(c);
        let c = ResponseCache::open(dir.path()).unwrap();
        assert_eq!(c.stats().entries, 0);
    }
}
