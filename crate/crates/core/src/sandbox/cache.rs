use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{canonical_json, SandboxError};
use crate::types::{JsonObject, ToolRef, ToolResponse};

/// `(provider_id, api_name, canonical args, seed)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub provider_id: String,
    pub api_name: String,
    pub args: String,
    pub seed: u64,
}

impl CacheKey {
    pub fn new(tool: &ToolRef, args: &JsonObject, seed: u64) -> Self {
        Self {
            provider_id: tool.provider_id.clone(),
            api_name: tool.api_name.clone(),
            args: canonical_json(&Value::Object(args.clone())),
            seed,
        }
    }
}

/// One line of the cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub cache_key: CacheKey,
    pub response: ToolResponse,
}

pub struct CallCache {
    entries: Mutex<HashMap<CacheKey, ToolResponse>>,
    file: Mutex<Option<(PathBuf, File)>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SandboxError {
    SandboxError::CacheIo {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

impl CallCache {
    pub fn in_memory() -> Self {
        Self {
            entries: Mutex::new(HashMap::new()),
            file: Mutex::new(None),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    /// Loads `path` if it exists and appends new entries to it.
    pub fn open(path: &Path) -> Result<Self, SandboxError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| io_err(path, e))?;
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| io_err(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord =
                    serde_json::from_str(&line).map_err(|e| io_err(path, format!("line {}: {e}", n + 1)))?;
                entries.insert(rec.cache_key, rec.response);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        Ok(Self {
            entries: Mutex::new(entries),
            file: Mutex::new(Some((path.to_path_buf(), file))),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn get(&self, key: &CacheKey) -> Option<ToolResponse> {
        let hit = self.entries.lock().expect("cache lock").get(key).cloned();
        match hit {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        hit
    }

    pub fn put(&self, key: CacheKey, response: &ToolResponse) -> Result<(), SandboxError> {
        let mut stored = response.clone();
        stored.from_cache = false;
        let mut entries = self.entries.lock().expect("cache lock");
        if entries.contains_key(&key) {
            return Ok(());
        }
        let mut file = self.file.lock().expect("cache file lock");
        if let Some((path, f)) = file.as_mut() {
            let rec = CacheRecord {
                cache_key: key.clone(),
                response: stored.clone(),
            };
            let line = serde_json::to_string(&rec).map_err(|e| io_err(path, e))?;
            writeln!(f, "{line}").map_err(|e| io_err(path, e))?;
        }
        entries.insert(key, stored);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let t = ToolRef::new("p", "a");
        let args = json!({"b": 1, "a": "x"}).as_object().unwrap().clone();
        let resp = ToolResponse::ok(json!({"k": 1}));
        {
            let c = CallCache::open(&path).unwrap();
            c.put(CacheKey::new(&t, &args, 1), &resp).unwrap();
            c.put(CacheKey::new(&t, &args, 1), &resp).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.contains(r#""args":"{\"a\":\"x\",\"b\":1}""#));
        let c = CallCache::open(&path).unwrap();
        assert_eq!(c.get(&CacheKey::new(&t, &args, 1)), Some(resp));
        assert_eq!(c.get(&CacheKey::new(&t, &args, 2)), None);
        assert_eq!((c.hits(), c.misses()), (1, 1));
    }
}
