use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

/// How a gateway uses the shared response cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    #[default]
    ReadWrite,
    /// Always query the backend, but remember the answers.
    WriteOnly,
    Off,
}

impl CacheMode {
    pub(crate) fn reads(self) -> bool {
        self == CacheMode::ReadWrite
    }

    pub(crate) fn writes(self) -> bool {
        self != CacheMode::Off
    }
}

/// Content-addressed response cache: an in-memory map, optionally persisted
/// as one file per key under a directory.
#[derive(Debug)]
pub struct ResponseCache {
    entries: Mutex<HashMap<String, Vec<u8>>>,
    dir: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            entries: Mutex::new(HashMap::new()),
            dir: None,
        }
    }

    pub fn persistent(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            entries: Mutex::new(HashMap::new()),
            dir: Some(dir),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn file(&self, key: &str) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(&key[..2]).join(format!("{key}.json")))
    }

    pub fn get(&self, key: &str) -> Option<Vec<u8>> {
        if let Some(v) = self.entries.lock().expect("cache poisoned").get(key) {
            return Some(v.clone());
        }
        let bytes = std::fs::read(self.file(key)?).ok()?;
        self.entries
            .lock()
            .expect("cache poisoned")
            .insert(key.to_string(), bytes.clone());
        Some(bytes)
    }

    pub fn put(&self, key: &str, value: Vec<u8>) -> std::io::Result<()> {
        if let Some(path) = self.file(key) {
            let parent = path.parent().expect("cache file has a parent");
            std::fs::create_dir_all(parent)?;
            let tmp = path.with_extension(format!("tmp{}", std::process::id()));
            std::fs::write(&tmp, &value)?;
            std::fs::rename(&tmp, &path)?;
        }
        self.entries
            .lock()
            .expect("cache poisoned")
            .insert(key.to_string(), value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
