use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

/// SHA-256 over the JSON array `[model, system, user, temperature]`.
pub fn cache_key(model: &str, system: &str, user: &str, temperature: Option<f64>) -> String {
    let material = serde_json::to_vec(&(model, system, user, temperature)).expect("strings always serialize");
    hex::encode(Sha256::digest(&material))
}

/// Directory of `<key>.txt` files holding raw reply text.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(ResponseCache { dir, locks: Mutex::new(HashMap::new()), hits: AtomicUsize::new(0), misses: AtomicUsize::new(0) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.txt"))
    }

    pub(crate) fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        self.locks.lock().unwrap().entry(key.to_string()).or_default().clone()
    }

    pub fn get(&self, key: &str) -> std::io::Result<Option<String>> {
        match fs::read_to_string(self.path(key)) {
            Ok(text) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                Ok(Some(text))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// Writes through a temporary file and a rename, so readers never see a
    /// partial entry.
    pub fn put(&self, key: &str, text: &str) -> std::io::Result<()> {
        let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        let tmp = self.dir.join(format!(".{key}.{}.{n}.tmp", std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(text.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.path(key))
    }

    pub fn len(&self) -> std::io::Result<usize> {
        Ok(fs::read_dir(&self.dir)?
            .filter_map(Result::ok)
            .filter(|e| e.file_name().to_string_lossy().ends_with(".txt") && !e.file_name().to_string_lossy().starts_with('.'))
            .count())
    }

    pub fn is_empty(&self) -> std::io::Result<bool> {
        Ok(self.len()? == 0)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_depends_on_every_field() {
        let base = cache_key("m", "s", "u", None);
        assert_eq!(base.len(), 64);
        assert_eq!(base, cache_key("m", "s", "u", None));
        for other in [
            cache_key("m2", "s", "u", None),
            cache_key("m", "s2", "u", None),
            cache_key("m", "s", "u2", None),
            cache_key("m", "s", "u", Some(0.0)),
            cache_key("m", "s", "u", Some(0.7)),
            // field boundaries are unambiguous
            cache_key("ms", "", "u", None),
        ] {
            assert_ne!(base, other);
        }
    }

    #[test]
    fn put_get_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let c = ResponseCache::open(dir.path()).unwrap();
        assert_eq!(c.get("k").unwrap(), None);
        c.put("k", "text, with\nnewline").unwrap();
        assert_eq!(c.get("k").unwrap().as_deref(), Some("text, with\nnewline"));
        assert_eq!(c.len().unwrap(), 1);
    }
}
