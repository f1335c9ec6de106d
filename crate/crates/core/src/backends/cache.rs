//! Append-only, content-addressed response cache.
//!
//! Layout: `<root>/<kind>/<first two hex>/<digest>.json`, each file holding
//! `{request_digest, response, created_at}`. Entries are written to a
//! temporary file and renamed into place, so readers never observe a
//! partial entry. Writers for the same key are serialized by a striped lock.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, BackendKind};

const LOCK_STRIPES: usize = 64;
const TMP_SUFFIX: &str = ".tmp";

/// SHA-256 over `(kind, model_tag, canonical request bytes)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    digest: String,
}

impl CacheKey {
    pub fn new(kind: BackendKind, model_tag: &str, payload: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update(kind.as_str().as_bytes());
        h.update([0]);
        h.update(model_tag.as_bytes());
        h.update([0]);
        h.update(payload);
        Self {
            digest: hex::encode(h.finalize()),
        }
    }

    pub fn for_request<P: Serialize>(
        kind: BackendKind,
        model_tag: &str,
        payload: &P,
    ) -> Result<Self, BackendError> {
        let bytes = serde_json::to_vec(payload)
            .map_err(|e| BackendError::Cache(format!("cannot canonicalize request: {e}")))?;
        Ok(Self::new(kind, model_tag, &bytes))
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    fn stripe(&self) -> usize {
        usize::from_str_radix(&self.digest[..2], 16).unwrap_or(0) % LOCK_STRIPES
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request_digest: String,
    pub response: serde_json::Value,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize)]
pub struct KindStats {
    pub entries: u64,
    pub bytes: u64,
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize)]
pub struct GcReport {
    pub removed_stale: u64,
    pub removed_corrupt: u64,
    pub removed_temp: u64,
    pub kept: u64,
}

pub struct DiskCache {
    root: PathBuf,
    locks: Vec<Mutex<()>>,
    tmp_counter: AtomicU64,
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn io_err(path: &Path, e: io::Error) -> BackendError {
    BackendError::Cache(format!("{}: {e}", path.display()))
}

impl DiskCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
        Ok(Self {
            root,
            locks: (0..LOCK_STRIPES).map(|_| Mutex::new(())).collect(),
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_path(&self, kind: BackendKind, key: &CacheKey) -> PathBuf {
        self.root
            .join(kind.as_str())
            .join(&key.digest()[..2])
            .join(format!("{}.json", key.digest()))
    }

    fn read_entry(path: &Path) -> Option<CacheEntry> {
        let bytes = fs::read(path).ok()?;
        match serde_json::from_slice(&bytes) {
            Ok(e) => Some(e),
            Err(err) => {
                log::warn!("ignoring corrupt cache entry {}: {err}", path.display());
                None
            }
        }
    }

    pub fn lookup<R: DeserializeOwned>(
        &self,
        kind: BackendKind,
        key: &CacheKey,
    ) -> Option<R> {
        let entry = Self::read_entry(&self.entry_path(kind, key))?;
        if entry.request_digest != key.digest() {
            return None;
        }
        serde_json::from_value(entry.response).ok()
    }

    /// Returns the cached response for the request, computing and storing it
    /// on a miss. The flag is `true` on a hit. A miss returns the value as
    /// read back from its stored form, so hits and misses agree bit for bit.
    pub fn get_or_compute<R, P>(
        &self,
        kind: BackendKind,
        model_tag: &str,
        payload: &P,
        compute: impl FnOnce() -> Result<R, BackendError>,
    ) -> Result<(R, bool), BackendError>
    where
        R: Serialize + DeserializeOwned,
        P: Serialize,
    {
        let key = CacheKey::for_request(kind, model_tag, payload)?;
        if let Some(v) = self.lookup(kind, &key) {
            return Ok((v, true));
        }
        let _guard = self.locks[key.stripe()]
            .lock()
            .unwrap_or_else(|poisoned| poisoned.into_inner());
        if let Some(v) = self.lookup(kind, &key) {
            return Ok((v, true));
        }
        let value = compute()?;
        let entry = CacheEntry {
            request_digest: key.digest().to_string(),
            response: serde_json::to_value(&value)
                .map_err(|e| BackendError::Cache(format!("cannot serialize response: {e}")))?,
            created_at: now_secs(),
        };
        let bytes = serde_json::to_vec(&entry)
            .map_err(|e| BackendError::Cache(format!("cannot serialize entry: {e}")))?;
        self.write_atomic(&self.entry_path(kind, &key), &bytes)?;
        let stored: CacheEntry = serde_json::from_slice(&bytes)
            .map_err(|e| BackendError::Cache(format!("entry does not round-trip: {e}")))?;
        let value = serde_json::from_value(stored.response)
            .map_err(|e| BackendError::Cache(format!("response does not round-trip: {e}")))?;
        Ok((value, false))
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<(), BackendError> {
        let dir = path.parent().expect("entry path has a parent");
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = dir.join(format!(
            ".{}.{}.{n}{TMP_SUFFIX}",
            path.file_name().unwrap().to_string_lossy(),
            std::process::id()
        ));
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| io_err(path, e))
    }

    fn walk_files(&self) -> Vec<(BackendKind, PathBuf)> {
        let mut out = Vec::new();
        for kind in BackendKind::ALL {
            let Ok(shards) = fs::read_dir(self.root.join(kind.as_str())) else {
                continue;
            };
            for shard in shards.flatten() {
                let Ok(files) = fs::read_dir(shard.path()) else {
                    continue;
                };
                for f in files.flatten() {
                    out.push((kind, f.path()));
                }
            }
        }
        out.sort();
        out
    }

    pub fn stats(&self) -> BTreeMap<String, KindStats> {
        let mut stats: BTreeMap<String, KindStats> = BackendKind::ALL
            .iter()
            .map(|k| (k.as_str().to_string(), KindStats::default()))
            .collect();
        for (kind, path) in self.walk_files() {
            if path.to_string_lossy().ends_with(TMP_SUFFIX) {
                continue;
            }
            let s = stats.get_mut(kind.as_str()).unwrap();
            s.entries += 1;
            s.bytes += fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
        }
        stats
    }

    /// Removes leftover temp files, unreadable entries, and (when `max_age`
    /// is given) entries older than it.
    pub fn gc(&self, max_age: Option<Duration>) -> Result<GcReport, BackendError> {
        let now = now_secs();
        let mut report = GcReport::default();
        for (_, path) in self.walk_files() {
            let remove = |r: &mut u64| -> Result<(), BackendError> {
                fs::remove_file(&path).map_err(|e| io_err(&path, e))?;
                *r += 1;
                Ok(())
            };
            if path.to_string_lossy().ends_with(TMP_SUFFIX) {
                remove(&mut report.removed_temp)?;
                continue;
            }
            match Self::read_entry(&path) {
                None => remove(&mut report.removed_corrupt)?,
                Some(entry) => match max_age {
                    Some(age) if now.saturating_sub(entry.created_at) > age.as_secs() => {
                        remove(&mut report.removed_stale)?
                    }
                    _ => report.kept += 1,
                },
            }
        }
        Ok(report)
    }
}
