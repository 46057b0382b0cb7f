use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LlmError;

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Content-addressed response cache: `{dir}/{sha256(key)}.json` holding the
/// key, request, response, and a unix timestamp. Writes go through a temp file
/// and a rename so readers never see partial entries.
#[derive(Debug, Clone)]
pub struct DiskCache {
    dir: PathBuf,
}

#[derive(Serialize)]
struct EntryOut<'a, Q, R> {
    key: &'a serde_json::Value,
    request: &'a Q,
    response: &'a R,
    timestamp: u64,
}

#[derive(Deserialize)]
struct EntryIn<R> {
    key: serde_json::Value,
    response: R,
}

pub fn key_digest(key: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(key).expect("json value serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

impl DiskCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|source| LlmError::Cache {
            path: dir.clone(),
            source,
        })?;
        Ok(DiskCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &serde_json::Value) -> PathBuf {
        self.dir.join(format!("{}.json", key_digest(key)))
    }

    /// Stored response for `key`; unreadable or mismatching entries count as misses.
    pub fn get<R: DeserializeOwned>(&self, key: &serde_json::Value) -> Option<R> {
        let bytes = std::fs::read(self.path_for(key)).ok()?;
        let entry: EntryIn<R> = serde_json::from_slice(&bytes).ok()?;
        (entry.key == *key).then_some(entry.response)
    }

    pub fn put<Q: Serialize, R: Serialize>(
        &self,
        key: &serde_json::Value,
        request: &Q,
        response: &R,
    ) -> Result<(), LlmError> {
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let body = serde_json::to_vec_pretty(&EntryOut {
            key,
            request,
            response,
            timestamp,
        })
        .expect("cache entry serializes");
        let target = self.path_for(key);
        let tmp = self.dir.join(format!(
            ".{}.{}.{}.tmp",
            key_digest(key),
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let io = |source| LlmError::Cache {
            path: target.clone(),
            source,
        };
        std::fs::write(&tmp, body).map_err(io)?;
        std::fs::rename(&tmp, &target).map_err(io)
    }
}
