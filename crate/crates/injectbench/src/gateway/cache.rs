//! On-disk completion cache.
//!
//! One JSON file per request digest (see [`super::cache_key`]), each holding
//! the request alongside its response so entries are auditable. Writes go to
//! a unique temp file first and are renamed into place, so a crash mid-write
//! can never leave a truncated entry under a valid key; unreadable entries
//! are treated as misses and overwritten.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{cache_key, ChatRequest, ChatResponse, GatewayError, ModelBackend};

/// A cached completion with the request that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request: ChatRequest,
    pub response: ChatResponse,
}

/// Directory of request-keyed completion files.
#[derive(Debug, Clone)]
pub struct DiskCache {
    dir: PathBuf,
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl DiskCache {
    /// Opens (and creates, if needed) a cache directory.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|source| GatewayError::Cache {
            context: format!("creating {}", dir.display()),
            source,
        })?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Looks a key up; unreadable or unparseable entries count as misses.
    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        let text = std::fs::read_to_string(self.path_for(key)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Stores an entry atomically (write temp file, then rename).
    pub fn put(&self, key: &str, entry: &CacheEntry) -> Result<(), GatewayError> {
        let final_path = self.path_for(key);
        let temp_path = self.dir.join(format!(
            "{key}.tmp.{}.{}",
            std::process::id(),
            TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let json = serde_json::to_string(entry).expect("cache entries are always serializable");
        std::fs::write(&temp_path, json).map_err(|source| GatewayError::Cache {
            context: format!("writing {}", temp_path.display()),
            source,
        })?;
        std::fs::rename(&temp_path, &final_path).map_err(|source| GatewayError::Cache {
            context: format!("renaming into {}", final_path.display()),
            source,
        })
    }

    /// Number of stored entries; handy in tests.
    pub fn len(&self) -> usize {
        std::fs::read_dir(&self.dir)
            .map(|entries| {
                entries
                    .filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|ext| ext == "json"))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Wraps a backend with a [`DiskCache`]. Hits return the stored response with
/// `cached` set; misses fall through and persist the fresh response.
pub struct CachedBackend {
    inner: Arc<dyn ModelBackend>,
    cache: DiskCache,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl CachedBackend {
    pub fn new(inner: Arc<dyn ModelBackend>, cache: DiskCache) -> Self {
        Self {
            inner,
            cache,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }
}

impl ModelBackend for CachedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let key = cache_key(request);
        if let Some(entry) = self.cache.get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(ChatResponse {
                cached: true,
                ..entry.response
            });
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let response = self.inner.complete(request)?;
        self.cache.put(
            &key,
            &CacheEntry {
                request: request.clone(),
                response: ChatResponse {
                    cached: false,
                    ..response.clone()
                },
            },
        )?;
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockBackend, ScriptedBehavior};

    fn cached_mock(dir: &Path) -> (Arc<MockBackend>, CachedBackend) {
        let mock = Arc::new(MockBackend::new(
            "mock",
            ScriptedBehavior::new("answer: {user}"),
        ));
        let cached = CachedBackend::new(mock.clone(), DiskCache::open(dir).unwrap());
        (mock, cached)
    }

    #[test]
    fn second_identical_request_hits_disk_not_backend() {
        let dir = tempfile::tempdir().unwrap();
        let (mock, cached) = cached_mock(dir.path());
        let request = ChatRequest::user_only("mock", "hello");

        let first = cached.complete(&request).unwrap();
        assert!(!first.cached);
        let second = cached.complete(&request).unwrap();
        assert!(second.cached);
        assert_eq!(second.text, first.text);
        assert_eq!(mock.calls(), 1);
        assert_eq!(cached.hits(), 1);
        assert_eq!(cached.misses(), 1);
    }

    #[test]
    fn cache_survives_backend_replacement() {
        let dir = tempfile::tempdir().unwrap();
        let request = ChatRequest::user_only("mock", "hello");
        {
            let (_, cached) = cached_mock(dir.path());
            cached.complete(&request).unwrap();
        }
        // A brand-new backend that would answer differently never gets asked.
        let poisoned = Arc::new(MockBackend::new("mock", ScriptedBehavior::new("WRONG")));
        let cached = CachedBackend::new(poisoned.clone(), DiskCache::open(dir.path()).unwrap());
        let response = cached.complete(&request).unwrap();
        assert_eq!(response.text, "answer: hello");
        assert!(response.cached);
        assert_eq!(poisoned.calls(), 0);
    }

    #[test]
    fn different_requests_get_different_entries() {
        let dir = tempfile::tempdir().unwrap();
        let (_, cached) = cached_mock(dir.path());
        cached
            .complete(&ChatRequest::user_only("mock", "a"))
            .unwrap();
        cached
            .complete(&ChatRequest::user_only("mock", "b"))
            .unwrap();
        cached
            .complete(&ChatRequest::user_only("mock", "a").with_temperature(1.0))
            .unwrap();
        assert_eq!(cached.misses(), 3);
        assert_eq!(DiskCache::open(dir.path()).unwrap().len(), 3);
    }

    #[test]
    fn corrupt_entry_is_a_miss_and_gets_repaired() {
        let dir = tempfile::tempdir().unwrap();
        let request = ChatRequest::user_only("mock", "hello");
        let key = cache_key(&request);
        let cache = DiskCache::open(dir.path()).unwrap();
        std::fs::write(dir.path().join(format!("{key}.json")), "not json").unwrap();
        assert!(cache.get(&key).is_none());

        let (mock, cached) = cached_mock(dir.path());
        let response = cached.complete(&request).unwrap();
        assert!(!response.cached);
        assert_eq!(mock.calls(), 1);
        // The bad entry was overwritten with a good one.
        assert!(cache.get(&key).is_some());
    }

    #[test]
    fn entries_store_request_and_response_together() {
        let dir = tempfile::tempdir().unwrap();
        let (_, cached) = cached_mock(dir.path());
        let request = ChatRequest::user_only("mock", "audit me");
        cached.complete(&request).unwrap();
        let entry = DiskCache::open(dir.path())
            .unwrap()
            .get(&cache_key(&request))
            .unwrap();
        assert_eq!(entry.request, request);
        assert_eq!(entry.response.text, "answer: audit me");
        assert!(!entry.response.cached);
    }
}
