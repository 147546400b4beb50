//! Object storage for runtime artifacts, input data sets, and results.
//!
//! Keys are immutable: a put to an existing key is rejected, which keeps
//! every input fixed for the lifetime of a run. The store optionally mirrors
//! objects to a directory (one file per key, key percent-encoded, sidecar
//! `.meta` with size and digest) so external tools can seed data sets.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("key {0} already exists (store keys are immutable)")]
    KeyExists(String),
    #[error("store is full: capacity {capacity_bytes} bytes, {used_bytes} used, object of {object_bytes} rejected")]
    StorageFull {
        capacity_bytes: u64,
        used_bytes: u64,
        object_bytes: u64,
    },
    #[error("key {0} not found")]
    NotFound(String),
    #[error("store io: {0}")]
    Io(#[from] io::Error),
}

/// Deterministic fetch-latency model applied by the simulation:
/// `ceil(size / bandwidth) + overhead` milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FetchLatencyModel {
    pub bandwidth_bytes_per_ms: u64,
    pub fixed_overhead_ms: u64,
}

impl Default for FetchLatencyModel {
    fn default() -> Self {
        FetchLatencyModel {
            bandwidth_bytes_per_ms: 1024,
            fixed_overhead_ms: 5,
        }
    }
}

impl FetchLatencyModel {
    pub fn fetch_delay_ms(&self, size_bytes: u64) -> u64 {
        let bw = self.bandwidth_bytes_per_ms.max(1);
        size_bytes.div_ceil(bw) + self.fixed_overhead_ms
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ObjectMeta {
    size: u64,
    content_hash: String,
}

#[derive(Clone)]
struct StoredObject {
    bytes: Arc<[u8]>,
    content_hash: String,
}

/// Hex SHA-256 of a byte sequence; the store's content digest.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Percent-encode a store key into a single path component.
fn encode_key(key: &str) -> String {
    let mut out = String::with_capacity(key.len());
    for b in key.bytes() {
        match b {
            b'a'..=b'z' | b'A'..=b'Z' | b'0'..=b'9' | b'.' | b'_' | b'-' => out.push(b as char),
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

fn decode_key(encoded: &str) -> Option<String> {
    let mut bytes = Vec::with_capacity(encoded.len());
    let mut it = encoded.bytes();
    while let Some(b) = it.next() {
        if b == b'%' {
            let hi = it.next()?;
            let lo = it.next()?;
            let hex = [hi, lo];
            let s = std::str::from_utf8(&hex).ok()?;
            bytes.push(u8::from_str_radix(s, 16).ok()?);
        } else {
            bytes.push(b);
        }
    }
    String::from_utf8(bytes).ok()
}

/// Shared object store; per-key linearizable, safe for concurrent use.
pub struct ObjectStore {
    objects: RwLock<HashMap<String, StoredObject>>,
    used_bytes: RwLock<u64>,
    capacity_bytes: Option<u64>,
    latency: FetchLatencyModel,
    persist_dir: Option<PathBuf>,
}

impl ObjectStore {
    pub fn new() -> Self {
        Self::with_options(FetchLatencyModel::default(), None, None).unwrap()
    }

    pub fn with_options(
        latency: FetchLatencyModel,
        capacity_bytes: Option<u64>,
        persist_dir: Option<PathBuf>,
    ) -> Result<Self, StoreError> {
        let store = ObjectStore {
            objects: RwLock::new(HashMap::new()),
            used_bytes: RwLock::new(0),
            capacity_bytes,
            latency,
            persist_dir,
        };
        if store.persist_dir.is_some() {
            store.load_persisted()?;
        }
        Ok(store)
    }

    fn load_persisted(&self) -> Result<(), StoreError> {
        let dir = self.persist_dir.as_ref().unwrap();
        std::fs::create_dir_all(dir)?;
        let mut objects = self.objects.write().unwrap();
        let mut used = self.used_bytes.write().unwrap();
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.ends_with(".meta") {
                continue;
            }
            let Some(key) = decode_key(&name) else { continue };
            let bytes = std::fs::read(entry.path())?;
            *used += bytes.len() as u64;
            objects.insert(
                key,
                StoredObject {
                    content_hash: content_hash(&bytes),
                    bytes: bytes.into(),
                },
            );
        }
        Ok(())
    }

    fn persist(&self, key: &str, bytes: &[u8], hash: &str) -> Result<(), StoreError> {
        let Some(dir) = &self.persist_dir else {
            return Ok(());
        };
        let encoded = encode_key(key);
        std::fs::write(dir.join(&encoded), bytes)?;
        let meta = ObjectMeta {
            size: bytes.len() as u64,
            content_hash: hash.to_string(),
        };
        std::fs::write(
            dir.join(format!("{encoded}.meta")),
            serde_json::to_vec(&meta).expect("meta serializes"),
        )?;
        Ok(())
    }

    /// Store `bytes` under `key`. Returns the content digest.
    pub fn put(&self, key: &str, bytes: impl Into<Vec<u8>>) -> Result<String, StoreError> {
        let bytes: Vec<u8> = bytes.into();
        let mut objects = self.objects.write().unwrap();
        if objects.contains_key(key) {
            return Err(StoreError::KeyExists(key.to_string()));
        }
        let mut used = self.used_bytes.write().unwrap();
        if let Some(cap) = self.capacity_bytes {
            if *used + bytes.len() as u64 > cap {
                return Err(StoreError::StorageFull {
                    capacity_bytes: cap,
                    used_bytes: *used,
                    object_bytes: bytes.len() as u64,
                });
            }
        }
        let hash = content_hash(&bytes);
        self.persist(key, &bytes, &hash)?;
        *used += bytes.len() as u64;
        objects.insert(
            key.to_string(),
            StoredObject {
                bytes: bytes.into(),
                content_hash: hash.clone(),
            },
        );
        Ok(hash)
    }

    /// Fetch the bytes stored under `key`.
    pub fn get(&self, key: &str) -> Result<Arc<[u8]>, StoreError> {
        self.objects
            .read()
            .unwrap()
            .get(key)
            .map(|o| Arc::clone(&o.bytes))
            .ok_or_else(|| StoreError::NotFound(key.to_string()))
    }

    /// Size in bytes of the object under `key`.
    pub fn size_of(&self, key: &str) -> Result<u64, StoreError> {
        self.objects
            .read()
            .unwrap()
            .get(key)
            .map(|o| o.bytes.len() as u64)
            .ok_or_else(|| StoreError::NotFound(key.to_string()))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.objects.read().unwrap().contains_key(key)
    }

    /// Content digest of the object under `key`.
    pub fn hash_of(&self, key: &str) -> Result<String, StoreError> {
        self.objects
            .read()
            .unwrap()
            .get(key)
            .map(|o| o.content_hash.clone())
            .ok_or_else(|| StoreError::NotFound(key.to_string()))
    }

    /// All keys with the given prefix, lexicographic order.
    pub fn list(&self, prefix: &str) -> Vec<String> {
        let mut keys: Vec<String> = self
            .objects
            .read()
            .unwrap()
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        keys.sort();
        keys
    }

    /// Simulated fetch delay for the object under `key`.
    pub fn fetch_delay_ms(&self, key: &str) -> Result<u64, StoreError> {
        Ok(self.latency.fetch_delay_ms(self.size_of(key)?))
    }

    pub fn latency_model(&self) -> FetchLatencyModel {
        self.latency
    }
}

impl Default for ObjectStore {
    fn default() -> Self {
        Self::new()
    }
}
