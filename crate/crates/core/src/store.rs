//! Parameter-keyed dataset persistence.
//!
//! Keys are the SHA-256 of a versioned, sort-keyed, whitespace-free JSON
//! rendering of the generating parameters. On disk:
//!
//! ```text
//! <root>/<first two hex digits>/<key>/meta.json
//! <root>/<first two hex digits>/<key>/payload.bin
//! ```
//!
//! `meta.json` records the SHA-256 of `payload.bin`, which is verified on
//! every read. Writes are staged in `<root>/.staging` and published with a
//! single directory rename, so readers never observe a partial dataset.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const KEY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("parameters are not serializable: {0}")]
    NonSerializable(String),
    #[error("dataset {0} not found")]
    NotFound(String),
    #[error("dataset {0} failed checksum verification")]
    Corrupt(String),
    #[error("dataset {0} already exists with a different payload")]
    Conflict(String),
    #[error("key {key} does not match the metadata parameters (expected {expected})")]
    KeyMismatch { key: String, expected: String },
    #[error("malformed key `{0}`")]
    InvalidKey(String),
    #[error("metadata for {key} is unreadable: {message}")]
    Metadata { key: String, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetKey(String);

impl DatasetKey {
    pub fn parse(s: &str) -> Result<Self, StoreError> {
        if s.len() == 64
            && s.bytes()
                .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
        {
            Ok(DatasetKey(s.to_string()))
        } else {
            Err(StoreError::InvalidKey(s.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for DatasetKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Sort-keyed, whitespace-free JSON.
pub fn canonical_json<T: Serialize + ?Sized>(params: &T) -> Result<String, StoreError> {
    // serde_json's default map is ordered by key, which is what makes this canonical
    let value =
        serde_json::to_value(params).map_err(|e| StoreError::NonSerializable(e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| StoreError::NonSerializable(e.to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn canonical_key<T: Serialize + ?Sized>(params: &T) -> Result<DatasetKey, StoreError> {
    let body = canonical_json(params)?;
    let framed = format!("netcomb-dataset-v{KEY_SCHEMA_VERSION}\n{body}");
    Ok(DatasetKey(sha256_hex(framed.as_bytes())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredMeta {
    pub key: DatasetKey,
    pub kind: String,
    pub params: Value,
    pub created_at_unix: u64,
    pub generator_version: String,
    /// SHA-256 of the payload, hex.
    pub checksum: String,
    pub payload_len: u64,
    #[serde(default)]
    pub extra: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredDataset {
    pub meta: StoredMeta,
    pub payload: Vec<u8>,
}

/// Caller-supplied part of the metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct NewDataset {
    pub kind: String,
    pub params: Value,
    pub generator_version: String,
    pub extra: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub key: DatasetKey,
    pub checksum: String,
    /// False when an identical dataset was already present.
    pub created: bool,
}

#[derive(Debug, Clone)]
pub struct DatasetStore {
    root: PathBuf,
}

static STAGING_COUNTER: AtomicU64 = AtomicU64::new(0);

impl DatasetStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join(".staging"))?;
        Ok(DatasetStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, key: &DatasetKey) -> PathBuf {
        self.root.join(&key.0[..2]).join(&key.0)
    }

    pub fn contains(&self, key: &DatasetKey) -> bool {
        self.dir(key).join("meta.json").is_file()
    }

    pub fn put(
        &self,
        key: &DatasetKey,
        meta: NewDataset,
        payload: &[u8],
    ) -> Result<Receipt, StoreError> {
        let expected = canonical_key(&meta.params)?;
        if &expected != key {
            return Err(StoreError::KeyMismatch {
                key: key.0.clone(),
                expected: expected.0,
            });
        }
        let checksum = sha256_hex(payload);
        if self.contains(key) {
            return self.existing_receipt(key, checksum);
        }
        let stored = StoredMeta {
            key: key.clone(),
            kind: meta.kind,
            params: meta.params,
            created_at_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            generator_version: meta.generator_version,
            checksum: checksum.clone(),
            payload_len: payload.len() as u64,
            extra: meta.extra,
        };
        let staging = self.root.join(".staging").join(format!(
            "{}-{}-{}",
            key.0,
            std::process::id(),
            STAGING_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        fs::create_dir_all(&staging)?;
        fs::write(staging.join("payload.bin"), payload)?;
        let meta_json = serde_json::to_vec_pretty(&stored).map_err(|e| StoreError::Metadata {
            key: key.0.clone(),
            message: e.to_string(),
        })?;
        fs::write(staging.join("meta.json"), meta_json)?;
        let target = self.dir(key);
        fs::create_dir_all(target.parent().expect("shard dir"))?;
        match fs::rename(&staging, &target) {
            Ok(()) => Ok(Receipt {
                key: key.clone(),
                checksum,
                created: true,
            }),
            Err(_) if self.contains(key) => {
                // lost a race with another writer of the same key
                let _ = fs::remove_dir_all(&staging);
                self.existing_receipt(key, checksum)
            }
            Err(e) => {
                let _ = fs::remove_dir_all(&staging);
                Err(e.into())
            }
        }
    }

    fn existing_receipt(&self, key: &DatasetKey, checksum: String) -> Result<Receipt, StoreError> {
        let meta = self.meta(key)?;
        if meta.checksum == checksum {
            Ok(Receipt {
                key: key.clone(),
                checksum,
                created: false,
            })
        } else {
            Err(StoreError::Conflict(key.0.clone()))
        }
    }

    pub fn meta(&self, key: &DatasetKey) -> Result<StoredMeta, StoreError> {
        let path = self.dir(key).join("meta.json");
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound(key.0.clone()))
            }
            Err(e) => return Err(e.into()),
        };
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Metadata {
            key: key.0.clone(),
            message: e.to_string(),
        })
    }

    pub fn get(&self, key: &DatasetKey) -> Result<StoredDataset, StoreError> {
        let meta = self.meta(key)?;
        let payload = fs::read(self.dir(key).join("payload.bin"))?;
        if sha256_hex(&payload) != meta.checksum {
            return Err(StoreError::Corrupt(key.0.clone()));
        }
        Ok(StoredDataset { meta, payload })
    }

    /// Keys whose metadata matches every `(dotted.path, value)` pair.
    pub fn list(&self, filter: &[(String, Value)]) -> Result<Vec<DatasetKey>, StoreError> {
        let mut keys = Vec::new();
        for shard in fs::read_dir(&self.root)? {
            let shard = shard?;
            let name = shard.file_name();
            if name.len() != 2 || !shard.file_type()?.is_dir() {
                continue;
            }
            for entry in fs::read_dir(shard.path())? {
                let Ok(key) = DatasetKey::parse(&entry?.file_name().to_string_lossy()) else {
                    continue;
                };
                let Ok(meta) = self.meta(&key) else { continue };
                let doc = serde_json::to_value(&meta).expect("metadata serializes");
                if filter
                    .iter()
                    .all(|(path, want)| lookup(&doc, path) == Some(want))
                {
                    keys.push(key);
                }
            }
        }
        keys.sort();
        Ok(keys)
    }

    pub fn remove(&self, key: &DatasetKey) -> Result<(), StoreError> {
        match fs::remove_dir_all(self.dir(key)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                Err(StoreError::NotFound(key.0.clone()))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Location of a stored payload, for callers that stream it.
    pub fn payload_path(&self, key: &DatasetKey) -> PathBuf {
        self.dir(key).join("payload.bin")
    }
}

fn lookup<'a>(doc: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(doc, |v, part| v.get(part))
}
