//! Trained-model cache keyed by a hash of the training-relevant config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct CheckpointCache {
    dir: PathBuf,
}

impl CheckpointCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// First 16 hex digits of SHA-256 over the kind and the canonical JSON
    /// of `key` (object keys sorted).
    pub fn key(kind: &str, key: &impl Serialize) -> Result<String> {
        let canonical = serde_json::to_vec(&canonical(serde_json::to_value(key)?))?;
        let mut h = Sha256::new();
        h.update(kind.as_bytes());
        h.update([0]);
        h.update(&canonical);
        Ok(h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    pub fn path(&self, kind: &str, key: &impl Serialize) -> Result<PathBuf> {
        Ok(self.dir.join(format!("{kind}-{}.ckpt", Self::key(kind, key)?)))
    }
}

/// Rebuilds objects with sorted keys, whatever map ordering serde_json was
/// built with.
fn canonical(v: Value) -> Value {
    match v {
        Value::Object(m) => {
            let sorted: BTreeMap<String, Value> = m.into_iter().map(|(k, v)| (k, canonical(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(a) => Value::Array(a.into_iter().map(canonical).collect()),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn key_ignores_field_order_but_not_values() {
        let a = CheckpointCache::key("ddpm", &json!({"a": 1, "b": [1, 2]})).unwrap();
        let b = CheckpointCache::key("ddpm", &json!({"b": [1, 2], "a": 1})).unwrap();
        let c = CheckpointCache::key("ddpm", &json!({"a": 2, "b": [1, 2]})).unwrap();
        let d = CheckpointCache::key("learned_codec", &json!({"a": 1, "b": [1, 2]})).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_eq!(a.len(), 16);
    }
}
