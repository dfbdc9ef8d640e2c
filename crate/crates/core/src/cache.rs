//! On-disk cache for datasets derived from a stage-1 model (fine-tuning
//! residuals, stop-classifier residuals, stage-2 cue pairs).
//!
//! Entries are keyed by a SHA-256 over everything the derivation reads, so a
//! stale entry can only be hit if the inputs are byte-identical. A corrupt
//! entry is treated as a miss and rewritten.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mixsim::Example;

pub const CACHE_ENV: &str = "CORFSEP_CACHE";

#[derive(Clone, Debug, Default)]
pub struct DerivedCache {
    dir: Option<PathBuf>,
}

/// Incremental cache key.
#[derive(Clone, Default)]
pub struct KeyBuilder(Sha256);

impl KeyBuilder {
    pub fn new(kind: &str) -> Self {
        let mut k = KeyBuilder(Sha256::new());
        k.text(kind);
        k
    }

    pub fn text(&mut self, s: &str) -> &mut Self {
        self.0.update((s.len() as u64).to_le_bytes());
        self.0.update(s.as_bytes());
        self
    }

    pub fn samples(&mut self, x: &[f64]) -> &mut Self {
        self.0.update((x.len() as u64).to_le_bytes());
        for v in x {
            self.0.update(v.to_bits().to_le_bytes());
        }
        self
    }

    pub fn examples(&mut self, items: &[Example]) -> &mut Self {
        self.0.update((items.len() as u64).to_le_bytes());
        for ex in items {
            self.samples(&ex.mixture);
            self.0.update((ex.sources.len() as u64).to_le_bytes());
            for s in &ex.sources {
                self.samples(s);
            }
            for id in &ex.speaker_ids {
                self.text(id);
            }
        }
        self
    }

    pub fn finish(&self) -> String {
        self.0.clone().finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl DerivedCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        DerivedCache { dir }
    }

    /// Caching is enabled iff `CORFSEP_CACHE` names a directory.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Returns the cached value for `key`, or computes and stores it.
    pub fn get_or_compute<T, F>(&self, key: &KeyBuilder, compute: F) -> Result<T>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T>,
    {
        let Some(dir) = &self.dir else {
            return compute();
        };
        let path = dir.join(format!("{}.bin", key.finish()));
        if let Ok(bytes) = std::fs::read(&path) {
            if let Ok(v) = bincode::deserialize(&bytes) {
                return Ok(v);
            }
        }
        let value = compute()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes = bincode::serialize(&value).map_err(|e| Error::Config(format!("cache encoding failed: {e}")))?;
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(value)
    }
}
