//! Self-describing JSON checkpoint container.
//!
//! ```json
//! { "format": "corfsep-ckpt-v1", "kind": "stage1_separator",
//!   "config": {...}, "tensors": [{"name": ..., "shape": [...], "data": [...]}],
//!   "train_state": {...}, "linked_stage1_digest": null }
//! ```
//!
//! `f64` values survive the JSON round trip bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;

pub const CHECKPOINT_FORMAT: &str = "corfsep-ckpt-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Stage1Separator,
    StopClassifier,
    Stage2Extractor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub best_valid_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
    /// Weights that are stored for self-containment but never trained
    /// (e.g. an encoder borrowed from another model).
    #[serde(default)]
    pub frozen: Vec<TensorRecord>,
    pub train_state: Option<TrainState>,
    pub linked_stage1_digest: Option<String>,
}

pub(crate) fn records(store: &ParamStore) -> Vec<TensorRecord> {
    store
        .named()
        .into_iter()
        .map(|(name, shape, data)| TensorRecord { name, shape, data })
        .collect()
}

pub(crate) fn load_records(store: &mut ParamStore, records: &[TensorRecord]) -> Result<()> {
    let named: Vec<_> = records
        .iter()
        .map(|r| {
            if r.shape.iter().product::<usize>() != r.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?} but {} values",
                    r.name,
                    r.shape,
                    r.data.len()
                )));
            }
            Ok((r.name.clone(), r.shape.clone(), r.data.clone()))
        })
        .collect::<Result<_>>()?;
    store.load_named(&named)
}

impl Checkpoint {
    pub fn new(kind: ModelKind, config: serde_json::Value, store: &ParamStore) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_owned(),
            kind,
            config,
            tensors: records(store),
            frozen: Vec::new(),
            train_state: None,
            linked_stage1_digest: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(bytes)
            .map_err(|e| Error::Checkpoint(format!("cannot parse checkpoint: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format `{}` (expected `{CHECKPOINT_FORMAT}`)",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(digest_bytes(&self.to_bytes()?))
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    let hash = Sha256::digest(bytes);
    hash.iter().map(|b| format!("{b:02x}")).collect()
}
