//! Checkpoint files.
//!
//! A checkpoint is one JSON document:
//!
//! ```json
//! {
//!   "format": "trackgroup-checkpoint/1",
//!   "seed": 7,
//!   "meta": { "config": "..." },
//!   "params": [
//!     { "name": "encoder.w_ih", "shape": [4, 128], "data": [0.01, ...] }
//!   ]
//! }
//! ```
//!
//! `data` is the row-major buffer. Floats are written with shortest
//! round-trip formatting and parsed with exact rounding, so a save/load cycle
//! reproduces every parameter bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NdError, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "trackgroup-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub seed: u64,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_store(store: &ParameterStore, seed: u64, meta: BTreeMap<String, String>) -> Self {
        let params = store
            .iter()
            .map(|(name, p)| ParamRecord {
                name: name.to_string(),
                shape: p.value().shape().to_vec(),
                data: p.value().data().to_vec(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            seed,
            meta,
            params,
        }
    }

    /// Rebuild a store, validating names and shapes against `expected`.
    pub fn to_store(&self, expected: &ParameterStore) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        for rec in &self.params {
            let t = Tensor::new(rec.shape.clone(), rec.data.clone())
                .map_err(|e| NdError::Checkpoint(format!("parameter `{}`: {e}", rec.name)))?;
            store
                .insert(rec.name.clone(), t)
                .map_err(|e| NdError::Checkpoint(e.to_string()))?;
        }
        expected.check_layout(&store)?;
        Ok(store)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| NdError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(NdError::Checkpoint(format!(
                "unsupported format `{}` (expected `{CHECKPOINT_FORMAT}`)",
                ck.format
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::from_fn(2, 3, |r, c| (r as f64 + 0.1) / (c as f64 + 3.0)))
            .unwrap();
        s.insert("b", Tensor::scalar(std::f64::consts::PI)).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let ck = Checkpoint::from_store(&s, 7, BTreeMap::new());
        let back = Checkpoint::from_json(&ck.to_json()).unwrap().to_store(&s).unwrap();
        for (name, p) in s.iter() {
            assert_eq!(p.value(), back.get(name).unwrap());
        }
    }

    #[test]
    fn rejects_wrong_format_and_layout() {
        let s = store();
        let mut ck = Checkpoint::from_store(&s, 1, BTreeMap::new());
        ck.params[0].shape = vec![3, 2];
        assert!(ck.to_store(&s).is_err());
        ck.format = "other/9".into();
        assert!(Checkpoint::from_json(&ck.to_json()).is_err());
    }
}
