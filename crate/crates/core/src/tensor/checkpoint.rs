//! Versioned JSON checkpoints.
//!
//! ```json
//! {"format_version":1,
//!  "arrays":{"backbone.0.weight":{"shape":[8,3,3,3],"data":[...]}},
//!  "meta":{...}}
//! ```
//!
//! Floats are written in shortest round-trip decimal form, so a load of a
//! saved checkpoint reproduces every value exactly. `meta` is free-form and
//! optional.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayRecord {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    arrays: BTreeMap<String, ArrayRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn from_params(params: &ParamSet, meta: Option<serde_json::Value>) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            arrays: params
                .iter()
                .map(|(k, t)| {
                    (
                        k.to_string(),
                        ArrayRecord {
                            shape: t.shape().to_vec(),
                            data: t.data().to_vec(),
                        },
                    )
                })
                .collect(),
            meta,
        }
    }

    pub fn to_params(&self) -> Result<ParamSet> {
        let mut params = ParamSet::new();
        for (name, rec) in &self.arrays {
            let t = Tensor::new(rec.shape.clone(), rec.data.clone())
                .map_err(|e| Error::Checkpoint(format!("array {name}: {e}")))?;
            params.insert(name.clone(), t);
        }
        Ok(params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        match raw.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(CHECKPOINT_FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "format_version {v} is not supported (expected {CHECKPOINT_FORMAT_VERSION})"
                )))
            }
            None => return Err(Error::Checkpoint("missing format_version".into())),
        }
        Ok(serde_json::from_value(raw)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
