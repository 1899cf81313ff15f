//! Versioned JSON checkpoints. Floats are written with shortest round-trip
//! formatting, so save → load → save is byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Standardizer;
use crate::error::{GphmeError, Result};
use crate::model::TreeModel;
use crate::train::TrainState;

pub const FORMAT: &str = "gphme-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: TreeModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardizer: Option<Standardizer>,
    /// Original label values by class id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_values: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_state: Option<TrainState>,
}

impl Checkpoint {
    pub fn new(model: TreeModel) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            model,
            standardizer: None,
            class_values: None,
            train_state: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| GphmeError::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if ck.format != FORMAT {
            return Err(GphmeError::Checkpoint(format!("unknown format `{}`", ck.format)));
        }
        if ck.version != VERSION {
            return Err(GphmeError::Checkpoint(format!(
                "unsupported version {} (this build reads {VERSION})",
                ck.version
            )));
        }
        ck.model.validate()?;
        if let Some(st) = &ck.standardizer {
            if st.features.mean.len() != ck.model.input_dim || st.features.std.len() != ck.model.input_dim {
                return Err(GphmeError::Checkpoint("standardizer does not match the model input dimension".into()));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GphmeError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
