use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::fusion::HgvModel;
use crate::harness::TrainConfig;
use crate::ndtensor::Tensor;

pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A trained model as plain data. Floats are written in shortest
/// round-trip decimal form, so reloading is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u64,
    /// Configuration with every dimension filled in.
    pub config: TrainConfig,
    pub epoch: usize,
    pub params: BTreeMap<String, ParamEntry>,
    /// Normalisation fitted on the training split, if any.
    #[serde(default)]
    pub norm: Option<NormStats>,
    pub seed: u64,
}

impl Checkpoint {
    pub fn from_model(model: &HgvModel, config: &TrainConfig, epoch: usize) -> Checkpoint {
        let params = model
            .store
            .iter()
            .map(|(_, p)| {
                (p.name.clone(), ParamEntry { shape: p.value.shape().to_vec(), data: p.value.data().to_vec() })
            })
            .collect();
        Checkpoint { version: CHECKPOINT_VERSION, config: config.clone(), epoch, params, norm: None, seed: config.seed }
    }

    /// Rebuild the model. Every parameter of the configured architecture must
    /// be present with a matching shape, and nothing else.
    pub fn to_model(&self) -> Result<HgvModel> {
        let mut model = HgvModel::new(self.config.model_config()?, self.seed)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Schema(format!(
                "checkpoint holds {} parameters, architecture needs {}",
                self.params.len(),
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let entry =
                self.params.get(&name).ok_or_else(|| Error::Schema(format!("checkpoint lacks parameter {name}")))?;
            let value = Tensor::new(entry.shape.clone(), entry.data.clone())
                .map_err(|e| Error::Schema(format!("parameter {name}: {e}")))?;
            model.store.set_value(id, value).map_err(|e| Error::Schema(format!("parameter {name}: {e}")))?;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text =
            serde_json::to_string(self).map_err(|e| Error::domain(format!("cannot serialise checkpoint: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Checkpoint::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn from_json_str(text: &str) -> Result<Checkpoint> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })?;
        let found = value
            .get("version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Schema("checkpoint has no version".into()))?;
        if found != CHECKPOINT_VERSION {
            return Err(Error::Version { found, expected: CHECKPOINT_VERSION });
        }
        serde_json::from_value(value).map_err(|e| Error::Schema(format!("checkpoint: {e}")))
    }
}
