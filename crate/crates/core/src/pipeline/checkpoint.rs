use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{AnswerVocabulary, FeatureStats, Model, ModelConfig};
use crate::numerics::Matrix;

use super::run::EvalSettings;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub answers: Vec<String>,
    pub relations: Vec<String>,
    pub eval: EvalSettings,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: CheckpointConfig,
    feature_stats: FeatureStats,
    params: BTreeMap<String, Matrix>,
}

/// A trained model plus the retrieval settings it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub eval: EvalSettings,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let m = &self.model;
        let params = m
            .tensor_names()
            .into_iter()
            .zip(m.tensors().into_iter().cloned())
            .collect();
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            config: CheckpointConfig {
                model: m.config.clone(),
                answers: m.answers.answers().to_vec(),
                relations: m.rgcn.relations.clone(),
                eval: self.eval,
            },
            feature_stats: m.stats,
            params,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::invalid("checkpoint has no version"))?;
        if found != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::VersionMismatch {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut file: CheckpointFile = serde_json::from_value(value)?;
        let answers = AnswerVocabulary::new(file.config.answers)?;
        let mut model = Model::init(file.config.model, answers, file.config.relations, file.feature_stats);
        let names = model.tensor_names();
        for (name, slot) in names.iter().zip(model.tensors_mut()) {
            let stored = file
                .params
                .remove(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint is missing tensor `{name}`")))?;
            if stored.shape() != slot.shape() || stored.as_slice().len() != slot.as_slice().len() {
                return Err(Error::shape(format!(
                    "tensor `{name}` is {:?}, expected {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            if !stored.is_finite() {
                return Err(Error::NonFinite(format!("tensor `{name}`")));
            }
            *slot = stored;
        }
        if let Some(extra) = file.params.keys().next() {
            return Err(Error::invalid(format!("checkpoint has unexpected tensor `{extra}`")));
        }
        Ok(Checkpoint {
            model,
            eval: file.config.eval,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text)
}
