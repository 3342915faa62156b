use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{Extractor, ShallowFeatureExtractor, TrainConfig, TrainHistory, TreeFlowModel};
use crate::cnf::CnfStack;
use crate::error::{Error, Result};
use crate::tabular::{ColumnSchema, TargetPipeline};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    schema: Vec<ColumnSchema>,
    target_names: Vec<String>,
    target_transform: TargetPipeline,
    extractor: Extractor,
    sfe: Option<Value>,
    flow: Value,
    config: TrainConfig,
    history: TrainHistory,
}

fn checksum(body: &Value) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_string(body)?.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn format_err(e: impl std::fmt::Display) -> Error {
    Error::Format(e.to_string())
}

impl TreeFlowModel {
    /// The model as a JSON document carrying a format version and a SHA-256
    /// checksum of its own content.
    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            version: MODEL_FORMAT_VERSION,
            schema: self.schema.clone(),
            target_names: self.target_names.clone(),
            target_transform: self.target_transform.clone(),
            extractor: self.extractor.clone(),
            sfe: self
                .sfe
                .as_ref()
                .map(ShallowFeatureExtractor::to_json_value)
                .transpose()?,
            flow: self.flow.to_json_value()?,
            config: self.config.clone(),
            history: self.history.clone(),
        };
        let mut body = serde_json::to_value(file)?;
        let sum = checksum(&body)?;
        body.as_object_mut()
            .expect("model file is a JSON object")
            .insert("checksum".into(), Value::String(sum));
        Ok(serde_json::to_string(&body)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut body: Value = serde_json::from_str(text)
            .map_err(|e| format_err(format!("model file is not valid JSON: {e}")))?;
        let obj = body
            .as_object_mut()
            .ok_or_else(|| format_err("model file must be a JSON object"))?;
        let version = obj
            .get("version")
            .and_then(Value::as_u64)
            .ok_or_else(|| format_err("model file has no version"))?;
        if version != u64::from(MODEL_FORMAT_VERSION) {
            return Err(Error::UnsupportedVersion {
                found: version.min(u64::from(u32::MAX)) as u32,
                supported: MODEL_FORMAT_VERSION,
            });
        }
        let stored = match obj.remove("checksum") {
            Some(Value::String(s)) => s,
            _ => return Err(format_err("model file has no checksum")),
        };
        if checksum(&body)? != stored {
            return Err(format_err(
                "checksum mismatch: the model file is corrupted or was edited",
            ));
        }
        let file: ModelFile = serde_json::from_value(body).map_err(format_err)?;
        let flow = CnfStack::from_json_value(&file.flow)?;
        let sfe = file
            .sfe
            .as_ref()
            .map(ShallowFeatureExtractor::from_json_value)
            .transpose()?;
        let model = Self {
            config: file.config,
            schema: file.schema,
            target_names: file.target_names,
            target_transform: file.target_transform,
            extractor: file.extractor,
            sfe,
            flow,
            history: file.history,
        };
        model.check_consistency()?;
        Ok(model)
    }

    fn check_consistency(&self) -> Result<()> {
        let dim = self.feature_dim();
        let expected_ctx = match &self.sfe {
            Some(s) if s.in_dim() != dim => {
                return Err(format_err(format!(
                    "extractor input dimension {} does not match {dim} features",
                    s.in_dim()
                )));
            }
            Some(s) => s.out_dim(),
            None => dim,
        };
        if self.flow.context_dim() != expected_ctx || self.flow.dim() != self.target_names.len() {
            return Err(format_err(
                "flow dimensions do not match the extractor and targets",
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
