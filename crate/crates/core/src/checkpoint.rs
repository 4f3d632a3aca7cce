//! JSON checkpoints: model configuration, schema + fingerprint, and every
//! parameter tensor. Floats round-trip bit-exactly (shortest-roundtrip
//! decimal serialization).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EcupError, Result};
use crate::model::{EcupModel, ModelConfig};
use crate::params::ParamStore;
use crate::schema::FeatureSchema;
use crate::train::TrainConfig;

pub const CHECKPOINT_FORMAT: &str = "ecup-checkpoint-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub train: Option<TrainConfig>,
    pub schema: FeatureSchema,
    pub schema_fingerprint: String,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &EcupModel, train: Option<TrainConfig>) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: model.config.clone(),
            train,
            schema_fingerprint: model.schema.fingerprint(),
            schema: model.schema.clone(),
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<(EcupModel, Option<TrainConfig>)> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(EcupError::InvalidSpec(format!(
                "unsupported checkpoint format `{}`",
                self.format
            )));
        }
        let actual = self.schema.fingerprint();
        if actual != self.schema_fingerprint {
            return Err(EcupError::FingerprintMismatch {
                expected: self.schema_fingerprint,
                actual,
            });
        }
        self.config.validate()?;
        if self.params.is_empty() {
            return Err(EcupError::InvalidSpec("checkpoint has no parameters".into()));
        }
        Ok((
            EcupModel {
                schema: self.schema,
                config: self.config,
                params: self.params,
            },
            self.train,
        ))
    }
}

pub fn save(model: &EcupModel, train: Option<&TrainConfig>, path: &Path) -> Result<()> {
    let ckpt = Checkpoint::from_model(model, train.cloned());
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &ckpt)?;
    use std::io::Write;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(EcupModel, Option<TrainConfig>)> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    ckpt.into_model()
}

/// Refuses evaluation when the checkpoint and dataset schemas differ.
pub fn check_schema(model: &EcupModel, data_schema: &FeatureSchema) -> Result<()> {
    let expected = model.schema.fingerprint();
    let actual = data_schema.fingerprint();
    if expected != actual {
        return Err(EcupError::FingerprintMismatch { expected, actual });
    }
    Ok(())
}
