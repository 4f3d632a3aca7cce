//! Run configuration: JSON file with flat keys, overridden by CLI flags.

use std::path::PathBuf;

use anyhow::{Context, Result};
use ecup_core::model::{ModelConfig, Variant};
use ecup_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Flat, fully optional configuration document. Every field can also be set
/// by a command-line flag, which wins over the file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema: Option<PathBuf>,
    pub train_data: Option<PathBuf>,
    pub valid_data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub variant: Option<String>,
    pub d: Option<usize>,
    pub d_k: Option<usize>,
    pub heads: Option<usize>,
    pub h: Option<usize>,
    pub h_gate: Option<usize>,
    pub tie_layers: Option<usize>,
    pub gate_layers: Option<usize>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Resolves the architecture settings, warning about values outside the
    /// published search grid (they are accepted regardless).
    pub fn model_config(&self) -> Result<ModelConfig> {
        let defaults = ModelConfig::default();
        let d = self.d.unwrap_or(8);
        let cfg = ModelConfig {
            variant: match &self.variant {
                Some(v) => v.parse::<Variant>()?,
                None => Variant::Full,
            },
            d,
            d_k: self.d_k.unwrap_or(d),
            heads: self.heads.unwrap_or(defaults.heads),
            h: self.h.unwrap_or(128),
            h_gate: self.h_gate.unwrap_or(64),
            tie_layers: self.tie_layers.unwrap_or(defaults.tie_layers),
            gate_layers: self.gate_layers.unwrap_or(defaults.gate_layers),
            gamma: self.gamma.unwrap_or(defaults.gamma),
            lambda: self.lambda.unwrap_or(defaults.lambda),
            freeze_prior_projections: false,
            seed: self.seed.unwrap_or(7),
        };
        warn_outside_grid("d", cfg.d as f64, &[8.0, 16.0, 32.0]);
        warn_outside_grid("h", cfg.h as f64, &[128.0, 256.0, 512.0]);
        warn_outside_grid("h_gate", cfg.h_gate as f64, &[64.0, 128.0, 256.0, 512.0]);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.lr.unwrap_or(1e-3),
            batch_size: self.batch_size.unwrap_or(2048),
            epochs: self.epochs.unwrap_or(5),
            seed: self.seed.unwrap_or(7),
        };
        warn_outside_grid("lr", cfg.lr, &[1e-4, 1e-3, 1e-2]);
        if cfg.lr <= 0.0 {
            anyhow::bail!("lr must be positive");
        }
        Ok(cfg)
    }
}

fn warn_outside_grid(name: &str, value: f64, grid: &[f64]) {
    if !grid.iter().any(|g| (g - value).abs() < 1e-12) {
        log::warn!(
            "{} = {} is outside the default search grid {:?}; accepting it anyway",
            name,
            value,
            grid
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_in_file_resolve_with_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"d": 16, "lr": 0.01, "variant": "no-tenet"}"#).unwrap();
        let model = cfg.model_config().unwrap();
        assert_eq!(model.d, 16);
        assert_eq!(model.d_k, 16);
        assert_eq!(model.variant, Variant::NoTenet);
        let train = cfg.train_config().unwrap();
        assert_eq!(train.lr, 0.01);
        assert_eq!(train.batch_size, 2048);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"nope": 1}"#).is_err());
    }
}
