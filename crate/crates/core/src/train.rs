//! Mini-batch Adam training over the entire-space loss with per-epoch
//! validation AUUC and best-checkpoint retention.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Instance};
use crate::ecenet::{forward, loss, predict_ite_batch};
use crate::error::{EcupError, Result};
use crate::metrics::{per_treatment_eval, EvalTask};
use crate::model::{Batch, EcupModel, ModelConfig};
use crate::optim::{adam_step, AdamState};
use crate::tape::Tape;

/// Optimization settings; the architecture lives in [`ModelConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Shuffling seed; parameter initialization uses `ModelConfig::seed`.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 2048,
            epochs: 5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean CTCVR AUUC over treatments on the validation set; absent when
    /// validation is empty or the gain is degenerate.
    pub valid_auuc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

/// Mean CTCVR-view AUUC over treatments for a model on `ds`.
pub fn validation_auuc(model: &EcupModel, ds: &Dataset) -> Result<Option<f64>> {
    if ds.is_empty() {
        return Ok(None);
    }
    let ites = predict_ite_batch(model, ds.rows())?;
    let eval = per_treatment_eval(ds, EvalTask::Ctcvr, &|i, k| ites[i].tau_z[k - 1]);
    match eval {
        Ok(task) => Ok(Some(task.mean_auuc)),
        Err(EcupError::DegenerateGain(_)) | Err(EcupError::EmptyGroup(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Trains a fresh model with shuffled mini-batch Adam, recording per-epoch
/// train loss and validation AUUC and returning the best-validation
/// parameters. Deterministic for fixed seeds.
pub fn train(
    train_ds: &Dataset,
    valid_ds: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(EcupModel, TrainHistory)> {
    if train_ds.is_empty() {
        return Err(EcupError::InvalidSpec("training set is empty".into()));
    }
    if train_cfg.batch_size == 0 || train_cfg.epochs == 0 {
        return Err(EcupError::InvalidSpec(
            "batch_size and epochs must be >= 1".into(),
        ));
    }
    if !valid_ds.is_empty()
        && valid_ds.schema().fingerprint() != train_ds.schema().fingerprint()
    {
        return Err(EcupError::FingerprintMismatch {
            expected: train_ds.schema().fingerprint(),
            actual: valid_ds.schema().fingerprint(),
        });
    }

    let mut model = EcupModel::new(train_ds.schema().clone(), model_cfg.clone())?;
    let mut adam = AdamState::new(train_cfg.lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut indices: Vec<usize> = (0..train_ds.len()).collect();

    let mut history = TrainHistory {
        epochs: Vec::with_capacity(train_cfg.epochs),
        best_epoch: None,
    };
    let mut best: Option<(f64, crate::params::ParamStore)> = None;
    let mut global_step = 0usize;

    for epoch in 0..train_cfg.epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(train_cfg.batch_size) {
            global_step += 1;
            let rows: Vec<&Instance> = chunk.iter().map(|&i| &train_ds.rows()[i]).collect();
            let batch = Batch::from_rows(train_ds.schema(), &rows, None)?;
            let mut step = || -> Result<f64> {
                let mut tape = Tape::new();
                let vars = model.params.stage(&mut tape)?;
                let trace = forward(&mut tape, &vars, &model.schema, &model.config, &batch)?;
                let l = loss(&mut tape, &vars, &model.params, &model.config, &trace, &batch)?;
                let value = tape.scalar(l)?;
                let grads = tape.backward(l)?;
                adam_step(&mut model.params, &grads, &mut adam)?;
                Ok(value)
            };
            match step() {
                Ok(value) => {
                    loss_sum += value;
                    batches += 1;
                }
                Err(EcupError::NonFinite(what)) => {
                    return Err(EcupError::Divergence {
                        step: global_step,
                        message: what,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let valid_auuc = validation_auuc(&model, valid_ds)?;
        if let Some(auuc) = valid_auuc {
            if best.as_ref().map_or(true, |(b, _)| auuc > *b) {
                best = Some((auuc, model.params.clone()));
                history.best_epoch = Some(epoch);
            }
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            valid_auuc,
        });
        log::info!(
            "epoch {}: train loss {:.6}, valid auuc {:?}",
            epoch,
            loss_sum / batches as f64,
            valid_auuc
        );
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::synth::{generate_synthetic, Preset, SyntheticSpec};

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            variant: Variant::Full,
            d: 4,
            d_k: 4,
            heads: 2,
            h: 8,
            h_gate: 4,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn empty_training_set_is_an_error_not_silent_success() {
        let spec = SyntheticSpec::preset(Preset::ChainBias, 10, 1, 0).unwrap();
        let (ds, _) = generate_synthetic(&spec).unwrap();
        let empty = Dataset::new(ds.schema().clone(), Vec::new()).unwrap();
        let err = train(&empty, &ds, &tiny_model_cfg(), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, EcupError::InvalidSpec(_)));
    }

    #[test]
    fn default_batch_size_is_two_to_the_eleven() {
        assert_eq!(TrainConfig::default().batch_size, 2048);
    }

    #[test]
    fn training_runs_and_is_deterministic() {
        let spec = SyntheticSpec::preset(Preset::ChainBias, 600, 1, 5).unwrap();
        let (ds, _) = generate_synthetic(&spec).unwrap();
        let (train_ds, valid_ds) = crate::data::split(&ds, 0.7, 1).unwrap();
        let cfg = tiny_model_cfg();
        let tcfg = TrainConfig {
            lr: 1e-2,
            batch_size: 128,
            epochs: 2,
            seed: 9,
        };
        let (m1, h1) = train(&train_ds, &valid_ds, &cfg, &tcfg).unwrap();
        let (m2, h2) = train(&train_ds, &valid_ds, &cfg, &tcfg).unwrap();
        assert_eq!(h1, h2);
        for (name, entry) in m1.params.iter() {
            assert_eq!(Some(&entry.tensor), m2.params.get(name), "{}", name);
        }
        assert_eq!(h1.epochs.len(), 2);
        assert!(h1.epochs.iter().all(|e| e.train_loss.is_finite()));
    }

    #[test]
    fn training_reduces_the_loss() {
        let spec = SyntheticSpec::preset(Preset::ChainBias, 2000, 1, 13).unwrap();
        let (ds, _) = generate_synthetic(&spec).unwrap();
        let (train_ds, valid_ds) = crate::data::split(&ds, 0.8, 2).unwrap();
        let tcfg = TrainConfig {
            lr: 1e-2,
            batch_size: 256,
            epochs: 4,
            seed: 21,
        };
        let (_, history) = train(&train_ds, &valid_ds, &tiny_model_cfg(), &tcfg).unwrap();
        let first = history.epochs.first().unwrap().train_loss;
        let last = history.epochs.last().unwrap().train_loss;
        assert!(last < first, "loss should drop: {} -> {}", first, last);
    }
}
