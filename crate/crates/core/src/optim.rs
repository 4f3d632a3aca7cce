//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{EcupError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Optimizer state: per-parameter moment estimates plus hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl AdamState {
    /// beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8.
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        Some((self.first_moment.get(name)?, self.second_moment.get(name)?))
    }
}

/// One Adam update over the supplied gradients. Gradient names must refer to
/// trainable parameters of matching shape; parameters without a gradient this
/// step are left untouched (their moments do not decay either, matching the
/// per-parameter step count being global).
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
) -> Result<()> {
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);

    for (name, grad) in grads {
        let current = params
            .get(name)
            .ok_or_else(|| EcupError::InvalidSpec(format!("gradient for unknown parameter `{}`", name)))?;
        if !params.is_trainable(name) {
            return Err(EcupError::InvalidSpec(format!(
                "gradient for non-trainable parameter `{}`",
                name
            )));
        }
        if current.shape() != grad.shape() {
            return Err(EcupError::ShapeMismatch(format!(
                "gradient for `{}` has shape {:?}, parameter {:?}",
                name,
                grad.shape(),
                current.shape()
            )));
        }
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
        let v = state
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));

        let mut updated = current.clone();
        for (((theta, m_i), v_i), &g) in updated
            .values_mut()
            .iter_mut()
            .zip(m.values_mut())
            .zip(v.values_mut())
            .zip(grad.values())
        {
            *m_i = state.beta1 * *m_i + (1.0 - state.beta1) * g;
            *v_i = state.beta2 * *v_i + (1.0 - state.beta2) * g * g;
            let m_hat = *m_i / bc1;
            let v_hat = *v_i / bc2;
            *theta -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        if !updated.is_finite() {
            return Err(EcupError::NonFinite(format!("adam update of `{}`", name)));
        }
        params.set_values(name, updated)?;
    }
    Ok(())
}
