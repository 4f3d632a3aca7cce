//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{EcupError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with a floor, so that coordinates whose true derivative is
/// ~0 are judged on the finite-difference noise scale instead of blowing up.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `analytic` gradients against central finite differences of
/// `loss_fn` (step `step`). When `coords_per_tensor` is set, a random subset
/// of coordinates per tensor is probed; otherwise every coordinate is.
pub fn finite_diff_check<F>(
    params: &ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    loss_fn: F,
    step: f64,
    coords_per_tensor: Option<usize>,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let mut scratch = params.clone();
    let mut max_rel_err = 0.0f64;
    let mut worst = String::new();
    let mut coords_checked = 0usize;

    for (name, grad) in analytic {
        let base = params
            .get(name)
            .ok_or_else(|| EcupError::InvalidSpec(format!("gradient for unknown `{}`", name)))?
            .clone();
        let n = base.numel();
        let coords: Vec<usize> = match coords_per_tensor {
            Some(c) if c < n => {
                let mut all: Vec<usize> = (0..n).collect();
                all.shuffle(rng);
                all.truncate(c);
                all.sort_unstable();
                all
            }
            _ => (0..n).collect(),
        };
        for &i in &coords {
            let mut plus = base.clone();
            plus.values_mut()[i] += step;
            scratch.set_values(name, plus)?;
            let f_plus = loss_fn(&scratch)?;

            let mut minus = base.clone();
            minus.values_mut()[i] -= step;
            scratch.set_values(name, minus)?;
            let f_minus = loss_fn(&scratch)?;

            scratch.set_values(name, base.clone())?;

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let err = rel_err(grad.values()[i], numeric);
            coords_checked += 1;
            if err > max_rel_err {
                max_rel_err = err;
                worst = format!("{}[{}]", name, i);
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        coords_checked,
    })
}
