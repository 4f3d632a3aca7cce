//! Synthetic randomized-trial generator with analytically known treatment
//! effects, used as the verification oracle for ITE estimation.
//!
//! Outcomes follow a logistic-linear model per treatment: with encoded
//! features `u` (dense values as-is, sparse codes scaled to `[0, 1]`),
//! `pCTR(x, t) = sigmoid(a_t + c_t . u)` and likewise for `pCVR`. Treatment
//! is assigned uniformly at random, independent of the features, so
//! difference-in-means per segment is an unbiased uplift estimate.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{format_float, Dataset, Instance};
use crate::error::{EcupError, Result};
use crate::schema::{FeatureSchema, FieldRole, FieldSpec};

/// Named generator presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Click uplift and conversion uplift disagree in sign for treatment 1
    /// while the chain (CTCVR) uplift stays positive.
    ChainBias,
    /// Every treatment row equals the control row, so all true effects are 0.
    Neutral,
}

impl std::str::FromStr for Preset {
    type Err = EcupError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chainbias" => Ok(Preset::ChainBias),
            "neutral" => Ok(Preset::Neutral),
            other => Err(EcupError::InvalidSpec(format!(
                "unknown preset `{}` (expected chainbias|neutral)",
                other
            ))),
        }
    }
}

/// Per-treatment logistic-linear outcome model: `sigmoid(intercept_t +
/// coeffs_t . u)` with one row per treatment code 0..=K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub intercepts: Vec<f64>,
    pub coeffs: Vec<Vec<f64>>,
}

/// Full generator specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub p_dense: usize,
    pub p_sparse: usize,
    pub sparse_cardinalities: Vec<usize>,
    pub treatment_count: usize,
    pub seed: u64,
    pub ctr: OutcomeModel,
    pub cvr: OutcomeModel,
    pub preset: Option<Preset>,
}

/// Exact per-row, per-treatment effects implied by the spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauPair {
    pub tau_y: f64,
    pub tau_z: f64,
}

/// `taus[row][k - 1]` holds the true click and chain-conversion effects of
/// treatment `k` for that row.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub taus: Vec<Vec<TauPair>>,
}

impl GroundTruth {
    /// Sidecar CSV with columns `row_index,k,tau_y,tau_z`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["row_index", "k", "tau_y", "tau_z"])?;
        for (i, row) in self.taus.iter().enumerate() {
            for (k0, pair) in row.iter().enumerate() {
                w.write_record([
                    i.to_string(),
                    (k0 + 1).to_string(),
                    format_float(pair.tau_y),
                    format_float(pair.tau_z),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<GroundTruth> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let mut taus: Vec<Vec<TauPair>> = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let err = |field: &str, msg: String| EcupError::ParseError {
                row: line,
                field: field.to_string(),
                message: msg,
            };
            let row: usize = record[0].parse().map_err(|e| err("row_index", format!("{}", e)))?;
            let k: usize = record[1].parse().map_err(|e| err("k", format!("{}", e)))?;
            let tau_y: f64 = record[2].parse().map_err(|e| err("tau_y", format!("{}", e)))?;
            let tau_z: f64 = record[3].parse().map_err(|e| err("tau_z", format!("{}", e)))?;
            if row >= taus.len() {
                taus.resize(row + 1, Vec::new());
            }
            if k != taus[row].len() + 1 {
                return Err(err("k", format!("expected k={}, got {}", taus[row].len() + 1, k)));
            }
            taus[row].push(TauPair { tau_y, tau_z });
        }
        Ok(GroundTruth { taus })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl SyntheticSpec {
    /// Builds a named preset with `k` non-control treatments.
    pub fn preset(preset: Preset, n: usize, k: usize, seed: u64) -> Result<SyntheticSpec> {
        if k < 1 {
            return Err(EcupError::InvalidSpec("preset needs K >= 1".into()));
        }
        // 6 dense features + 1 "segment" sparse feature of cardinality 8.
        // Dense coefficients differ per treatment (treatments modulate
        // feature importance individually), but all of them vanish at the
        // point (dense = 0, segment = 0), where the outcome pair is pinned
        // by the intercepts alone.
        const P_DENSE: usize = 6;
        let rotate = |base: &[f64; P_DENSE], by: usize| -> Vec<f64> {
            (0..P_DENSE).map(|i| base[(i + by) % P_DENSE]).collect()
        };
        let row = |p: f64, dense: Vec<f64>, seg: f64| -> (f64, Vec<f64>) {
            let mut c = dense;
            c.push(seg);
            (logit(p), c)
        };
        let (ctr_rows, cvr_rows): (Vec<(f64, Vec<f64>)>, Vec<(f64, Vec<f64>)>) = match preset {
            Preset::ChainBias => {
                // Click side: shared feature effects with rising per-treatment
                // segment trends. Conversion side: treatment-specific feature
                // effects (treatments reweight what matters after the click)
                // over falling segment trends, so the chain-stage responses
                // disagree and the conversion distinctions ride on the
                // sparser post-click data.
                let ctr_base = [0.3, -0.2, 0.25, -0.15, 0.2, -0.1];
                let cvr_base = [-0.3, 0.4, -0.2, 0.3, -0.35, 0.25];
                let mut ctr = vec![
                    row(0.1, ctr_base.to_vec(), 0.9),
                    row(0.3, ctr_base.to_vec(), 0.7),
                    row(0.2, ctr_base.to_vec(), 1.1),
                ];
                let mut cvr = vec![
                    row(0.5, cvr_base.to_vec(), -0.3),
                    row(0.4, cvr_base.iter().map(|c| -c).collect(), -0.9),
                    row(0.55, vec![-0.1, 0.5, -0.4, 0.15, -0.2, 0.4], -0.3),
                ];
                for t in 3..=k {
                    ctr.push(row(0.15 + 0.02 * (t % 5) as f64, rotate(&ctr_base, t), 0.8));
                    cvr.push(row(0.45 - 0.02 * (t % 4) as f64, rotate(&cvr_base, t), -0.6));
                }
                ctr.truncate(k + 1);
                cvr.truncate(k + 1);
                (ctr, cvr)
            }
            Preset::Neutral => {
                let ctr_base = [0.3, -0.2, 0.25, -0.15, 0.2, -0.1];
                let cvr_base = [0.4, -0.3, 0.2, -0.25, 0.15, 0.35];
                (
                    vec![row(0.2, ctr_base.to_vec(), 0.9); k + 1],
                    vec![row(0.5, cvr_base.to_vec(), -0.4); k + 1],
                )
            }
        };
        let build = |rows: Vec<(f64, Vec<f64>)>| OutcomeModel {
            intercepts: rows.iter().map(|(a, _)| *a).collect(),
            coeffs: rows.into_iter().map(|(_, c)| c).collect(),
        };
        let spec = SyntheticSpec {
            n,
            p_dense: P_DENSE,
            p_sparse: 1,
            sparse_cardinalities: vec![8],
            treatment_count: k,
            seed,
            ctr: build(ctr_rows),
            cvr: build(cvr_rows),
            preset: Some(preset),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(EcupError::InvalidSpec("n must be > 0".into()));
        }
        if self.treatment_count < 1 {
            return Err(EcupError::InvalidSpec("treatment_count must be >= 1".into()));
        }
        if self.p_dense + self.p_sparse == 0 {
            return Err(EcupError::InvalidSpec("need at least one feature".into()));
        }
        if self.sparse_cardinalities.len() != self.p_sparse {
            return Err(EcupError::InvalidSpec(format!(
                "sparse_cardinalities has {} entries for p_sparse = {}",
                self.sparse_cardinalities.len(),
                self.p_sparse
            )));
        }
        if self.sparse_cardinalities.iter().any(|&c| c < 1) {
            return Err(EcupError::InvalidSpec("sparse cardinality must be >= 1".into()));
        }
        let p = self.p_dense + self.p_sparse;
        for (name, model) in [("ctr", &self.ctr), ("cvr", &self.cvr)] {
            if model.intercepts.len() != self.treatment_count + 1 {
                return Err(EcupError::InvalidSpec(format!(
                    "{} intercepts must have K + 1 = {} entries, got {}",
                    name,
                    self.treatment_count + 1,
                    model.intercepts.len()
                )));
            }
            if model.coeffs.len() != self.treatment_count + 1
                || model.coeffs.iter().any(|row| row.len() != p)
            {
                return Err(EcupError::InvalidSpec(format!(
                    "{} coefficients must be (K + 1) x {} = {} x {}",
                    name,
                    p,
                    self.treatment_count + 1,
                    p
                )));
            }
        }
        Ok(())
    }

    /// Dense values as-is; sparse codes scaled onto `[0, 1]`.
    pub fn encode_features(&self, dense: &[f64], sparse: &[usize]) -> Vec<f64> {
        let mut u = Vec::with_capacity(self.p_dense + self.p_sparse);
        u.extend_from_slice(dense);
        for (j, &code) in sparse.iter().enumerate() {
            let card = self.sparse_cardinalities[j];
            u.push(if card > 1 {
                code as f64 / (card - 1) as f64
            } else {
                0.0
            });
        }
        u
    }

    /// Exact `(pCTR, pCVR)` at features `(dense, sparse)` under treatment `t`.
    pub fn probs(&self, dense: &[f64], sparse: &[usize], t: usize) -> (f64, f64) {
        assert_eq!(dense.len(), self.p_dense, "dense feature arity");
        assert_eq!(sparse.len(), self.p_sparse, "sparse feature arity");
        let u = self.encode_features(dense, sparse);
        let lin = |model: &OutcomeModel| -> f64 {
            model.intercepts[t]
                + model.coeffs[t]
                    .iter()
                    .zip(&u)
                    .map(|(c, x)| c * x)
                    .sum::<f64>()
        };
        (sigmoid(lin(&self.ctr)), sigmoid(lin(&self.cvr)))
    }

    /// Exact effects of treatment `k` versus control at the given features.
    pub fn taus(&self, dense: &[f64], sparse: &[usize], k: usize) -> TauPair {
        let (p1, q1) = self.probs(dense, sparse, k);
        let (p0, q0) = self.probs(dense, sparse, 0);
        TauPair {
            tau_y: p1 - p0,
            tau_z: p1 * q1 - p0 * q0,
        }
    }

    /// Schema of the generated dataset: `x0..`, `c0..`, `t`, `y`, `z`.
    pub fn schema(&self) -> FeatureSchema {
        let mut fields = Vec::new();
        for j in 0..self.p_dense {
            fields.push(FieldSpec {
                name: format!("x{}", j),
                role: FieldRole::Dense,
            });
        }
        for (j, &card) in self.sparse_cardinalities.iter().enumerate() {
            fields.push(FieldSpec {
                name: format!("c{}", j),
                role: FieldRole::Sparse { cardinality: card },
            });
        }
        fields.push(FieldSpec {
            name: "t".into(),
            role: FieldRole::Treatment {
                cardinality: self.treatment_count + 1,
            },
        });
        fields.push(FieldSpec {
            name: "y".into(),
            role: FieldRole::LabelClick,
        });
        fields.push(FieldSpec {
            name: "z".into(),
            role: FieldRole::LabelConversion,
        });
        FeatureSchema::new(fields, self.treatment_count).expect("generator schema is valid")
    }
}

/// Chain outcome draw: `y ~ Bernoulli(pctr)`, then `z ~ Bernoulli(pcvr)` only
/// when the click happened. Two uniforms are consumed regardless of `y`.
pub fn sample_outcome(pctr: f64, pcvr: f64, rng: &mut impl Rng) -> (u8, u8) {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    let y = u8::from(u1 < pctr);
    let z = u8::from(y == 1 && u2 < pcvr);
    (y, z)
}

/// Draws `spec.n` rows with uniformly random treatment assignment and exact
/// ground-truth effects. Identical output for identical specs.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rows = Vec::with_capacity(spec.n);
    let mut taus = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let dense: Vec<f64> = (0..spec.p_dense)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let sparse: Vec<usize> = spec
            .sparse_cardinalities
            .iter()
            .map(|&card| rng.gen_range(0..card))
            .collect();
        let t = rng.gen_range(0..=spec.treatment_count);
        let (pctr, pcvr) = spec.probs(&dense, &sparse, t);
        let (y, z) = sample_outcome(pctr, pcvr, &mut rng);
        taus.push(
            (1..=spec.treatment_count)
                .map(|k| spec.taus(&dense, &sparse, k))
                .collect(),
        );
        rows.push(Instance {
            dense,
            sparse,
            t,
            y,
            z,
        });
    }
    let dataset = Dataset::new(spec.schema(), rows)?;
    Ok((dataset, GroundTruth { taus }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn chainbias_contains_the_sign_flip_subpopulation() {
        let spec = SyntheticSpec::preset(Preset::ChainBias, 10, 1, 0).unwrap();
        let dense = [0.0; 6];
        let sparse = [0usize];
        let (p0, q0) = spec.probs(&dense, &sparse, 0);
        let (p1, q1) = spec.probs(&dense, &sparse, 1);
        assert_relative_eq!(p0, 0.1, epsilon = 1e-12);
        assert_relative_eq!(q0, 0.5, epsilon = 1e-12);
        assert_relative_eq!(p1, 0.3, epsilon = 1e-12);
        assert_relative_eq!(q1, 0.4, epsilon = 1e-12);
        // CVR uplift is negative while the chain uplift is positive.
        assert_relative_eq!(q1 - q0, -0.1, epsilon = 1e-12);
        let tau = spec.taus(&dense, &sparse, 1);
        assert_relative_eq!(tau.tau_z, 0.12 - 0.05, epsilon = 1e-12);
        assert!(tau.tau_z > 0.0);
    }

    #[test]
    fn neutral_preset_has_identically_zero_effects() {
        let spec = SyntheticSpec::preset(Preset::Neutral, 200, 2, 3).unwrap();
        let (_, truth) = generate_synthetic(&spec).unwrap();
        for row in &truth.taus {
            for pair in row {
                assert_eq!(pair.tau_y, 0.0);
                assert_eq!(pair.tau_z, 0.0);
            }
        }
    }

    #[test]
    fn treatment_shares_are_near_uniform() {
        let spec = SyntheticSpec::preset(Preset::ChainBias, 10_000, 2, 7).unwrap();
        let (ds, _) = generate_synthetic(&spec).unwrap();
        let mut counts = [0usize; 3];
        for row in ds.rows() {
            counts[row.t] += 1;
        }
        for c in counts {
            let share = c as f64 / ds.len() as f64;
            assert!(
                (share - 1.0 / 3.0).abs() < 0.02,
                "treatment share {} too far from 1/3",
                share
            );
        }
    }

    #[test]
    fn generation_is_deterministic_under_seed() {
        let spec = SyntheticSpec::preset(Preset::ChainBias, 500, 2, 41).unwrap();
        let (a, ta) = generate_synthetic(&spec).unwrap();
        let (b, tb) = generate_synthetic(&spec).unwrap();
        assert_eq!(a.rows(), b.rows());
        assert_eq!(ta, tb);
    }

    #[test]
    fn click_frequency_is_calibrated() {
        // Fixed x and t: empirical click rate over m re-draws stays within
        // 3 standard errors of pCTR.
        let spec = SyntheticSpec::preset(Preset::ChainBias, 10, 2, 0).unwrap();
        let dense = [0.4, -0.3, 0.1, 0.8, -0.6, 0.2];
        let sparse = [2usize];
        for t in 0..=2 {
            let (pctr, pcvr) = spec.probs(&dense, &sparse, t);
            let m = 100_000;
            let mut rng = ChaCha8Rng::seed_from_u64(100 + t as u64);
            let clicks: usize = (0..m)
                .map(|_| sample_outcome(pctr, pcvr, &mut rng).0 as usize)
                .sum();
            let freq = clicks as f64 / m as f64;
            let se = (pctr * (1.0 - pctr) / m as f64).sqrt();
            assert!(
                (freq - pctr).abs() <= 3.0 * se,
                "t={}: |{} - {}| > 3se={}",
                t,
                freq,
                pctr,
                3.0 * se
            );
        }
    }

    #[test]
    fn ground_truth_sidecar_roundtrips() {
        let spec = SyntheticSpec::preset(Preset::ChainBias, 50, 2, 5).unwrap();
        let (_, truth) = generate_synthetic(&spec).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        truth.write_csv(f.path()).unwrap();
        let back = GroundTruth::read_csv(f.path()).unwrap();
        assert_eq!(truth, back);
    }

    #[test]
    fn dimension_mismatch_is_invalid() {
        let mut spec = SyntheticSpec::preset(Preset::Neutral, 10, 1, 0).unwrap();
        spec.ctr.coeffs[0].pop();
        assert!(matches!(
            generate_synthetic(&spec).unwrap_err(),
            EcupError::InvalidSpec(_)
        ));
    }
}
