//! Model configuration, parameter initialization, and batch assembly.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::error::{EcupError, Result};
use crate::params::ParamStore;
use crate::schema::{FeatureSchema, FieldRole};
use crate::tensor::Tensor;

/// Chain tasks: click = 0, conversion = 1.
pub const TASKS: usize = 2;
/// Tower depth: two shared hidden layers plus the task heads.
pub const TOWER_LAYERS: usize = 3;

/// Architecture variants, matching the ablation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Treatment-enhanced features plus task-prior gated towers.
    Full,
    /// Treatment embedding concatenated to the features; no treatment-aware
    /// refinement.
    NoTenet,
    /// A plain multi-head self-attention block in place of the
    /// treatment-aware units.
    AttentionTenet,
    /// No task-prior injection; towers run ungated.
    NoTaegate,
    /// No entire-chain training: the conversion head learns on clicked rows
    /// only and the chain probability is composed as pCTR x pCVR.
    NoEcenet,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTenet => "no-tenet",
            Variant::AttentionTenet => "attention-tenet",
            Variant::NoTaegate => "no-taegate",
            Variant::NoEcenet => "no-ecenet",
        }
    }

    /// Treatment-aware units present?
    pub fn has_tenet(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoTaegate | Variant::NoEcenet)
    }

    /// Plain attention block in place of TENet?
    pub fn has_attention_block(&self) -> bool {
        matches!(self, Variant::AttentionTenet)
    }

    /// Task-prior attention + activation gates present?
    pub fn has_taegate(&self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::NoTenet | Variant::AttentionTenet
        )
    }

    /// Entire-space product supervision (vs. click-set conversion training)?
    pub fn entire_space_loss(&self) -> bool {
        !matches!(self, Variant::NoEcenet)
    }
}

impl std::str::FromStr for Variant {
    type Err = EcupError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no-tenet" | "no_tenet" => Ok(Variant::NoTenet),
            "attention-tenet" | "attention_tenet" => Ok(Variant::AttentionTenet),
            "no-taegate" | "no_taegate" => Ok(Variant::NoTaegate),
            "no-ecenet" | "no_ecenet" => Ok(Variant::NoEcenet),
            other => Err(EcupError::InvalidSpec(format!(
                "unknown variant `{}`",
                other
            ))),
        }
    }
}

/// Hyperparameters of one model instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Embedding dimension per field.
    pub d: usize,
    /// TAU attention size (defaults to `d`).
    pub d_k: usize,
    /// Heads of the multi-head attention blocks.
    pub heads: usize,
    /// First tower layer width; the second layer uses `h / 2`.
    pub h: usize,
    /// Gate MLP hidden width.
    pub h_gate: usize,
    /// Treatment information extractor depth.
    pub tie_layers: usize,
    /// Gate MLP depth.
    pub gate_layers: usize,
    /// Gate regulatory factor; outputs lie in `[0, gamma]`.
    pub gamma: f64,
    /// L2 regularization weight.
    pub lambda: f64,
    /// Freeze the prior-attention projections along with the detached keys
    /// and values, leaving only the task embedding trainable on that path.
    pub freeze_prior_projections: bool,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Full,
            d: 16,
            d_k: 16,
            heads: 2,
            h: 128,
            h_gate: 64,
            tie_layers: 1,
            gate_layers: 2,
            gamma: 2.0,
            lambda: 1e-5,
            freeze_prior_projections: false,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_k == 0 || self.h < 2 || self.h_gate == 0 {
            return Err(EcupError::InvalidSpec(
                "d, d_k, h_gate must be positive and h >= 2".into(),
            ));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(EcupError::InvalidSpec(format!(
                "heads must divide d: d = {}, heads = {}",
                self.d, self.heads
            )));
        }
        if self.tie_layers == 0 || self.gate_layers == 0 {
            return Err(EcupError::InvalidSpec(
                "tie_layers and gate_layers must be >= 1".into(),
            ));
        }
        if self.gamma <= 0.0 || self.lambda < 0.0 {
            return Err(EcupError::InvalidSpec(
                "gamma must be > 0 and lambda >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Widths of the gated tower layers 1..L-1.
    pub fn tower_widths(&self) -> [usize; TOWER_LAYERS - 1] {
        [self.h, (self.h / 2).max(1)]
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// A configured model: schema + hyperparameters + parameters.
#[derive(Debug, Clone)]
pub struct EcupModel {
    pub schema: FeatureSchema,
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl EcupModel {
    /// Fresh model with seeded Glorot-uniform initialization. Gate output
    /// layers start at zero so every delta is gamma/2 on the first step.
    pub fn new(schema: FeatureSchema, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&schema, &config)?;
        Ok(EcupModel {
            schema,
            config,
            params,
        })
    }
}

fn glorot(shape: [usize; 2], rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    let n = shape[0] * shape[1];
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-limit..limit)).collect(),
    )
    .expect("glorot shape")
}

fn glorot_vec(len: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    // Dense-field weights are (d,) maps from a scalar: fan_in 1.
    let limit = (6.0 / (1 + fan_out) as f64).sqrt();
    Tensor::new(vec![len], (0..len).map(|_| rng.gen_range(-limit..limit)).collect())
        .expect("glorot vector")
}

fn init_params(schema: &FeatureSchema, cfg: &ModelConfig) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let d = cfg.d;
    let f = schema.feature_count();

    // Field embeddings, in schema order.
    for field in schema.feature_fields() {
        match field.role {
            FieldRole::Dense => {
                store.insert(
                    &format!("embed.dense.{}.w", field.name),
                    glorot_vec(d, d, &mut rng),
                    true,
                )?;
                store.insert(
                    &format!("embed.dense.{}.b", field.name),
                    Tensor::zeros(vec![d]),
                    true,
                )?;
            }
            FieldRole::Sparse { cardinality } => {
                store.insert(
                    &format!("embed.sparse.{}.table", field.name),
                    glorot([cardinality, d], &mut rng),
                    true,
                )?;
            }
            _ => unreachable!("feature_fields yields dense/sparse only"),
        }
    }
    store.insert(
        "embed.treatment.table",
        glorot([schema.treatment_count + 1, d], &mut rng),
        true,
    )?;

    // Treatment-enhanced network.
    if cfg.variant.has_tenet() {
        for unit in ["tenet.tau_g", "tenet.tau_w"] {
            for mat in ["wq", "wk", "wv"] {
                store.insert(&format!("{}.attn.{}", unit, mat), glorot([d, cfg.d_k], &mut rng), true)?;
            }
            store.insert(&format!("{}.attn.wp", unit), glorot([cfg.d_k, d], &mut rng), true)?;
            for layer in 0..cfg.tie_layers {
                store.insert(
                    &format!("{}.tie.l{}.w", unit, layer),
                    glorot([d, d], &mut rng),
                    true,
                )?;
                store.insert(
                    &format!("{}.tie.l{}.b", unit, layer),
                    Tensor::zeros(vec![d]),
                    true,
                )?;
            }
        }
    }
    if cfg.variant.has_attention_block() {
        let dh = cfg.head_dim();
        for head in 0..cfg.heads {
            for mat in ["wq", "wk", "wv"] {
                store.insert(
                    &format!("tenet.attn.head{}.{}", head, mat),
                    glorot([d, dh], &mut rng),
                    true,
                )?;
            }
        }
        store.insert("tenet.attn.wo", glorot([d, d], &mut rng), true)?;
    }

    // Shared towers and per-task heads.
    let widths = cfg.tower_widths();
    let mut fan_in = (f + 1) * d;
    for (i, &w) in widths.iter().enumerate() {
        store.insert(
            &format!("ecenet.tower.l{}.w", i + 1),
            glorot([fan_in, w], &mut rng),
            true,
        )?;
        store.insert(&format!("ecenet.tower.l{}.b", i + 1), Tensor::zeros(vec![w]), true)?;
        fan_in = w;
    }
    for head in ["click", "conversion"] {
        store.insert(
            &format!("ecenet.head.{}.w", head),
            glorot([fan_in, 1], &mut rng),
            true,
        )?;
        store.insert(&format!("ecenet.head.{}.b", head), Tensor::zeros(vec![1]), true)?;
    }

    // Task priors and gates.
    if cfg.variant.has_taegate() {
        store.insert("ecenet.task.table", glorot([TASKS, d], &mut rng), true)?;
        let dh = cfg.head_dim();
        let train_proj = !cfg.freeze_prior_projections;
        for head in 0..cfg.heads {
            for mat in ["wq", "wk", "wv"] {
                store.insert(
                    &format!("ecenet.prior.head{}.{}", head, mat),
                    glorot([d, dh], &mut rng),
                    train_proj,
                )?;
            }
        }
        store.insert("ecenet.prior.wo", glorot([d, d], &mut rng), train_proj)?;

        for (i, &w) in widths.iter().enumerate() {
            let gate = format!("ecenet.gate.l{}", i + 1);
            let mut fan = TASKS * d;
            for layer in 0..cfg.gate_layers - 1 {
                store.insert(
                    &format!("{}.fc{}.w", gate, layer),
                    glorot([fan, cfg.h_gate], &mut rng),
                    true,
                )?;
                store.insert(&format!("{}.fc{}.b", gate, layer), Tensor::zeros(vec![cfg.h_gate]), true)?;
                fan = cfg.h_gate;
            }
            // Zero-initialized output layer: sigmoid(0) * gamma = gamma / 2,
            // so with gamma = 2 the first step matches an ungated tower.
            store.insert(
                &format!("{}.out.w", gate),
                Tensor::zeros(vec![fan, w * TASKS]),
                true,
            )?;
            store.insert(&format!("{}.out.b", gate), Tensor::zeros(vec![w * TASKS]), true)?;
        }
    }
    Ok(store)
}

/// Column-major view of a slice of instances, with labels as floats and an
/// optional counterfactual treatment substitution.
#[derive(Debug, Clone)]
pub struct Batch {
    pub n: usize,
    /// Per dense field (schema order among dense fields): one column.
    pub dense: Vec<Vec<f64>>,
    /// Per sparse field: one code column.
    pub sparse: Vec<Vec<usize>>,
    pub t: Vec<usize>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub y_and_z: Vec<f64>,
}

impl Batch {
    pub fn from_rows(schema: &FeatureSchema, rows: &[&Instance], t_override: Option<usize>) -> Result<Batch> {
        if let Some(t) = t_override {
            if t > schema.treatment_count {
                return Err(EcupError::CodeOutOfRange {
                    row: 0,
                    field: schema.treatment_field().name.clone(),
                    code: t,
                    cardinality: schema.treatment_count + 1,
                });
            }
        }
        let n = rows.len();
        let n_dense = schema.dense_fields().count();
        let n_sparse = schema.sparse_fields().count();
        let mut dense = vec![Vec::with_capacity(n); n_dense];
        let mut sparse = vec![Vec::with_capacity(n); n_sparse];
        let mut t = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        let mut y_and_z = Vec::with_capacity(n);
        for row in rows {
            for (j, col) in dense.iter_mut().enumerate() {
                col.push(row.dense[j]);
            }
            for (j, col) in sparse.iter_mut().enumerate() {
                col.push(row.sparse[j]);
            }
            t.push(t_override.unwrap_or(row.t));
            y.push(row.y as f64);
            z.push(row.z as f64);
            y_and_z.push(f64::from(row.y == 1 && row.z == 1));
        }
        Ok(Batch {
            n,
            dense,
            sparse,
            t,
            y,
            z,
            y_and_z,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::{inst, toy_schema};

    #[test]
    fn variant_round_trips_and_gates_params() {
        for v in [
            Variant::Full,
            Variant::NoTenet,
            Variant::AttentionTenet,
            Variant::NoTaegate,
            Variant::NoEcenet,
        ] {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }

        let schema = toy_schema(1);
        let mk = |variant| {
            let cfg = ModelConfig {
                variant,
                d: 4,
                d_k: 4,
                h: 8,
                h_gate: 4,
                ..Default::default()
            };
            EcupModel::new(schema.clone(), cfg).unwrap()
        };
        let no_tenet = mk(Variant::NoTenet);
        assert!(!no_tenet.params.names().any(|n| n.starts_with("tenet.")));
        let no_gate = mk(Variant::NoTaegate);
        assert!(!no_gate.params.names().any(|n| n.starts_with("ecenet.gate")));
        assert!(!no_gate.params.names().any(|n| n.starts_with("ecenet.prior")));
        let full = mk(Variant::Full);
        assert!(full.params.names().any(|n| n == "ecenet.gate.l1.out.w"));
        assert!(full.params.names().any(|n| n == "tenet.tau_w.attn.wq"));
    }

    #[test]
    fn init_is_deterministic_under_seed() {
        let schema = toy_schema(1);
        let cfg = ModelConfig {
            d: 4,
            d_k: 4,
            h: 8,
            h_gate: 4,
            ..Default::default()
        };
        let a = EcupModel::new(schema.clone(), cfg.clone()).unwrap();
        let b = EcupModel::new(schema, cfg).unwrap();
        for (name, entry) in a.params.iter() {
            assert_eq!(Some(&entry.tensor), b.params.get(name), "{}", name);
        }
    }

    #[test]
    fn config_validation_catches_bad_heads() {
        let cfg = ModelConfig {
            d: 6,
            heads: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn batch_applies_treatment_override() {
        let schema = toy_schema(1);
        let rows = [inst(1.0, 2, 1, 1, 1), inst(-0.5, 0, 0, 1, 0)];
        let refs: Vec<&Instance> = rows.iter().collect();
        let b = Batch::from_rows(&schema, &refs, None).unwrap();
        assert_eq!(b.t, vec![1, 0]);
        assert_eq!(b.y_and_z, vec![1.0, 0.0]);
        let b0 = Batch::from_rows(&schema, &refs, Some(0)).unwrap();
        assert_eq!(b0.t, vec![0, 0]);
        assert!(Batch::from_rows(&schema, &refs, Some(5)).is_err());
    }
}
