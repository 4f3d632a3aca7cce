//! Initial embeddings and the treatment-enhanced network: two independent
//! treatment-aware units produce a treatment-aware representation and
//! bit-level weights, fused by a gate that blends them with the initial
//! features entry-wise.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::model::{Batch, ModelConfig};
use crate::schema::{FeatureSchema, FieldRole};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub type ParamVars = BTreeMap<String, Var>;

/// Builds the initial embeddings: dense field j contributes `w_j * x_j + b_j`,
/// sparse field j a table row, concatenated in schema order to `(B, f, d)`;
/// the treatment code is looked up to `(B, 1, d)`.
pub fn embed_inputs(
    tape: &mut Tape,
    vars: &ParamVars,
    schema: &FeatureSchema,
    cfg: &ModelConfig,
    batch: &Batch,
) -> Result<(Var, Var)> {
    let d = cfg.d;
    let b = batch.n;
    let mut field_rows = Vec::with_capacity(schema.feature_count());
    let mut dense_ix = 0usize;
    let mut sparse_ix = 0usize;
    for field in schema.feature_fields() {
        let row = match field.role {
            FieldRole::Dense => {
                let col = tape.input(Tensor::new(vec![b, 1], batch.dense[dense_ix].clone())?)?;
                dense_ix += 1;
                let w = tape.reshape(vars[&format!("embed.dense.{}.w", field.name)], vec![1, d])?;
                let bias = vars[&format!("embed.dense.{}.b", field.name)];
                let xw = tape.matmul(col, w)?;
                tape.add(xw, bias)?
            }
            FieldRole::Sparse { .. } => {
                let table = vars[&format!("embed.sparse.{}.table", field.name)];
                let codes = &batch.sparse[sparse_ix];
                sparse_ix += 1;
                tape.lookup(table, codes)?
            }
            _ => unreachable!("feature_fields yields dense/sparse only"),
        };
        field_rows.push(tape.reshape(row, vec![b, 1, d])?);
    }
    let e_x = tape.concat(&field_rows, 1)?;
    let tr = tape.lookup(vars["embed.treatment.table"], &batch.t)?;
    let e_tr = tape.reshape(tr, vec![b, 1, d])?;
    Ok((e_x, e_tr))
}

/// Single-head self-attention over the feature rows:
/// `softmax(QK^T / sqrt(d_k)) V` restored to width `d` by a linear map.
pub fn self_attention(
    tape: &mut Tape,
    vars: &ParamVars,
    prefix: &str,
    cfg: &ModelConfig,
    e_x: Var,
) -> Result<Var> {
    let q = tape.matmul(e_x, vars[&format!("{}.attn.wq", prefix)])?;
    let k = tape.matmul(e_x, vars[&format!("{}.attn.wk", prefix)])?;
    let v = tape.matmul(e_x, vars[&format!("{}.attn.wv", prefix)])?;
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (cfg.d_k as f64).sqrt())?;
    let attn = tape.softmax(scores)?;
    let e_v = tape.matmul(attn, v)?;
    tape.matmul(e_v, vars[&format!("{}.attn.wp", prefix)])
}

/// Treatment information extractor: an MLP over the treatment embedding with
/// relu on hidden layers and a linear output of width `d`.
pub fn tie_forward(
    tape: &mut Tape,
    vars: &ParamVars,
    prefix: &str,
    cfg: &ModelConfig,
    e_tr: Var,
) -> Result<Var> {
    let b = tape.value(e_tr).shape()[0];
    let mut h = tape.reshape(e_tr, vec![b, cfg.d])?;
    for layer in 0..cfg.tie_layers {
        let w = vars[&format!("{}.tie.l{}.w", prefix, layer)];
        let bias = vars[&format!("{}.tie.l{}.b", prefix, layer)];
        h = tape.affine(h, w, bias)?;
        if layer + 1 < cfg.tie_layers {
            h = tape.relu(h)?;
        }
    }
    tape.reshape(h, vec![b, 1, cfg.d])
}

/// One treatment-aware unit: cross-features from self-attention, scaled
/// entry-wise by the extracted treatment information (broadcast over rows).
pub fn tau_forward(
    tape: &mut Tape,
    vars: &ParamVars,
    prefix: &str,
    cfg: &ModelConfig,
    e_x: Var,
    e_tr: Var,
) -> Result<Var> {
    let e_att = self_attention(tape, vars, prefix, cfg, e_x)?;
    let e_bit = tie_forward(tape, vars, prefix, cfg, e_tr)?;
    tape.mul(e_att, e_bit)
}

/// Treatment-enhanced gate: blends initial and treatment-aware features with
/// bit-level weights `sigmoid(w_b)` and appends the treatment row.
pub fn tegate(tape: &mut Tape, e_x: Var, e_tau: Var, w_b: Var, e_tr: Var) -> Result<Var> {
    let g = tape.sigmoid(w_b)?;
    let one = tape.input(Tensor::scalar(1.0))?;
    let complement = tape.sub(one, g)?;
    let keep = tape.mul(e_x, g)?;
    let adapt = tape.mul(e_tau, complement)?;
    let gated = tape.add(keep, adapt)?;
    tape.concat(&[gated, e_tr], 1)
}

/// Multi-head scaled dot-product attention. `query` may be a shared `(m, d)`
/// matrix or batched `(B, m, d)`; keys/values are batched `(B, n, d)`.
pub fn multihead_attention(
    tape: &mut Tape,
    cfg: &ModelConfig,
    query: Var,
    keys: Var,
    proj: impl Fn(usize, &str) -> Var,
    out_proj: Var,
) -> Result<Var> {
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let q = tape.matmul(query, proj(head, "wq"))?;
        let k = tape.matmul(keys, proj(head, "wk"))?;
        let v = tape.matmul(keys, proj(head, "wv"))?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax(scores)?;
        heads.push(tape.matmul(attn, v)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        let rank = tape.value(heads[0]).rank();
        tape.concat(&heads, rank - 1)?
    };
    tape.matmul(cat, out_proj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::{inst, toy_schema};
    use crate::model::{EcupModel, Variant};
    use crate::params::ParamStore;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(d: usize, d_k: usize) -> ModelConfig {
        ModelConfig {
            variant: Variant::Full,
            d,
            d_k,
            heads: 1,
            h: 4,
            h_gate: 4,
            ..Default::default()
        }
    }

    fn stage(model: &EcupModel, tape: &mut Tape) -> ParamVars {
        model.params.stage(tape).unwrap()
    }

    #[test]
    fn embeddings_follow_definitions() {
        let schema = toy_schema(1);
        let cfg = tiny_cfg(3, 3);
        let mut model = EcupModel::new(schema.clone(), cfg.clone()).unwrap();
        // Zero bias so a zero dense value contributes a zero row.
        model
            .params
            .set_values("embed.dense.x0.b", Tensor::zeros(vec![3]))
            .unwrap();
        let rows = [inst(0.0, 2, 1, 0, 0)];
        let refs: Vec<_> = rows.iter().collect();
        let batch = Batch::from_rows(&schema, &refs, None).unwrap();
        let mut tape = Tape::new();
        let vars = stage(&model, &mut tape);
        let (e_x, e_tr) = embed_inputs(&mut tape, &vars, &schema, &cfg, &batch).unwrap();
        assert_eq!(tape.value(e_x).shape(), &[1, 2, 3]);
        assert_eq!(tape.value(e_tr).shape(), &[1, 1, 3]);
        // Dense row is exactly zero.
        assert_eq!(&tape.value(e_x).values()[..3], &[0.0, 0.0, 0.0]);
        // Sparse row is row 2 of the table.
        let table = model.params.get("embed.sparse.c0.table").unwrap();
        assert_eq!(&tape.value(e_x).values()[3..6], &table.values()[6..9]);
        // Treatment row is row 1 of the treatment table.
        let tr = model.params.get("embed.treatment.table").unwrap();
        assert_eq!(tape.value(e_tr).values(), &tr.values()[3..6]);
    }

    /// Hand-computed single-head attention: f = 2, d = d_k = 1, all
    /// projections = [1], rows (1, 0). First-row weights are softmax(1, 0).
    #[test]
    fn self_attention_matches_hand_computation() {
        let cfg = tiny_cfg(1, 1);
        let mut store = ParamStore::new();
        for mat in ["wq", "wk", "wv", "wp"] {
            store
                .insert(&format!("tau.attn.{}", mat), Tensor::full(vec![1, 1], 1.0), true)
                .unwrap();
        }
        let mut tape = Tape::new();
        let vars = store.stage(&mut tape).unwrap();
        let e_x = tape
            .input(Tensor::new(vec![1, 2, 1], vec![1.0, 0.0]).unwrap())
            .unwrap();
        let out = self_attention(&mut tape, &vars, "tau", &cfg, e_x).unwrap();
        let w = std::f64::consts::E / (1.0 + std::f64::consts::E);
        assert_relative_eq!(tape.value(out).values()[0], w, epsilon = 1e-12);
        assert_relative_eq!(tape.value(out).values()[0], 0.7310585786300049, epsilon = 1e-12);
        assert_relative_eq!(tape.value(out).values()[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn single_row_attention_reduces_to_projections() {
        // f = 1: the lone softmax weight is 1, so out = (x . wv) . wp.
        let cfg = tiny_cfg(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        for mat in ["wq", "wk", "wv", "wp"] {
            let vals: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            store
                .insert(&format!("t.attn.{}", mat), Tensor::new(vec![2, 2], vals).unwrap(), true)
                .unwrap();
        }
        let mut tape = Tape::new();
        let vars = store.stage(&mut tape).unwrap();
        let e_x = tape
            .input(Tensor::new(vec![1, 1, 2], vec![0.3, -0.7]).unwrap())
            .unwrap();
        let out = self_attention(&mut tape, &vars, "t", &cfg, e_x).unwrap();
        let xv = tape.matmul(e_x, vars["t.attn.wv"]).unwrap();
        let want = tape.matmul(xv, vars["t.attn.wp"]).unwrap();
        for (a, b) in tape.value(out).values().iter().zip(tape.value(want).values()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn identical_rows_attend_uniformly() {
        let cfg = tiny_cfg(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        for mat in ["wq", "wk", "wv", "wp"] {
            let vals: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            store
                .insert(&format!("t.attn.{}", mat), Tensor::new(vec![2, 2], vals).unwrap(), true)
                .unwrap();
        }
        let mut tape = Tape::new();
        let vars = store.stage(&mut tape).unwrap();
        let e_x = tape
            .input(Tensor::new(vec![1, 3, 2], vec![0.4, -0.2, 0.4, -0.2, 0.4, -0.2]).unwrap())
            .unwrap();
        let out = self_attention(&mut tape, &vars, "t", &cfg, e_x).unwrap();
        let v = tape.value(out).values();
        for r in 1..3 {
            assert_relative_eq!(v[0], v[r * 2], epsilon = 1e-12);
            assert_relative_eq!(v[1], v[r * 2 + 1], epsilon = 1e-12);
        }
    }

    #[test]
    fn tie_zero_weights_and_identity_layer() {
        let cfg = tiny_cfg(2, 2);
        let mut store = ParamStore::new();
        store.insert("u.tie.l0.w", Tensor::zeros(vec![2, 2]), true).unwrap();
        store.insert("u.tie.l0.b", Tensor::zeros(vec![2]), true).unwrap();
        let mut tape = Tape::new();
        let vars = store.stage(&mut tape).unwrap();
        let e_tr = tape
            .input(Tensor::new(vec![1, 1, 2], vec![0.9, -0.4]).unwrap())
            .unwrap();
        let out = tie_forward(&mut tape, &vars, "u", &cfg, e_tr).unwrap();
        assert_eq!(tape.value(out).values(), &[0.0, 0.0]);

        // Identity single layer reproduces the treatment embedding with no relu.
        let mut store = ParamStore::new();
        store
            .insert("u.tie.l0.w", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), true)
            .unwrap();
        store.insert("u.tie.l0.b", Tensor::zeros(vec![2]), true).unwrap();
        let mut tape = Tape::new();
        let vars = store.stage(&mut tape).unwrap();
        let e_tr = tape
            .input(Tensor::new(vec![1, 1, 2], vec![0.9, -0.4]).unwrap())
            .unwrap();
        let out = tie_forward(&mut tape, &vars, "u", &cfg, e_tr).unwrap();
        assert_eq!(tape.value(out).values(), &[0.9, -0.4]);
    }

    #[test]
    fn tau_scales_attention_by_treatment_information() {
        // TIE with zero weights and bias = (1, ..) makes E^bit = 1, so the
        // unit output equals the attention output; bias = 2 doubles it.
        let cfg = tiny_cfg(1, 1);
        for (bias, factor) in [(1.0, 1.0), (2.0, 2.0)] {
            let mut store = ParamStore::new();
            for mat in ["wq", "wk", "wv", "wp"] {
                store
                    .insert(&format!("u.attn.{}", mat), Tensor::full(vec![1, 1], 1.0), true)
                    .unwrap();
            }
            store.insert("u.tie.l0.w", Tensor::zeros(vec![1, 1]), true).unwrap();
            store.insert("u.tie.l0.b", Tensor::full(vec![1], bias), true).unwrap();
            let mut tape = Tape::new();
            let vars = store.stage(&mut tape).unwrap();
            let e_x = tape
                .input(Tensor::new(vec![1, 2, 1], vec![1.0, 0.0]).unwrap())
                .unwrap();
            let e_tr = tape.input(Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap()).unwrap();
            let out = tau_forward(&mut tape, &vars, "u", &cfg, e_x, e_tr).unwrap();
            assert_relative_eq!(
                tape.value(out).values()[0],
                0.7310585786300049 * factor,
                epsilon = 1e-12
            );
            assert_relative_eq!(tape.value(out).values()[1], 0.5 * factor, epsilon = 1e-12);
        }
    }

    #[test]
    fn tegate_limits_and_fixed_points() {
        let mut tape = Tape::new();
        let e_x = tape
            .input(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let e_tau = tape
            .input(Tensor::new(vec![1, 2, 2], vec![-1.0, 0.0, 1.0, 8.0]).unwrap())
            .unwrap();
        let e_tr = tape.input(Tensor::zeros(vec![1, 1, 2])).unwrap();

        // sigmoid saturated high: initial features pass through.
        let w_hi = tape.input(Tensor::full(vec![1, 2, 2], 60.0)).unwrap();
        let out = tegate(&mut tape, e_x, e_tau, w_hi, e_tr).unwrap();
        assert_eq!(&tape.value(out).values()[..4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.value(out).shape(), &[1, 3, 2]);

        // w_b = 0: the exact midpoint.
        let w_mid = tape.input(Tensor::zeros(vec![1, 2, 2])).unwrap();
        let out = tegate(&mut tape, e_x, e_tau, w_mid, e_tr).unwrap();
        assert_eq!(&tape.value(out).values()[..4], &[0.0, 1.0, 2.0, 6.0]);

        // e_x == e_tau is a fixed point for any gate.
        let w_any = tape
            .input(Tensor::new(vec![1, 2, 2], vec![-3.0, 0.4, 12.0, -0.7]).unwrap())
            .unwrap();
        let out = tegate(&mut tape, e_x, e_x, w_any, e_tr).unwrap();
        assert_eq!(&tape.value(out).values()[..4], &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn tegate_outputs_stay_within_entrywise_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = 6;
            let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let ts: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let ws: Vec<f64> = (0..n).map(|_| rng.gen_range(-20.0..20.0)).collect();
            let mut tape = Tape::new();
            let e_x = tape.input(Tensor::new(vec![1, 3, 2], xs.clone()).unwrap()).unwrap();
            let e_tau = tape.input(Tensor::new(vec![1, 3, 2], ts.clone()).unwrap()).unwrap();
            let w_b = tape.input(Tensor::new(vec![1, 3, 2], ws).unwrap()).unwrap();
            let e_tr = tape.input(Tensor::zeros(vec![1, 1, 2])).unwrap();
            let out = tegate(&mut tape, e_x, e_tau, w_b, e_tr).unwrap();
            for i in 0..n {
                let (lo, hi) = (xs[i].min(ts[i]), xs[i].max(ts[i]));
                let g = tape.value(out).values()[i];
                assert!(g >= lo - 1e-12 && g <= hi + 1e-12, "{} not in [{}, {}]", g, lo, hi);
            }
        }
    }

    #[test]
    fn independent_units_share_nothing() {
        let schema = toy_schema(1);
        let cfg = tiny_cfg(2, 2);
        let model = EcupModel::new(schema.clone(), cfg.clone()).unwrap();
        let rows = [inst(0.7, 1, 1, 0, 0), inst(-0.3, 2, 0, 0, 0)];
        let refs: Vec<_> = rows.iter().collect();
        let batch = Batch::from_rows(&schema, &refs, None).unwrap();

        let run = |params: &ParamStore| -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let vars = params.stage(&mut tape).unwrap();
            let (e_x, e_tr) = embed_inputs(&mut tape, &vars, &schema, &cfg, &batch).unwrap();
            let e_tau = tau_forward(&mut tape, &vars, "tenet.tau_g", &cfg, e_x, e_tr).unwrap();
            let w_b = tau_forward(&mut tape, &vars, "tenet.tau_w", &cfg, e_x, e_tr).unwrap();
            (
                tape.value(e_tau).values().to_vec(),
                tape.value(w_b).values().to_vec(),
            )
        };
        let (tau0, wb0) = run(&model.params);

        // Perturbing TAU_W never changes E^TAU, and vice versa.
        let mut perturbed = model.params.clone();
        let mut t = perturbed.get("tenet.tau_w.attn.wq").unwrap().clone();
        t.values_mut()[0] += 0.5;
        perturbed.set_values("tenet.tau_w.attn.wq", t).unwrap();
        let (tau1, wb1) = run(&perturbed);
        assert_eq!(tau0, tau1);
        assert_ne!(wb0, wb1);

        let mut perturbed = model.params.clone();
        let mut t = perturbed.get("tenet.tau_g.tie.l0.b").unwrap().clone();
        t.values_mut()[0] += 0.5;
        perturbed.set_values("tenet.tau_g.tie.l0.b", t).unwrap();
        let (tau2, wb2) = run(&perturbed);
        assert_ne!(tau0, tau2);
        assert_eq!(wb0, wb2);
    }
}
