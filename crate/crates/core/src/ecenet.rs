//! Entire chain-enhanced network: task-prior multi-head attention over the
//! detached treatment-enhanced features, per-layer activation gates, shared
//! towers with task heads, the entire-space loss, and S-learner inference.

use serde::{Deserialize, Serialize};

use crate::error::{EcupError, Result};
use crate::model::{Batch, EcupModel, ModelConfig, TASKS};
use crate::params::ParamStore;
use crate::schema::FeatureSchema;
use crate::tape::{Tape, Var};
use crate::tenet::{embed_inputs, multihead_attention, tau_forward, tegate, ParamVars};
use crate::tensor::Tensor;

/// Chain head probabilities for one instance; the chain probability is the
/// exact product of the two head outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainPrediction {
    pub pctr: f64,
    pub pcvr: f64,
    pub pctcvr: f64,
}

/// Estimated effects of each treatment k = 1..K versus control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IteEstimate {
    pub tau_y: Vec<f64>,
    pub tau_z: Vec<f64>,
}

/// Head outputs under every counterfactual treatment code 0..=K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualProfile {
    pub pctr: Vec<f64>,
    pub pcvr: Vec<f64>,
    pub pctcvr: Vec<f64>,
}

impl CounterfactualProfile {
    /// S-learner effects: differences of the counterfactual head outputs.
    pub fn ite(&self) -> IteEstimate {
        let k = self.pctr.len() - 1;
        IteEstimate {
            tau_y: (1..=k).map(|t| self.pctr[t] - self.pctr[0]).collect(),
            tau_z: (1..=k).map(|t| self.pctcvr[t] - self.pctcvr[0]).collect(),
        }
    }
}

/// Handles to the interesting intermediate values of one forward pass.
pub struct ForwardTrace {
    pub pctr: Var,
    pub pcvr: Var,
    pub pctcvr: Var,
    pub click_logit: Var,
    pub conversion_logit: Var,
    pub e_x: Var,
    pub e_tr: Var,
    pub e_r: Var,
    /// Task-prior vectors (click, conversion) when the gate path is present.
    pub e_pri: Option<[Var; 2]>,
    /// Full gate outputs per gated layer, each of shape (B, h_l * T).
    pub deltas: Vec<Var>,
}

/// Prior attention for one task: the task embedding queries the detached
/// treatment-enhanced rows, so gradients reach the task embedding and the
/// attention projections but never the upstream feature path.
pub fn prior_attention(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &ModelConfig,
    task: usize,
    e_r_detached: Var,
) -> Result<Var> {
    let query = tape.lookup(vars["ecenet.task.table"], &[task])?;
    multihead_attention(
        tape,
        cfg,
        query,
        e_r_detached,
        |head, mat| vars[&format!("ecenet.prior.head{}.{}", head, mat)],
        vars["ecenet.prior.wo"],
    )
}

/// One gate: an MLP over the concatenated task priors, sigmoid output scaled
/// by gamma, shaped (B, width * T) and sliced into per-task columns later.
pub fn taegate_layer(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &ModelConfig,
    layer: usize,
    pri_cat: Var,
) -> Result<Var> {
    let gate = format!("ecenet.gate.l{}", layer);
    let mut h = pri_cat;
    for i in 0..cfg.gate_layers - 1 {
        h = tape.affine(h, vars[&format!("{}.fc{}.w", gate, i)], vars[&format!("{}.fc{}.b", gate, i)])?;
        h = tape.relu(h)?;
    }
    let out = tape.affine(h, vars[&format!("{}.out.w", gate)], vars[&format!("{}.out.b", gate)])?;
    let out = tape.sigmoid(out)?;
    tape.scale(out, cfg.gamma)
}

/// Options for [`forward_opts`].
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Replaces the detached keys/values of the prior attention with this
    /// fixed tensor. Gradient verification uses it to realize the
    /// no-propagation semantics under finite differences: the detached
    /// branch must not move when parameters are perturbed.
    pub pin_detached: Option<Tensor>,
}

/// Variant-appropriate forward pass over a batch.
pub fn forward(
    tape: &mut Tape,
    vars: &ParamVars,
    schema: &FeatureSchema,
    cfg: &ModelConfig,
    batch: &Batch,
) -> Result<ForwardTrace> {
    forward_opts(tape, vars, schema, cfg, batch, &ForwardOptions::default())
}

/// [`forward`] with explicit options.
pub fn forward_opts(
    tape: &mut Tape,
    vars: &ParamVars,
    schema: &FeatureSchema,
    cfg: &ModelConfig,
    batch: &Batch,
    opts: &ForwardOptions,
) -> Result<ForwardTrace> {
    if batch.n == 0 {
        return Err(EcupError::InvalidSpec("forward over an empty batch".into()));
    }
    let (e_x, e_tr) = embed_inputs(tape, vars, schema, cfg, batch)?;

    let e_r = if cfg.variant.has_tenet() {
        let e_tau = tau_forward(tape, vars, "tenet.tau_g", cfg, e_x, e_tr)?;
        let w_b = tau_forward(tape, vars, "tenet.tau_w", cfg, e_x, e_tr)?;
        tegate(tape, e_x, e_tau, w_b, e_tr)?
    } else if cfg.variant.has_attention_block() {
        let cat = tape.concat(&[e_x, e_tr], 1)?;
        multihead_attention(
            tape,
            cfg,
            cat,
            cat,
            |head, mat| vars[&format!("tenet.attn.head{}.{}", head, mat)],
            vars["tenet.attn.wo"],
        )?
    } else {
        tape.concat(&[e_x, e_tr], 1)?
    };

    let widths = cfg.tower_widths();
    let (e_pri, deltas, task_deltas) = if cfg.variant.has_taegate() {
        let detached = match &opts.pin_detached {
            Some(pinned) => tape.input(pinned.clone())?,
            None => tape.stop_gradient(e_r)?,
        };
        let pri_click = prior_attention(tape, vars, cfg, 0, detached)?;
        let pri_conv = prior_attention(tape, vars, cfg, 1, detached)?;
        let b = batch.n;
        let flat_click = tape.reshape(pri_click, vec![b, cfg.d])?;
        let flat_conv = tape.reshape(pri_conv, vec![b, cfg.d])?;
        let pri_cat = tape.concat(&[flat_click, flat_conv], 1)?;
        let mut deltas = Vec::with_capacity(widths.len());
        let mut task_deltas = Vec::with_capacity(widths.len());
        for (i, &w) in widths.iter().enumerate() {
            let gate = taegate_layer(tape, vars, cfg, i + 1, pri_cat)?;
            let per_task: Vec<Var> = (0..TASKS)
                .map(|ta| tape.slice_last(gate, ta * w, w))
                .collect::<Result<_>>()?;
            deltas.push(gate);
            task_deltas.push(per_task);
        }
        (Some([pri_click, pri_conv]), deltas, Some(task_deltas))
    } else {
        (None, Vec::new(), None)
    };

    // Shared towers: identical affine layers for both tasks, with per-task
    // activation streams when gates are present.
    let x = tape.flatten_trailing(e_r)?;
    let logits: Vec<Var> = match &task_deltas {
        Some(task_deltas) => {
            let mut per_task_logits = Vec::with_capacity(TASKS);
            for ta in 0..TASKS {
                let mut h = x;
                for (i, _) in widths.iter().enumerate() {
                    let w = vars[&format!("ecenet.tower.l{}.w", i + 1)];
                    let b = vars[&format!("ecenet.tower.l{}.b", i + 1)];
                    h = tape.affine(h, w, b)?;
                    h = tape.relu(h)?;
                    h = tape.mul(h, task_deltas[i][ta])?;
                }
                per_task_logits.push(h);
            }
            per_task_logits
        }
        None => {
            let mut h = x;
            for (i, _) in widths.iter().enumerate() {
                let w = vars[&format!("ecenet.tower.l{}.w", i + 1)];
                let b = vars[&format!("ecenet.tower.l{}.b", i + 1)];
                h = tape.affine(h, w, b)?;
                h = tape.relu(h)?;
            }
            vec![h; TASKS]
        }
    };
    let click_logit = tape.affine(
        logits[0],
        vars["ecenet.head.click.w"],
        vars["ecenet.head.click.b"],
    )?;
    let conversion_logit = tape.affine(
        logits[1],
        vars["ecenet.head.conversion.w"],
        vars["ecenet.head.conversion.b"],
    )?;
    let pctr = tape.sigmoid(click_logit)?;
    let pcvr = tape.sigmoid(conversion_logit)?;
    let pctcvr = tape.mul(pctr, pcvr)?;

    Ok(ForwardTrace {
        pctr,
        pcvr,
        pctcvr,
        click_logit,
        conversion_logit,
        e_x,
        e_tr,
        e_r,
        e_pri,
        deltas,
    })
}

/// Entire-space training loss: batch mean of `BCE(y, pCTR) + BCE(y&z,
/// pCTR*pCVR)` plus `lambda * sum(theta^2)`. The conversion head is never
/// supervised by z directly; its signal arrives through the product term.
/// The click-set variant replaces the product term with conversion BCE over
/// clicked rows only.
pub fn loss(
    tape: &mut Tape,
    vars: &ParamVars,
    store: &ParamStore,
    cfg: &ModelConfig,
    trace: &ForwardTrace,
    batch: &Batch,
) -> Result<Var> {
    if batch.n == 0 {
        return Err(EcupError::InvalidSpec("loss over an empty batch".into()));
    }
    let b = batch.n;
    let y = tape.input(Tensor::new(vec![b, 1], batch.y.clone())?)?;
    let click_bce = tape.bce_logits(trace.click_logit, y)?;

    let mut total = if cfg.variant.entire_space_loss() {
        let yz = tape.input(Tensor::new(vec![b, 1], batch.y_and_z.clone())?)?;
        let chain_bce = tape.bce_probs(trace.pctcvr, yz)?;
        let per_row = tape.add(click_bce, chain_bce)?;
        tape.mean_all(per_row)?
    } else {
        let click_term = tape.mean_all(click_bce)?;
        let clicks: f64 = batch.y.iter().sum();
        if clicks > 0.0 {
            let z = tape.input(Tensor::new(vec![b, 1], batch.z.clone())?)?;
            let conv_bce = tape.bce_logits(trace.conversion_logit, z)?;
            let masked = tape.mul(conv_bce, y)?;
            let sum = tape.sum_all(masked)?;
            let conv_term = tape.scale(sum, 1.0 / clicks)?;
            tape.add(click_term, conv_term)?
        } else {
            click_term
        }
    };

    if cfg.lambda > 0.0 {
        let mut reg: Option<Var> = None;
        for (name, var) in vars {
            if !store.is_trainable(name) {
                continue;
            }
            let sq = tape.sum_squares(*var)?;
            reg = Some(match reg {
                Some(acc) => tape.add(acc, sq)?,
                None => sq,
            });
        }
        if let Some(reg) = reg {
            let scaled = tape.scale(reg, cfg.lambda)?;
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}

const PREDICT_CHUNK: usize = 4096;

/// Head probabilities for each row, optionally under a counterfactual
/// treatment code.
pub fn predict_probs_batch(
    model: &EcupModel,
    rows: &[crate::data::Instance],
    t_override: Option<usize>,
) -> Result<Vec<ChainPrediction>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(PREDICT_CHUNK.max(1)) {
        let refs: Vec<&crate::data::Instance> = chunk.iter().collect();
        let batch = Batch::from_rows(&model.schema, &refs, t_override)?;
        let mut tape = Tape::new();
        let vars = model.params.stage(&mut tape)?;
        let trace = forward(&mut tape, &vars, &model.schema, &model.config, &batch)?;
        let pctr = tape.value(trace.pctr).values();
        let pcvr = tape.value(trace.pcvr).values();
        let pctcvr = tape.value(trace.pctcvr).values();
        for i in 0..batch.n {
            out.push(ChainPrediction {
                pctr: pctr[i],
                pcvr: pcvr[i],
                pctcvr: pctcvr[i],
            });
        }
    }
    Ok(out)
}

pub fn predict_probs(
    model: &EcupModel,
    inst: &crate::data::Instance,
    t_override: Option<usize>,
) -> Result<ChainPrediction> {
    Ok(predict_probs_batch(model, std::slice::from_ref(inst), t_override)?[0])
}

/// Counterfactual profile per row: one forward pass per treatment code, so
/// each instance costs K + 1 passes (2K + 2 tower evaluations).
pub fn counterfactual_profiles(
    model: &EcupModel,
    rows: &[crate::data::Instance],
) -> Result<Vec<CounterfactualProfile>> {
    let k = model.schema.treatment_count;
    let mut per_t = Vec::with_capacity(k + 1);
    for t in 0..=k {
        per_t.push(predict_probs_batch(model, rows, Some(t))?);
    }
    Ok((0..rows.len())
        .map(|i| CounterfactualProfile {
            pctr: per_t.iter().map(|p| p[i].pctr).collect(),
            pcvr: per_t.iter().map(|p| p[i].pcvr).collect(),
            pctcvr: per_t.iter().map(|p| p[i].pctcvr).collect(),
        })
        .collect())
}

pub fn predict_ite_batch(
    model: &EcupModel,
    rows: &[crate::data::Instance],
) -> Result<Vec<IteEstimate>> {
    Ok(counterfactual_profiles(model, rows)?
        .iter()
        .map(CounterfactualProfile::ite)
        .collect())
}

pub fn predict_ite(model: &EcupModel, inst: &crate::data::Instance) -> Result<IteEstimate> {
    Ok(predict_ite_batch(model, std::slice::from_ref(inst))?.remove(0))
}
