//! Uplift evaluation reports: per-treatment AUUC/Qini across task views,
//! optional segment-uplift tables, and curve points for plotting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{segment_uplift, Dataset, SegmentReport};
use crate::ecenet::{predict_ite_batch, IteEstimate};
use crate::error::{EcupError, Result};
use crate::metrics::{per_treatment_eval, EvalTask, UpliftCurve};
use crate::model::EcupModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentSummary {
    pub treatment: usize,
    pub rows: usize,
    pub auuc: f64,
    pub qini: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub per_treatment: Vec<TreatmentSummary>,
    pub mean_auuc: f64,
    pub mean_qini: f64,
}

/// Evaluation report for one model on one dataset. Task keys are `ctcvr`
/// (impression view), `cvr` (click view), and `click`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpliftReport {
    pub rows: usize,
    pub treatment_count: usize,
    pub variant: String,
    pub tasks: BTreeMap<String, TaskSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<SegmentReport>>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

/// Report plus the curve points per (task, treatment), kept out of the JSON
/// body and emitted as CSV files.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: UpliftReport,
    pub curves: BTreeMap<(String, usize), UpliftCurve>,
    pub ite: Vec<IteEstimate>,
}

/// Scores a dataset with a trained model and assembles the report. When
/// `segments` is set, a segment-uplift table is added per treatment using
/// `segment_seed`.
pub fn evaluate(
    model: &EcupModel,
    ds: &Dataset,
    segments: Option<usize>,
    segment_seed: u64,
) -> Result<Evaluation> {
    crate::checkpoint::check_schema(model, ds.schema())?;
    if ds.is_empty() {
        return Err(EcupError::InvalidSpec("evaluation dataset is empty".into()));
    }
    let ite = predict_ite_batch(model, ds.rows())?;
    let mut tasks = BTreeMap::new();
    let mut curves = BTreeMap::new();
    let mut notes = Vec::new();
    for task in [EvalTask::Ctcvr, EvalTask::Cvr, EvalTask::Click] {
        let score = |i: usize, k: usize| match task {
            EvalTask::Click => ite[i].tau_y[k - 1],
            EvalTask::Ctcvr | EvalTask::Cvr => ite[i].tau_z[k - 1],
        };
        match per_treatment_eval(ds, task, &score) {
            Ok(eval) => {
                for t in &eval.per_treatment {
                    curves.insert((task.as_str().to_string(), t.treatment), t.curve.clone());
                }
                tasks.insert(
                    task.as_str().to_string(),
                    TaskSummary {
                        per_treatment: eval
                            .per_treatment
                            .iter()
                            .map(|t| TreatmentSummary {
                                treatment: t.treatment,
                                rows: t.rows,
                                auuc: t.auuc,
                                qini: t.qini,
                            })
                            .collect(),
                        mean_auuc: eval.mean_auuc,
                        mean_qini: eval.mean_qini,
                    },
                );
            }
            Err(EcupError::DegenerateGain(msg)) | Err(EcupError::EmptyGroup(msg)) => {
                notes.push(format!("{} task skipped: {}", task.as_str(), msg));
            }
            Err(e) => return Err(e),
        }
    }
    let segments = match segments {
        Some(s) => {
            let mut reports = Vec::with_capacity(ds.schema().treatment_count);
            for k in 1..=ds.schema().treatment_count {
                reports.push(segment_uplift(ds, s, segment_seed, k)?);
            }
            Some(reports)
        }
        None => None,
    };
    Ok(Evaluation {
        report: UpliftReport {
            rows: ds.len(),
            treatment_count: ds.schema().treatment_count,
            variant: model.config.variant.as_str().to_string(),
            tasks,
            segments,
            notes,
        },
        curves,
        ite,
    })
}

/// Writes one curve as a two-column CSV of (fraction targeted, gain).
pub fn write_curve_csv(curve: &UpliftCurve, path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "gain"])?;
    for (x, gain) in &curve.points {
        w.write_record([crate::data::format_float(*x), crate::data::format_float(*gain)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};
    use crate::synth::{generate_synthetic, Preset, SyntheticSpec};
    use crate::train::{train, TrainConfig};

    /// Spec whose treatments raise clicks and conversions everywhere, so no
    /// task view has a degenerate (non-positive) terminal gain.
    fn all_positive_spec(n: usize, seed: u64) -> SyntheticSpec {
        let mut spec = SyntheticSpec::preset(Preset::ChainBias, n, 2, seed).unwrap();
        let logit = |p: f64| (p / (1.0 - p)).ln();
        spec.ctr.intercepts = vec![logit(0.15), logit(0.35), logit(0.45)];
        spec.cvr.intercepts = vec![logit(0.3), logit(0.5), logit(0.6)];
        for row in spec.ctr.coeffs.iter_mut().chain(spec.cvr.coeffs.iter_mut()) {
            *row.last_mut().unwrap() = 0.4;
        }
        spec
    }

    #[test]
    fn evaluate_produces_all_task_views_and_segments() {
        let spec = all_positive_spec(1200, 15);
        let (ds, _) = generate_synthetic(&spec).unwrap();
        let (train_ds, valid_ds) = crate::data::split(&ds, 0.7, 4).unwrap();
        let cfg = ModelConfig {
            variant: Variant::Full,
            d: 4,
            d_k: 4,
            h: 8,
            h_gate: 4,
            seed: 5,
            ..Default::default()
        };
        let tcfg = TrainConfig {
            lr: 1e-2,
            batch_size: 256,
            epochs: 1,
            seed: 6,
        };
        let (model, _) = train(&train_ds, &valid_ds, &cfg, &tcfg).unwrap();
        let eval = evaluate(&model, &valid_ds, Some(4), 42).unwrap();
        assert!(eval.report.tasks.contains_key("ctcvr"));
        assert!(eval.report.tasks.contains_key("cvr"));
        assert!(eval.report.tasks.contains_key("click"));
        let ctcvr = &eval.report.tasks["ctcvr"];
        assert_eq!(ctcvr.per_treatment.len(), 2);
        assert_eq!(eval.report.segments.as_ref().unwrap().len(), 2);
        assert!(eval.curves.contains_key(&("ctcvr".to_string(), 1)));
        assert_eq!(eval.ite.len(), valid_ds.len());

        // Mismatched schema is refused.
        let other = SyntheticSpec::preset(Preset::ChainBias, 50, 1, 0).unwrap();
        let (other_ds, _) = generate_synthetic(&other).unwrap();
        assert!(matches!(
            evaluate(&model, &other_ds, None, 0).unwrap_err(),
            EcupError::FingerprintMismatch { .. }
        ));
    }
}
