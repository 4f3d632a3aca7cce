//! Python bindings for the entire-chain uplift modeling toolkit.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use ecup_core::ecenet::{counterfactual_profiles, predict_ite_batch};
use ecup_core::metrics::{self, EvalRow};
use ecup_core::model::{ModelConfig, Variant};
use ecup_core::synth::{generate_synthetic, SyntheticSpec};
use ecup_core::train::TrainConfig;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_to_py(py: Python<'_>, value: &serde_json::Value) -> PyResult<PyObject> {
    Ok(match value {
        serde_json::Value::Null => py.None(),
        serde_json::Value::Bool(b) => b.into_py(py),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_py(py)
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_py(py)
            }
        }
        serde_json::Value::String(s) => s.into_py(py),
        serde_json::Value::Array(items) => {
            let list = PyList::empty_bound(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_py(py)
        }
        serde_json::Value::Object(map) => {
            let dict = PyDict::new_bound(py);
            for (k, v) in map {
                dict.set_item(k, json_to_py(py, v)?)?;
            }
            dict.into_py(py)
        }
    })
}

fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<PyObject> {
    let json = serde_json::to_value(value).map_err(err)?;
    json_to_py(py, &json)
}

/// Column declaration for a dataset.
#[pyclass(name = "Schema")]
#[derive(Clone)]
struct PySchema {
    inner: ecup_core::FeatureSchema,
}

#[pymethods]
impl PySchema {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PySchema {
            inner: ecup_core::FeatureSchema::from_json(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(PySchema {
            inner: ecup_core::FeatureSchema::from_json_file(&path).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    #[getter]
    fn treatment_count(&self) -> usize {
        self.inner.treatment_count
    }

    fn __repr__(&self) -> String {
        format!(
            "Schema({} fields, K={})",
            self.inner.fields.len(),
            self.inner.treatment_count
        )
    }
}

/// Validated rows under one schema.
#[pyclass(name = "Dataset")]
#[derive(Clone)]
struct PyDataset {
    inner: ecup_core::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load_csv(path: PathBuf, schema: &PySchema) -> PyResult<Self> {
        Ok(PyDataset {
            inner: ecup_core::load_csv(&path, &schema.inner).map_err(err)?,
        })
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_csv(&path).map_err(err)
    }

    fn schema(&self) -> PySchema {
        PySchema {
            inner: self.inner.schema().clone(),
        }
    }

    /// Whole-dataset rates and treated-vs-control uplifts.
    fn stats(&self, py: Python<'_>) -> PyResult<PyObject> {
        let stats = ecup_core::dataset_stats(&self.inner).map_err(err)?;
        to_py(py, &stats)
    }

    /// Random disjoint partition: (left, right) with `round(n * fraction)`
    /// rows on the left.
    fn split(&self, fraction: f64, seed: u64) -> PyResult<(PyDataset, PyDataset)> {
        let (a, b) = ecup_core::split(&self.inner, fraction, seed).map_err(err)?;
        Ok((PyDataset { inner: a }, PyDataset { inner: b }))
    }

    /// Randomized segment uplift analysis of treatment `k` versus control.
    #[pyo3(signature = (segments, seed, k))]
    fn segment_uplift(
        &self,
        py: Python<'_>,
        segments: usize,
        seed: u64,
        k: usize,
    ) -> PyResult<PyObject> {
        let report = ecup_core::segment_uplift(&self.inner, segments, seed, k).map_err(err)?;
        to_py(py, &report)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({} rows, K={})",
            self.inner.len(),
            self.inner.schema().treatment_count
        )
    }
}

/// Generates a synthetic randomized trial with exact per-row treatment
/// effects. Returns `(dataset, taus)` where `taus[i][k-1] = (tau_y, tau_z)`.
#[pyfunction]
#[pyo3(signature = (preset, n, treatments=2, seed=7))]
fn generate(
    preset: &str,
    n: usize,
    treatments: usize,
    seed: u64,
) -> PyResult<(PyDataset, Vec<Vec<(f64, f64)>>)> {
    let preset = preset.parse().map_err(err)?;
    let spec = SyntheticSpec::preset(preset, n, treatments, seed).map_err(err)?;
    let (ds, truth) = generate_synthetic(&spec).map_err(err)?;
    let taus = truth
        .taus
        .iter()
        .map(|row| row.iter().map(|p| (p.tau_y, p.tau_z)).collect())
        .collect();
    Ok((PyDataset { inner: ds }, taus))
}

/// A configured (possibly trained) model.
#[pyclass(name = "Model")]
struct PyModel {
    inner: ecup_core::EcupModel,
}

#[pymethods]
impl PyModel {
    /// Trains a fresh model; returns `(model, history)` where history is a
    /// list of per-epoch records.
    #[staticmethod]
    #[pyo3(signature = (
        train_ds, valid_ds, variant="full", d=8, d_k=None, heads=2, h=128,
        h_gate=64, gamma=2.0, lambda_=1e-5, lr=1e-3, batch_size=2048,
        epochs=5, seed=7
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        train_ds: &PyDataset,
        valid_ds: &PyDataset,
        variant: &str,
        d: usize,
        d_k: Option<usize>,
        heads: usize,
        h: usize,
        h_gate: usize,
        gamma: f64,
        lambda_: f64,
        lr: f64,
        batch_size: usize,
        epochs: usize,
        seed: u64,
    ) -> PyResult<(PyModel, PyObject)> {
        let variant: Variant = variant.parse().map_err(err)?;
        let model_cfg = ModelConfig {
            variant,
            d,
            d_k: d_k.unwrap_or(d),
            heads,
            h,
            h_gate,
            gamma,
            lambda: lambda_,
            seed,
            ..Default::default()
        };
        let train_cfg = TrainConfig {
            lr,
            batch_size,
            epochs,
            seed,
        };
        let (model, history) =
            ecup_core::train(&train_ds.inner, &valid_ds.inner, &model_cfg, &train_cfg)
                .map_err(err)?;
        let history = to_py(py, &history)?;
        Ok((PyModel { inner: model }, history))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, _) = ecup_core::checkpoint::load(&path).map_err(err)?;
        Ok(PyModel { inner: model })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        ecup_core::checkpoint::save(&self.inner, None, &path).map_err(err)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.config.variant.as_str()
    }

    /// `(pctr, pcvr, pctcvr)` per row, optionally under a counterfactual
    /// treatment code.
    #[pyo3(signature = (ds, t_override=None))]
    fn predict_probs(
        &self,
        ds: &PyDataset,
        t_override: Option<usize>,
    ) -> PyResult<Vec<(f64, f64, f64)>> {
        let preds = ecup_core::predict_probs_batch(&self.inner, ds.inner.rows(), t_override)
            .map_err(err)?;
        Ok(preds.iter().map(|p| (p.pctr, p.pcvr, p.pctcvr)).collect())
    }

    /// Treatment effects per row: `(tau_y, tau_z)` lists indexed by k - 1.
    fn predict_ite(&self, ds: &PyDataset) -> PyResult<Vec<(Vec<f64>, Vec<f64>)>> {
        let ites = predict_ite_batch(&self.inner, ds.inner.rows()).map_err(err)?;
        Ok(ites.into_iter().map(|e| (e.tau_y, e.tau_z)).collect())
    }

    /// Counterfactual head outputs per row under every treatment code.
    fn counterfactuals(&self, ds: &PyDataset) -> PyResult<Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>> {
        let profiles = counterfactual_profiles(&self.inner, ds.inner.rows()).map_err(err)?;
        Ok(profiles
            .into_iter()
            .map(|p| (p.pctr, p.pcvr, p.pctcvr))
            .collect())
    }

    /// Full evaluation report (AUUC/Qini per task and treatment, optional
    /// segment tables) as a dict.
    #[pyo3(signature = (ds, segments=None, seed=7))]
    fn evaluate(
        &self,
        py: Python<'_>,
        ds: &PyDataset,
        segments: Option<usize>,
        seed: u64,
    ) -> PyResult<PyObject> {
        let eval = ecup_core::evaluate(&self.inner, &ds.inner, segments, seed).map_err(err)?;
        to_py(py, &eval.report)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(variant={}, d={}, h={})",
            self.inner.config.variant.as_str(),
            self.inner.config.d,
            self.inner.config.h
        )
    }
}

fn eval_rows(scores: Vec<f64>, treated: Vec<bool>, outcomes: Vec<u8>) -> PyResult<Vec<EvalRow>> {
    if scores.len() != treated.len() || scores.len() != outcomes.len() {
        return Err(PyValueError::new_err(
            "scores, treated, outcomes must have equal length",
        ));
    }
    Ok(scores
        .into_iter()
        .zip(treated)
        .zip(outcomes)
        .map(|((score, treated), outcome)| EvalRow {
            score,
            treated,
            outcome,
        })
        .collect())
}

/// Area under the normalized cumulative uplift-gain curve (0.5 ~ random).
#[pyfunction]
fn auuc(scores: Vec<f64>, treated: Vec<bool>, outcomes: Vec<u8>) -> PyResult<f64> {
    metrics::auuc(&eval_rows(scores, treated, outcomes)?).map_err(err)
}

/// Qini coefficient (0 ~ random).
#[pyfunction]
fn qini(scores: Vec<f64>, treated: Vec<bool>, outcomes: Vec<u8>) -> PyResult<f64> {
    metrics::qini(&eval_rows(scores, treated, outcomes)?).map_err(err)
}

#[pymodule]
fn ecup_py(_py: Python<'_>, m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchema>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(auuc, m)?)?;
    m.add_function(wrap_pyfunction!(qini, m)?)?;
    Ok(())
}
