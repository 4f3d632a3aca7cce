//! Subcommand implementations: generate | train | eval | predict.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ecup_core::checkpoint;
use ecup_core::data::format_float;
use ecup_core::ecenet::counterfactual_profiles;
use ecup_core::model::ModelConfig;
use ecup_core::report::{evaluate, write_curve_csv};
use ecup_core::synth::{generate_synthetic, Preset, SyntheticSpec};
use ecup_core::train::{train, TrainConfig};
use ecup_core::{load_csv, split, Dataset, FeatureSchema};

pub fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("ECUP_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("ecup_out"))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn cmd_generate(preset: &str, n: usize, k: usize, seed: u64, out: &Path) -> Result<()> {
    if n == 0 {
        bail!("--n must be positive");
    }
    let preset: Preset = preset.parse()?;
    let spec = SyntheticSpec::preset(preset, n, k, seed)?;
    let (dataset, truth) = generate_synthetic(&spec)?;
    ensure_dir(out)?;
    dataset.write_csv(&out.join("data.csv"))?;
    truth.write_csv(&out.join("ground_truth.csv"))?;
    fs::write(out.join("schema.json"), dataset.schema().to_json()? + "\n")?;
    log::info!(
        "wrote {} rows to {} (data.csv, ground_truth.csv, schema.json)",
        dataset.len(),
        out.display()
    );
    Ok(())
}

pub fn load_dataset(schema_path: &Path, data_path: &Path) -> Result<Dataset> {
    let schema = FeatureSchema::from_json_file(schema_path)
        .with_context(|| format!("reading schema {}", schema_path.display()))?;
    let ds = load_csv(data_path, &schema)
        .with_context(|| format!("loading {}", data_path.display()))?;
    Ok(ds)
}

pub struct TrainInputs {
    pub schema: PathBuf,
    pub data: PathBuf,
    pub valid: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn cmd_train(inputs: &TrainInputs, out: &Path) -> Result<()> {
    let full = load_dataset(&inputs.schema, &inputs.data)?;
    let (train_ds, valid_ds) = match &inputs.valid {
        Some(path) => {
            let valid = load_dataset(&inputs.schema, path)?;
            (full, valid)
        }
        None => {
            log::info!("no --valid given; holding out 10% of the training data");
            split(&full, 0.9, inputs.train.seed)?
        }
    };
    let (model, history) = train(&train_ds, &valid_ds, &inputs.model, &inputs.train)?;
    ensure_dir(out)?;
    checkpoint::save(&model, Some(&inputs.train), &out.join("checkpoint.json"))?;
    let mut hist = fs::File::create(out.join("history.jsonl"))?;
    for record in &history.epochs {
        serde_json::to_writer(&mut hist, record)?;
        hist.write_all(b"\n")?;
    }
    hist.flush()?;
    log::info!(
        "wrote checkpoint.json and history.jsonl to {} (best epoch {:?})",
        out.display(),
        history.best_epoch
    );
    Ok(())
}

/// Loads evaluation data. With an explicit schema the checkpoint fingerprint
/// is cross-checked and a mismatch refused; otherwise the checkpoint's
/// embedded schema is used directly.
fn load_for_model(
    model: &ecup_core::EcupModel,
    schema_path: Option<&Path>,
    data_path: &Path,
) -> Result<Dataset> {
    let schema = match schema_path {
        Some(path) => {
            let schema = FeatureSchema::from_json_file(path)
                .with_context(|| format!("reading schema {}", path.display()))?;
            ecup_core::checkpoint::check_schema(model, &schema)?;
            schema
        }
        None => model.schema.clone(),
    };
    load_csv(data_path, &schema).with_context(|| format!("loading {}", data_path.display()))
}

pub fn cmd_eval(
    checkpoint_path: &Path,
    schema_path: Option<&Path>,
    data_path: &Path,
    segments: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let (model, _) = checkpoint::load(checkpoint_path)?;
    let ds = load_for_model(&model, schema_path, data_path)?;
    let eval = evaluate(&model, &ds, segments, seed)?;
    ensure_dir(out)?;
    write_json(&eval.report, &out.join("report.json"))?;
    for ((task, k), curve) in &eval.curves {
        write_curve_csv(curve, &out.join(format!("curve_{}_k{}.csv", task, k)))?;
    }
    log::info!("wrote report.json and curve CSVs to {}", out.display());
    Ok(())
}

pub fn cmd_predict(
    checkpoint_path: &Path,
    schema_path: Option<&Path>,
    data_path: &Path,
    out: &Path,
) -> Result<()> {
    let (model, _) = checkpoint::load(checkpoint_path)?;
    let ds = load_for_model(&model, schema_path, data_path)?;
    let profiles = counterfactual_profiles(&model, ds.rows())?;
    ensure_dir(out)?;
    let path = out.join("predictions.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let k_total = model.schema.treatment_count;
    let mut header = vec!["row_index".to_string(), "k".to_string(), "tau_y".to_string(), "tau_z".to_string()];
    for t in 0..=k_total {
        header.push(format!("pctr_{}", t));
    }
    for t in 0..=k_total {
        header.push(format!("pctcvr_{}", t));
    }
    w.write_record(&header)?;
    for (i, profile) in profiles.iter().enumerate() {
        let ite = profile.ite();
        for k in 1..=k_total {
            let mut record = vec![
                i.to_string(),
                k.to_string(),
                format_float(ite.tau_y[k - 1]),
                format_float(ite.tau_z[k - 1]),
            ];
            record.extend(profile.pctr.iter().map(|p| format_float(*p)));
            record.extend(profile.pctcvr.iter().map(|p| format_float(*p)));
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    log::info!("wrote {} ITE rows to {}", profiles.len() * k_total, path.display());
    Ok(())
}
