//! Datasets: validated rows, CSV ingestion, splitting, whole-dataset
//! statistics, and randomized segment uplift analysis.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EcupError, Result};
use crate::schema::{FeatureSchema, FieldRole};

/// One validated row: dense values, sparse codes, treatment code, and the
/// chain labels. `z = 1` implies `y = 1` (conversion requires a click).
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub dense: Vec<f64>,
    pub sparse: Vec<usize>,
    pub t: usize,
    pub y: u8,
    pub z: u8,
}

/// An immutable set of validated rows under one schema.
#[derive(Debug, Clone)]
pub struct Dataset {
    schema: FeatureSchema,
    rows: Vec<Instance>,
}

impl Dataset {
    pub fn new(schema: FeatureSchema, rows: Vec<Instance>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            validate_instance(&schema, row, i)?;
        }
        Ok(Dataset { schema, rows })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn rows(&self) -> &[Instance] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Writes the dataset as CSV with the schema's header order.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let header: Vec<&str> = self.schema.fields.iter().map(|f| f.name.as_str()).collect();
        w.write_record(&header)?;
        for row in &self.rows {
            let mut record = Vec::with_capacity(header.len());
            let mut dense_ix = 0;
            let mut sparse_ix = 0;
            for f in &self.schema.fields {
                match f.role {
                    FieldRole::Dense => {
                        record.push(format_float(row.dense[dense_ix]));
                        dense_ix += 1;
                    }
                    FieldRole::Sparse { .. } => {
                        record.push(row.sparse[sparse_ix].to_string());
                        sparse_ix += 1;
                    }
                    FieldRole::Treatment { .. } => record.push(row.t.to_string()),
                    FieldRole::LabelClick => record.push(row.y.to_string()),
                    FieldRole::LabelConversion => record.push(row.z.to_string()),
                }
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest decimal that parses back to the same f64.
pub fn format_float(v: f64) -> String {
    let mut buf = ryu_format(v);
    if buf.ends_with(".0") {
        buf.truncate(buf.len() - 2);
    }
    buf
}

fn ryu_format(v: f64) -> String {
    // serde_json uses ryu internally; going through it keeps every float in
    // every emitted file formatted identically.
    serde_json::to_string(&v).expect("finite float serializes")
}

fn validate_instance(schema: &FeatureSchema, row: &Instance, index: usize) -> Result<()> {
    if row.z == 1 && row.y != 1 {
        return Err(EcupError::ChainViolation { row: index });
    }
    let mut sparse_ix = 0;
    for f in schema.fields.iter() {
        match f.role {
            FieldRole::Sparse { cardinality } => {
                let code = row.sparse[sparse_ix];
                if code >= cardinality {
                    return Err(EcupError::CodeOutOfRange {
                        row: index,
                        field: f.name.clone(),
                        code,
                        cardinality,
                    });
                }
                sparse_ix += 1;
            }
            FieldRole::Treatment { cardinality } => {
                if row.t >= cardinality {
                    return Err(EcupError::CodeOutOfRange {
                        row: index,
                        field: f.name.clone(),
                        code: row.t,
                        cardinality,
                    });
                }
            }
            _ => {}
        }
    }
    if row.dense.len() != schema.dense_fields().count()
        || row.sparse.len() != schema.sparse_fields().count()
    {
        return Err(EcupError::InvalidSpec(format!(
            "row {} arity does not match schema",
            index
        )));
    }
    Ok(())
}

/// Loads a header-addressed CSV under `schema`. Columns are matched by name;
/// extra columns are passed over. Any invalid row aborts the load.
pub fn load_csv(path: &Path, schema: &FeatureSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let col_of = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| EcupError::MissingColumn {
                column: name.to_string(),
                path: path.display().to_string(),
            })
    };

    enum Slot {
        Dense(usize),
        Sparse(usize, usize),
        Treatment(usize, usize),
        Click(usize),
        Conversion(usize),
    }
    let mut slots = Vec::with_capacity(schema.fields.len());
    for f in &schema.fields {
        let col = col_of(&f.name)?;
        slots.push(match f.role {
            FieldRole::Dense => Slot::Dense(col),
            FieldRole::Sparse { cardinality } => Slot::Sparse(col, cardinality),
            FieldRole::Treatment { cardinality } => Slot::Treatment(col, cardinality),
            FieldRole::LabelClick => Slot::Click(col),
            FieldRole::LabelConversion => Slot::Conversion(col),
        });
    }

    let parse_err = |row: usize, field: &str, msg: String| EcupError::ParseError {
        row,
        field: field.to_string(),
        message: msg,
    };

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let mut dense = Vec::new();
        let mut sparse = Vec::new();
        let mut t = 0usize;
        let mut y = 0u8;
        let mut z = 0u8;
        for (f, slot) in schema.fields.iter().zip(&slots) {
            match *slot {
                Slot::Dense(c) => {
                    let v: f64 = record[c]
                        .trim()
                        .parse()
                        .map_err(|e| parse_err(i, &f.name, format!("{}", e)))?;
                    if !v.is_finite() {
                        return Err(EcupError::NonFinite(format!(
                            "row {}, field `{}`",
                            i, f.name
                        )));
                    }
                    dense.push(v);
                }
                Slot::Sparse(c, cardinality) => {
                    let code = parse_code(&record[c], i, &f.name)?;
                    if code >= cardinality {
                        return Err(EcupError::CodeOutOfRange {
                            row: i,
                            field: f.name.clone(),
                            code,
                            cardinality,
                        });
                    }
                    sparse.push(code);
                }
                Slot::Treatment(c, cardinality) => {
                    t = parse_code(&record[c], i, &f.name)?;
                    if t >= cardinality {
                        return Err(EcupError::CodeOutOfRange {
                            row: i,
                            field: f.name.clone(),
                            code: t,
                            cardinality,
                        });
                    }
                }
                Slot::Click(c) => y = parse_binary(&record[c], i, &f.name)?,
                Slot::Conversion(c) => z = parse_binary(&record[c], i, &f.name)?,
            }
        }
        if z == 1 && y != 1 {
            return Err(EcupError::ChainViolation { row: i });
        }
        rows.push(Instance {
            dense,
            sparse,
            t,
            y,
            z,
        });
    }
    Ok(Dataset { schema: schema.clone(), rows })
}

fn parse_code(cell: &str, row: usize, field: &str) -> Result<usize> {
    cell.trim().parse().map_err(|e| EcupError::ParseError {
        row,
        field: field.to_string(),
        message: format!("{}", e),
    })
}

fn parse_binary(cell: &str, row: usize, field: &str) -> Result<u8> {
    match cell.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(EcupError::ParseError {
            row,
            field: field.to_string(),
            message: format!("expected 0/1, got `{}`", other),
        }),
    }
}

/// Disjoint random partition of the rows; the left side receives
/// `round(N * fraction)` rows. Deterministic under `seed`.
pub fn split(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(EcupError::InvalidSpec(format!(
            "split fraction must be in (0, 1), got {}",
            fraction
        )));
    }
    let n = ds.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let left_n = ((n as f64) * fraction).round() as usize;
    let left_n = left_n.min(n);
    if left_n == 0 || left_n == n {
        log::warn!(
            "split of {} rows at fraction {} leaves one side empty",
            n,
            fraction
        );
    }
    let mut left_ix = indices[..left_n].to_vec();
    let mut right_ix = indices[left_n..].to_vec();
    left_ix.sort_unstable();
    right_ix.sort_unstable();
    let take = |ix: &[usize]| -> Vec<Instance> { ix.iter().map(|&i| ds.rows[i].clone()).collect() };
    Ok((
        Dataset {
            schema: ds.schema.clone(),
            rows: take(&left_ix),
        },
        Dataset {
            schema: ds.schema.clone(),
            rows: take(&right_ix),
        },
    ))
}

/// Whole-dataset rates and pooled treated-vs-control uplifts, mirroring the
/// published dataset-statistics table. Relative uplifts divide by the control
/// rate and are absent when that rate is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsTable {
    pub n: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub avg_click_ratio: f64,
    pub avg_conversion_ratio: f64,
    pub avg_click_uplift: f64,
    pub relative_click_uplift: Option<f64>,
    pub avg_conversion_uplift: f64,
    pub relative_conversion_uplift: Option<f64>,
}

pub fn dataset_stats(ds: &Dataset) -> Result<StatsTable> {
    let n = ds.len();
    if n == 0 {
        return Err(EcupError::InvalidSpec("stats of an empty dataset".into()));
    }
    let mut y_sum = 0usize;
    let mut z_sum = 0usize;
    let mut nt = 0usize;
    let mut nc = 0usize;
    let mut yt = 0usize;
    let mut yc = 0usize;
    let mut zt = 0usize;
    let mut zc = 0usize;
    for row in ds.rows() {
        y_sum += row.y as usize;
        z_sum += row.z as usize;
        if row.t > 0 {
            nt += 1;
            yt += row.y as usize;
            zt += row.z as usize;
        } else {
            nc += 1;
            yc += row.y as usize;
            zc += row.z as usize;
        }
    }
    if nt == 0 || nc == 0 {
        return Err(EcupError::EmptyGroup(format!(
            "uplift rows need both groups: treated={}, control={}",
            nt, nc
        )));
    }
    let click_uplift = yt as f64 / nt as f64 - yc as f64 / nc as f64;
    let conversion_uplift = zt as f64 / nt as f64 - zc as f64 / nc as f64;
    let control_click = yc as f64 / nc as f64;
    let control_conv = zc as f64 / nc as f64;
    Ok(StatsTable {
        n,
        n_treated: nt,
        n_control: nc,
        avg_click_ratio: y_sum as f64 / n as f64,
        avg_conversion_ratio: z_sum as f64 / n as f64,
        avg_click_uplift: click_uplift,
        relative_click_uplift: (control_click > 0.0).then(|| click_uplift / control_click),
        avg_conversion_uplift: conversion_uplift,
        relative_conversion_uplift: (control_conv > 0.0).then(|| conversion_uplift / control_conv),
    })
}

/// Group counts and difference-in-means uplift for one segment view.
/// `uplift` is absent whenever a group is empty; it is never reported as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub n_treated: usize,
    pub pos_treated: usize,
    pub n_control: usize,
    pub pos_control: usize,
    pub uplift: Option<f64>,
}

impl GroupCounts {
    fn from_counts(nt: usize, rt: usize, nc: usize, rc: usize) -> Self {
        let uplift = (nt > 0 && nc > 0).then(|| rt as f64 / nt as f64 - rc as f64 / nc as f64);
        GroupCounts {
            n_treated: nt,
            pos_treated: rt,
            n_control: nc,
            pos_control: rc,
            uplift,
        }
    }
}

/// One randomly assigned segment with its CTCVR view (all rows, outcome z)
/// and CVR view (rows with y = 1, outcome z).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub segment: usize,
    pub ctcvr: GroupCounts,
    pub cvr: GroupCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub treatment: usize,
    pub segments: Vec<SegmentRow>,
}

/// Randomly partitions the rows with `t` in `{0, k}` into `segments` disjoint
/// segments and reports per-segment conversion uplift in both the impression
/// (CTCVR) and click (CVR) views.
pub fn segment_uplift(
    ds: &Dataset,
    segments: usize,
    seed: u64,
    treatment_k: usize,
) -> Result<SegmentReport> {
    if segments < 1 {
        return Err(EcupError::InvalidSpec("segments must be >= 1".into()));
    }
    if treatment_k == 0 || treatment_k > ds.schema.treatment_count {
        return Err(EcupError::InvalidSpec(format!(
            "treatment_k must be in 1..={}, got {}",
            ds.schema.treatment_count, treatment_k
        )));
    }
    let mut eligible: Vec<usize> = ds
        .rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.t == 0 || r.t == treatment_k)
        .map(|(i, _)| i)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);

    let total = eligible.len();
    let base = total / segments;
    let remainder = total % segments;
    let mut out = Vec::with_capacity(segments);
    let mut cursor = 0usize;
    for s in 0..segments {
        let size = base + usize::from(s < remainder);
        let members = &eligible[cursor..cursor + size];
        cursor += size;

        let mut ct = [0usize; 4]; // nt, rt, nc, rc over all rows
        let mut cv = [0usize; 4]; // same over y = 1 rows
        for &ix in members {
            let row = &ds.rows[ix];
            let treated = row.t == treatment_k;
            let z = row.z as usize;
            if treated {
                ct[0] += 1;
                ct[1] += z;
            } else {
                ct[2] += 1;
                ct[3] += z;
            }
            if row.y == 1 {
                if treated {
                    cv[0] += 1;
                    cv[1] += z;
                } else {
                    cv[2] += 1;
                    cv[3] += z;
                }
            }
        }
        out.push(SegmentRow {
            segment: s,
            ctcvr: GroupCounts::from_counts(ct[0], ct[1], ct[2], ct[3]),
            cvr: GroupCounts::from_counts(cv[0], cv[1], cv[2], cv[3]),
        });
    }
    Ok(SegmentReport {
        treatment: treatment_k,
        segments: out,
    })
}
