//! Ranking-based uplift evaluation: cumulative-gain AUUC, the Qini
//! coefficient, per-treatment binary reduction, and curve emission.
//!
//! Both metrics depend only on the score ordering. Ties keep the input row
//! order (stable sort), so tied rows are ranked by their position in the
//! supplied list; this matters because prefix metrics are tie-sensitive.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{EcupError, Result};

/// One scored row of a two-group comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub score: f64,
    pub treated: bool,
    pub outcome: u8,
}

/// Cumulative-gain curve of a ranking: `points[m-1] = (m/N, gain(m)/gain(N))`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpliftCurve {
    pub points: Vec<(f64, f64)>,
    pub terminal_gain: f64,
}

struct PrefixStats {
    gains: Vec<f64>,
    qini: Vec<f64>,
    n: usize,
}

fn sorted_rows(rows: &[EvalRow]) -> Result<Vec<EvalRow>> {
    if rows.is_empty() {
        return Err(EcupError::InvalidSpec("metrics need at least one row".into()));
    }
    if rows.iter().any(|r| !r.score.is_finite()) {
        return Err(EcupError::NonFinite("metric score".into()));
    }
    if !rows.iter().any(|r| r.treated) || !rows.iter().any(|r| !r.treated) {
        return Err(EcupError::EmptyGroup(
            "metrics need at least one treated and one control row".into(),
        ));
    }
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
    Ok(sorted)
}

/// Prefix statistics over the score-descending order. For prefix size m:
/// `gain(m) = (Yt/Nt - Yc/Nc) * m` with a missing group contributing rate 0,
/// and `q(m) = Yt - Yc * Nt/Nc` with a missing control dropping the second
/// term.
fn prefix_stats(rows: &[EvalRow]) -> Result<PrefixStats> {
    let sorted = sorted_rows(rows)?;
    let n = sorted.len();
    let (mut nt, mut nc, mut yt, mut yc) = (0usize, 0usize, 0usize, 0usize);
    let mut gains = Vec::with_capacity(n);
    let mut qini = Vec::with_capacity(n);
    for (m, row) in sorted.iter().enumerate() {
        if row.treated {
            nt += 1;
            yt += row.outcome as usize;
        } else {
            nc += 1;
            yc += row.outcome as usize;
        }
        let rate_t = if nt > 0 { yt as f64 / nt as f64 } else { 0.0 };
        let rate_c = if nc > 0 { yc as f64 / nc as f64 } else { 0.0 };
        gains.push((rate_t - rate_c) * (m + 1) as f64);
        let q_c = if nc > 0 {
            yc as f64 * nt as f64 / nc as f64
        } else {
            0.0
        };
        qini.push(yt as f64 - q_c);
    }
    Ok(PrefixStats { gains, qini, n })
}

/// Area under the normalized cumulative-gain curve, anchored at the origin.
/// 0.5 is the expectation for a random ranking.
pub fn auuc(rows: &[EvalRow]) -> Result<f64> {
    let stats = prefix_stats(rows)?;
    let terminal = *stats.gains.last().unwrap();
    if terminal <= 0.0 {
        return Err(EcupError::DegenerateGain(format!(
            "terminal gain {} <= 0",
            terminal
        )));
    }
    let n = stats.n as f64;
    let mut area = 0.0;
    let mut prev = 0.0; // implicit (0, 0) anchor
    for g in &stats.gains {
        let y = g / terminal;
        area += (prev + y) / 2.0 * (1.0 / n);
        prev = y;
    }
    Ok(area)
}

/// Qini coefficient: area between the Qini curve and the random diagonal
/// from (0, 0) to (N, q(N)), normalized by N.
pub fn qini(rows: &[EvalRow]) -> Result<f64> {
    let stats = prefix_stats(rows)?;
    let n = stats.n as f64;
    let q_n = *stats.qini.last().unwrap();
    let mut area = 0.0;
    let mut prev = 0.0; // q(0) = 0
    for q in &stats.qini {
        area += (prev + q) / 2.0;
        prev = *q;
    }
    Ok((area - q_n * n / 2.0) / n)
}

/// Normalized cumulative-gain curve points for plotting; the first point is
/// at x = 1/N and the last at x = 1.
pub fn uplift_curve(rows: &[EvalRow]) -> Result<UpliftCurve> {
    let stats = prefix_stats(rows)?;
    let terminal = *stats.gains.last().unwrap();
    if terminal <= 0.0 {
        return Err(EcupError::DegenerateGain(format!(
            "terminal gain {} <= 0",
            terminal
        )));
    }
    let n = stats.n as f64;
    let points = stats
        .gains
        .iter()
        .enumerate()
        .map(|(m, g)| ((m + 1) as f64 / n, g / terminal))
        .collect();
    Ok(UpliftCurve {
        points,
        terminal_gain: terminal,
    })
}

/// Which chain quantity a ranking is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTask {
    /// All rows, outcome y, scored by tau_y.
    Click,
    /// All rows (impression view), outcome z, scored by tau_z.
    Ctcvr,
    /// Rows with y = 1 (click view), outcome z, scored by tau_z.
    Cvr,
}

impl EvalTask {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalTask::Click => "click",
            EvalTask::Ctcvr => "ctcvr",
            EvalTask::Cvr => "cvr",
        }
    }
}

/// AUUC/Qini of one treatment's binary reduction, plus the curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentEval {
    pub treatment: usize,
    pub rows: usize,
    pub auuc: f64,
    pub qini: f64,
    #[serde(skip)]
    pub curve: UpliftCurve,
}

/// Per-treatment metrics and their uniform average over treatments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: EvalTask,
    pub per_treatment: Vec<TreatmentEval>,
    pub mean_auuc: f64,
    pub mean_qini: f64,
}

/// Builds the eval rows of treatment `k`'s binary reduction for `task`.
/// `tau_for_row(i, k)` supplies the score for dataset row `i`.
pub fn eval_rows_for_treatment(
    ds: &Dataset,
    task: EvalTask,
    k: usize,
    tau_for_row: &dyn Fn(usize, usize) -> f64,
) -> Vec<EvalRow> {
    let mut rows = Vec::new();
    for (i, inst) in ds.rows().iter().enumerate() {
        if inst.t != 0 && inst.t != k {
            continue;
        }
        if matches!(task, EvalTask::Cvr) && inst.y != 1 {
            continue;
        }
        let outcome = match task {
            EvalTask::Click => inst.y,
            EvalTask::Ctcvr | EvalTask::Cvr => inst.z,
        };
        rows.push(EvalRow {
            score: tau_for_row(i, k),
            treated: inst.t == k,
            outcome,
        });
    }
    rows
}

/// Restricts to `t in {0, k}` per treatment, evaluates the task's ranking,
/// and averages the metrics uniformly over treatments.
pub fn per_treatment_eval(
    ds: &Dataset,
    task: EvalTask,
    tau_for_row: &dyn Fn(usize, usize) -> f64,
) -> Result<TaskEval> {
    let k_total = ds.schema().treatment_count;
    let mut per_treatment = Vec::with_capacity(k_total);
    for k in 1..=k_total {
        let rows = eval_rows_for_treatment(ds, task, k, tau_for_row);
        let curve = uplift_curve(&rows)?;
        per_treatment.push(TreatmentEval {
            treatment: k,
            rows: rows.len(),
            auuc: auuc(&rows)?,
            qini: qini(&rows)?,
            curve,
        });
    }
    let mean = |f: &dyn Fn(&TreatmentEval) -> f64| {
        per_treatment.iter().map(|t| f(t)).sum::<f64>() / per_treatment.len() as f64
    };
    Ok(TaskEval {
        task,
        mean_auuc: mean(&|t| t.auuc),
        mean_qini: mean(&|t| t.qini),
        per_treatment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent brute-force evaluation of the prefix formulas: every
    /// prefix is re-scanned from scratch. Kept deliberately naive.
    mod oracle {
        use super::EvalRow;

        fn ranked(rows: &[EvalRow]) -> Vec<EvalRow> {
            let mut v = rows.to_vec();
            v.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            v
        }

        pub fn gain_at(rows: &[EvalRow], m: usize) -> f64 {
            let ranked = ranked(rows);
            let prefix = &ranked[..m];
            let nt = prefix.iter().filter(|r| r.treated).count();
            let nc = m - nt;
            let yt: usize = prefix.iter().filter(|r| r.treated).map(|r| r.outcome as usize).sum();
            let yc: usize = prefix.iter().filter(|r| !r.treated).map(|r| r.outcome as usize).sum();
            let rt = if nt > 0 { yt as f64 / nt as f64 } else { 0.0 };
            let rc = if nc > 0 { yc as f64 / nc as f64 } else { 0.0 };
            (rt - rc) * m as f64
        }

        pub fn auuc(rows: &[EvalRow]) -> Option<f64> {
            let n = rows.len();
            let terminal = gain_at(rows, n);
            if terminal <= 0.0 {
                return None;
            }
            let mut pts = vec![(0.0, 0.0)];
            for m in 1..=n {
                pts.push((m as f64 / n as f64, gain_at(rows, m) / terminal));
            }
            let mut area = 0.0;
            for w in pts.windows(2) {
                area += (w[0].1 + w[1].1) / 2.0 * (w[1].0 - w[0].0);
            }
            Some(area)
        }

        pub fn q_at(rows: &[EvalRow], m: usize) -> f64 {
            let ranked = ranked(rows);
            let prefix = &ranked[..m];
            let nt = prefix.iter().filter(|r| r.treated).count();
            let nc = m - nt;
            let yt: usize = prefix.iter().filter(|r| r.treated).map(|r| r.outcome as usize).sum();
            let yc: usize = prefix.iter().filter(|r| !r.treated).map(|r| r.outcome as usize).sum();
            if nc > 0 {
                yt as f64 - yc as f64 * nt as f64 / nc as f64
            } else {
                yt as f64
            }
        }

        pub fn qini(rows: &[EvalRow]) -> f64 {
            let n = rows.len();
            let mut area = 0.0;
            let mut prev = 0.0;
            for m in 1..=n {
                let q = q_at(rows, m);
                area += (prev + q) / 2.0;
                prev = q;
            }
            (area - q_at(rows, n) * n as f64 / 2.0) / n as f64
        }
    }

    fn row(score: f64, treated: bool, outcome: u8) -> EvalRow {
        EvalRow {
            score,
            treated,
            outcome,
        }
    }

    #[test]
    fn four_row_fixture_matches_oracle_and_frozen_value() {
        // Ranked by score: treated(1), control(0), control(0), treated(0).
        let rows = vec![
            row(4.0, true, 1),
            row(3.0, false, 0),
            row(2.0, false, 0),
            row(1.0, true, 0),
        ];
        let got = auuc(&rows).unwrap();
        let want = oracle::auuc(&rows).unwrap();
        assert_relative_eq!(got, want, epsilon = 1e-15);
        // Frozen from the oracle: gains per prefix are (1, 2, 3, 2), so the
        // normalized curve is (0.5, 1.0, 1.5, 1.0) and the area is 0.875.
        assert_relative_eq!(got, 0.875, epsilon = 1e-15);
    }

    #[test]
    fn two_row_qini_fixture_is_positive_and_frozen() {
        let rows = vec![row(2.0, true, 1), row(1.0, false, 0)];
        let got = qini(&rows).unwrap();
        assert_relative_eq!(got, oracle::qini(&rows), epsilon = 1e-15);
        // q(1) = 1, q(2) = 1; area 1.5 minus diagonal 1, over N = 2.
        assert_relative_eq!(got, 0.25, epsilon = 1e-15);
        assert!(got > 0.0);
    }

    #[test]
    fn anti_perfect_ranking_has_negative_qini() {
        // Worst rows first: all the treated conversions are ranked last.
        let rows = vec![
            row(6.0, true, 0),
            row(5.0, false, 1),
            row(4.0, false, 1),
            row(3.0, true, 0),
            row(2.0, true, 1),
            row(1.0, true, 1),
        ];
        let got = qini(&rows).unwrap();
        assert_relative_eq!(got, oracle::qini(&rows), epsilon = 1e-12);
        assert!(got < 0.0, "qini {} should be negative", got);
    }

    #[test]
    fn degenerate_gain_is_reported() {
        let rows = vec![row(2.0, true, 0), row(1.0, false, 0)];
        assert!(matches!(
            auuc(&rows).unwrap_err(),
            EcupError::DegenerateGain(_)
        ));
    }

    #[test]
    fn requires_both_groups() {
        let rows = vec![row(1.0, true, 1), row(0.5, true, 0)];
        assert!(matches!(auuc(&rows).unwrap_err(), EcupError::EmptyGroup(_)));
    }

    #[test]
    fn random_scores_average_near_half_auuc_and_zero_qini() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        // Balanced 2000-row population with a real average effect, so the
        // terminal gain is positive and only the ordering is random.
        let base: Vec<(bool, u8)> = (0..2000)
            .map(|i| {
                let treated = i % 2 == 0;
                let p = if treated { 0.25 } else { 0.15 };
                (treated, u8::from(rng.gen::<f64>() < p))
            })
            .collect();
        let shuffles = 200;
        let mut auuc_sum = 0.0;
        let mut qini_sum = 0.0;
        for _ in 0..shuffles {
            let rows: Vec<EvalRow> = base
                .iter()
                .map(|&(treated, outcome)| row(rng.gen::<f64>(), treated, outcome))
                .collect();
            auuc_sum += auuc(&rows).unwrap();
            qini_sum += qini(&rows).unwrap();
        }
        let mean_auuc = auuc_sum / shuffles as f64;
        let mean_qini = qini_sum / shuffles as f64;
        assert!(
            (mean_auuc - 0.5).abs() < 0.05,
            "mean AUUC {} not ~0.5",
            mean_auuc
        );
        assert!(mean_qini.abs() < 5.0, "mean Qini {} not ~0", mean_qini);
    }

    #[test]
    fn curve_points_start_at_one_over_n_and_increase() {
        let rows = vec![
            row(4.0, true, 1),
            row(3.0, false, 0),
            row(2.0, true, 1),
            row(1.0, false, 1),
        ];
        let curve = uplift_curve(&rows).unwrap();
        assert_eq!(curve.points.len(), 4);
        assert_relative_eq!(curve.points[0].0, 0.25);
        for w in curve.points.windows(2) {
            assert!(w[1].0 > w[0].0);
        }
        assert_relative_eq!(curve.points.last().unwrap().0, 1.0);
    }

    proptest! {
        /// Exhaustive agreement with the brute-force oracle on small inputs.
        #[test]
        fn matches_bruteforce_on_small_fixtures(
            spec in proptest::collection::vec((0u32..1000, any::<bool>(), 0u8..2), 2..=8)
        ) {
            // Distinct scores via the index trick keeps the comparison free
            // of tie-order ambiguity between the two sorts.
            let rows: Vec<EvalRow> = spec
                .iter()
                .enumerate()
                .map(|(i, &(s, treated, outcome))| row(s as f64 * 10.0 + i as f64 * 1e-3, treated, outcome))
                .collect();
            prop_assume!(rows.iter().any(|r| r.treated) && rows.iter().any(|r| !r.treated));
            match (auuc(&rows), oracle::auuc(&rows)) {
                (Ok(got), Some(want)) => prop_assert!((got - want).abs() < 1e-12),
                (Err(EcupError::DegenerateGain(_)), None) => {}
                (got, want) => prop_assert!(false, "disagree: {:?} vs {:?}", got, want),
            }
            let got_q = qini(&rows).unwrap();
            prop_assert!((got_q - oracle::qini(&rows)).abs() < 1e-12);
        }

        /// Strictly monotone score transforms leave both metrics unchanged.
        #[test]
        fn rank_invariance_under_monotone_transforms(
            spec in proptest::collection::vec((0u32..1000, any::<bool>(), 0u8..2), 4..=40)
        ) {
            let rows: Vec<EvalRow> = spec
                .iter()
                .enumerate()
                .map(|(i, &(s, treated, outcome))| row(s as f64 + i as f64 * 1e-4, treated, outcome))
                .collect();
            prop_assume!(rows.iter().any(|r| r.treated) && rows.iter().any(|r| !r.treated));
            let transformed: Vec<EvalRow> = rows
                .iter()
                .map(|r| EvalRow { score: (r.score * 1e-3).exp() * 2.0 + 1.0, ..*r })
                .collect();
            match (auuc(&rows), auuc(&transformed)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-9),
                (Err(_), Err(_)) => {}
                other => prop_assert!(false, "disagree: {:?}", other),
            }
            prop_assert!((qini(&rows).unwrap() - qini(&transformed).unwrap()).abs() < 1e-9);
        }

        /// With distinct scores, the input row order never matters.
        #[test]
        fn permutation_determinism_with_distinct_scores(
            spec in proptest::collection::vec((any::<bool>(), 0u8..2), 4..=30),
            seed in any::<u64>()
        ) {
            let rows: Vec<EvalRow> = spec
                .iter()
                .enumerate()
                .map(|(i, &(treated, outcome))| row(i as f64, treated, outcome))
                .collect();
            prop_assume!(rows.iter().any(|r| r.treated) && rows.iter().any(|r| !r.treated));
            let mut shuffled = rows.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            shuffled.shuffle(&mut rng);
            match (auuc(&rows), auuc(&shuffled)) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (Err(EcupError::DegenerateGain(_)), Err(EcupError::DegenerateGain(_))) => {}
                other => prop_assert!(false, "disagree: {:?}", other),
            }
            prop_assert_eq!(qini(&rows).unwrap(), qini(&shuffled).unwrap());
        }
    }
}
