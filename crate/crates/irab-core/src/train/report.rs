//! Cross-run aggregation: collect run summaries, per-method medians, CSV
//! and plain-text table rendering.

use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};

use super::{Method, RunSummary, SUMMARY_FILE};

/// One aggregated row per (method, seed) run.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub method: Method,
    pub seed: u64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub mae: f64,
    pub mse: f64,
    pub wall_time_s: f64,
    pub pseudo_precision: Option<f64>,
    pub pseudo_coverage: Option<f64>,
}

impl From<RunSummary> for ReportRow {
    fn from(s: RunSummary) -> Self {
        ReportRow {
            method: s.method,
            seed: s.seed,
            n_labeled: s.n_labeled,
            n_unlabeled: s.n_unlabeled,
            n_test: s.n_test,
            mae: s.test_mae,
            mse: s.test_mse,
            wall_time_s: s.wall_time_s,
            pseudo_precision: s.pseudo_precision,
            pseudo_coverage: s.pseudo_coverage,
        }
    }
}

/// Read the summary of every run directory. A directory either is a run
/// (contains `summary.jsonl`) or holds runs one level down.
pub fn collect_report(run_dirs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for dir in run_dirs {
        collect_into(dir, &mut rows)?;
    }
    if rows.is_empty() {
        return Err(CoreError::data(format!(
            "no run summaries found under {:?}",
            run_dirs
        )));
    }
    rows.sort_by(|a, b| (a.method.name(), a.seed).cmp(&(b.method.name(), b.seed)));
    Ok(rows)
}

fn collect_into(dir: &Path, rows: &mut Vec<ReportRow>) -> Result<()> {
    let summary_path = dir.join(SUMMARY_FILE);
    if summary_path.is_file() {
        let text = std::fs::read_to_string(&summary_path)?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let summary: RunSummary = serde_json::from_str(line).map_err(|e| {
                CoreError::data(format!("bad summary line in {}: {}", summary_path.display(), e))
            })?;
            rows.push(summary.into());
        }
        return Ok(());
    }
    if dir.is_dir() {
        let mut children: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        children.sort();
        for child in children {
            collect_into(&child, rows)?;
        }
    }
    Ok(())
}

/// Median with the usual even/odd convention.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Per-method MAE/MSE medians, ordered by method name.
pub fn method_medians(rows: &[ReportRow]) -> Vec<(Method, f64, f64, usize)> {
    let mut methods: Vec<Method> = Vec::new();
    for row in rows {
        if !methods.contains(&row.method) {
            methods.push(row.method);
        }
    }
    methods.sort_by_key(|m| m.name());
    methods
        .into_iter()
        .map(|m| {
            let maes: Vec<f64> = rows.iter().filter(|r| r.method == m).map(|r| r.mae).collect();
            let mses: Vec<f64> = rows.iter().filter(|r| r.method == m).map(|r| r.mse).collect();
            (m, median(&maes), median(&mses), maes.len())
        })
        .collect()
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(
        "method,seed,n_labeled,n_unlabeled,n_test,mae,mse,wall_time_s,pseudo_precision,pseudo_coverage\n",
    );
    for r in rows {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.seed,
            r.n_labeled,
            r.n_unlabeled,
            r.n_test,
            r.mae,
            r.mse,
            r.wall_time_s,
            opt(r.pseudo_precision),
            opt(r.pseudo_coverage),
        ));
    }
    out
}

/// Plain-text comparison table: one row per method with seed-median
/// MAE/MSE, lowest MAE marked.
pub fn render_table(rows: &[ReportRow]) -> String {
    let medians = method_medians(rows);
    let best = medians
        .iter()
        .map(|(_, mae, _, _)| *mae)
        .fold(f64::INFINITY, f64::min);
    let mut out = String::new();
    out.push_str(&format!("{:<16} {:>6} {:>10} {:>10}\n", "method", "runs", "MAE", "MSE"));
    out.push_str(&format!("{:-<16} {:->6} {:->10} {:->10}\n", "", "", "", ""));
    for (method, mae, mse, n) in &medians {
        let marker = if (*mae - best).abs() < f64::EPSILON { " *" } else { "" };
        out.push_str(&format!(
            "{:<16} {:>6} {:>10.3} {:>10.3}{}\n",
            method.name(),
            n,
            mae,
            mse,
            marker
        ));
    }
    out
}
