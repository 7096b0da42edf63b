//! Post-hoc sweep over saved checkpoints: best score per metric.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;

use crate::checkpoint;
use crate::dataset::Samples;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::tensor::Scalar;
use crate::train::evaluate_full;

/// Whether a metric improves downwards.
pub fn lower_is_better(metric: &str) -> bool {
    metric.starts_with("mse_")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Best {
    pub metric: String,
    pub value: f64,
    /// `None` for derived rows that mix iterations.
    pub iteration: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    /// Metrics in report column order; metrics never reported are absent.
    pub rows: Vec<Best>,
}

impl SweepTable {
    pub fn get(&self, metric: &str) -> Option<&Best> {
        self.rows.iter().find(|b| b.metric == metric)
    }

    /// `metric<TAB>score (iteration in thousands)`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for b in &self.rows {
            let it = b.iteration.map_or("-".to_string(), |i| format!("{}", i as f64 / 1000.0));
            writeln!(out, "{}\t{:.4} ({it})", b.metric, b.value).unwrap();
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,best,iteration\n");
        for b in &self.rows {
            let it = b.iteration.map_or(String::new(), |i| i.to_string());
            writeln!(out, "{},{},{it}", b.metric, b.value).unwrap();
        }
        out
    }
}

/// Best value of every metric over `reports`, earliest iteration on ties.
/// When AU scores are present a `best_of_best_mean` row averages the best
/// mean F1 and the best mean accuracy, which may come from different
/// iterations; `mean_of_means` stays the per-iteration figure.
pub fn best_per_metric(reports: &[MetricsReport]) -> SweepTable {
    let mut sorted: Vec<&MetricsReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.iteration);
    let mut rows: Vec<Best> = Vec::new();
    for name in MetricsReport::column_names() {
        let lower = lower_is_better(&name);
        let mut best: Option<Best> = None;
        for r in &sorted {
            let Some(v) = r.columns().into_iter().find(|(n, _)| *n == name).and_then(|(_, v)| v) else {
                continue;
            };
            if v.is_nan() {
                continue;
            }
            let better = match &best {
                None => true,
                Some(b) if lower => v < b.value,
                Some(b) => v > b.value,
            };
            if better {
                best = Some(Best {
                    metric: name.clone(),
                    value: v,
                    iteration: Some(r.iteration),
                });
            }
        }
        rows.extend(best);
    }
    let pick = |m: &str| rows.iter().find(|b| b.metric == m).map(|b| b.value);
    if let (Some(f1), Some(acc)) = (pick("mean_f1"), pick("mean_accuracy")) {
        rows.push(Best {
            metric: "best_of_best_mean".into(),
            value: (f1 + acc) / 2.0,
            iteration: None,
        });
    }
    SweepTable { rows }
}

#[derive(Debug)]
pub struct Sweep {
    pub reports: Vec<MetricsReport>,
    pub table: SweepTable,
    /// Files that failed to load, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Checkpoint files in `dir`, by file name.
pub fn checkpoint_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == checkpoint::EXTENSION))
        .collect();
    files.sort();
    Ok(files)
}

/// Scores every checkpoint in `dir` on the whole of `test`. Unreadable
/// checkpoints are skipped with a warning; none readable is an error.
pub fn evaluate_checkpoints<T: Scalar>(dir: &Path, test: &Samples, chunk: usize) -> Result<Sweep> {
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for path in checkpoint_files(dir)? {
        match checkpoint::load::<T>(&path) {
            Ok(c) => reports.push(evaluate_full(&c.model, test, chunk, c.iteration)?),
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                skipped.push((path, e.to_string()));
            }
        }
    }
    if reports.is_empty() {
        return Err(Error::NoCheckpoints(dir.to_path_buf()));
    }
    reports.sort_by_key(|r| r.iteration);
    let table = best_per_metric(&reports);
    Ok(Sweep { reports, table, skipped })
}
