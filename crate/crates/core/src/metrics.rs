//! Evaluation metrics and the per-iteration report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses;

pub const NUM_AUS: usize = 8;

/// Action unit numbers in column order.
pub const AU_IDS: [u8; NUM_AUS] = [1, 2, 4, 6, 12, 15, 20, 25];

/// Sigmoid outputs at or above this count as positive.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn scores(&self) -> LabelScores {
        let ratio = |num: usize, den: usize| if den == 0 { None } else { Some(num as f64 / den as f64) };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        let accuracy = ratio(self.tp + self.tn, self.total());
        LabelScores {
            precision: precision.unwrap_or(0.0),
            recall: recall.unwrap_or(0.0),
            f1: f1.unwrap_or(0.0),
            accuracy: accuracy.unwrap_or(0.0),
            degenerate: precision.is_none() || recall.is_none() || f1.is_none(),
        }
    }
}

/// Scores for one binary label. Undefined ratios are reported as 0 and set
/// `degenerate`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationMetrics {
    pub per_label: Vec<LabelScores>,
    pub mean_f1: f64,
    pub mean_accuracy: f64,
    pub mean_of_means: f64,
}

/// Per-label scores over row-major `[B, L]` flag matrices.
pub fn classification_metrics(pred: &[bool], truth: &[bool], labels: usize) -> Result<ClassificationMetrics> {
    if labels == 0 || pred.len() != truth.len() || pred.len() % labels != 0 {
        return Err(Error::shape("classification_metrics", &[pred.len()], &[truth.len()]));
    }
    let mut cells = vec![Confusion::default(); labels];
    for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        cells[i % labels].add(p, t);
    }
    let per_label: Vec<LabelScores> = cells.iter().map(Confusion::scores).collect();
    let n = labels as f64;
    let mean_f1 = per_label.iter().map(|s| s.f1).sum::<f64>() / n;
    let mean_accuracy = per_label.iter().map(|s| s.accuracy).sum::<f64>() / n;
    Ok(ClassificationMetrics {
        per_label,
        mean_f1,
        mean_accuracy,
        mean_of_means: (mean_f1 + mean_accuracy) / 2.0,
    })
}

pub fn threshold(probs: &[f64]) -> Vec<bool> {
    probs.iter().map(|&p| p >= THRESHOLD).collect()
}

/// Fraction of real images whose fake-node probability is below 0.5.
pub fn pct_real_as_real(fake_probs: &[f64], is_fake: &[bool]) -> Result<f64> {
    if fake_probs.len() != is_fake.len() {
        return Err(Error::shape("pct_real_as_real", &[fake_probs.len()], &[is_fake.len()]));
    }
    let (mut real, mut hits) = (0usize, 0usize);
    for (&p, &fake) in fake_probs.iter().zip(is_fake) {
        if !fake {
            real += 1;
            if p < THRESHOLD {
                hits += 1;
            }
        }
    }
    if real == 0 {
        return Err(Error::invalid("pct_real_as_real: batch has no real images"));
    }
    Ok(hits as f64 / real as f64)
}

/// Top-1 accuracy of row-major `[B, K]` scores against class indices.
pub fn top1_accuracy(scores: &[f64], classes: usize, labels: &[usize]) -> Result<f64> {
    if classes == 0 || scores.len() != labels.len() * classes || labels.is_empty() {
        return Err(Error::shape("top1_accuracy", &[scores.len()], &[labels.len(), classes]));
    }
    let hits = scores
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Scores for one evaluated batch or test set. Fields that do not apply to
/// the head being trained are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_au: Option<Vec<LabelScores>>,
    pub mean_f1: Option<f64>,
    pub mean_accuracy: Option<f64>,
    pub mean_of_means: Option<f64>,
    pub ccc_valence: Option<f64>,
    pub ccc_arousal: Option<f64>,
    pub mse_valence: Option<f64>,
    pub mse_arousal: Option<f64>,
    pub pct_real_as_real: Option<f64>,
    pub class_accuracy: Option<f64>,
    pub iteration: u64,
}

impl MetricsReport {
    /// Fills the AU columns from sigmoid outputs.
    pub fn set_au(&mut self, probs: &[f64], truth: &[bool]) -> Result<()> {
        let m = classification_metrics(&threshold(probs), truth, NUM_AUS)?;
        self.per_au = Some(m.per_label);
        self.mean_f1 = Some(m.mean_f1);
        self.mean_accuracy = Some(m.mean_accuracy);
        self.mean_of_means = Some(m.mean_of_means);
        Ok(())
    }

    /// Fills the valence/arousal columns. CCC needs at least two samples.
    pub fn set_va(&mut self, pred_v: &[f64], pred_a: &[f64], obs_v: &[f64], obs_a: &[f64]) -> Result<()> {
        self.mse_valence = Some(losses::mse(pred_v, obs_v)?);
        self.mse_arousal = Some(losses::mse(pred_a, obs_a)?);
        if pred_v.len() >= 2 {
            self.ccc_valence = Some(losses::ccc(pred_v, obs_v)?);
            self.ccc_arousal = Some(losses::ccc(pred_a, obs_a)?);
        }
        Ok(())
    }

    /// Scalar columns in declared order, flattened (per-AU scores first).
    pub fn columns(&self) -> Vec<(String, Option<f64>)> {
        let mut cols = Vec::with_capacity(Self::column_names().len());
        for (i, au) in AU_IDS.iter().enumerate() {
            let s = self.per_au.as_ref().map(|v| v[i]);
            cols.push((format!("au{au}_precision"), s.map(|s| s.precision)));
            cols.push((format!("au{au}_recall"), s.map(|s| s.recall)));
            cols.push((format!("au{au}_f1"), s.map(|s| s.f1)));
            cols.push((format!("au{au}_accuracy"), s.map(|s| s.accuracy)));
        }
        for (name, v) in [
            ("mean_f1", self.mean_f1),
            ("mean_accuracy", self.mean_accuracy),
            ("mean_of_means", self.mean_of_means),
            ("ccc_valence", self.ccc_valence),
            ("ccc_arousal", self.ccc_arousal),
            ("mse_valence", self.mse_valence),
            ("mse_arousal", self.mse_arousal),
            ("pct_real_as_real", self.pct_real_as_real),
            ("class_accuracy", self.class_accuracy),
        ] {
            cols.push((name.to_string(), v));
        }
        cols
    }

    pub fn column_names() -> Vec<String> {
        let mut names = Vec::new();
        for au in AU_IDS {
            for s in ["precision", "recall", "f1", "accuracy"] {
                names.push(format!("au{au}_{s}"));
            }
        }
        names.extend(
            [
                "mean_f1",
                "mean_accuracy",
                "mean_of_means",
                "ccc_valence",
                "ccc_arousal",
                "mse_valence",
                "mse_arousal",
                "pct_real_as_real",
                "class_accuracy",
            ]
            .map(String::from),
        );
        names
    }

    /// Header line for [`tsv_row`](Self::tsv_row).
    pub fn tsv_header() -> String {
        let mut h = vec!["iteration".to_string(), "side".to_string()];
        h.extend(Self::column_names());
        h.join("\t")
    }

    /// `iteration`, `side`, then every column; missing values print as `NA`.
    pub fn tsv_row(&self, side: &str) -> String {
        let mut row = vec![self.iteration.to_string(), side.to_string()];
        row.extend(self.columns().into_iter().map(|(_, v)| match v {
            Some(x) => format!("{x}"),
            None => "NA".to_string(),
        }));
        row.join("\t")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}
