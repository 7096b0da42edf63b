//! AU and affect distribution summaries per split.

use std::fmt::Write as _;

use serde::Serialize;

use super::annotations::AnnotationRecord;
use super::split::au_percentages;
use crate::metrics::{AU_IDS, NUM_AUS};

pub const DEFAULT_BINS: usize = 40;

/// Equal-width bins over `[-1, 1]`; 1.0 falls in the last bin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(bins: usize) -> Self {
        Histogram { counts: vec![0; bins] }
    }

    pub fn add(&mut self, v: f64) {
        let bins = self.counts.len();
        let b = (((v + 1.0) / 2.0 * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        self.counts[b] += 1;
    }

    pub fn centers(&self) -> Vec<f64> {
        let w = 2.0 / self.counts.len() as f64;
        (0..self.counts.len()).map(|i| -1.0 + w * (i as f64 + 0.5)).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitStats {
    pub name: String,
    pub frames: usize,
    pub au_counts: [u64; NUM_AUS],
    /// Share of all AU labels in the split, in percent.
    pub au_pct: [f64; NUM_AUS],
    pub valence: Histogram,
    pub arousal: Histogram,
}

impl SplitStats {
    fn new(name: &str, records: &[&AnnotationRecord], bins: usize) -> Self {
        let mut au_counts = [0; NUM_AUS];
        let (mut valence, mut arousal) = (Histogram::new(bins), Histogram::new(bins));
        for r in records {
            for (c, &p) in au_counts.iter_mut().zip(&r.presence) {
                *c += u64::from(p);
            }
            valence.add(r.valence);
            arousal.add(r.arousal);
        }
        SplitStats {
            name: name.into(),
            frames: records.len(),
            au_counts,
            au_pct: au_percentages(&au_counts),
            valence,
            arousal,
        }
    }

    pub fn au_total(&self) -> u64 {
        self.au_counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub splits: Vec<SplitStats>,
    pub total: SplitStats,
    /// `(valence, arousal)` of every frame showing each AU.
    pub scatter: Vec<Vec<(f64, f64)>>,
}

/// Summarizes named groups of records plus their union.
pub fn compute_stats(splits: &[(&str, &[AnnotationRecord])], bins: usize) -> StatsReport {
    let bins = bins.max(1);
    let all: Vec<&AnnotationRecord> = splits.iter().flat_map(|(_, r)| r.iter()).collect();
    let mut scatter = vec![Vec::new(); NUM_AUS];
    for r in &all {
        for (pts, _) in scatter.iter_mut().zip(r.presence).filter(|(_, p)| *p) {
            pts.push((r.valence, r.arousal));
        }
    }
    StatsReport {
        splits: splits
            .iter()
            .map(|(name, r)| SplitStats::new(name, &r.iter().collect::<Vec<_>>(), bins))
            .collect(),
        total: SplitStats::new("total", &all, bins),
        scatter,
    }
}

impl StatsReport {
    /// `split,au,count,percent`, one row per AU per split, then the totals.
    pub fn au_csv(&self) -> String {
        let mut out = String::from("split,au,count,percent\n");
        for s in self.splits.iter().chain([&self.total]) {
            for k in 0..NUM_AUS {
                writeln!(out, "{},AU{},{},{:.2}", s.name, AU_IDS[k], s.au_counts[k], s.au_pct[k]).unwrap();
            }
        }
        out
    }

    /// `bin_center,valence,arousal` over all splits.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_center,valence,arousal\n");
        let t = &self.total;
        for (i, c) in t.valence.centers().iter().enumerate() {
            writeln!(out, "{c:.3},{},{}", t.valence.counts[i], t.arousal.counts[i]).unwrap();
        }
        out
    }

    /// `au,valence,arousal` points for scatter plots.
    pub fn scatter_csv(&self) -> String {
        let mut out = String::from("au,valence,arousal\n");
        for (k, pts) in self.scatter.iter().enumerate() {
            for (v, a) in pts {
                writeln!(out, "AU{},{v},{a}", AU_IDS[k]).unwrap();
            }
        }
        out
    }
}
