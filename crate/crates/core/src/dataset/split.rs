//! Identity-closed train/test splitting of videos.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::NUM_AUS;

pub const DEFAULT_FRACTION: f64 = 0.8;
pub const MIN_FRACTION: f64 = 0.78;
pub const MAX_FRACTION: f64 = 0.86;
pub const TRIALS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    /// The person shown; all of a person's videos land on one side.
    pub identity_id: String,
    pub frame_count: u64,
    pub fps: f64,
    /// Frames on which each AU is present.
    #[serde(default)]
    pub au_counts: [u64; NUM_AUS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub train_fraction: f64,
    /// Share of each AU among all AU labels of a side, in percent.
    pub train_au_pct: [f64; NUM_AUS],
    pub test_au_pct: [f64; NUM_AUS],
    /// `|train - test|` per AU, in percentage points.
    pub gaps: [f64; NUM_AUS],
    pub max_gap: f64,
    /// Trial that produced this split and how many trials were valid.
    pub trial: usize,
    pub valid_trials: usize,
}

/// Each AU's count as a percentage of all AU labels; zeros when there are none.
pub fn au_percentages(counts: &[u64; NUM_AUS]) -> [f64; NUM_AUS] {
    let total: u64 = counts.iter().sum();
    counts.map(|c| if total == 0 { 0.0 } else { 100.0 * c as f64 / total as f64 })
}

/// Runs `trials` randomized greedy splits and keeps the one whose per-AU
/// distributions differ least between sides (smallest maximum gap, earliest
/// trial on ties). Each trial walks identities in random order, adding each
/// to training unless that would overshoot the upper fraction bound, until
/// `target_fraction` of the frames is reached.
pub fn split_dataset(videos: &[VideoMeta], target_fraction: f64, seed: u64, trials: usize) -> Result<SplitReport> {
    if !(MIN_FRACTION..=MAX_FRACTION).contains(&target_fraction) {
        return Err(Error::invalid(format!(
            "target fraction {target_fraction} outside [{MIN_FRACTION}, {MAX_FRACTION}]"
        )));
    }
    let total: u64 = videos.iter().map(|v| v.frame_count).sum();
    if total == 0 {
        return Err(Error::Split("no frames".into()));
    }
    let mut by_identity: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, v) in videos.iter().enumerate() {
        if v.identity_id.is_empty() {
            return Err(Error::Split(format!("video {} has no identity", v.video_id)));
        }
        by_identity.entry(&v.identity_id).or_default().push(i);
    }
    let groups: Vec<(u64, Vec<usize>)> = by_identity
        .into_values()
        .map(|idx| (idx.iter().map(|&i| videos[i].frame_count).sum(), idx))
        .collect();
    let cap = (MAX_FRACTION * total as f64).floor() as u64;
    if let Some((frames, idx)) = groups.iter().find(|(f, _)| *f > cap) {
        return Err(Error::Split(format!(
            "identity {} owns {frames} of {total} frames",
            videos[idx[0]].identity_id
        )));
    }
    let target = target_fraction * total as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut best: Option<(f64, usize, Vec<bool>)> = None;
    let mut valid = 0;
    for trial in 0..trials {
        order.shuffle(&mut rng);
        let mut in_train = vec![false; groups.len()];
        let mut frames = 0u64;
        for &g in &order {
            if frames as f64 >= target {
                break;
            }
            if frames + groups[g].0 <= cap {
                frames += groups[g].0;
                in_train[g] = true;
            }
        }
        let fraction = frames as f64 / total as f64;
        if fraction < MIN_FRACTION {
            continue;
        }
        valid += 1;
        let gap = side_stats(videos, &groups, &in_train).2.iter().cloned().fold(0.0, f64::max);
        if best.as_ref().is_none_or(|(b, _, _)| gap < *b) {
            best = Some((gap, trial, in_train));
        }
    }
    let Some((max_gap, trial, in_train)) = best else {
        return Err(Error::Split(format!("none of {trials} trials reached {MIN_FRACTION} of the frames")));
    };
    let (train_au_pct, test_au_pct, gaps) = side_stats(videos, &groups, &in_train);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let mut train_frames = 0;
    for (g, (frames, idx)) in groups.iter().enumerate() {
        let side = if in_train[g] { &mut train } else { &mut test };
        side.extend(idx.iter().map(|&i| videos[i].video_id.clone()));
        if in_train[g] {
            train_frames += frames;
        }
    }
    train.sort();
    test.sort();
    Ok(SplitReport {
        train,
        test,
        train_fraction: train_frames as f64 / total as f64,
        train_au_pct,
        test_au_pct,
        gaps,
        max_gap,
        trial,
        valid_trials: valid,
    })
}

type SideStats = ([f64; NUM_AUS], [f64; NUM_AUS], [f64; NUM_AUS]);

fn side_stats(videos: &[VideoMeta], groups: &[(u64, Vec<usize>)], in_train: &[bool]) -> SideStats {
    let mut counts = [[0u64; NUM_AUS]; 2];
    for (g, (_, idx)) in groups.iter().enumerate() {
        let side = &mut counts[usize::from(!in_train[g])];
        for &i in idx {
            for (c, v) in side.iter_mut().zip(videos[i].au_counts) {
                *c += v;
            }
        }
    }
    let (a, b) = (au_percentages(&counts[0]), au_percentages(&counts[1]));
    (a, b, std::array::from_fn(|k| (a[k] - b[k]).abs()))
}
