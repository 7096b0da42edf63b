//! Per-frame AU/VA annotation files and the VA timeline fix-ups.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::metrics::NUM_AUS;

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub frame: u64,
    pub presence: [bool; NUM_AUS],
    /// Always 1 where present in the source corpus, 0 where absent.
    pub intensity: [u8; NUM_AUS],
    pub valence: f64,
    pub arousal: f64,
}

impl AnnotationRecord {
    pub fn au_count(&self) -> usize {
        self.presence.iter().filter(|&&p| p).count()
    }
}

const FIELDS: usize = 1 + 2 * NUM_AUS + 2;

/// Parses one record per line: frame, eight `presence intensity` pairs,
/// valence, arousal. Blank lines and lines starting with `#` are skipped.
/// The result is sorted by frame.
pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    let mut seen: HashMap<u64, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |reason: String| Error::Parse { line, reason };
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != FIELDS {
            return Err(err(format!("expected {FIELDS} fields, found {}", fields.len())));
        }
        let frame: u64 = fields[0].parse().map_err(|_| err(format!("bad frame number {:?}", fields[0])))?;
        if let Some(first) = seen.insert(frame, line) {
            return Err(err(format!("frame {frame} already annotated on line {first}")));
        }
        let mut presence = [false; NUM_AUS];
        let mut intensity = [0u8; NUM_AUS];
        for au in 0..NUM_AUS {
            let (p, s) = (fields[1 + 2 * au], fields[2 + 2 * au]);
            presence[au] = match p {
                "0" => false,
                "1" => true,
                _ => return Err(err(format!("presence must be 0 or 1, got {p:?}"))),
            };
            intensity[au] = s.parse().map_err(|_| err(format!("bad intensity {s:?}")))?;
            if presence[au] != (intensity[au] > 0) {
                return Err(err(format!("AU slot {au}: presence {p} with intensity {s}")));
            }
        }
        let mut va = [0.0; 2];
        for (j, v) in va.iter_mut().enumerate() {
            let s = fields[FIELDS - 2 + j];
            *v = s.parse().map_err(|_| err(format!("bad affect value {s:?}")))?;
            if !(-1.0..=1.0).contains(v) {
                return Err(err(format!("affect value {v} outside [-1, 1]")));
            }
        }
        out.push(AnnotationRecord {
            frame,
            presence,
            intensity,
            valence: va[0],
            arousal: va[1],
        });
    }
    out.sort_by_key(|r| r.frame);
    Ok(out)
}

/// Resamples a VA track from `src_fps` to `dst_fps` by linear interpolation
/// on the shared time axis. Both endpoints are kept; a single value is
/// replicated to the target length.
pub fn interpolate_va(values: &[f64], src_fps: f64, dst_fps: f64) -> Result<Vec<f64>> {
    if !(src_fps > 0.0 && dst_fps > 0.0) {
        return Err(Error::invalid(format!("frame rates must be positive, got {src_fps} and {dst_fps}")));
    }
    let Some(&last) = values.last() else {
        return Err(Error::invalid("nothing to interpolate"));
    };
    let span = (values.len() - 1) as f64;
    let dst_len = (span * dst_fps / src_fps).round() as usize + 1;
    if values.len() == 1 {
        return Ok(vec![last; dst_len]);
    }
    if src_fps == dst_fps {
        return Ok(values.to_vec());
    }
    let step = span / (dst_len - 1) as f64;
    Ok((0..dst_len)
        .map(|j| {
            if j == dst_len - 1 {
                return last;
            }
            let t = j as f64 * step;
            let i = (t.floor() as usize).min(values.len() - 2);
            let w = t - i as f64;
            if w == 0.0 {
                values[i]
            } else {
                values[i] + w * (values[i + 1] - values[i])
            }
        })
        .collect())
}

/// Crops from the end or repeats the last value so a VA track matches the
/// AU timeline. More than two frames of disagreement is an error.
pub fn align_lengths(va: &[f64], target_len: usize) -> Result<Vec<f64>> {
    if va.len().abs_diff(target_len) > 2 {
        return Err(Error::invalid(format!(
            "VA track has {} values for {target_len} frames; frame rates probably disagree",
            va.len()
        )));
    }
    let mut out = va[..va.len().min(target_len)].to_vec();
    if let Some(&last) = va.last() {
        out.resize(target_len, last);
    }
    Ok(out)
}
