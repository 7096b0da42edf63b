//! Picking one face per frame from several landmark detections.

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Four landmark points bounding a face crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkCandidate {
    pub points: [Point; 4],
}

impl LandmarkCandidate {
    pub fn center(&self) -> Point {
        let sum = self.points.iter().fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
        [sum[0] / 4.0, sum[1] / 4.0]
    }
}

/// Index of the candidate whose center is nearest `prev_center`, lowest index
/// on ties. Without a previous center the first detection wins.
pub fn select_face(candidates: &[LandmarkCandidate], prev_center: Option<Point>) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::invalid("no face candidates in frame"));
    }
    let Some(prev) = prev_center else {
        return Ok(0);
    };
    let dist2 = |c: &LandmarkCandidate| {
        let [x, y] = c.center();
        (x - prev[0]).powi(2) + (y - prev[1]).powi(2)
    };
    let mut best = 0;
    let mut best_d = dist2(&candidates[0]);
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let d = dist2(c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    Ok(best)
}

/// Follows one face through a video: each frame's pick seeds the next.
/// Frames without detections yield `None` and keep the previous center.
pub fn track_faces(frames: &[Vec<LandmarkCandidate>]) -> Vec<Option<usize>> {
    let mut prev = None;
    frames
        .iter()
        .map(|c| {
            let pick = select_face(c, prev).ok()?;
            prev = Some(c[pick].center());
            Some(pick)
        })
        .collect()
}
