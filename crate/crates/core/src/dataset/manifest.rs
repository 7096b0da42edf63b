//! Corpus manifest: where each video's annotations and face crops live.
//!
//! ```json
//! {"videos": [{"video_id": "v55", "identity_id": "p12",
//!              "annotations": "ann/v55.txt", "frames": "faces/v55",
//!              "va_track": "va/v55.txt", "va_fps": 25.0}]}
//! ```
//!
//! Paths are relative to the manifest. Face crops are `{frame:06}.png`.
//! The optional VA track holds one `valence arousal` pair per line at
//! `va_fps`; it is resampled to 30 fps and replaces the VA columns.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use log::warn;
use serde::{Deserialize, Serialize};

use super::annotations::{align_lengths, interpolate_va, parse_annotations, AnnotationRecord};
use super::container::{PackedDataset, PackedRecord};
use super::split::VideoMeta;
use crate::error::{Error, Result};

pub const PIPELINE_FPS: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestVideo {
    pub video_id: String,
    pub identity_id: String,
    pub annotations: PathBuf,
    #[serde(default)]
    pub frames: Option<PathBuf>,
    #[serde(default)]
    pub va_track: Option<PathBuf>,
    #[serde(default)]
    pub va_fps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub videos: Vec<ManifestVideo>,
    /// Directory the relative paths hang off; not serialized.
    #[serde(skip)]
    pub base: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        m.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    /// A video's annotation records, with the VA track merged in if given.
    pub fn records(&self, video: &ManifestVideo) -> Result<Vec<AnnotationRecord>> {
        let text = std::fs::read_to_string(self.resolve(&video.annotations))?;
        let mut records = parse_annotations(&text)?;
        if let Some(track) = &video.va_track {
            let (v, a) = parse_va_track(&std::fs::read_to_string(self.resolve(track))?)?;
            let fps = video.va_fps.unwrap_or(PIPELINE_FPS);
            let v = align_lengths(&interpolate_va(&v, fps, PIPELINE_FPS)?, records.len())?;
            let a = align_lengths(&interpolate_va(&a, fps, PIPELINE_FPS)?, records.len())?;
            for (r, (v, a)) in records.iter_mut().zip(v.into_iter().zip(a)) {
                r.valence = v;
                r.arousal = a;
            }
        }
        Ok(records)
    }

    /// Per-video frame and AU counts for splitting.
    pub fn video_meta(&self) -> Result<Vec<VideoMeta>> {
        self.videos
            .iter()
            .map(|v| {
                let records = self.records(v)?;
                let mut au_counts = [0; crate::metrics::NUM_AUS];
                for r in &records {
                    for (c, &p) in au_counts.iter_mut().zip(&r.presence) {
                        *c += u64::from(p);
                    }
                }
                Ok(VideoMeta {
                    video_id: v.video_id.clone(),
                    identity_id: v.identity_id.clone(),
                    frame_count: records.len() as u64,
                    fps: PIPELINE_FPS,
                    au_counts,
                })
            })
            .collect()
    }

    /// Packs the face crops of the selected videos (all when `only` is
    /// `None`), resized to `size`x`size` RGB. Frames without a crop are
    /// dropped with a warning.
    pub fn build(&self, size: u16, only: Option<&HashSet<String>>) -> Result<PackedDataset> {
        let mut images = Vec::new();
        let mut records = Vec::new();
        for video in &self.videos {
            if only.is_some_and(|s| !s.contains(&video.video_id)) {
                continue;
            }
            let Some(frames) = &video.frames else {
                return Err(Error::invalid(format!("video {} lists no frames directory", video.video_id)));
            };
            let dir = self.resolve(frames);
            let mut dropped = 0;
            for r in self.records(video)? {
                let path = dir.join(format!("{:06}.png", r.frame));
                if !path.exists() {
                    dropped += 1;
                    continue;
                }
                let img = image::open(&path)?.to_rgb8();
                let img = image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle);
                images.extend_from_slice(img.as_raw());
                records.push(PackedRecord::from(&r));
            }
            if dropped > 0 {
                warn!("{}: {dropped} annotated frames have no face crop", video.video_id);
            }
        }
        PackedDataset::new(size, size, 3, images, records)
    }
}

/// Two columns, valence then arousal; `#` comments allowed.
pub fn parse_va_track(text: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mut v, mut a) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let nums: Vec<f64> = t
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse { line: line_no, reason: e.to_string() })?;
        match nums[..] {
            [x, y] if (-1.0..=1.0).contains(&x) && (-1.0..=1.0).contains(&y) => {
                v.push(x);
                a.push(y);
            }
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    reason: "expected valence and arousal in [-1, 1]".into(),
                })
            }
        }
    }
    Ok((v, a))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_from_a_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("faces")).unwrap();
        let zero = "0 0 0 0 0 0 0 0 0 0 0 0 0 0 0 0";
        std::fs::write(root.join("a.txt"), format!("0 1 1 {zero_tail} 0 0\n1 {zero} 0 0\n2 {zero} 0 0\n", zero_tail = &zero[4..])).unwrap();
        std::fs::write(root.join("va.txt"), "0 0\n1 -1\n").unwrap();
        for f in [0, 2] {
            image::RgbImage::from_pixel(8, 8, image::Rgb([f as u8 * 100, 0, 0]))
                .save(root.join(format!("faces/{f:06}.png")))
                .unwrap();
        }
        std::fs::write(
            root.join("m.json"),
            r#"{"videos":[{"video_id":"v","identity_id":"p","annotations":"a.txt","frames":"faces","va_track":"va.txt","va_fps":15}]}"#,
        )
        .unwrap();
        let m = Manifest::load(&root.join("m.json")).unwrap();
        let meta = m.video_meta().unwrap();
        assert_eq!((meta[0].frame_count, meta[0].au_counts[0]), (3, 1));
        let d = m.build(4, None).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.image(1)[0], 200);
        assert_eq!(d.records[1].arousal, -1.0);
        assert_eq!(d.records[0].presence[0], true);
        assert_eq!(m.build(4, Some(&HashSet::new())).unwrap().len(), 0);
    }
}
