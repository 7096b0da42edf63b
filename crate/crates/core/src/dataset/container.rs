//! The packed image+label training-set file.
//!
//! Layout, little-endian: `"AFDS"`, version u16, height u16, width u16,
//! channels u16, count u64, bytes per label record u32 (24-byte header);
//! then per sample the raw HWC image bytes, 8 presence bytes, 8 intensity
//! bytes, valence f32 and arousal f32.

use std::path::Path;

use crate::binio::{Reader, WriteLe};
use crate::error::{Error, Result};
use crate::metrics::NUM_AUS;
use crate::models::LabelBatch;

use super::annotations::AnnotationRecord;
use super::{PixelRange, Samples};

pub const MAGIC: &[u8; 4] = b"AFDS";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 24;
pub const RECORD_BYTES: usize = 2 * NUM_AUS + 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PackedRecord {
    pub presence: [bool; NUM_AUS],
    pub intensity: [u8; NUM_AUS],
    pub valence: f32,
    pub arousal: f32,
}

impl From<&AnnotationRecord> for PackedRecord {
    fn from(r: &AnnotationRecord) -> Self {
        PackedRecord {
            presence: r.presence,
            intensity: r.intensity,
            valence: r.valence as f32,
            arousal: r.arousal as f32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedDataset {
    pub height: u16,
    pub width: u16,
    pub channels: u16,
    /// `len() * image_bytes()` pixels, sample-major HWC.
    pub images: Vec<u8>,
    pub records: Vec<PackedRecord>,
}

impl PackedDataset {
    pub fn new(height: u16, width: u16, channels: u16, images: Vec<u8>, records: Vec<PackedRecord>) -> Result<Self> {
        let d = PackedDataset {
            height,
            width,
            channels,
            images,
            records,
        };
        if d.image_bytes() == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if d.images.len() != d.records.len() * d.image_bytes() {
            return Err(Error::invalid(format!(
                "{} image bytes for {} records of {} bytes each",
                d.images.len(),
                d.records.len(),
                d.image_bytes()
            )));
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_bytes(&self) -> usize {
        self.height as usize * self.width as usize * self.channels as usize
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_bytes();
        &self.images[i * n..(i + 1) * n]
    }

    /// Bytes after the header.
    pub fn payload_bytes(&self) -> usize {
        self.len() * (self.image_bytes() + RECORD_BYTES)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.payload_bytes());
        out.extend_from_slice(MAGIC);
        out.put(VERSION.to_le_bytes());
        out.put(self.height.to_le_bytes());
        out.put(self.width.to_le_bytes());
        out.put(self.channels.to_le_bytes());
        out.put((self.len() as u64).to_le_bytes());
        out.put((RECORD_BYTES as u32).to_le_bytes());
        for (i, r) in self.records.iter().enumerate() {
            out.extend_from_slice(self.image(i));
            out.extend(r.presence.map(u8::from));
            out.extend_from_slice(&r.intensity);
            out.put(r.valence.to_le_bytes());
            out.put(r.arousal.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        let at = r.offset();
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: at,
                reason: format!("unsupported version {version}"),
            });
        }
        let (height, width, channels) = (r.u16()?, r.u16()?, r.u16()?);
        let count = r.u64()?;
        let at = r.offset();
        let record_bytes = r.u32()?;
        if record_bytes as usize != RECORD_BYTES {
            return Err(Error::Format {
                offset: at,
                reason: format!("record size {record_bytes}, expected {RECORD_BYTES}"),
            });
        }
        let image_bytes = height as usize * width as usize * channels as usize;
        if image_bytes == 0 {
            return Err(r.error("zero-sized images"));
        }
        let need = (count as u128) * (image_bytes + RECORD_BYTES) as u128;
        if need > r.remaining() as u128 {
            return Err(r.error(format!("truncated: header declares {count} samples ({need} bytes), {} left", r.remaining())));
        }
        let count = count as usize;
        let mut images = Vec::with_capacity(count * image_bytes);
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            images.extend_from_slice(r.take(image_bytes, "image")?);
            let mut presence = [false; NUM_AUS];
            for p in presence.iter_mut() {
                *p = match r.u8()? {
                    0 => false,
                    1 => true,
                    b => return Err(Error::Format { offset: r.offset() - 1, reason: format!("presence byte {b}") }),
                };
            }
            let intensity: [u8; NUM_AUS] = r.take(NUM_AUS, "intensity")?.try_into().expect("sized");
            records.push(PackedRecord {
                presence,
                intensity,
                valence: r.f32()?,
                arousal: r.f32()?,
            });
        }
        if r.remaining() != 0 {
            return Err(r.error(format!("{} trailing bytes", r.remaining())));
        }
        PackedDataset::new(height, width, channels, images, records)
    }

    /// Training samples with AU and VA labels, pixels mapped to `range`.
    pub fn to_samples(&self, range: PixelRange) -> Result<Samples> {
        let labels = LabelBatch {
            au: self.records.iter().map(|r| r.presence).collect(),
            valence: self.records.iter().map(|r| r.valence as f64).collect(),
            arousal: self.records.iter().map(|r| r.arousal as f64).collect(),
            class: Vec::new(),
        };
        let shape = vec![self.height as usize, self.width as usize, self.channels as usize];
        Samples::new(shape, self.images.clone(), labels, range)
    }
}

pub fn pack_dataset(data: &PackedDataset, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, data.to_bytes())?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<PackedDataset> {
    PackedDataset::from_bytes(&std::fs::read(path)?)
}
