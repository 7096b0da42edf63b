//! MNIST in gzipped IDX files.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::models::LabelBatch;

use super::{PixelRange, Samples};

pub const IMAGES_FILE: &str = "train-images-idx3-ubyte.gz";
pub const LABELS_FILE: &str = "train-labels-idx1-ubyte.gz";

fn read_gz(path: &Path) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(File::open(path)?).read_to_end(&mut out)?;
    Ok(out)
}

fn be_u32(r: &mut Reader) -> Result<u32> {
    Ok(r.u32()?.swap_bytes())
}

/// Parses an IDX image file: magic `0x00000803`, count, rows, cols, pixels.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = Reader::new(bytes);
    let magic = be_u32(&mut r)?;
    if magic != 0x803 {
        return Err(Error::Format {
            offset: 0,
            reason: format!("IDX image magic {magic:#x}"),
        });
    }
    let (n, h, w) = (be_u32(&mut r)? as usize, be_u32(&mut r)? as usize, be_u32(&mut r)? as usize);
    let pixels = r.take(n * h * w, "pixels")?.to_vec();
    Ok((n, h, w, pixels))
}

/// Parses an IDX label file: magic `0x00000801`, count, labels.
pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader::new(bytes);
    let magic = be_u32(&mut r)?;
    if magic != 0x801 {
        return Err(Error::Format {
            offset: 0,
            reason: format!("IDX label magic {magic:#x}"),
        });
    }
    let n = be_u32(&mut r)? as usize;
    Ok(r.take(n, "labels")?.to_vec())
}

/// Loads `dir/train-images-idx3-ubyte.gz` and its labels as `[28, 28, 1]`
/// samples with class labels.
pub fn load(dir: &Path, range: PixelRange) -> Result<Samples> {
    let (n, h, w, pixels) = parse_images(&read_gz(&dir.join(IMAGES_FILE))?)?;
    let labels = parse_labels(&read_gz(&dir.join(LABELS_FILE))?)?;
    if labels.len() != n {
        return Err(Error::invalid(format!("{n} images but {} labels", labels.len())));
    }
    Samples::new(
        vec![h, w, 1],
        pixels,
        LabelBatch {
            class: labels.into_iter().map(usize::from).collect(),
            ..Default::default()
        },
        range,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_tiny_idx() {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 2];
        img.extend([1, 2, 3, 4]);
        let (n, h, w, px) = parse_images(&img).unwrap();
        assert_eq!((n, h, w, px), (2, 1, 2, vec![1, 2, 3, 4]));
        assert_eq!(parse_labels(&[0, 0, 8, 1, 0, 0, 0, 2, 7, 9]).unwrap(), vec![7, 9]);
        assert!(parse_labels(&[0, 0, 8, 3, 0, 0, 0, 0]).is_err());
        assert!(parse_images(&img[..18]).is_err());
    }
}
