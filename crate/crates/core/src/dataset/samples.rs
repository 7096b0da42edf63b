//! In-memory training sets: 8-bit pixels plus labels, batched on demand.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::models::LabelBatch;
use crate::tensor::{Scalar, Tensor};

/// How 8-bit pixels are mapped to network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PixelRange {
    /// `[-1, 1]`, matching a tanh generator.
    Signed,
    /// `[0, 1]`, matching a sigmoid generator.
    Unit,
}

impl PixelRange {
    pub fn normalize(self, p: u8) -> f64 {
        match self {
            PixelRange::Signed => p as f64 / 127.5 - 1.0,
            PixelRange::Unit => p as f64 / 255.0,
        }
    }

    pub fn to_byte(self, v: f64) -> u8 {
        let unit = match self {
            PixelRange::Signed => (v + 1.0) / 2.0,
            PixelRange::Unit => v,
        };
        (unit.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    /// Per-sample shape, e.g. `[28, 28, 3]` or `[784]`.
    pub shape: Vec<usize>,
    pub pixels: Vec<u8>,
    /// Full-length label columns; unused columns stay empty.
    pub labels: LabelBatch,
    pub range: PixelRange,
}

impl Samples {
    pub fn new(shape: Vec<usize>, pixels: Vec<u8>, labels: LabelBatch, range: PixelRange) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || pixels.len() % per != 0 {
            return Err(Error::invalid(format!("{} pixels do not divide into {shape:?} samples", pixels.len())));
        }
        let n = pixels.len() / per;
        for (name, len) in [
            ("au", labels.au.len()),
            ("valence", labels.valence.len()),
            ("arousal", labels.arousal.len()),
            ("class", labels.class.len()),
        ] {
            if len != 0 && len != n {
                return Err(Error::invalid(format!("{name} has {len} labels for {n} samples")));
            }
        }
        Ok(Samples {
            shape,
            pixels,
            labels,
            range,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.sample_len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Mean normalised pixel value over the whole set.
    pub fn mean_pixel(&self) -> f64 {
        self.pixels.iter().map(|&p| self.range.normalize(p)).sum::<f64>() / self.pixels.len().max(1) as f64
    }

    /// Images `[B, ...shape]` and labels for the given sample indices.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> Result<(Tensor<T>, LabelBatch)> {
        let per = self.sample_len();
        let n = self.len();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if i >= n {
                return Err(Error::invalid(format!("sample {i} out of {n}")));
            }
            data.extend(self.pixels[i * per..(i + 1) * per].iter().map(|&p| T::lit(self.range.normalize(p))));
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.shape);
        Ok((Tensor::new(shape, data)?, self.label_subset(idx)))
    }

    fn label_subset(&self, idx: &[usize]) -> LabelBatch {
        fn pick<V: Clone>(v: &[V], idx: &[usize]) -> Vec<V> {
            if v.is_empty() {
                Vec::new()
            } else {
                idx.iter().map(|&i| v[i].clone()).collect()
            }
        }
        let l = &self.labels;
        LabelBatch {
            au: pick(&l.au, idx),
            valence: pick(&l.valence, idx),
            arousal: pick(&l.arousal, idx),
            class: pick(&l.class, idx),
        }
    }

    /// Samples at the given indices, in order.
    pub fn subset(&self, idx: &[usize]) -> Result<Samples> {
        let per = self.sample_len();
        let mut pixels = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample {i} out of {}", self.len())));
            }
            pixels.extend_from_slice(&self.pixels[i * per..(i + 1) * per]);
        }
        Samples::new(self.shape.clone(), pixels, self.label_subset(idx), self.range)
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Samples, Samples)> {
        let all: Vec<usize> = (0..self.len()).collect();
        let n = n.min(all.len());
        Ok((self.subset(&all[..n])?, self.subset(&all[n..])?))
    }

    /// Replicates single-channel images `[H, W, 1]` or `[H, W]` to three channels.
    pub fn to_rgb(&self) -> Result<Samples> {
        let (h, w) = match self.shape.as_slice() {
            [h, w] | [h, w, 1] => (*h, *w),
            _ => return Err(Error::invalid(format!("cannot expand {:?} to RGB", self.shape))),
        };
        let pixels = self.pixels.iter().flat_map(|&p| [p, p, p]).collect();
        Samples::new(vec![h, w, 3], pixels, self.labels.clone(), self.range)
    }

    /// Same pixels viewed with a different per-sample shape.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Samples> {
        if shape.iter().product::<usize>() != self.sample_len() {
            return Err(Error::shape("reshape samples", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn with_range(mut self, range: PixelRange) -> Samples {
        self.range = range;
        self
    }
}

/// Endless sequence of batches over a shuffled order, reshuffled every pass.
#[derive(Debug, Clone)]
pub struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    pub fn new(len: usize) -> Self {
        Cycler {
            order: (0..len).collect(),
            pos: len,
        }
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, batch: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            let take = (batch - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}
