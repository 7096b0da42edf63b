//! Binary checkpoint files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "CGAN"  version:u16
//! config block (see `write_config`)
//! params:   count:u32 then per tensor: name_len:u16 name rank:u8 extents:u32.. values:f64..
//! buffers:  same layout (batch-norm running statistics)
//! iteration:u64
//! rng:      seed:[u8;32] stream:u64 word_pos:u128
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, WriteLe};
use crate::error::{Error, Result};
use crate::layers::{LeakyRelu, ParamSet};
use crate::models::{GanModel, HeadVariant, ModelConfig, Pooling, VaLoss, Weighting};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"CGAN";
pub const VERSION: u16 = 1;
pub const EXTENSION: &str = "cgan";

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar = f64> {
    pub model: GanModel<T>,
    pub iteration: u64,
    pub rng: RngState,
}

pub fn to_bytes<T: Scalar>(model: &GanModel<T>, iteration: u64, rng: &RngState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.put(VERSION.to_le_bytes());
    write_config(&mut out, &model.config);
    write_tensors(&mut out, chain(&model.generator.params, &model.discriminator.params));
    write_tensors(&mut out, chain(&model.generator.buffers, &model.discriminator.buffers));
    out.put(iteration.to_le_bytes());
    out.extend_from_slice(&rng.seed);
    out.put(rng.stream.to_le_bytes());
    out.put(rng.word_pos.to_le_bytes());
    out
}

fn chain<'a, T: Scalar>(a: &'a ParamSet<T>, b: &'a ParamSet<T>) -> Vec<(&'a str, &'a Tensor<T>)> {
    a.iter().chain(b.iter()).collect()
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported checkpoint version {version}"),
        });
    }
    let config = read_config(&mut r)?;
    // Structure comes from the config; every value is then overwritten.
    let mut model = GanModel::<T>::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut filled = 0;
    for _ in 0..2 {
        let count = r.u32()? as usize;
        for _ in 0..count {
            let at = r.offset();
            let (name, tensor) = read_tensor::<T>(&mut r)?;
            let slot = [
                &mut model.generator.params,
                &mut model.discriminator.params,
                &mut model.generator.buffers,
                &mut model.discriminator.buffers,
            ]
            .into_iter()
            .find_map(|s| s.get_mut(&name))
            .ok_or_else(|| Error::Format {
                offset: at,
                reason: format!("unknown tensor {name}"),
            })?;
            if slot.shape() != tensor.shape() {
                return Err(Error::Format {
                    offset: at,
                    reason: format!("{name}: shape {:?}, model expects {:?}", tensor.shape(), slot.shape()),
                });
            }
            *slot = tensor;
            filled += 1;
        }
    }
    let expected = model.generator.params.len()
        + model.discriminator.params.len()
        + model.generator.buffers.len()
        + model.discriminator.buffers.len();
    if filled != expected {
        return Err(r.error(format!("{filled} tensors stored, model has {expected}")));
    }
    let iteration = r.u64()?;
    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    if r.remaining() != 0 {
        return Err(r.error(format!("{} trailing bytes", r.remaining())));
    }
    Ok(Checkpoint {
        model,
        iteration,
        rng: RngState { seed, stream, word_pos },
    })
}

/// Writes atomically via a sibling temporary file.
pub fn save<T: Scalar>(path: &Path, model: &GanModel<T>, iteration: u64, rng: &RngState) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_bytes(model, iteration, rng))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    from_bytes(&fs::read(path)?)
}

/// File name used for the checkpoint of a given iteration.
pub fn file_name(iteration: u64) -> String {
    format!("ckpt-{iteration:08}.{EXTENSION}")
}

fn write_config(out: &mut Vec<u8>, config: &ModelConfig) {
    match *config {
        ModelConfig::Vanilla => out.push(0),
        ModelConfig::Categorical {
            head,
            image_size,
            pooling,
            lrelu,
        } => {
            out.push(1);
            let (tag, k, va, weighting) = match head {
                HeadVariant::Softmax { k } => (0u8, k as u32, 0u8, 0u8),
                HeadVariant::Au => (1, 0, 0, 0),
                HeadVariant::Va { loss } => (2, 0, va_tag(loss), 0),
                HeadVariant::Joint { va_loss, weighting } => (
                    3,
                    0,
                    va_tag(va_loss),
                    match weighting {
                        Weighting::Equal => 0,
                        Weighting::Ponderated => 1,
                    },
                ),
            };
            out.extend_from_slice(&[tag, va, weighting]);
            out.put(k.to_le_bytes());
            out.put((image_size as u16).to_le_bytes());
            out.push(match pooling {
                Pooling::GlobalAverage => 0,
                Pooling::Flatten => 1,
            });
            out.put(lrelu.linear.to_le_bytes());
            out.put(lrelu.abs.to_le_bytes());
        }
    }
}

fn va_tag(loss: VaLoss) -> u8 {
    match loss {
        VaLoss::Mse => 0,
        VaLoss::OneMinusCcc => 1,
    }
}

fn read_config(r: &mut Reader) -> Result<ModelConfig> {
    match r.u8()? {
        0 => Ok(ModelConfig::Vanilla),
        1 => {
            let (tag, va, weighting) = (r.u8()?, r.u8()?, r.u8()?);
            let k = r.u32()? as usize;
            let va_loss = match va {
                0 => VaLoss::Mse,
                1 => VaLoss::OneMinusCcc,
                t => return Err(r.error(format!("unknown VA loss tag {t}"))),
            };
            let head = match tag {
                0 => HeadVariant::Softmax { k },
                1 => HeadVariant::Au,
                2 => HeadVariant::Va { loss: va_loss },
                3 => HeadVariant::Joint {
                    va_loss,
                    weighting: match weighting {
                        0 => Weighting::Equal,
                        1 => Weighting::Ponderated,
                        t => return Err(r.error(format!("unknown weighting tag {t}"))),
                    },
                },
                t => return Err(r.error(format!("unknown head tag {t}"))),
            };
            let image_size = r.u16()? as usize;
            let pooling = match r.u8()? {
                0 => Pooling::GlobalAverage,
                1 => Pooling::Flatten,
                t => return Err(r.error(format!("unknown pooling tag {t}"))),
            };
            let lrelu = LeakyRelu {
                linear: r.f64()?,
                abs: r.f64()?,
            };
            Ok(ModelConfig::Categorical {
                head,
                image_size,
                pooling,
                lrelu,
            })
        }
        t => Err(r.error(format!("unknown model tag {t}"))),
    }
}

fn write_tensors<T: Scalar>(out: &mut Vec<u8>, tensors: Vec<(&str, &Tensor<T>)>) {
    out.put((tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.put((name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.put((e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.put(v.as_f64().to_le_bytes());
        }
    }
}

fn read_tensor<T: Scalar>(r: &mut Reader) -> Result<(String, Tensor<T>)> {
    let len = r.u16()? as usize;
    let name = String::from_utf8(r.take(len, "tensor name")?.to_vec()).map_err(|_| r.error("tensor name is not UTF-8"))?;
    let rank = r.u8()? as usize;
    let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let bytes = r.take(n * 8, "tensor values")?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    Ok((name, Tensor::new(shape, data).map_err(|e| r.error(e.to_string()))?))
}
