//! Training loops, checkpoint schedule and metric logs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, RngState};
use crate::dataset::{Cycler, Samples};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Mode};
use crate::grid;
use crate::layers::BN_MOMENTUM;
use crate::metrics::MetricsReport;
use crate::models::{self, GanModel, HeadVariant, ModelConfig, DEFAULT_ALPHA};
use crate::optim::{clip_gradients, Optimizer};
use crate::tensor::{Scalar, Tensor};

pub const CLIP_NORM: f64 = 20.0;
pub const METRICS_FILE: &str = "metrics.tsv";
pub const LOSSES_FILE: &str = "losses.tsv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SAMPLES_DIR: &str = "samples";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateTarget {
    Discriminator,
    Generator,
    /// Vanilla GAN: both networks step every iteration.
    Both,
}

/// The discriminator trains on iterations that are multiples of
/// `update_rate + 1`; the generator on every other iteration.
pub fn update_target(iteration: u64, update_rate: u64) -> UpdateTarget {
    if iteration % (update_rate + 1) == 0 {
        UpdateTarget::Discriminator
    } else {
        UpdateTarget::Generator
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Generator learning rate; the discriminator uses half of it.
    pub learning_rate: f64,
    pub update_rate: u64,
    pub alpha: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub non_saturating: bool,
    /// Metric rows are written for iterations that are multiples of this.
    pub log_every: u64,
}

impl TrainConfig {
    pub fn categorical(head: HeadVariant, image_size: usize) -> Self {
        TrainConfig {
            model: ModelConfig::categorical(head, image_size),
            learning_rate: 1e-4,
            update_rate: 5,
            alpha: DEFAULT_ALPHA,
            batch_size: 64,
            iterations: 20_000,
            checkpoint_every: 1000,
            seed: 0,
            clip_norm: Some(CLIP_NORM),
            non_saturating: false,
            log_every: 1,
        }
    }

    /// Plain Adam at 0.001 on both networks, batch 128, no clipping.
    pub fn vanilla() -> Self {
        TrainConfig {
            model: ModelConfig::Vanilla,
            learning_rate: 1e-3,
            update_rate: 0,
            alpha: 1.0,
            batch_size: 128,
            iterations: 20_000,
            checkpoint_every: 1000,
            seed: 0,
            clip_norm: None,
            non_saturating: false,
            log_every: 1,
        }
    }

    pub fn discriminator_lr(&self) -> f64 {
        self.learning_rate / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must be in [0,1], got {}", self.alpha));
        }
        if self.batch_size < 2 {
            return bad(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if self.iterations == 0 || self.checkpoint_every == 0 || self.log_every == 0 {
            return bad("iterations, checkpoint_every and log_every must be positive".into());
        }
        if self.model != ModelConfig::Vanilla && self.update_rate == 0 {
            return bad("update rate must be at least 1".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("clip norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub path: PathBuf,
    pub iteration: u64,
    pub train: Option<MetricsReport>,
    pub test: Option<MetricsReport>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub target: UpdateTarget,
    pub d_loss: f64,
    pub g_loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub model: GanModel<T>,
    pub records: Vec<CheckpointRecord>,
    pub losses: Vec<LossRecord>,
}

/// What a progress callback sees after each iteration.
pub struct IterationLog<'a> {
    pub loss: &'a LossRecord,
    pub train: Option<&'a MetricsReport>,
    pub test: Option<&'a MetricsReport>,
}

struct Logs {
    metrics: BufWriter<File>,
    losses: BufWriter<File>,
    checkpoints: PathBuf,
    samples: PathBuf,
}

impl Logs {
    fn create(out: &Path, config: &TrainConfig) -> Result<Self> {
        let checkpoints = out.join(CHECKPOINT_DIR);
        let samples = out.join(SAMPLES_DIR);
        fs::create_dir_all(&checkpoints)?;
        fs::create_dir_all(&samples)?;
        let echo = format!("# config: {}", serde_json::to_string(config)?);
        let mut metrics = BufWriter::new(File::create(out.join(METRICS_FILE))?);
        writeln!(metrics, "{echo}")?;
        writeln!(metrics, "{}", MetricsReport::tsv_header())?;
        let mut losses = BufWriter::new(File::create(out.join(LOSSES_FILE))?);
        writeln!(losses, "{echo}")?;
        writeln!(losses, "iteration\ttarget\td_loss\tg_loss\tgrad_norm")?;
        Ok(Logs {
            metrics,
            losses,
            checkpoints,
            samples,
        })
    }
}

/// Trains a GAN on `train`, scoring one training batch and one `test` batch
/// per logged iteration. Writes `metrics.tsv`, `losses.tsv`, `checkpoints/`
/// and `samples/` under `out`.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    train: &Samples,
    test: &Samples,
    out: &Path,
    mut progress: impl FnMut(&IterationLog),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("training and test sets must be non-empty"));
    }
    let image_shape = config.model.image_shape();
    for s in [train, test] {
        if s.shape != image_shape {
            return Err(Error::InvalidShape {
                shape: s.shape.clone(),
                reason: format!("model expects images {image_shape:?}"),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed);
    eval_rng.set_stream(1);
    let mut model = GanModel::<T>::new(config.model, &mut rng)?;
    let head = model.head();
    let vanilla = head.is_none();

    let (mut opt_g, mut opt_d) = if vanilla {
        let adam = || Optimizer::adam(config.learning_rate, 0.9, 0.999, 1e-8);
        (adam(), adam())
    } else {
        (
            Optimizer::gan_adam(config.learning_rate),
            Optimizer::gan_adam(config.discriminator_lr()),
        )
    };

    let mut logs = Logs::create(out, config)?;
    let grid_noise = GanModel::<T>::sample_noise(grid::GRID_CELLS, &mut eval_rng);
    let mut batches = Cycler::new(train.len());
    let mut train_eval = Cycler::new(train.len());
    let mut test_eval = Cycler::new(test.len());
    let mut records = Vec::new();
    let mut losses = Vec::with_capacity(config.iterations as usize);
    let mut last_checkpoint: Option<PathBuf> = None;
    let diverged = |iteration, last: &Option<PathBuf>| Error::Diverged {
        iteration,
        last_checkpoint: last.clone(),
    };
    let (mut last_train, mut last_test) = (None, None);

    for it in 0..config.iterations {
        let target = if vanilla {
            UpdateTarget::Both
        } else {
            update_target(it, config.update_rate)
        };
        let idx = batches.next_batch(config.batch_size, &mut rng);
        let (real_x, labels) = train.batch::<T>(&idx)?;
        let noise = GanModel::<T>::sample_noise(config.batch_size, &mut rng);

        let step = (|| -> Result<LossRecord> {
            let train_g = target != UpdateTarget::Discriminator;
            let train_d = target != UpdateTarget::Generator;
            let mut g = Graph::new();
            let z = g.input(noise)?;
            let (fake, g_stats) = model.generator.forward(&mut g, z, Mode::Train, train_g, &mut rng)?;
            let real = g.input(real_x)?;
            let dr = model.discriminate(&mut g, real, Mode::Train, train_d, &mut rng)?;
            let df = model.discriminate(&mut g, fake, Mode::Train, train_d, &mut rng)?;

            let (d_loss, g_loss) = match head {
                None => models::vanilla_losses(&mut g, dr.logits, df.logits)?,
                Some(h) => {
                    let (d, _) = models::head_loss(&mut g, h, dr.logits, df.logits, &labels, config.alpha)?;
                    let p = models::fake_prob(&mut g, head, df.logits)?;
                    let (gl, _) = models::generator_loss(&mut g, p, real, fake, it, config.non_saturating)?;
                    (d, gl)
                }
            };
            let mut norm = 0.0;
            if train_d {
                let mut grads = g.backward(d_loss)?;
                grads.retain(|n| n.starts_with("disc."));
                norm = clip(&mut grads, config.clip_norm)?;
                opt_d.step(&mut model.discriminator.params, &grads)?;
                model.discriminator.update_running_stats(&dr.stats, BN_MOMENTUM)?;
            }
            if train_g {
                let mut grads = g.backward(g_loss)?;
                grads.retain(|n| n.starts_with("gen."));
                norm = norm.max(clip(&mut grads, config.clip_norm)?);
                opt_g.step(&mut model.generator.params, &grads)?;
                model.generator.update_running_stats(&g_stats, BN_MOMENTUM)?;
            }
            Ok(LossRecord {
                iteration: it,
                target,
                d_loss: g.value(d_loss).item().as_f64(),
                g_loss: g.value(g_loss).item().as_f64(),
                grad_norm: norm,
            })
        })();
        let record = match step {
            Ok(r) if r.d_loss.is_finite() && r.g_loss.is_finite() => r,
            Ok(_) | Err(Error::NonFinite { .. }) => return Err(diverged(it, &last_checkpoint)),
            Err(e) => return Err(e),
        };
        if !params_finite(&model) {
            return Err(diverged(it, &last_checkpoint));
        }
        writeln!(
            logs.losses,
            "{it}\t{:?}\t{}\t{}\t{}",
            record.target, record.d_loss, record.g_loss, record.grad_norm
        )?;

        let logged = it % config.log_every == 0;
        if logged {
            let tr = evaluate_batch(&model, train, &mut train_eval, config.batch_size, &mut eval_rng, it)?;
            let te = evaluate_batch(&model, test, &mut test_eval, config.batch_size, &mut eval_rng, it)?;
            writeln!(logs.metrics, "{}", tr.tsv_row("train"))?;
            writeln!(logs.metrics, "{}", te.tsv_row("test"))?;
            last_train = Some(tr);
            last_test = Some(te);
        }
        progress(&IterationLog {
            loss: &record,
            train: if logged { last_train.as_ref() } else { None },
            test: if logged { last_test.as_ref() } else { None },
        });
        debug!("iteration {it}: d_loss {} g_loss {}", record.d_loss, record.g_loss);
        losses.push(record);

        let done = it + 1;
        if done % config.checkpoint_every == 0 || done == config.iterations {
            let path = logs.checkpoints.join(checkpoint::file_name(done));
            checkpoint::save(&path, &model, done, &RngState::capture(&rng))?;
            let samples = model.generate(&grid_noise)?;
            grid::save_grid(
                &logs.samples.join(format!("samples-{done:08}.png")),
                &samples,
                &config.model.image_shape(),
                pixel_range(&config.model),
            )?;
            logs.metrics.flush()?;
            logs.losses.flush()?;
            info!("checkpoint {}", path.display());
            records.push(CheckpointRecord {
                path: path.clone(),
                iteration: done,
                train: last_train.clone(),
                test: last_test.clone(),
            });
            last_checkpoint = Some(path);
        }
    }
    logs.metrics.flush()?;
    logs.losses.flush()?;
    Ok(TrainOutcome {
        model,
        records,
        losses,
    })
}

/// Pixel range the generator of a model produces.
pub fn pixel_range(config: &ModelConfig) -> crate::dataset::PixelRange {
    match config {
        ModelConfig::Vanilla => crate::dataset::PixelRange::Unit,
        ModelConfig::Categorical { .. } => crate::dataset::PixelRange::Signed,
    }
}

fn clip<T: Scalar>(grads: &mut Gradients<T>, max_norm: Option<f64>) -> Result<f64> {
    match max_norm {
        Some(m) => clip_gradients(grads, m),
        None => Ok(grads.global_norm().as_f64()),
    }
}

fn params_finite<T: Scalar>(model: &GanModel<T>) -> bool {
    [&model.generator.params, &model.discriminator.params]
        .iter()
        .all(|set| set.iter().all(|(_, t)| t.is_finite()))
}

fn evaluate_batch<T: Scalar>(
    model: &GanModel<T>,
    data: &Samples,
    cycler: &mut Cycler,
    batch: usize,
    rng: &mut ChaCha8Rng,
    iteration: u64,
) -> Result<MetricsReport> {
    let idx = cycler.next_batch(batch.min(data.len()), rng);
    let (x, labels) = data.batch::<T>(&idx)?;
    let logits = model.logits(&x)?;
    models::report_from_logits(model.head(), &logits.to_f64_vec(), &labels, iteration)
}

/// Scores a model on a whole set in inference mode, `chunk` images at a time.
pub fn evaluate_full<T: Scalar>(model: &GanModel<T>, data: &Samples, chunk: usize, iteration: u64) -> Result<MetricsReport> {
    let mut logits = Vec::new();
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(chunk.max(1)) {
        let (x, _) = data.batch::<T>(idx)?;
        logits.extend(model.logits(&x)?.to_f64_vec());
    }
    models::report_from_logits(model.head(), &logits, &data.labels, iteration)
}

/// Mean generated pixel value over `n` samples in inference mode, on the
/// generator's own output scale.
pub fn mean_generated_pixel<T: Scalar>(model: &GanModel<T>, n: usize, seed: u64) -> Result<f64> {
    let noise: Tensor<T> = GanModel::<T>::sample_noise(n, &mut ChaCha8Rng::seed_from_u64(seed));
    let x = model.generate(&noise)?;
    let v = x.to_f64_vec();
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}
