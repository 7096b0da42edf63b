//! Vanilla and categorical GAN assembly and their losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::Padding;
use crate::error::{Error, Result};
use crate::graph::{self, BatchStats, Graph, Mode, Var};
use crate::layers::{Activation, LayerSpec, LeakyRelu, Network, NetworkSpec};
use crate::losses::fake_label;
use crate::metrics::{self, MetricsReport, NUM_AUS};
use crate::tensor::{Scalar, Tensor};

pub const NOISE_DIM: usize = 100;
pub const DEFAULT_ALPHA: f64 = 0.9;
/// Probabilities fed to a logarithm are clamped to `[P_CLAMP, 1 - P_CLAMP]`.
pub const P_CLAMP: f64 = 1e-12;
pub const HUBER_DELTA: f64 = 1.0;
/// Steps during which the generator is also pulled towards real pixels.
pub const HUBER_STEPS: u64 = 1500;
pub const PONDERATED: [f64; 3] = [0.27, 0.40, 0.33];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VaLoss {
    Mse,
    OneMinusCcc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Weighting {
    Equal,
    /// VA 0.27, AU 0.40, real/fake 0.33.
    Ponderated,
}

impl Weighting {
    /// Weights of the (VA, AU, RF) terms.
    pub fn weights(self) -> [f64; 3] {
        match self {
            Weighting::Equal => [1.0 / 3.0; 3],
            Weighting::Ponderated => PONDERATED,
        }
    }
}

/// Discriminator output head. The last node is always the fake/real node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadVariant {
    /// `k` exclusive classes, softmax over `k + 1` nodes.
    Softmax { k: usize },
    /// Eight action units, independent sigmoids.
    Au,
    /// `[valence, arousal, rf]`.
    Va { loss: VaLoss },
    /// `[valence, arousal, 8 AUs, rf]`.
    Joint { va_loss: VaLoss, weighting: Weighting },
}

impl HeadVariant {
    pub fn width(self) -> usize {
        match self {
            HeadVariant::Softmax { k } => k + 1,
            HeadVariant::Au => NUM_AUS + 1,
            HeadVariant::Va { .. } => 3,
            HeadVariant::Joint { .. } => NUM_AUS + 3,
        }
    }

    pub fn has_au(self) -> bool {
        matches!(self, HeadVariant::Au | HeadVariant::Joint { .. })
    }

    pub fn has_va(self) -> bool {
        matches!(self, HeadVariant::Va { .. } | HeadVariant::Joint { .. })
    }

    fn va_loss(self) -> Option<VaLoss> {
        match self {
            HeadVariant::Va { loss } => Some(loss),
            HeadVariant::Joint { va_loss, .. } => Some(va_loss),
            _ => None,
        }
    }

    pub fn validate(self) -> Result<()> {
        if let HeadVariant::Softmax { k: 0 } = self {
            return Err(Error::invalid("softmax head needs at least one class"));
        }
        Ok(())
    }
}

/// What the discriminator flattens before its final affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    /// Global average pooling to 256 features.
    GlobalAverage,
    /// Full flatten of the last feature map.
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ModelConfig {
    Vanilla,
    Categorical {
        head: HeadVariant,
        image_size: usize,
        pooling: Pooling,
        lrelu: LeakyRelu,
    },
}

impl ModelConfig {
    pub fn categorical(head: HeadVariant, image_size: usize) -> Self {
        ModelConfig::Categorical {
            head,
            image_size,
            pooling: Pooling::GlobalAverage,
            lrelu: LeakyRelu::PAPER,
        }
    }

    pub fn head(&self) -> Option<HeadVariant> {
        match self {
            ModelConfig::Vanilla => None,
            ModelConfig::Categorical { head, .. } => Some(*head),
        }
    }

    /// Per-sample image shape the discriminator consumes.
    pub fn image_shape(&self) -> Vec<usize> {
        match self {
            ModelConfig::Vanilla => vec![784],
            ModelConfig::Categorical { image_size, .. } => vec![*image_size, *image_size, 3],
        }
    }

    pub fn build_specs(&self) -> Result<(NetworkSpec, NetworkSpec)> {
        match *self {
            ModelConfig::Vanilla => Ok(vanilla_specs()),
            ModelConfig::Categorical {
                head,
                image_size,
                pooling,
                lrelu,
            } => categorical_specs(head, image_size, pooling, lrelu),
        }
    }
}

fn vanilla_specs() -> (NetworkSpec, NetworkSpec) {
    let generator = NetworkSpec {
        name: "gen".into(),
        input: vec![NOISE_DIM],
        layers: vec![
            LayerSpec::Affine { inputs: NOISE_DIM, units: 128 },
            LayerSpec::Activation(Activation::Relu),
            LayerSpec::Affine { inputs: 128, units: 784 },
            LayerSpec::Activation(Activation::Sigmoid),
        ],
        lrelu: LeakyRelu::PAPER,
    };
    // Emits a logit; the sigmoid lives in the loss.
    let discriminator = NetworkSpec {
        name: "disc".into(),
        input: vec![784],
        layers: vec![
            LayerSpec::Affine { inputs: 784, units: 128 },
            LayerSpec::Activation(Activation::Relu),
            LayerSpec::Affine { inputs: 128, units: 1 },
        ],
        lrelu: LeakyRelu::PAPER,
    };
    (generator, discriminator)
}

fn categorical_specs(
    head: HeadVariant,
    image_size: usize,
    pooling: Pooling,
    lrelu: LeakyRelu,
) -> Result<(NetworkSpec, NetworkSpec)> {
    head.validate()?;
    let last_kernel = match image_size {
        32 => 6,
        28 => 2,
        other => return Err(Error::invalid(format!("image size must be 28 or 32, got {other}"))),
    };
    let s1 = [1, 1, 1, 1];
    let s2 = [1, 2, 2, 1];
    let deconv = |filter, stride| LayerSpec::Deconv {
        filter,
        stride,
        padding: Padding::Valid,
    };
    let lrelu_bn = |c| [LayerSpec::Activation(Activation::LRelu), LayerSpec::BatchNorm { channels: c }];

    let mut gl = vec![LayerSpec::Reshape(vec![1, 1, NOISE_DIM]), deconv([2, 2, NOISE_DIM, 384], s1)];
    gl.extend(lrelu_bn(384));
    gl.push(deconv([4, 4, 384, 128], s2));
    gl.extend(lrelu_bn(128));
    gl.push(deconv([4, 4, 128, 64], s2));
    gl.extend(lrelu_bn(64));
    gl.push(deconv([last_kernel, last_kernel, 64, 3], s2));
    gl.push(LayerSpec::Activation(Activation::Tanh));

    let mut dl = Vec::new();
    for (cin, cout) in [(3, 64), (64, 128), (128, 256)] {
        dl.push(LayerSpec::Conv {
            filter: [5, 5, cin, cout],
            stride: s2,
            padding: Padding::Same,
        });
        dl.extend(lrelu_bn(cout));
        dl.push(LayerSpec::Dropout { keep_prob: 0.5 });
    }
    let features = match pooling {
        Pooling::GlobalAverage => {
            dl.push(LayerSpec::GlobalAvgPool);
            256
        }
        Pooling::Flatten => {
            dl.push(LayerSpec::Flatten);
            let side = image_size.div_ceil(8);
            side * side * 256
        }
    };
    dl.push(LayerSpec::Affine {
        inputs: features,
        units: head.width(),
    });

    let generator = NetworkSpec {
        name: "gen".into(),
        input: vec![NOISE_DIM],
        layers: gl,
        lrelu,
    };
    let discriminator = NetworkSpec {
        name: "disc".into(),
        input: vec![image_size, image_size, 3],
        layers: dl,
        lrelu,
    };
    Ok((generator, discriminator))
}

/// Ground truth for one batch of real images. Only the fields the head uses
/// need to be filled.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelBatch {
    pub au: Vec<[bool; NUM_AUS]>,
    pub valence: Vec<f64>,
    pub arousal: Vec<f64>,
    pub class: Vec<usize>,
}

impl LabelBatch {
    pub fn au_flat(&self) -> Vec<bool> {
        self.au.iter().flatten().copied().collect()
    }

    fn check(&self, head: HeadVariant, batch: usize) -> Result<()> {
        let need = |name: &str, len: usize| {
            if len != batch {
                Err(Error::invalid(format!("{name} labels: expected {batch}, got {len}")))
            } else {
                Ok(())
            }
        };
        match head {
            HeadVariant::Softmax { k } => {
                need("class", self.class.len())?;
                if let Some(&c) = self.class.iter().find(|&&c| c >= k) {
                    return Err(Error::invalid(format!("class {c} out of range for k={k}")));
                }
            }
            HeadVariant::Au => need("au", self.au.len())?,
            HeadVariant::Va { .. } => {
                need("valence", self.valence.len())?;
                need("arousal", self.arousal.len())?;
            }
            HeadVariant::Joint { .. } => {
                need("au", self.au.len())?;
                need("valence", self.valence.len())?;
                need("arousal", self.arousal.len())?;
            }
        }
        Ok(())
    }
}

/// Real-image targets, `[B, width]`; the fake node target is 0.
pub fn real_targets<T: Scalar>(head: HeadVariant, labels: &LabelBatch, batch: usize) -> Result<Tensor<T>> {
    labels.check(head, batch)?;
    let w = head.width();
    let mut t = vec![0.0; batch * w];
    for (i, row) in t.chunks_mut(w).enumerate() {
        let flags = |row: &mut [f64]| {
            for (o, &f) in row.iter_mut().zip(&labels.au[i]) {
                *o = if f { 1.0 } else { 0.0 };
            }
        };
        match head {
            HeadVariant::Softmax { .. } => row[labels.class[i]] = 1.0,
            HeadVariant::Au => flags(&mut row[..NUM_AUS]),
            HeadVariant::Va { .. } => {
                row[0] = labels.valence[i];
                row[1] = labels.arousal[i];
            }
            HeadVariant::Joint { .. } => {
                row[0] = labels.valence[i];
                row[1] = labels.arousal[i];
                flags(&mut row[2..2 + NUM_AUS]);
            }
        }
    }
    Tensor::from_f64(vec![batch, w], &t)
}

/// Fake-image targets: `fake_label(width - 1, alpha)` on every row.
pub fn fake_targets<T: Scalar>(head: HeadVariant, batch: usize, alpha: f64) -> Result<Tensor<T>> {
    let row = fake_label(head.width() - 1, alpha)?;
    let t: Vec<f64> = (0..batch).flat_map(|_| row.iter().copied()).collect();
    Tensor::from_f64(vec![batch, head.width()], &t)
}

fn cols<T: Scalar>(t: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    let w = t.shape()[1];
    let data = t.data().chunks(w).flat_map(|r| r[start..end].iter().copied()).collect();
    Tensor::new(vec![t.shape()[0], end - start], data)
}

/// Named scalar pieces of a loss, for logging.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub components: Vec<(String, f64)>,
}

impl LossParts {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

fn sigmoid_ce_mean<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &Tensor<T>) -> Result<Var> {
    let ce = g.sigmoid_ce(logits, targets)?;
    g.mean(ce)
}

fn va_branch<T: Scalar>(g: &mut Graph<T>, loss: VaLoss, pred: Var, obs: &Tensor<T>) -> Result<Var> {
    let obs = g.input(obs.clone())?;
    match loss {
        VaLoss::Mse => {
            let d = g.sub(pred, obs)?;
            let sq = g.square(d)?;
            g.mean(sq)
        }
        VaLoss::OneMinusCcc => g.one_minus_ccc(pred, obs),
    }
}

/// Loss of one side (real or fake) given head logits and targets.
fn side_loss<T: Scalar>(
    g: &mut Graph<T>,
    head: HeadVariant,
    logits: Var,
    targets: &Tensor<T>,
    side: &str,
    parts: &mut Vec<(String, f64)>,
) -> Result<Var> {
    let w = head.width();
    let mut log = |g: &Graph<T>, name: &str, v: Var| parts.push((format!("{side}_{name}"), g.value(v).item().as_f64()));
    let out = match head {
        HeadVariant::Softmax { .. } => {
            let ce = g.softmax_ce(logits, targets)?;
            g.mean(ce)?
        }
        HeadVariant::Au => sigmoid_ce_mean(g, logits, targets)?,
        HeadVariant::Va { .. } | HeadVariant::Joint { .. } => {
            let loss = head.va_loss().expect("head has a VA branch");
            let pv = g.slice_cols(logits, 0, 1)?;
            let pa = g.slice_cols(logits, 1, 2)?;
            let v = va_branch(g, loss, pv, &cols(targets, 0, 1)?)?;
            let a = va_branch(g, loss, pa, &cols(targets, 1, 2)?)?;
            let va = g.mean_of(&[v, a])?;
            let rf_logit = g.slice_cols(logits, w - 1, w)?;
            let rf = sigmoid_ce_mean(g, rf_logit, &cols(targets, w - 1, w)?)?;
            log(g, "v", v);
            log(g, "a", a);
            log(g, "rf", rf);
            match head {
                HeadVariant::Joint { weighting, .. } => {
                    let au_logits = g.slice_cols(logits, 2, 2 + NUM_AUS)?;
                    let au = sigmoid_ce_mean(g, au_logits, &cols(targets, 2, 2 + NUM_AUS)?)?;
                    log(g, "au", au);
                    match weighting {
                        Weighting::Equal => g.mean_of(&[va, au, rf])?,
                        Weighting::Ponderated => {
                            let [wv, wa, wr] = PONDERATED.map(T::lit);
                            g.weighted_sum(&[(va, wv), (au, wa), (rf, wr)])?
                        }
                    }
                }
                _ => g.mean_of(&[va, rf])?,
            }
        }
    };
    log(g, "loss", out);
    Ok(out)
}

/// Discriminator loss from head logits: the mean of the real-side and
/// fake-side losses.
pub fn head_loss<T: Scalar>(
    g: &mut Graph<T>,
    head: HeadVariant,
    real_logits: Var,
    fake_logits: Var,
    labels: &LabelBatch,
    alpha: f64,
) -> Result<(Var, LossParts)> {
    let w = head.width();
    for v in [real_logits, fake_logits] {
        let s = g.shape(v);
        if s.len() != 2 || s[1] != w {
            return Err(Error::shape("head_loss", s, &[s.first().copied().unwrap_or(0), w]));
        }
    }
    let real_t = real_targets::<T>(head, labels, g.shape(real_logits)[0])?;
    let fake_t = fake_targets::<T>(head, g.shape(fake_logits)[0], alpha)?;
    let mut components = Vec::new();
    let real = side_loss(g, head, real_logits, &real_t, "real", &mut components)?;
    let fake = side_loss(g, head, fake_logits, &fake_t, "fake", &mut components)?;
    let d = g.mean_of(&[real, fake])?;
    let total = g.value(d).item().as_f64();
    Ok((d, LossParts { total, components }))
}

/// Probability of the fake node, `[B, 1]`.
pub fn fake_prob<T: Scalar>(g: &mut Graph<T>, head: Option<HeadVariant>, logits: Var) -> Result<Var> {
    let w = g.shape(logits)[1];
    match head {
        Some(HeadVariant::Softmax { .. }) => {
            let p = g.softmax(logits)?;
            g.slice_cols(p, w - 1, w)
        }
        _ => {
            let z = g.slice_cols(logits, w - 1, w)?;
            g.sigmoid(z)
        }
    }
}

/// Weight of the Huber term at a given step: 10 at step 0, falling linearly
/// to 0 at step 1500.
pub fn huber_coefficient(step: u64) -> f64 {
    if step < HUBER_STEPS {
        (HUBER_STEPS - step) as f64 / HUBER_STEPS as f64 * 10.0
    } else {
        0.0
    }
}

/// Generator loss: `mean ln p_fake + c(step) * mean Huber(real - fake)`.
/// With `non_saturating` the first term is `-mean ln(1 - p_fake)`.
pub fn generator_loss<T: Scalar>(
    g: &mut Graph<T>,
    p_fake: Var,
    real: Var,
    fake: Var,
    step: u64,
    non_saturating: bool,
) -> Result<(Var, LossParts)> {
    let (lo, hi) = (T::lit(P_CLAMP), T::lit(1.0 - P_CLAMP));
    let adv = if non_saturating {
        let q = g.affine_scalar(p_fake, -T::one(), T::one())?;
        let l = g.log_clamp(q, lo, hi)?;
        let m = g.mean(l)?;
        g.scale(m, -T::one())?
    } else {
        let l = g.log_clamp(p_fake, lo, hi)?;
        g.mean(l)?
    };
    let c = huber_coefficient(step);
    let mut components = vec![("adv".to_string(), g.value(adv).item().as_f64())];
    let total = if c > 0.0 {
        let h = g.huber(real, fake, T::lit(HUBER_DELTA))?;
        components.push(("huber".into(), g.value(h).item().as_f64()));
        g.weighted_sum(&[(adv, T::one()), (h, T::lit(c))])?
    } else {
        adv
    };
    Ok((
        total,
        LossParts {
            total: g.value(total).item().as_f64(),
            components,
        },
    ))
}

/// Vanilla GAN losses from discriminator logits: `(d_loss, g_loss)` with
/// `d_loss = CE(real, 1) + CE(fake, 0)` and `g_loss = CE(fake, 1)`.
pub fn vanilla_losses<T: Scalar>(g: &mut Graph<T>, real_logits: Var, fake_logits: Var) -> Result<(Var, Var)> {
    let ones = Tensor::full(g.shape(real_logits), T::one());
    let zeros = Tensor::zeros(g.shape(fake_logits));
    let ones_fake = Tensor::full(g.shape(fake_logits), T::one());
    let r = sigmoid_ce_mean(g, real_logits, &ones)?;
    let f = sigmoid_ce_mean(g, fake_logits, &zeros)?;
    let d = g.add(r, f)?;
    let gl = sigmoid_ce_mean(g, fake_logits, &ones_fake)?;
    Ok((d, gl))
}

/// Generator, discriminator and the configuration that built them.
#[derive(Debug, Clone)]
pub struct GanModel<T: Scalar = f64> {
    pub config: ModelConfig,
    pub generator: Network<T>,
    pub discriminator: Network<T>,
}

/// One recorded discriminator pass.
pub struct DiscPass<T> {
    pub logits: Var,
    pub stats: Vec<BatchStats<T>>,
}

impl<T: Scalar> GanModel<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let (gs, ds) = config.build_specs()?;
        let generator = Network::init(gs, rng)?;
        let discriminator = Network::init(ds, rng)?;
        Ok(GanModel {
            config,
            generator,
            discriminator,
        })
    }

    pub fn head(&self) -> Option<HeadVariant> {
        self.config.head()
    }

    /// Uniform noise in `[-1, 1]`, `[batch, 100]`.
    pub fn sample_noise<R: Rng + ?Sized>(batch: usize, rng: &mut R) -> Tensor<T> {
        Tensor::from_fn(&[batch, NOISE_DIM], |_| T::lit(rng.random_range(-1.0..=1.0)))
    }

    pub fn generate_var<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        noise: Var,
        mode: Mode,
        trainable: bool,
        rng: &mut R,
    ) -> Result<(Var, Vec<BatchStats<T>>)> {
        self.generator.forward(g, noise, mode, trainable, rng)
    }

    pub fn discriminate<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        images: Var,
        mode: Mode,
        trainable: bool,
        rng: &mut R,
    ) -> Result<DiscPass<T>> {
        let (logits, stats) = self.discriminator.forward(g, images, mode, trainable, rng)?;
        Ok(DiscPass { logits, stats })
    }

    /// Generator samples in inference mode.
    pub fn generate(&self, noise: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let z = g.input(noise.clone())?;
        let (x, _) = self.generator.forward(&mut g, z, Mode::Infer, false, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(g.value(x).clone())
    }

    /// Discriminator logits in inference mode, `[B, width]`.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(images.clone())?;
        let (z, _) = self.discriminator.forward(&mut g, x, Mode::Infer, false, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(g.value(z).clone())
    }

    pub fn num_params(&self) -> (usize, usize) {
        (self.generator.params.numel(), self.discriminator.params.numel())
    }
}

/// Builds the 784-128-784 / 784-128-1 multilayer perceptron GAN.
pub fn build_vanilla<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> Result<GanModel<T>> {
    GanModel::new(ModelConfig::Vanilla, rng)
}

/// Builds the convolutional categorical GAN for `image_size` 28 or 32.
pub fn build_categorical<T: Scalar, R: Rng + ?Sized>(
    head: HeadVariant,
    image_size: usize,
    rng: &mut R,
) -> Result<GanModel<T>> {
    GanModel::new(ModelConfig::categorical(head, image_size), rng)
}

/// Scores a batch of real images from raw discriminator logits
/// (row-major `[B, width]`).
pub fn report_from_logits(
    head: Option<HeadVariant>,
    logits: &[f64],
    labels: &LabelBatch,
    iteration: u64,
) -> Result<MetricsReport> {
    let w = head.map_or(1, HeadVariant::width);
    if logits.is_empty() || logits.len() % w != 0 {
        return Err(Error::invalid(format!("{} logits do not split into rows of {w}", logits.len())));
    }
    let b = logits.len() / w;
    let mut report = MetricsReport {
        iteration,
        ..Default::default()
    };
    let rows = logits.chunks(w);
    let fake_probs: Vec<f64> = match head {
        Some(HeadVariant::Softmax { k }) => {
            let probs: Vec<Vec<f64>> = rows
                .map(|r| {
                    let mut p = r.to_vec();
                    graph::softmax_in_place(&mut p);
                    p
                })
                .collect();
            if labels.class.len() == b {
                let class_scores: Vec<f64> = probs.iter().flat_map(|p| p[..k].iter().copied()).collect();
                report.class_accuracy = Some(metrics::top1_accuracy(&class_scores, k, &labels.class)?);
            }
            probs.iter().map(|p| p[k]).collect()
        }
        Some(_) => rows.map(|r| graph::sigmoid(r[w - 1])).collect(),
        // the vanilla discriminator scores realness
        None => rows.map(|r| 1.0 - graph::sigmoid(r[0])).collect(),
    };
    report.pct_real_as_real = Some(metrics::pct_real_as_real(&fake_probs, &vec![false; b])?);
    let Some(head) = head else { return Ok(report) };

    if head.has_au() && labels.au.len() == b {
        let off = if head.has_va() { 2 } else { 0 };
        let probs: Vec<f64> = logits
            .chunks(w)
            .flat_map(|r| r[off..off + NUM_AUS].iter().map(|&z| graph::sigmoid(z)))
            .collect();
        report.set_au(&probs, &labels.au_flat())?;
    }
    if head.has_va() && labels.valence.len() == b {
        let pv: Vec<f64> = logits.chunks(w).map(|r| r[0]).collect();
        let pa: Vec<f64> = logits.chunks(w).map(|r| r[1]).collect();
        report.set_va(&pv, &pa, &labels.valence, &labels.arousal)?;
    }
    Ok(report)
}
