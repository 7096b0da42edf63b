//! Declarative layer lists and the parameterised networks built from them.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conv::{conv_output_extent, conv_transpose_output_extent, stride_hw, Padding};
use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Mode, Var};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

/// Standard deviation of the Xavier normal initialisation, `1/sqrt(in_dim/2)`.
pub fn xavier_std(in_dim: usize) -> f64 {
    1.0 / (in_dim as f64 / 2.0).sqrt()
}

/// Normal samples with mean 0 and standard deviation [`xavier_std`].
pub fn xavier_init<T: Scalar, R: Rng + ?Sized>(shape: &[usize], in_dim: usize, rng: &mut R) -> Result<Tensor<T>> {
    if in_dim == 0 {
        return Err(Error::invalid("xavier_init needs in_dim >= 1"));
    }
    let normal = Normal::new(0.0, xavier_std(in_dim)).map_err(|e| Error::invalid(e.to_string()))?;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Leaky ReLU written as `linear * x + abs * |x|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeakyRelu {
    pub linear: f64,
    pub abs: f64,
}

impl LeakyRelu {
    /// `0.54x + 0.4|x|`: slope 0.94 for positive inputs, 0.14 for negative.
    pub const PAPER: LeakyRelu = LeakyRelu { linear: 0.54, abs: 0.4 };
    /// `0.6x + 0.4|x|`, the usual leaky ReLU with negative slope 0.2.
    pub const SLOPE_0_2: LeakyRelu = LeakyRelu { linear: 0.6, abs: 0.4 };

    pub fn apply(&self, x: f64) -> f64 {
        self.linear * x + self.abs * x.abs()
    }
}

impl Default for LeakyRelu {
    fn default() -> Self {
        LeakyRelu::PAPER
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LRelu,
    Sigmoid,
    Tanh,
    Softmax,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Affine,
    Conv,
    Deconv,
    BatchNorm,
    Dropout,
    Activation,
    GlobalAvgPool,
    Flatten,
    Reshape,
}

/// One row of a network table.
///
/// Filters are written `[kH, kW, inC, outC]` in data-flow order for both
/// convolutions and transposed convolutions; strides as `[1, sH, sW, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Affine { inputs: usize, units: usize },
    Conv { filter: [usize; 4], stride: [usize; 4], padding: Padding },
    Deconv { filter: [usize; 4], stride: [usize; 4], padding: Padding },
    BatchNorm { channels: usize },
    Dropout { keep_prob: f64 },
    Activation(Activation),
    GlobalAvgPool,
    Flatten,
    /// Reshape keeping the leading (batch) axis.
    Reshape(Vec<usize>),
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Affine { .. } => LayerKind::Affine,
            LayerSpec::Conv { .. } => LayerKind::Conv,
            LayerSpec::Deconv { .. } => LayerKind::Deconv,
            LayerSpec::BatchNorm { .. } => LayerKind::BatchNorm,
            LayerSpec::Dropout { .. } => LayerKind::Dropout,
            LayerSpec::Activation(_) => LayerKind::Activation,
            LayerSpec::GlobalAvgPool => LayerKind::GlobalAvgPool,
            LayerSpec::Flatten => LayerKind::Flatten,
            LayerSpec::Reshape(_) => LayerKind::Reshape,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Affine { inputs, units } if *inputs == 0 || *units == 0 => {
                Err(Error::invalid(format!("affine extents must be positive: {self:?}")))
            }
            LayerSpec::Conv { filter, stride, .. } | LayerSpec::Deconv { filter, stride, .. } => {
                if filter.contains(&0) {
                    return Err(Error::invalid(format!("filter extents must be positive: {filter:?}")));
                }
                stride_hw(*stride).map(|_| ())
            }
            LayerSpec::BatchNorm { channels: 0 } => Err(Error::invalid("batch norm needs channels")),
            LayerSpec::Dropout { keep_prob } if !(*keep_prob > 0.0 && *keep_prob <= 1.0) => {
                Err(Error::invalid(format!("keep_prob must be in (0,1], got {keep_prob}")))
            }
            _ => Ok(()),
        }
    }

    /// Output shape (batch axis included) for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |what: &str| Error::InvalidShape {
            shape: input.to_vec(),
            reason: format!("{what} for {self:?}"),
        };
        match self {
            LayerSpec::Affine { inputs, units } => {
                if input.len() != 2 || input[1] != *inputs {
                    return Err(mismatch("expected [B, inputs]"));
                }
                Ok(vec![input[0], *units])
            }
            LayerSpec::Conv { filter, stride, padding } => {
                let (sh, sw) = stride_hw(*stride)?;
                if input.len() != 4 || input[3] != filter[2] {
                    return Err(mismatch("expected NHWC with matching channels"));
                }
                Ok(vec![
                    input[0],
                    conv_output_extent(input[1], filter[0], sh, *padding)?,
                    conv_output_extent(input[2], filter[1], sw, *padding)?,
                    filter[3],
                ])
            }
            LayerSpec::Deconv { filter, stride, padding } => {
                let (sh, sw) = stride_hw(*stride)?;
                if input.len() != 4 || input[3] != filter[2] {
                    return Err(mismatch("expected NHWC with matching channels"));
                }
                Ok(vec![
                    input[0],
                    conv_transpose_output_extent(input[1], filter[0], sh, *padding)?,
                    conv_transpose_output_extent(input[2], filter[1], sw, *padding)?,
                    filter[3],
                ])
            }
            LayerSpec::BatchNorm { channels } => {
                if input.last() != Some(channels) {
                    return Err(mismatch("channel count differs"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Dropout { .. } | LayerSpec::Activation(_) => Ok(input.to_vec()),
            LayerSpec::GlobalAvgPool => {
                if input.len() != 4 {
                    return Err(mismatch("expected NHWC"));
                }
                Ok(vec![input[0], input[3]])
            }
            LayerSpec::Flatten => Ok(vec![input[0], input[1..].iter().product()]),
            LayerSpec::Reshape(rest) => {
                let n: usize = rest.iter().product();
                if n != input[1..].iter().product::<usize>() {
                    return Err(mismatch("element count differs"));
                }
                let mut s = vec![input[0]];
                s.extend_from_slice(rest);
                Ok(s)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Prefix of every parameter name, e.g. `"gen"`.
    pub name: String,
    /// Per-sample input shape (batch axis excluded).
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub lrelu: LeakyRelu,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        self.layers.iter().try_for_each(LayerSpec::validate)?;
        self.shape_chain(1).map(|_| ())
    }

    /// Shapes after every layer for a batch of `batch`, input first.
    pub fn shape_chain(&self, batch: usize) -> Result<Vec<Vec<usize>>> {
        let mut shape = vec![batch];
        shape.extend_from_slice(&self.input);
        let mut out = vec![shape.clone()];
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self, batch: usize) -> Result<Vec<usize>> {
        Ok(self.shape_chain(batch)?.pop().expect("chain starts with the input"))
    }
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T = f64> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// A network: its spec, trainable parameters and batch-norm running
/// statistics (stored as `*.running_mean` / `*.running_var` buffers).
#[derive(Debug, Clone)]
pub struct Network<T: Scalar = f64> {
    pub spec: NetworkSpec,
    pub params: ParamSet<T>,
    pub buffers: ParamSet<T>,
}

pub fn param_name(net: &str, layer: usize, field: &str) -> String {
    format!("{net}.{layer}.{field}")
}

impl<T: Scalar> Network<T> {
    /// Builds a network with Xavier-initialised weights, zero biases, unit
    /// batch-norm scales and zero shifts.
    pub fn init<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            let name = |f: &str| param_name(&spec.name, i, f);
            match layer {
                LayerSpec::Affine { inputs, units } => {
                    params.insert(name("w"), xavier_init(&[*inputs, *units], *inputs, rng)?);
                    params.insert(name("b"), Tensor::zeros(&[*units]));
                }
                LayerSpec::Conv { filter, .. } => {
                    let fan_in = filter[0] * filter[1] * filter[2];
                    params.insert(name("w"), xavier_init(filter, fan_in, rng)?);
                    params.insert(name("b"), Tensor::zeros(&[filter[3]]));
                }
                LayerSpec::Deconv { filter, .. } => {
                    // Stored in the adjoint layout [kH, kW, outC, inC].
                    let fan_in = filter[0] * filter[1] * filter[2];
                    let stored = [filter[0], filter[1], filter[3], filter[2]];
                    params.insert(name("w"), xavier_init(&stored, fan_in, rng)?);
                    params.insert(name("b"), Tensor::zeros(&[filter[3]]));
                }
                LayerSpec::BatchNorm { channels } => {
                    params.insert(name("gamma"), Tensor::full(&[*channels], T::one()));
                    params.insert(name("beta"), Tensor::zeros(&[*channels]));
                    buffers.insert(name("running_mean"), Tensor::zeros(&[*channels]));
                    buffers.insert(name("running_var"), Tensor::full(&[*channels], T::one()));
                }
                _ => {}
            }
        }
        Ok(Network { spec, params, buffers })
    }

    /// Records the forward pass on `g`. Parameters get gradients only when
    /// `trainable`. In training mode, batch norms use batch statistics
    /// (returned in layer order) and dropout draws from `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        input: Var,
        mode: Mode,
        trainable: bool,
        rng: &mut R,
    ) -> Result<(Var, Vec<BatchStats<T>>)> {
        let expected = &self.spec.input;
        if g.shape(input).get(1..) != Some(expected.as_slice()) {
            return Err(Error::InvalidShape {
                shape: g.shape(input).to_vec(),
                reason: format!("{} expects per-sample input {:?}", self.spec.name, expected),
            });
        }
        let mut x = input;
        let mut stats = Vec::new();
        let eps = T::lit(BN_EPSILON);
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let name = |f: &str| param_name(&self.spec.name, i, f);
            let p = |g: &mut Graph<T>, f: &str| -> Result<Var> {
                g.param(&name(f), self.params.require(&name(f))?, trainable)
            };
            x = match layer {
                LayerSpec::Affine { .. } => {
                    let (w, b) = (p(g, "w")?, p(g, "b")?);
                    g.affine(x, w, b)?
                }
                LayerSpec::Conv { stride, padding, .. } => {
                    let (w, b) = (p(g, "w")?, p(g, "b")?);
                    let y = g.conv2d(x, w, stride_hw(*stride)?, *padding)?;
                    g.add_bias(y, b)?
                }
                LayerSpec::Deconv { stride, padding, .. } => {
                    let (w, b) = (p(g, "w")?, p(g, "b")?);
                    let y = g.conv2d_transpose(x, w, stride_hw(*stride)?, *padding)?;
                    g.add_bias(y, b)?
                }
                LayerSpec::BatchNorm { .. } => {
                    let (gamma, beta) = (p(g, "gamma")?, p(g, "beta")?);
                    match mode {
                        Mode::Train => {
                            let (y, s) = g.batch_norm_train(x, gamma, beta, eps)?;
                            stats.push(s);
                            y
                        }
                        Mode::Infer => {
                            let mean = self.buffers.require(&name("running_mean"))?.data();
                            let var = self.buffers.require(&name("running_var"))?.data();
                            g.batch_norm_infer(x, gamma, beta, mean, var, eps)?
                        }
                    }
                }
                LayerSpec::Dropout { keep_prob } => g.dropout(x, *keep_prob, mode, rng)?,
                LayerSpec::Activation(a) => match a {
                    Activation::Relu => g.relu(x)?,
                    Activation::LRelu => {
                        let c = self.spec.lrelu;
                        g.leaky_relu(x, T::lit(c.linear), T::lit(c.abs))?
                    }
                    Activation::Sigmoid => g.sigmoid(x)?,
                    Activation::Tanh => g.tanh(x)?,
                    Activation::Softmax => g.softmax(x)?,
                    Activation::None => x,
                },
                LayerSpec::GlobalAvgPool => g.global_avg_pool(x)?,
                LayerSpec::Flatten => g.flatten(x)?,
                LayerSpec::Reshape(rest) => {
                    let mut s = vec![g.shape(x)[0]];
                    s.extend_from_slice(rest);
                    g.reshape(x, &s)?
                }
            };
        }
        Ok((x, stats))
    }

    /// Folds training-mode batch statistics into the running averages:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>], momentum: f64) -> Result<()> {
        let bn_layers: Vec<usize> = self
            .spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind() == LayerKind::BatchNorm)
            .map(|(i, _)| i)
            .collect();
        if bn_layers.len() != stats.len() {
            return Err(Error::invalid(format!(
                "{} batch-norm layers but {} statistic sets",
                bn_layers.len(),
                stats.len()
            )));
        }
        let m = T::lit(momentum);
        let keep = T::one() - m;
        for (&i, s) in bn_layers.iter().zip(stats) {
            for (field, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let buf = self
                    .buffers
                    .get_mut(&param_name(&self.spec.name, i, field))
                    .ok_or_else(|| Error::invalid("missing running statistics"))?;
                for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = m * *r + keep * b;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xavier_std_values() {
        assert!((xavier_std(128) - 0.125).abs() < 1e-15);
        assert!((xavier_std(2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn xavier_rejects_zero_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(xavier_init::<f64, _>(&[2], 0, &mut rng).is_err());
    }

    #[test]
    fn layer_validation() {
        assert!(LayerSpec::Dropout { keep_prob: 0.0 }.validate().is_err());
        assert!(LayerSpec::Dropout { keep_prob: 1.0 }.validate().is_ok());
        let bad = LayerSpec::Conv {
            filter: [5, 0, 3, 64],
            stride: [1, 2, 2, 1],
            padding: Padding::Same,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let spec = NetworkSpec {
            name: "n".into(),
            input: vec![2],
            layers: vec![LayerSpec::BatchNorm { channels: 2 }],
            lrelu: LeakyRelu::PAPER,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Network::<f64>::init(spec, &mut rng).unwrap();
        let stats = BatchStats {
            mean: vec![1.0, 2.0],
            var: vec![3.0, 5.0],
        };
        net.update_running_stats(&[stats], 0.99).unwrap();
        let mean = net.buffers.get("n.0.running_mean").unwrap().data();
        let var = net.buffers.get("n.0.running_var").unwrap().data();
        assert!((mean[0] - 0.01).abs() < 1e-15 && (mean[1] - 0.02).abs() < 1e-15);
        assert!((var[0] - (0.99 + 0.03)).abs() < 1e-15);
    }
}
