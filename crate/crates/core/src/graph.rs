//! Reverse-mode automatic differentiation on a recorded tape.
//!
//! A [`Graph`] records every operation in execution order, so node inputs
//! always precede the node. [`Graph::backward`] walks the tape in reverse and
//! returns the gradient of a scalar node with respect to every trainable
//! parameter leaf, summed over all uses of the same parameter name.

use std::collections::BTreeMap;

use rand::Rng;

use crate::conv::{self, ConvGeom, Padding};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-channel statistics of a training-mode batch norm, for running averages.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Input,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `scale * x + shift`
    Affine { x: Var, scale: T },
    AddBias { x: Var, bias: Var },
    MatMul(Var, Var),
    Square(Var),
    Relu(Var),
    LeakyRelu { x: Var, linear: T, abs: T },
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Conv2d { x: Var, f: Var, geom: ConvGeom, col: Vec<T> },
    ConvTranspose { x: Var, f: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Dropout { x: Var, mask: Vec<T> },
    GlobalAvgPool(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize, end: usize },
    Sum(Var),
    Mean(Var),
    SigmoidCe { logits: Var, targets: Vec<T> },
    SoftmaxCe { logits: Var, targets: Vec<T> },
    OneMinusCcc(Var, Var),
    Huber { a: Var, b: Var, delta: T },
    LogClamp { x: Var, lo: T, hi: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T = f64> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Gradients { map: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.map.insert(name.into(), grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    /// Keeps only the gradients whose parameter name satisfies `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.map.retain(|k, _| keep(k));
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Global L2 norm over every gradient tensor.
    pub fn global_norm(&self) -> T {
        self.map.values().map(|g| g.l2_norm_sq()).sum::<T>().sqrt()
    }
}

pub struct Graph<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("input", value, Op::Input, false)
    }

    /// Named parameter leaf. Only `trainable` parameters get gradients.
    pub fn param(&mut self, name: &str, value: &Tensor<T>, trainable: bool) -> Result<Var> {
        self.push("param", value.clone(), Op::Param(name.to_string()), trainable)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push("add", v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", v, Op::Mul(a, b), rg)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine_scalar(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let v = self.value(x).map(|e| scale * e + shift);
        let rg = self.rg(x);
        self.push("affine_scalar", v, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Result<Var> {
        self.affine_scalar(x, scale, T::zero())
    }

    /// Arithmetic mean of several same-shape nodes.
    pub fn mean_of(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars.split_first().ok_or_else(|| Error::invalid("mean of zero terms"))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        self.scale(acc, T::one() / T::lit(vars.len() as f64))
    }

    /// Weighted sum of several same-shape nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let (&(first, w0), rest) = terms.split_first().ok_or_else(|| Error::invalid("empty weighted sum"))?;
        let mut acc = self.scale(first, w0)?;
        for &(v, w) in rest {
            let t = self.scale(v, w)?;
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&1);
        if self.shape(bias) != [c] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push("add_bias", v, Op::AddBias { x, bias }, rg)
    }

    /// `[B,I] x [I,O] -> [B,O]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        let v = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", v, Op::MatMul(a, b), rg)
    }

    /// `x W + b` for `x: [B,I]`, `W: [I,O]`, `b: [O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let z = self.matmul(x, w)?;
        self.add_bias(z, b)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| e * e);
        let rg = self.rg(x);
        self.push("square", v, Op::Square(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| e.max(T::zero()));
        let rg = self.rg(x);
        self.push("relu", v, Op::Relu(x), rg)
    }

    /// `linear * x + abs * |x|`.
    pub fn leaky_relu(&mut self, x: Var, linear: T, abs: T) -> Result<Var> {
        let v = self.value(x).map(|e| linear * e + abs * e.abs());
        let rg = self.rg(x);
        self.push("leaky_relu", v, Op::LeakyRelu { x, linear, abs }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push("sigmoid", v, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| e.tanh());
        let rg = self.rg(x);
        self.push("tanh", v, Op::Tanh(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let c = *self.shape(x).last().ok_or_else(|| Error::invalid("softmax of a scalar"))?;
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push("softmax", v, Op::Softmax(x), rg)
    }

    /// NHWC convolution with filter `[kH,kW,inC,outC]`.
    pub fn conv2d(&mut self, x: Var, f: Var, stride: (usize, usize), padding: Padding) -> Result<Var> {
        let geom = ConvGeom::forward(self.shape(x), self.shape(f), stride, padding)?;
        let (out, col) = conv::conv2d(&geom, self.value(x).data(), self.value(f).data());
        let v = Tensor::new(geom.output_shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(f);
        // The im2col matrix is only needed for the filter gradient.
        let col = if self.rg(f) { col } else { Vec::new() };
        self.push("conv2d", v, Op::Conv2d { x, f, geom, col }, rg)
    }

    /// Transposed NHWC convolution; `f` is `[kH,kW,outC,inC]`, the filter of
    /// the convolution this operator is the adjoint of.
    pub fn conv2d_transpose(&mut self, x: Var, f: Var, stride: (usize, usize), padding: Padding) -> Result<Var> {
        let geom = ConvGeom::transpose(self.shape(x), self.shape(f), stride, padding)?;
        let out = conv::conv2d_transpose(&geom, self.value(x).data(), self.value(f).data());
        let v = Tensor::new(geom.input_shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(f);
        self.push("conv2d_transpose", v, Op::ConvTranspose { x, f, geom }, rg)
    }

    /// Training-mode batch norm over every axis but the last, using batch
    /// statistics. Returns the output and the batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (m, c) = self.bn_dims(x, gamma, beta)?;
        if self.shape(x)[0] < 2 {
            return Err(Error::invalid(format!(
                "batch norm in training mode needs a batch of at least 2, got {:?}",
                self.shape(x)
            )));
        }
        let xs = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for row in xs.chunks(c) {
            for (mu, &e) in mean.iter_mut().zip(row) {
                *mu += e;
            }
        }
        let inv_m = T::one() / T::lit(m as f64);
        mean.iter_mut().for_each(|mu| *mu *= inv_m);
        for row in xs.chunks(c) {
            for ((s, &e), &mu) in var.iter_mut().zip(row).zip(&mean) {
                *s += (e - mu) * (e - mu);
            }
        }
        var.iter_mut().for_each(|s| *s *= inv_m);
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std, c);
        let (v, xhat) = out;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let node = self.push(
            "batch_norm",
            v,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: true },
            rg,
        )?;
        Ok((node, BatchStats { mean, var }))
    }

    /// Inference-mode batch norm with fixed (running) statistics.
    pub fn batch_norm_infer(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let (_, c) = self.bn_dims(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm (running stats)", &[mean.len(), var.len()], &[c]));
        }
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        let (v, xhat) = self.bn_apply(x, gamma, beta, mean, &inv_std, c);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            "batch_norm",
            v,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: false },
            rg,
        )
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let c = *self.shape(x).last().ok_or_else(|| Error::invalid("batch norm of a scalar"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", self.shape(x), self.shape(gamma)));
        }
        Ok((self.value(x).len() / c, c))
    }

    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T], c: usize) -> (Tensor<T>, Vec<T>) {
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = self.value(x).data().to_vec();
        let mut out = vec![T::zero(); xhat.len()];
        for (xr, or) in xhat.chunks_mut(c).zip(out.chunks_mut(c)) {
            for j in 0..c {
                xr[j] = (xr[j] - mean[j]) * inv_std[j];
                or[j] = g[j] * xr[j] + b[j];
            }
        }
        (Tensor::new(self.shape(x).to_vec(), out).expect("same shape"), xhat)
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `1 - keep_prob` and survivors are scaled by `1/keep_prob`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, keep_prob: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::invalid(format!("keep_prob must be in (0,1], got {keep_prob}")));
        }
        if mode == Mode::Infer || keep_prob == 1.0 {
            return Ok(x);
        }
        let scale = T::lit(1.0 / keep_prob);
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < keep_prob { scale } else { T::zero() })
            .collect();
        let mut v = self.value(x).clone();
        v.data_mut().iter_mut().zip(&mask).for_each(|(o, &m)| *o *= m);
        let rg = self.rg(x);
        self.push("dropout", v, Op::Dropout { x, mask }, rg)
    }

    /// `[B,H,W,C] -> [B,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "global average pooling expects NHWC".into(),
            });
        }
        let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
        let inv = T::one() / T::lit(hw as f64);
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); b * c];
        for bi in 0..b {
            for p in 0..hw {
                let src = &xs[(bi * hw + p) * c..(bi * hw + p + 1) * c];
                for (o, &e) in out[bi * c..(bi + 1) * c].iter_mut().zip(src) {
                    *o += e;
                }
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let v = Tensor::new(vec![b, c], out)?;
        let rg = self.rg(x);
        self.push("global_avg_pool", v, Op::GlobalAvgPool(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push("reshape", v, Op::Reshape(x), rg)
    }

    /// Keeps the leading axis and flattens the rest.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let b = s.first().copied().unwrap_or(1);
        let rest = s.iter().skip(1).product();
        self.reshape(x, &[b, rest])
    }

    /// Columns `start..end` of a `[B,N]` node.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(Error::invalid(format!("slice_cols {start}..{end} of {s:?}")));
        }
        let n = s[1];
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let v = Tensor::new(vec![s[0], end - start], data)?;
        let rg = self.rg(x);
        self.push("slice_cols", v, Op::SliceCols { x, start, end }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push("sum", v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let v = Tensor::scalar(self.value(x).sum() / T::lit(n as f64));
        let rg = self.rg(x);
        self.push("mean", v, Op::Mean(x), rg)
    }

    /// Elementwise sigmoid cross entropy against constant targets, in the
    /// stable form `max(z,0) - z*t + log(1 + exp(-|z|))`.
    pub fn sigmoid_ce(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::shape("sigmoid_ce", self.shape(logits), targets.shape()));
        }
        let data = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| sigmoid_ce(z, t))
            .collect();
        let v = Tensor::new(targets.shape().to_vec(), data)?;
        let rg = self.rg(logits);
        self.push(
            "sigmoid_ce",
            v,
            Op::SigmoidCe { logits, targets: targets.data().to_vec() },
            rg,
        )
    }

    /// Row-wise softmax cross entropy `-sum_k t_k log softmax(z)_k` of a
    /// `[B,K]` node against constant target distributions; output `[B]`.
    pub fn softmax_ce(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s != targets.shape() {
            return Err(Error::shape("softmax_ce", &s, targets.shape()));
        }
        let k = s[1];
        let data = self
            .value(logits)
            .data()
            .chunks(k)
            .zip(targets.data().chunks(k))
            .map(|(z, t)| softmax_ce_row(z, t))
            .collect();
        let v = Tensor::new(vec![s[0]], data)?;
        let rg = self.rg(logits);
        self.push(
            "softmax_ce",
            v,
            Op::SoftmaxCe { logits, targets: targets.data().to_vec() },
            rg,
        )
    }

    /// `1 - CCC(pred, obs)` over all elements, with population moments.
    pub fn one_minus_ccc(&mut self, pred: Var, obs: Var) -> Result<Var> {
        self.same_shape("one_minus_ccc", pred, obs)?;
        let n = self.value(pred).len();
        if n < 2 {
            return Err(Error::invalid("1-CCC needs at least 2 samples"));
        }
        let m = ccc_moments(self.value(pred).data(), self.value(obs).data());
        let v = Tensor::scalar(T::one() - m.ccc());
        let rg = self.rg(pred) || self.rg(obs);
        self.push("one_minus_ccc", v, Op::OneMinusCcc(pred, obs), rg)
    }

    /// Mean Huber loss of the residuals `a - b`.
    pub fn huber(&mut self, a: Var, b: Var, delta: T) -> Result<Var> {
        self.same_shape("huber", a, b)?;
        let n = self.value(a).len();
        let total: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| huber(x - y, delta))
            .sum();
        let v = Tensor::scalar(total / T::lit(n as f64));
        let rg = self.rg(a) || self.rg(b);
        self.push("huber", v, Op::Huber { a, b, delta }, rg)
    }

    /// `ln(clamp(x, lo, hi))`.
    pub fn log_clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let v = self.value(x).map(|e| e.max(lo).min(hi).ln());
        let rg = self.rg(x);
        self.push("log_clamp", v, Op::LogClamp { x, lo, hi }, rg)
    }

    /// Gradients of the scalar `loss` w.r.t. every trainable parameter it
    /// depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(name) => {
                    let t = Tensor::new(node.value.shape().to_vec(), gy)?;
                    match out.map.get_mut(name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, &b)| *a += b),
                        None => {
                            out.map.insert(name.clone(), t);
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, || gy.clone());
                    self.acc(&mut grads, *b, || gy);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, || gy.clone());
                    self.acc(&mut grads, *b, || gy.iter().map(|&g| -g).collect());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    self.acc(&mut grads, *a, || gy.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                    self.acc(&mut grads, *b, || gy.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
                Op::Affine { x, scale } => {
                    self.acc(&mut grads, *x, || gy.iter().map(|&g| g * *scale).collect());
                }
                Op::AddBias { x, bias } => {
                    let c = self.value(*bias).len();
                    self.acc(&mut grads, *bias, || {
                        let mut db = vec![T::zero(); c];
                        for row in gy.chunks(c) {
                            db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                        }
                        db
                    });
                    self.acc(&mut grads, *x, || gy);
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    self.acc(&mut grads, *a, || {
                        let mut da = vec![T::zero(); m * k];
                        T::gemm(m, n, k, &gy, false, self.value(*b).data(), true, T::zero(), &mut da);
                        da
                    });
                    self.acc(&mut grads, *b, || {
                        let mut db = vec![T::zero(); k * n];
                        T::gemm(k, m, n, self.value(*a).data(), true, &gy, false, T::zero(), &mut db);
                        db
                    });
                }
                Op::Square(x) => {
                    let vx = self.value(*x).data();
                    let two = T::lit(2.0);
                    self.acc(&mut grads, *x, || gy.iter().zip(vx).map(|(&g, &e)| two * e * g).collect());
                }
                Op::Relu(x) => {
                    let vx = self.value(*x).data();
                    self.acc(&mut grads, *x, || {
                        gy.iter()
                            .zip(vx)
                            .map(|(&g, &e)| if e > T::zero() { g } else { T::zero() })
                            .collect()
                    });
                }
                Op::LeakyRelu { x, linear, abs } => {
                    let vx = self.value(*x).data();
                    let (pos, neg) = (*linear + *abs, *linear - *abs);
                    self.acc(&mut grads, *x, || {
                        gy.iter()
                            .zip(vx)
                            .map(|(&g, &e)| if e > T::zero() { g * pos } else { g * neg })
                            .collect()
                    });
                }
                Op::Sigmoid(x) => {
                    let vy = node.value.data();
                    self.acc(&mut grads, *x, || {
                        gy.iter().zip(vy).map(|(&g, &s)| g * s * (T::one() - s)).collect()
                    });
                }
                Op::Tanh(x) => {
                    let vy = node.value.data();
                    self.acc(&mut grads, *x, || gy.iter().zip(vy).map(|(&g, &t)| g * (T::one() - t * t)).collect());
                }
                Op::Softmax(x) => {
                    let c = *node.value.shape().last().unwrap();
                    let vy = node.value.data();
                    self.acc(&mut grads, *x, || {
                        let mut dx = vec![T::zero(); gy.len()];
                        for ((d, g), s) in dx.chunks_mut(c).zip(gy.chunks(c)).zip(vy.chunks(c)) {
                            let dot: T = g.iter().zip(s).map(|(&a, &b)| a * b).sum();
                            for j in 0..c {
                                d[j] = s[j] * (g[j] - dot);
                            }
                        }
                        dx
                    });
                }
                Op::Conv2d { x, f, geom, col } => {
                    self.acc(&mut grads, *f, || conv::conv2d_filter_grad(geom, col, &gy));
                    self.acc(&mut grads, *x, || conv::conv2d_input_grad(geom, &gy, self.value(*f).data()));
                }
                Op::ConvTranspose { x, f, geom } => {
                    // Output is the adjoint conv's input; gy has that shape.
                    let need_f = self.rg(*f);
                    let need_x = self.rg(*x);
                    if need_f || need_x {
                        let col = geom.im2col(&gy);
                        let rows = geom.col_rows();
                        let kk = geom.col_cols();
                        let f_data = self.value(*f).data();
                        self.acc(&mut grads, *x, || {
                            let mut dx = vec![T::zero(); rows * geom.out_c];
                            T::gemm(rows, kk, geom.out_c, &col, false, f_data, false, T::zero(), &mut dx);
                            dx
                        });
                        self.acc(&mut grads, *f, || conv::conv2d_filter_grad(geom, &col, self.value(*x).data()));
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    let c = inv_std.len();
                    let m = xhat.len() / c;
                    let mut sum_g = vec![T::zero(); c];
                    let mut sum_gx = vec![T::zero(); c];
                    for (gr, xr) in gy.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            sum_g[j] += gr[j];
                            sum_gx[j] += gr[j] * xr[j];
                        }
                    }
                    self.acc(&mut grads, *gamma, || sum_gx.clone());
                    self.acc(&mut grads, *beta, || sum_g.clone());
                    let gam = self.value(*gamma).data();
                    let inv_m = T::one() / T::lit(m as f64);
                    self.acc(&mut grads, *x, || {
                        let mut dx = vec![T::zero(); gy.len()];
                        for ((d, gr), xr) in dx.chunks_mut(c).zip(gy.chunks(c)).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                let k = gam[j] * inv_std[j];
                                d[j] = if *train {
                                    k * (gr[j] - sum_g[j] * inv_m - xr[j] * sum_gx[j] * inv_m)
                                } else {
                                    k * gr[j]
                                };
                            }
                        }
                        dx
                    });
                }
                Op::Dropout { x, mask } => {
                    self.acc(&mut grads, *x, || gy.iter().zip(mask).map(|(&g, &k)| g * k).collect());
                }
                Op::GlobalAvgPool(x) => {
                    let s = self.shape(*x);
                    let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
                    let inv = T::one() / T::lit(hw as f64);
                    self.acc(&mut grads, *x, || {
                        let mut dx = vec![T::zero(); b * hw * c];
                        for bi in 0..b {
                            let g = &gy[bi * c..(bi + 1) * c];
                            for p in 0..hw {
                                for (d, &gg) in dx[(bi * hw + p) * c..(bi * hw + p + 1) * c].iter_mut().zip(g) {
                                    *d = gg * inv;
                                }
                            }
                        }
                        dx
                    });
                }
                Op::Reshape(x) => {
                    self.acc(&mut grads, *x, || gy);
                }
                Op::SliceCols { x, start, end } => {
                    let s = self.shape(*x);
                    let (rows, n, w) = (s[0], s[1], end - start);
                    self.acc(&mut grads, *x, || {
                        let mut dx = vec![T::zero(); rows * n];
                        for r in 0..rows {
                            dx[r * n + start..r * n + end].copy_from_slice(&gy[r * w..(r + 1) * w]);
                        }
                        dx
                    });
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    self.acc(&mut grads, *x, || vec![gy[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    let g = gy[0] / T::lit(n as f64);
                    self.acc(&mut grads, *x, || vec![g; n]);
                }
                Op::SigmoidCe { logits, targets } => {
                    let vz = self.value(*logits).data();
                    self.acc(&mut grads, *logits, || {
                        gy.iter()
                            .zip(vz)
                            .zip(targets)
                            .map(|((&g, &z), &t)| g * (sigmoid(z) - t))
                            .collect()
                    });
                }
                Op::SoftmaxCe { logits, targets } => {
                    let k = *self.shape(*logits).last().unwrap();
                    let vz = self.value(*logits).data();
                    self.acc(&mut grads, *logits, || {
                        let mut dz = vec![T::zero(); vz.len()];
                        for (((d, z), t), &g) in dz.chunks_mut(k).zip(vz.chunks(k)).zip(targets.chunks(k)).zip(&gy) {
                            d.copy_from_slice(z);
                            softmax_in_place(d);
                            let mass: T = t.iter().copied().sum();
                            for j in 0..k {
                                d[j] = g * (d[j] * mass - t[j]);
                            }
                        }
                        dz
                    });
                }
                Op::OneMinusCcc(p, o) => {
                    let (vp, vo) = (self.value(*p).data(), self.value(*o).data());
                    let m = ccc_moments(vp, vo);
                    let g = gy[0];
                    self.acc(&mut grads, *p, || m.grad_wrt_first(vp, vo).into_iter().map(|d| -g * d).collect());
                    self.acc(&mut grads, *o, || {
                        let swapped = ccc_moments(vo, vp);
                        swapped.grad_wrt_first(vo, vp).into_iter().map(|d| -g * d).collect()
                    });
                }
                Op::Huber { a, b, delta } => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let scale = gy[0] / T::lit(va.len() as f64);
                    let d: Vec<T> = va
                        .iter()
                        .zip(vb)
                        .map(|(&x, &y)| scale * huber_grad(x - y, *delta))
                        .collect();
                    self.acc(&mut grads, *b, || d.iter().map(|&e| -e).collect());
                    self.acc(&mut grads, *a, || d);
                }
                Op::LogClamp { x, lo, hi } => {
                    let vx = self.value(*x).data();
                    self.acc(&mut grads, *x, || {
                        gy.iter()
                            .zip(vx)
                            .map(|(&g, &e)| if e > *lo && e < *hi { g / e } else { T::zero() })
                            .collect()
                    });
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: impl FnOnce() -> Vec<T>) {
        if !self.rg(v) {
            return;
        }
        let d = delta();
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&d).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(d),
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn sigmoid_ce<T: Scalar>(z: T, t: T) -> T {
    z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_ce_row<T: Scalar>(z: &[T], t: &[T]) -> T {
    let lse = log_sum_exp(z);
    z.iter().zip(t).map(|(&zi, &ti)| ti * (lse - zi)).sum()
}

pub(crate) fn huber<T: Scalar>(a: T, delta: T) -> T {
    let half = T::lit(0.5);
    if a.abs() <= delta {
        half * a * a
    } else {
        delta * (a.abs() - half * delta)
    }
}

fn huber_grad<T: Scalar>(a: T, delta: T) -> T {
    if a.abs() <= delta {
        a
    } else {
        delta * a.signum()
    }
}

/// Population moments behind the concordance correlation coefficient.
pub(crate) struct CccMoments<T> {
    pub mean_x: T,
    pub mean_y: T,
    pub var_x: T,
    pub var_y: T,
    pub cov: T,
}

pub(crate) fn ccc_moments<T: Scalar>(x: &[T], y: &[T]) -> CccMoments<T> {
    let n = T::lit(x.len() as f64);
    let mean_x = x.iter().copied().sum::<T>() / n;
    let mean_y = y.iter().copied().sum::<T>() / n;
    let (mut var_x, mut var_y, mut cov) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mean_x, b - mean_y);
        var_x += dx * dx;
        var_y += dy * dy;
        cov += dx * dy;
    }
    CccMoments {
        mean_x,
        mean_y,
        var_x: var_x / n,
        var_y: var_y / n,
        cov: cov / n,
    }
}

impl<T: Scalar> CccMoments<T> {
    fn denominator(&self) -> T {
        let d = self.mean_x - self.mean_y;
        self.var_x + self.var_y + d * d
    }

    /// Both inputs constant and equal count as perfect agreement.
    pub fn ccc(&self) -> T {
        let den = self.denominator();
        if den == T::zero() {
            T::one()
        } else {
            T::lit(2.0) * self.cov / den
        }
    }

    /// d CCC / d x_i; zero where the coefficient is degenerate.
    fn grad_wrt_first(&self, x: &[T], y: &[T]) -> Vec<T> {
        let den = self.denominator();
        if den == T::zero() {
            return vec![T::zero(); x.len()];
        }
        let n = T::lit(x.len() as f64);
        let two = T::lit(2.0);
        let num = two * self.cov;
        let shift = self.mean_x - self.mean_y;
        x.iter()
            .zip(y)
            .map(|(&xi, &yi)| {
                let dnum = two * (yi - self.mean_y) / n;
                let dden = two * (xi - self.mean_x) / n + two * shift / n;
                (dnum * den - num * dden) / (den * den)
            })
            .collect()
    }
}
