//! Gradient-descent update rules with per-parameter state.
//!
//! Batch, stochastic and mini-batch gradient descent share the plain
//! [`OptimizerKind::Sgd`] rule; what differs between them is how many
//! samples the caller feeds into each gradient.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::layers::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adagrad,
    Adadelta,
    RmsProp,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    /// Learning rate.
    pub eta: f64,
    /// Momentum / decay of the squared-gradient average.
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Adam only: divide the moments by `1 - beta^t`.
    pub bias_correction: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            eta: 0.01,
            gamma: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            bias_correction: true,
        }
    }
}

#[derive(Debug, Clone)]
struct Slots<T> {
    /// v (momentum), G (Adagrad), E[g^2] (Adadelta/RMSprop) or m (Adam).
    first: Tensor<T>,
    /// Adam's second moment.
    second: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct Optimizer<T: Scalar = f64> {
    kind: OptimizerKind,
    hyper: Hyper,
    slots: HashMap<String, Slots<T>>,
    step_count: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, hyper: Hyper) -> Self {
        Optimizer {
            kind,
            hyper,
            slots: HashMap::new(),
            step_count: 0,
        }
    }

    pub fn sgd(eta: f64) -> Self {
        Self::new(OptimizerKind::Sgd, Hyper { eta, ..Hyper::default() })
    }

    pub fn momentum(eta: f64, gamma: f64) -> Self {
        Self::new(OptimizerKind::Momentum, Hyper { eta, gamma, ..Hyper::default() })
    }

    pub fn adagrad(eta: f64, epsilon: f64) -> Self {
        Self::new(OptimizerKind::Adagrad, Hyper { eta, epsilon, ..Hyper::default() })
    }

    /// Adadelta as a decaying average of squared gradients scaled by an
    /// explicit learning rate (no running average of updates).
    pub fn adadelta(eta: f64, gamma: f64) -> Self {
        Self::new(OptimizerKind::Adadelta, Hyper { eta, gamma, ..Hyper::default() })
    }

    pub fn rmsprop(eta: f64, gamma: f64) -> Self {
        Self::new(OptimizerKind::RmsProp, Hyper { eta, gamma, ..Hyper::default() })
    }

    pub fn adam(eta: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self::new(
            OptimizerKind::Adam,
            Hyper {
                eta,
                beta1,
                beta2,
                epsilon,
                ..Hyper::default()
            },
        )
    }

    /// Default hyperparameters per rule: momentum and decay 0.9, RMSprop
    /// η = 0.001, Adam β1 = 0.9, β2 = 0.999, ε = 1e-8, Adagrad ε = 1e-18.
    pub fn preset(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(0.01),
            OptimizerKind::Momentum => Self::momentum(0.01, 0.9),
            OptimizerKind::Adagrad => Self::adagrad(0.1, 1e-18),
            OptimizerKind::Adadelta => Self::adadelta(0.001, 0.9),
            OptimizerKind::RmsProp => Self::rmsprop(0.001, 0.9),
            OptimizerKind::Adam => Self::adam(0.001, 0.9, 0.999, 1e-8),
        }
    }

    /// Adam with β1 = 0.5 as used for both GAN networks.
    pub fn gan_adam(eta: f64) -> Self {
        Self::adam(eta, 0.5, 0.999, 1e-8)
    }

    pub fn with_bias_correction(mut self, on: bool) -> Self {
        self.hyper.bias_correction = on;
        self
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Accumulator of a parameter (v, G, E[g^2] or m), if initialised.
    pub fn accumulator(&self, name: &str) -> Option<&Tensor<T>> {
        self.slots.get(name).map(|s| &s.first)
    }

    /// Adam second moment of a parameter, if initialised.
    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.slots.get(name).and_then(|s| s.second.as_ref())
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params
                .get(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer step", p.shape(), g.shape()));
            }
        }
        self.step_count += 1;
        let h = self.hyper;
        let (eta, gamma, eps) = (T::lit(h.eta), T::lit(h.gamma), T::lit(h.epsilon));
        let (b1, b2) = (T::lit(h.beta1), T::lit(h.beta2));
        let t = self.step_count as i32;
        let (c1, c2) = if h.bias_correction {
            (T::lit(1.0 - h.beta1.powi(t)), T::lit(1.0 - h.beta2.powi(t)))
        } else {
            (T::one(), T::one())
        };
        let kind = self.kind;

        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above");
            let slot = self.slots.entry(name.clone()).or_insert_with(|| Slots {
                first: Tensor::zeros(g.shape()),
                second: (kind == OptimizerKind::Adam).then(|| Tensor::zeros(g.shape())),
            });
            let theta = p.data_mut();
            let g = g.data();
            let acc = slot.first.data_mut();
            match kind {
                OptimizerKind::Sgd => {
                    for (th, &gi) in theta.iter_mut().zip(g) {
                        *th -= eta * gi;
                    }
                }
                OptimizerKind::Momentum => {
                    for ((th, &gi), v) in theta.iter_mut().zip(g).zip(acc.iter_mut()) {
                        *v = gamma * *v + eta * gi;
                        *th -= *v;
                    }
                }
                OptimizerKind::Adagrad => {
                    for ((th, &gi), big_g) in theta.iter_mut().zip(g).zip(acc.iter_mut()) {
                        *big_g += gi * gi;
                        *th -= eta / (*big_g + eps).sqrt() * gi;
                    }
                }
                OptimizerKind::Adadelta | OptimizerKind::RmsProp => {
                    for ((th, &gi), eg) in theta.iter_mut().zip(g).zip(acc.iter_mut()) {
                        *eg = gamma * *eg + (T::one() - gamma) * gi * gi;
                        *th -= eta / (*eg + eps).sqrt() * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let v = slot.second.as_mut().expect("adam slot").data_mut();
                    for (((th, &gi), m), v) in theta.iter_mut().zip(g).zip(acc.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m + (T::one() - b1) * gi;
                        *v = b2 * *v + (T::one() - b2) * gi * gi;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *th -= eta * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::invalid(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = grads.global_norm().as_f64();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}
