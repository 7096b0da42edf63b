//! Cost functions on plain values and the fake-image target vector.
//!
//! The differentiable versions used during training live on
//! [`Graph`](crate::graph::Graph); these evaluate the same formulas directly.

use crate::error::{Error, Result};
use crate::graph::{self, ccc_moments};

/// Mean squared error `(1/n) Σ (pred - obs)^2`.
pub fn mse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_pair("mse", pred, obs, 1)?;
    Ok(pred.iter().zip(obs).map(|(p, o)| (p - o) * (p - o)).sum::<f64>() / pred.len() as f64)
}

/// Concordance correlation coefficient with population moments.
///
/// Two constant, equal inputs give 1; two constant, different inputs give 0.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("ccc", x, y, 2)?;
    Ok(ccc_moments(x, y).ccc())
}

/// `1 - ccc(pred, obs)`.
pub fn one_minus_ccc(pred: &[f64], obs: &[f64]) -> Result<f64> {
    ccc(pred, obs).map(|c| 1.0 - c)
}

/// Huber loss of a residual: `a^2/2` for `|a| <= delta`, else
/// `delta (|a| - delta/2)`. `delta` must be positive.
pub fn huber(residual: f64, delta: f64) -> f64 {
    debug_assert!(delta > 0.0);
    graph::huber(residual, delta)
}

/// `H(p, q) = -Σ p_i ln q_i`; terms with `p_i = 0` contribute nothing.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair("cross_entropy", p, q, 1)?;
    Ok(-p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi != 0.0)
        .map(|(&pi, &qi)| pi * qi.ln())
        .sum::<f64>())
}

/// Elementwise sigmoid cross entropy `max(z,0) - z t + ln(1 + e^{-|z|})`.
pub fn sigmoid_ce(logits: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
    check_pair("sigmoid_ce", logits, targets, 1)?;
    Ok(logits.iter().zip(targets).map(|(&z, &t)| graph::sigmoid_ce(z, t)).collect())
}

/// Softmax cross entropy of one logit row against a target distribution.
pub fn softmax_ce(logits: &[f64], target: &[f64]) -> Result<f64> {
    check_pair("softmax_ce", logits, target, 1)?;
    Ok(graph::softmax_ce_row(logits, target))
}

/// Target for a generated image over `n` category nodes plus the fake node:
/// `(1 - alpha)/n` for each category, `alpha` for the fake node.
pub fn fake_label(n: usize, alpha: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("fake_label needs at least one category"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must be in [0,1], got {alpha}")));
    }
    let mut v = vec![(1.0 - alpha) / n as f64; n];
    v.push(alpha);
    Ok(v)
}

fn check_pair(op: &'static str, a: &[f64], b: &[f64], min_len: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, &[a.len()], &[b.len()]));
    }
    if a.len() < min_len {
        return Err(Error::invalid(format!("{op} needs at least {min_len} values, got {}", a.len())));
    }
    Ok(())
}
