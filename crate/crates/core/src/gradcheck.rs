//! Central finite-difference checks of tape gradients.

use rand::seq::index;
use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::layers::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// Elements compared.
    pub checked: usize,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over the
    /// compared elements; 0 when both vanish.
    pub rel_err: f64,
    pub analytic_norm: f64,
}

/// Compares the gradients of `build`'s scalar output against central
/// differences with step `h`. `build` must register every tensor of
/// `params` with [`Graph::param`] under its own name. With `sample`, at most
/// that many random elements per tensor are perturbed.
pub fn check<R: Rng + ?Sized>(
    params: &ParamSet<f64>,
    build: impl Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
    h: f64,
    sample: Option<usize>,
    rng: &mut R,
) -> Result<Vec<GradCheck>> {
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let grads = g.backward(loss)?;
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = build(&mut g, p)?;
        Ok(g.value(l).item())
    };

    let mut out = Vec::new();
    let mut work = params.clone();
    for (name, tensor) in params.iter() {
        let n = tensor.len();
        let idx: Vec<usize> = match sample {
            Some(k) if k < n => index::sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let analytic = grads.get(name);
        let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let orig = tensor.data()[i];
            work.get_mut(name).expect("cloned").data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(name).expect("cloned").data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(name).expect("cloned").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.map_or(0.0, |t| t.data()[i]);
            diff += (a - numeric).powi(2);
            an += a * a;
            nn += numeric * numeric;
        }
        let scale = an.sqrt().max(nn.sqrt());
        out.push(GradCheck {
            name: name.to_string(),
            checked: idx.len(),
            rel_err: if scale == 0.0 { 0.0 } else { diff.sqrt() / scale },
            analytic_norm: an.sqrt(),
        });
    }
    Ok(out)
}

/// Largest relative error of a check.
pub fn worst(checks: &[GradCheck]) -> f64 {
    checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
}
