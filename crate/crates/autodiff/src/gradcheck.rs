//! Central finite-difference gradient checks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamSet};

/// Denominator floor for the relative error of near-zero gradients.
const NORM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `|a - n| / max(|a|, |n|)` over the whole tensor.
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub tensors: Vec<TensorCheck>,
}

impl Report {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares backward() against central differences of `loss` at step `eps`.
///
/// `loss` must build the same function on every call (re-seed any RNG it
/// uses inside the closure).
pub fn check<F>(params: &ParamSet, eps: f64, loss: F) -> Result<Report>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let l = loss(&mut g, &bound)?;
    let grads = g.backward(l)?;

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let l = loss(&mut g, &bound)?;
        g.scalar(l)
    };

    let mut probe = params.clone();
    let mut tensors = Vec::with_capacity(params.len());
    for (name, value) in params.iter() {
        let analytic = grads
            .get(bound.get(name)?)
            .expect("every bound parameter has a gradient")
            .data()
            .to_vec();
        let mut numeric = vec![0.0; value.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x0 = value.data()[i];
            probe.get_mut(name)?.data_mut()[i] = x0 + eps;
            let up = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = x0 - eps;
            let down = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = x0;
            *slot = (up - down) / (2.0 * eps);
        }
        let diff = norm(analytic.iter().zip(&numeric).map(|(a, n)| a - n));
        let a = norm(analytic.iter().copied());
        let n = norm(numeric.iter().copied());
        tensors.push(TensorCheck {
            name: name.to_string(),
            analytic_norm: a,
            numeric_norm: n,
            rel_error: diff / a.max(n).max(NORM_FLOOR),
        });
    }
    Ok(Report { tensors })
}

fn norm(xs: impl Iterator<Item = f64>) -> f64 {
    xs.map(|x| x * x).sum::<f64>().sqrt()
}
