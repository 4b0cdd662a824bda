//! Classification heads reading the fused workspace latent, one per task.

use gwsel_autodiff::{Activation, Bound, Graph, Mlp, ParamSet, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::modality::Task;

pub const PREFIX: &str = "probe/";

#[derive(Clone, Debug)]
pub struct Probes {
    mlps: Vec<Mlp>,
}

impl Probes {
    pub fn new(d: usize, hidden: usize) -> Self {
        let mlps = Task::ALL
            .iter()
            .map(|t| {
                Mlp::new(
                    format!("{PREFIX}{t}"),
                    &[d, hidden, hidden, t.classes()],
                    Activation::Gelu,
                )
            })
            .collect();
        Self { mlps }
    }

    pub fn mlp(&self, task: Task) -> &Mlp {
        &self.mlps[task.index()]
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for m in &self.mlps {
            m.init(&mut p, rng)?;
        }
        Ok(p)
    }

    pub fn init_zero(&self) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for m in &self.mlps {
            m.init_zero(&mut p)?;
        }
        Ok(p)
    }

    pub fn param_count(&self) -> usize {
        self.mlps.iter().map(Mlp::param_count).sum()
    }

    /// `[B, n_classes(task)]` logits for `z: [B, d]`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, task: Task, z: Var) -> Result<Var> {
        let d = self.mlp(task).dims[0];
        if g.value(z).cols() != d {
            return Err(Error::Dimension(format!(
                "probe input has width {}, expected {d}",
                g.value(z).cols()
            )));
        }
        Ok(self.mlp(task).forward(g, bound, z)?)
    }
}

/// Row-wise argmax of a logits matrix.
pub fn argmax_rows(logits: &gwsel_autodiff::Tensor) -> Vec<usize> {
    let c = logits.cols();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}
