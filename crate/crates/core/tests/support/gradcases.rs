//! Finite-difference checks of every training loss on small random shapes.
//! Shared by the gradcheck and acceptance targets.
#![allow(dead_code)]

use gwsel_autodiff::gradcheck::{check, Report};
use gwsel_autodiff::{Bound, Graph, ParamSet, Tensor, Var};
use gwsel_core::attention::Attention;
use gwsel_core::gw::{fuse, random_fusion_weights, Gw, GwConfig};
use gwsel_core::objectives::*;
use gwsel_core::probes::Probes;
use gwsel_core::seed;
use gwsel_core::{Modality, Task};
use rand::Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const LOSSES: [&str; 7] = [
    "demi-cycle",
    "translation",
    "cycle",
    "infonce",
    "total",
    "probe-ce",
    "attention-ce",
];

/// One random instance: every width is at most 8.
pub struct Instance {
    pub gw: Gw,
    pub gw_params: ParamSet,
    pub xs: Vec<Tensor>,
    pub batch: usize,
    seed: u64,
}

fn random_matrix(r: usize, c: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect()).unwrap()
}

impl Instance {
    pub fn new(seed: u64) -> Self {
        let mut rng = seed::rng(seed, 0xC0, 0);
        let d = rng.random_range(2..=8);
        let hidden = rng.random_range(2..=8);
        let dims = [0; 3].map(|_| rng.random_range(1..=8));
        // labels below go up to 3, so the batch holds at least 4 rows
        let batch = rng.random_range(4..=6);
        let gw = Gw::with_dims(GwConfig { d, hidden, tau: 1.0 }, dims);
        let gw_params = gw.init(&mut rng).unwrap();
        let xs = Modality::ALL
            .iter()
            .map(|&m| random_matrix(batch, gw.dim(m), &mut rng))
            .collect();
        Self {
            gw,
            gw_params,
            xs,
            batch,
            seed,
        }
    }

    fn consts(&self, g: &mut Graph) -> Vec<(Modality, Var)> {
        Modality::ALL
            .iter()
            .map(|&m| (m, g.constant(self.xs[m.index()].clone())))
            .collect()
    }

    fn weights(&self, k: usize, s: u64) -> Tensor {
        random_fusion_weights(self.batch, k, 1.0, &mut seed::rng(self.seed, 0xC1, s)).unwrap()
    }

    fn labels(&self, classes: usize) -> Vec<usize> {
        (0..self.batch).map(|i| (i + self.seed as usize) % classes).collect()
    }

    fn encode_all(&self, g: &mut Graph, bound: &Bound) -> gwsel_core::Result<Vec<(Modality, Var)>> {
        let x = self.consts(g);
        let mut out = Vec::new();
        for (m, v) in x {
            out.push((m, self.gw.encode(g, bound, m, v)?));
        }
        Ok(out)
    }

    pub fn check(&self, loss: &str) -> Report {
        let gw = &self.gw;
        match loss {
            "demi-cycle" => grad(&self.gw_params, |g, b| {
                let x = self.consts(g);
                let a = g.constant(self.weights(2, 0));
                demi_cycle_loss(g, gw, b, &x, &[Modality::Attr, Modality::Text], a)
            }),
            "translation" => grad(&self.gw_params, |g, b| {
                let x = self.consts(g);
                let a = g.constant(self.weights(1, 1));
                translation_loss(g, gw, b, &x, &[Modality::Image], a)
            }),
            "cycle" => grad(&self.gw_params, |g, b| {
                let x = self.consts(g);
                let fwd = g.constant(self.weights(1, 2));
                let bwd = g.constant(self.weights(2, 3));
                cycle_loss(g, gw, b, &x, &[Modality::Text], fwd, Some(bwd))
            }),
            "infonce" => grad(&self.gw_params, |g, b| {
                let latents = self.encode_all(g, b)?;
                contrastive_loss(g, &latents, 0.1)
            }),
            "total" => grad(&self.gw_params, |g, b| {
                let x = self.consts(g);
                let mut rng = seed::rng(self.seed, 0xC2, 0);
                let plan = SubsetPlan::full();
                Ok(total_rep_loss(g, gw, b, &x, &plan, &LossWeights::default(), 0.1, &mut rng)?.total)
            }),
            "probe-ce" => {
                let probes = Probes::new(gw.config.d, 6);
                let p = probes.init(&mut seed::rng(self.seed, 0xC3, 0)).unwrap();
                grad(&p, |g, b| {
                    let gb = self.gw_params.bind(g, false);
                    let latents: Vec<Var> = self.encode_all(g, &gb)?.into_iter().map(|(_, v)| v).collect();
                    let a = g.constant(self.weights(3, 4));
                    let z = fuse(g, &latents, a)?;
                    let mut loss = None;
                    for t in Task::ALL {
                        let logits = probes.forward(g, b, t, z)?;
                        let ce = g.cross_entropy(logits, &self.labels(t.classes()))?;
                        loss = Some(match loss {
                            None => ce,
                            Some(l) => g.add(l, ce)?,
                        });
                    }
                    Ok(loss.unwrap())
                })
            }
            "attention-ce" => {
                let probes = Probes::new(gw.config.d, 6);
                let pp = probes.init(&mut seed::rng(self.seed, 0xC4, 0)).unwrap();
                let att = Attention::new(gw.config.d, 3);
                let p = att.init(&mut seed::rng(self.seed, 0xC5, 0)).unwrap();
                grad(&p, |g, b| {
                    let gb = self.gw_params.bind(g, false);
                    let pb = pp.bind(g, false);
                    let latents: Vec<Var> = self.encode_all(g, &gb)?.into_iter().map(|(_, v)| v).collect();
                    let out = att.attend(g, b, &latents)?;
                    let mut terms = Vec::new();
                    for t in [Task::Color, Task::Size] {
                        let logits = probes.forward(g, &pb, t, out.z)?;
                        terms.push(g.cross_entropy(logits, &self.labels(t.classes()))?);
                    }
                    let s = g.add(terms[0], terms[1])?;
                    Ok(g.scale(s, 0.5)?)
                })
            }
            other => panic!("unknown loss {other}"),
        }
    }
}

fn grad<F>(p: &ParamSet, loss: F) -> Report
where
    F: Fn(&mut Graph, &Bound) -> gwsel_core::Result<Var>,
{
    check(p, EPS, |g, b| Ok(loss(g, b).expect("loss builds"))).unwrap()
}

/// `None` when the check passes, else a description of the worst tensor.
pub fn failure(r: &Report) -> Option<String> {
    let worst = r.worst()?;
    if r.max_rel_error() < TOL && r.tensors.iter().any(|t| t.analytic_norm > 0.0) {
        return None;
    }
    Some(format!(
        "{} rel error {:.2e} (analytic {:.3e}, numeric {:.3e})",
        worst.name, worst.rel_error, worst.analytic_norm, worst.numeric_norm
    ))
}
