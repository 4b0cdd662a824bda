//! Corrupted batches, fusion policies and accuracy evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use gwsel_autodiff::{Graph, ParamSet, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::attention::Attention;
use crate::corruption::{apply, draw_mask, CorruptionMask, Schedule};
use crate::data::SplitData;
use crate::error::{Error, Result};
use crate::gw::{fuse, softmax_rows, uniform_weights, Gw};
use crate::modality::{Modality, Task};
use crate::probes::{argmax_rows, Probes};
use crate::seed;

const EVAL_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Random,
    Uniform,
    Attention,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Random, Policy::Uniform, Policy::Attention];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Random => "random",
            Policy::Uniform => "uniform",
            Policy::Attention => "attention",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown policy `{s}`")))
    }
}

/// How fusion weights are chosen at evaluation time.
#[derive(Clone, Copy, Debug)]
pub enum Fusion<'a> {
    Random {
        tau: f64,
    },
    Uniform,
    Attention {
        attention: &'a Attention,
        params: &'a ParamSet,
    },
}

impl Fusion<'_> {
    pub fn policy(&self) -> Policy {
        match self {
            Fusion::Random { .. } => Policy::Random,
            Fusion::Uniform => Policy::Uniform,
            Fusion::Attention { .. } => Policy::Attention,
        }
    }
}

/// Frozen stage-1 and stage-2 components.
#[derive(Clone, Copy, Debug)]
pub struct Frozen<'a> {
    pub gw: &'a Gw,
    pub gw_params: &'a ParamSet,
    pub probes: &'a Probes,
    pub probe_params: &'a ParamSet,
}

/// Latent rows after corruption, plus the per-sample draws behind them.
#[derive(Clone, Debug)]
pub struct Corrupted {
    /// `[n, d_m]` per modality; rows of absent modalities are left as is.
    pub latents: Vec<Tensor>,
    pub masks: Vec<CorruptionMask>,
    /// U(0, 1) selection scores, used by the random policy.
    pub scores: Vec<[f64; 3]>,
}

/// Corrupts `idx` rows of `split`. Sample `j` draws from stream
/// `(seed, stream, offset + j)`: mask, then noise, then three scores.
pub fn corrupt(
    split: &SplitData,
    idx: &[usize],
    schedule: &Schedule,
    seed: u64,
    stream: u64,
    offset: u64,
) -> Result<Corrupted> {
    schedule.validate()?;
    let mut latents: Vec<Tensor> = Modality::ALL
        .iter()
        .map(|&m| split.latent(m).gather_rows(idx))
        .collect();
    let mut masks = Vec::with_capacity(idx.len());
    let mut scores = Vec::with_capacity(idx.len());
    let dims: Vec<usize> = Modality::ALL.iter().map(|m| m.dim()).collect();
    let mut bufs: Vec<&mut [f64]> = latents.iter_mut().map(|t| t.data_mut()).collect();
    for j in 0..idx.len() {
        let mut rng = seed::rng(seed, stream, offset + j as u64);
        let mask = draw_mask(schedule, &mut rng);
        {
            let mut rows: Vec<&mut [f64]> = bufs
                .iter_mut()
                .zip(&dims)
                .map(|(b, &d)| &mut b[j * d..(j + 1) * d])
                .collect();
            apply(&mask, &mut rows, schedule.sigma, &mut rng);
        }
        use rand::Rng;
        scores.push([rng.random(), rng.random(), rng.random()]);
        masks.push(mask);
    }
    Ok(Corrupted { latents, masks, scores })
}

/// Row positions grouped by presence pattern, in a fixed order.
pub fn presence_groups(masks: &[CorruptionMask]) -> Vec<(Vec<Modality>, Vec<usize>)> {
    let mut groups: BTreeMap<[bool; 3], Vec<usize>> = BTreeMap::new();
    for (i, m) in masks.iter().enumerate() {
        groups.entry(m.present).or_default().push(i);
    }
    groups
        .into_iter()
        .rev()
        .filter(|(p, _)| p.iter().any(|&b| b))
        .map(|(p, rows)| {
            let ms = Modality::ALL.into_iter().filter(|m| p[m.index()]).collect();
            (ms, rows)
        })
        .collect()
}

/// Encodes the listed rows of the present modalities with frozen weights.
pub fn encode_rows(
    g: &mut Graph,
    frozen: &Frozen<'_>,
    gw_bound: &gwsel_autodiff::Bound,
    latents: &[Tensor],
    present: &[Modality],
    rows: &[usize],
) -> Result<Vec<Var>> {
    present
        .iter()
        .map(|&m| {
            let x = g.constant(latents[m.index()].gather_rows(rows));
            frozen.gw.encode(g, gw_bound, m, x)
        })
        .collect()
}

/// Per-sample outcomes of one evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub masks: Vec<CorruptionMask>,
    /// Fusion weight per modality (0 for absent modalities).
    pub alpha: Vec<[f64; 3]>,
    pub correct: Vec<[bool; 5]>,
}

impl Evaluation {
    pub fn len(&self) -> usize {
        self.correct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correct.is_empty()
    }

    pub fn accuracy(&self, task: Task) -> f64 {
        if self.correct.is_empty() {
            return f64::NAN;
        }
        let hits = self.correct.iter().filter(|c| c[task.index()]).count();
        hits as f64 / self.correct.len() as f64
    }

    pub fn accuracies(&self) -> [f64; 5] {
        Task::ALL.map(|t| self.accuracy(t))
    }

    pub fn macro_accuracy(&self) -> f64 {
        self.accuracies().iter().sum::<f64>() / 5.0
    }

    /// Samples whose mask satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(&CorruptionMask) -> bool) -> Evaluation {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(&self.masks[i])).collect();
        Evaluation {
            masks: idx.iter().map(|&i| self.masks[i]).collect(),
            alpha: idx.iter().map(|&i| self.alpha[i]).collect(),
            correct: idx.iter().map(|&i| self.correct[i]).collect(),
        }
    }
}

/// Fused latent for one presence group under `fusion`; returns `(z, alpha)`.
fn fused(
    g: &mut Graph,
    fusion: &Fusion<'_>,
    latents: &[Var],
    scores: &[[f64; 3]],
    present: &[Modality],
) -> Result<(Var, Var)> {
    let n = g.value(latents[0]).rows();
    let k = latents.len();
    match fusion {
        Fusion::Random { tau } => {
            let flat: Vec<f64> = scores
                .iter()
                .flat_map(|s| present.iter().map(move |m| s[m.index()]))
                .collect();
            let alpha = g.constant(softmax_rows(&flat, k, *tau));
            Ok((fuse(g, latents, alpha)?, alpha))
        }
        Fusion::Uniform => {
            let alpha = g.constant(uniform_weights(n, k));
            Ok((fuse(g, latents, alpha)?, alpha))
        }
        Fusion::Attention { attention, params } => {
            let bound = params.bind(g, false);
            let out = attention.attend(g, &bound, latents)?;
            Ok((out.z, out.alpha))
        }
    }
}

/// Accuracy of the frozen probes on `split` corrupted by `schedule`.
///
/// Sample `i` uses stream `(seed, EVAL, i)`, so every policy sees the same
/// masks and noise for a given seed.
pub fn evaluate(
    frozen: &Frozen<'_>,
    fusion: &Fusion<'_>,
    schedule: &Schedule,
    split: &SplitData,
    seed: u64,
) -> Result<Evaluation> {
    let labels = split.labels()?;
    let n = split.len();
    let mut out = Evaluation {
        masks: Vec::with_capacity(n),
        alpha: Vec::with_capacity(n),
        correct: Vec::with_capacity(n),
    };
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let batch = corrupt(split, &idx, schedule, seed, seed::stream::EVAL, start as u64)?;
        let mut alpha = vec![[0.0; 3]; idx.len()];
        let mut correct = vec![[false; 5]; idx.len()];
        for (present, rows) in presence_groups(&batch.masks) {
            let mut g = Graph::new();
            let gw_bound = frozen.gw_params.bind(&mut g, false);
            let probe_bound = frozen.probe_params.bind(&mut g, false);
            let latents = encode_rows(&mut g, frozen, &gw_bound, &batch.latents, &present, &rows)?;
            let scores: Vec<[f64; 3]> = rows.iter().map(|&r| batch.scores[r]).collect();
            let (z, a) = fused(&mut g, fusion, &latents, &scores, &present)?;
            let a = g.value(a).clone();
            for (j, &r) in rows.iter().enumerate() {
                for (c, m) in present.iter().enumerate() {
                    alpha[r][m.index()] = a.row(j)[c];
                }
            }
            for task in Task::ALL {
                let logits = frozen.probes.forward(&mut g, &probe_bound, task, z)?;
                let pred = argmax_rows(g.value(logits));
                for (j, &r) in rows.iter().enumerate() {
                    correct[r][task.index()] = pred[j] == labels[idx[r]][task.index()];
                }
            }
        }
        out.masks.extend(batch.masks);
        out.alpha.extend(alpha);
        out.correct.extend(correct);
    }
    Ok(out)
}
