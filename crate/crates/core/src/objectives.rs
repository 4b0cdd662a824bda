//! Representation-learning losses: demi-cycle, translation, cycle
//! consistency and pairwise InfoNCE, plus their weighted total.

use gwsel_autodiff::{Bound, Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gw::{fuse, random_fusion_weights, Gw};
use crate::modality::Modality;

pub const CONTRAST_TEMPERATURE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub tr: f64,
    pub dcy: f64,
    pub cycle: f64,
    pub contrast: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tr: 1.0,
            dcy: 1.0,
            cycle: 1.0,
            contrast: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.tr, self.dcy, self.cycle, self.contrast]
            .iter()
            .any(|w| !(*w >= 0.0))
        {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsetEntry {
    pub encoders: Vec<Modality>,
    /// Observed modalities outside the encoder set.
    pub translation: Vec<Modality>,
    /// All modalities outside the encoder set.
    pub complement: Vec<Modality>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsetPlan {
    pub observed: Vec<Modality>,
    pub subsets: Vec<SubsetEntry>,
}

impl SubsetPlan {
    /// Every non-empty subset of `observed`, by size then modality order.
    pub fn new(observed: &[Modality]) -> Result<Self> {
        let mut observed = observed.to_vec();
        observed.sort();
        observed.dedup();
        if observed.is_empty() {
            return Err(Error::Invalid("no observed modalities".into()));
        }
        let k = observed.len();
        let mut index_sets: Vec<Vec<usize>> = (1..(1u32 << k))
            .map(|mask| (0..k).filter(|i| mask & (1 << i) != 0).collect())
            .collect();
        index_sets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        let subsets = index_sets
            .into_iter()
            .map(|set| {
                let encoders: Vec<Modality> = set.iter().map(|&i| observed[i]).collect();
                let translation = observed.iter().copied().filter(|m| !encoders.contains(m)).collect();
                let complement = Modality::ALL.into_iter().filter(|m| !encoders.contains(m)).collect();
                SubsetEntry {
                    encoders,
                    translation,
                    complement,
                }
            })
            .collect();
        Ok(Self { observed, subsets })
    }

    pub fn full() -> Self {
        Self::new(&Modality::ALL).expect("non-empty")
    }
}

fn lookup(xs: &[(Modality, Var)], m: Modality) -> Result<Var> {
    xs.iter()
        .find(|(n, _)| *n == m)
        .map(|&(_, v)| v)
        .ok_or_else(|| Error::Invalid(format!("modality {m} not in batch")))
}

fn pick(xs: &[(Modality, Var)], ms: &[Modality]) -> Result<Vec<(Modality, Var)>> {
    ms.iter().map(|&m| Ok((m, lookup(xs, m)?))).collect()
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

fn sum_all(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut it = terms.iter();
    let Some(&first) = it.next() else {
        return Ok(zero(g));
    };
    let mut acc = first;
    for &t in it {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

fn mean_all(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Ok(zero(g));
    }
    let s = sum_all(g, terms)?;
    Ok(g.scale(s, 1.0 / terms.len() as f64)?)
}

fn mse_to_targets(g: &mut Graph, preds: &[Var], xs: &[(Modality, Var)], targets: &[Modality]) -> Result<Var> {
    let mut terms = Vec::with_capacity(targets.len());
    for (&p, &m) in preds.iter().zip(targets) {
        let x = lookup(xs, m)?;
        terms.push(g.mse(p, x)?);
    }
    sum_all(g, &terms)
}

/// `sum_{j in S} MSE(Br(S -> j), x_j)`.
pub fn demi_cycle_loss(
    g: &mut Graph,
    gw: &Gw,
    bound: &Bound,
    xs: &[(Modality, Var)],
    subset: &[Modality],
    alpha: Var,
) -> Result<Var> {
    let inputs = pick(xs, subset)?;
    let preds = gw.broadcast(g, bound, &inputs, alpha, subset)?;
    mse_to_targets(g, &preds, xs, subset)
}

/// `sum_{j in M' \ S} MSE(Br(S -> j), x_j)`; zero when every observed modality is in `S`.
pub fn translation_loss(
    g: &mut Graph,
    gw: &Gw,
    bound: &Bound,
    xs: &[(Modality, Var)],
    subset: &[Modality],
    alpha: Var,
) -> Result<Var> {
    let targets: Vec<Modality> = xs.iter().map(|(m, _)| *m).filter(|m| !subset.contains(m)).collect();
    if targets.is_empty() {
        return Ok(zero(g));
    }
    let inputs = pick(xs, subset)?;
    let preds = gw.broadcast(g, bound, &inputs, alpha, &targets)?;
    mse_to_targets(g, &preds, xs, &targets)
}

/// Broadcast `S` to its complement `C`, broadcast the predictions back to `S`
/// and compare with the originals. Zero when `C` is empty.
pub fn cycle_loss(
    g: &mut Graph,
    gw: &Gw,
    bound: &Bound,
    xs: &[(Modality, Var)],
    subset: &[Modality],
    alpha_fwd: Var,
    alpha_bwd: Option<Var>,
) -> Result<Var> {
    let complement: Vec<Modality> = Modality::ALL.into_iter().filter(|m| !subset.contains(m)).collect();
    if complement.is_empty() {
        return Ok(zero(g));
    }
    let alpha_bwd = alpha_bwd.ok_or_else(|| Error::Invalid("cycle needs backward fusion weights".into()))?;
    let inputs = pick(xs, subset)?;
    let predicted = gw.broadcast(g, bound, &inputs, alpha_fwd, &complement)?;
    let back_inputs: Vec<(Modality, Var)> = complement.iter().copied().zip(predicted).collect();
    let back = gw.broadcast(g, bound, &back_inputs, alpha_bwd, subset)?;
    mse_to_targets(g, &back, xs, subset)
}

/// Symmetric InfoNCE on a `[B, B]` similarity matrix whose diagonal holds
/// the positive pairs; mean of the two directions.
pub fn info_nce_from_similarity(g: &mut Graph, sim: Var, temperature: f64) -> Result<Var> {
    let (r, c) = g.value(sim).dims2()?;
    if r != c || r < 2 {
        return Err(Error::Invalid(format!(
            "InfoNCE needs a square similarity matrix with B >= 2, got [{r}, {c}]"
        )));
    }
    let targets: Vec<usize> = (0..r).collect();
    let logits = g.scale(sim, 1.0 / temperature)?;
    let forward = g.cross_entropy(logits, &targets)?;
    let logits_t = g.transpose(logits)?;
    let backward = g.cross_entropy(logits_t, &targets)?;
    let both = g.add(forward, backward)?;
    Ok(g.scale(both, 0.5)?)
}

pub fn info_nce(g: &mut Graph, a: Var, b: Var, temperature: f64) -> Result<Var> {
    let na = g.normalize_rows(a)?;
    let nb = g.normalize_rows(b)?;
    let nbt = g.transpose(nb)?;
    let sim = g.matmul(na, nbt)?;
    info_nce_from_similarity(g, sim, temperature)
}

/// Mean symmetric InfoNCE over all unordered pairs of pre-fusion latents.
pub fn contrastive_loss(g: &mut Graph, latents: &[(Modality, Var)], temperature: f64) -> Result<Var> {
    if let Some(&(_, first)) = latents.first() {
        if g.value(first).rows() < 2 {
            return Err(Error::Invalid("contrastive loss needs a batch of at least 2".into()));
        }
    }
    let mut terms = Vec::new();
    for i in 0..latents.len() {
        for j in i + 1..latents.len() {
            terms.push(info_nce(g, latents[i].1, latents[j].1, temperature)?);
        }
    }
    mean_all(g, &terms)
}

/// Per-term averages and the weighted total, all scalar nodes.
#[derive(Clone, Copy, Debug)]
pub struct RepLoss {
    pub tr: Var,
    pub dcy: Var,
    pub cycle: Var,
    pub contrast: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RepLossValues {
    pub tr: f64,
    pub dcy: f64,
    pub cycle: f64,
    pub contrast: f64,
    pub total: f64,
}

impl RepLoss {
    pub fn values(&self, g: &Graph) -> Result<RepLossValues> {
        Ok(RepLossValues {
            tr: g.scalar(self.tr)?,
            dcy: g.scalar(self.dcy)?,
            cycle: g.scalar(self.cycle)?,
            contrast: g.scalar(self.contrast)?,
            total: g.scalar(self.total)?,
        })
    }
}

/// Weighted sum of the four terms over every subset of `plan`.
///
/// Each subset is encoded and fused once and decoded to all observed
/// modalities: outputs on the subset feed the demi-cycle term, the rest feed
/// translation. Weights are drawn per subset in plan order: forward weights
/// `[B, |S|]`, then backward-cycle weights `[B, |C|]` when `C` is non-empty.
#[allow(clippy::too_many_arguments)]
pub fn total_rep_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    gw: &Gw,
    bound: &Bound,
    xs: &[(Modality, Var)],
    plan: &SubsetPlan,
    weights: &LossWeights,
    temperature: f64,
    rng: &mut R,
) -> Result<RepLoss> {
    let batch = g.value(lookup(xs, plan.observed[0])?).rows();
    let tau = gw.config.tau;
    let mut latents = Vec::with_capacity(plan.observed.len());
    for &m in &plan.observed {
        let x = lookup(xs, m)?;
        latents.push((m, gw.encode(g, bound, m, x)?));
    }

    let (mut dcy, mut tr, mut cyc) = (Vec::new(), Vec::new(), Vec::new());
    for s in &plan.subsets {
        let alpha = g.constant(random_fusion_weights(batch, s.encoders.len(), tau, rng)?);
        let gs = pick(&latents, &s.encoders)?
            .into_iter()
            .map(|(_, v)| v)
            .collect::<Vec<_>>();
        let z = fuse(g, &gs, alpha)?;
        let mut decoded = Vec::with_capacity(plan.observed.len());
        for &m in Modality::ALL
            .iter()
            .filter(|m| plan.observed.contains(m) || s.complement.contains(m))
        {
            decoded.push((m, gw.decode(g, bound, m, z)?));
        }
        let own = pick(&decoded, &s.encoders)?
            .into_iter()
            .map(|(_, v)| v)
            .collect::<Vec<_>>();
        dcy.push(mse_to_targets(g, &own, xs, &s.encoders)?);
        if !s.translation.is_empty() {
            let other = pick(&decoded, &s.translation)?
                .into_iter()
                .map(|(_, v)| v)
                .collect::<Vec<_>>();
            tr.push(mse_to_targets(g, &other, xs, &s.translation)?);
        }
        if !s.complement.is_empty() {
            let alpha_bwd = g.constant(random_fusion_weights(batch, s.complement.len(), tau, rng)?);
            let mut back = Vec::with_capacity(s.complement.len());
            for &m in &s.complement {
                let xh = lookup(&decoded, m)?;
                back.push(gw.encode(g, bound, m, xh)?);
            }
            let z2 = fuse(g, &back, alpha_bwd)?;
            let mut rec = Vec::with_capacity(s.encoders.len());
            for &m in &s.encoders {
                rec.push(gw.decode(g, bound, m, z2)?);
            }
            cyc.push(mse_to_targets(g, &rec, xs, &s.encoders)?);
        }
    }

    let dcy = mean_all(g, &dcy)?;
    let tr = mean_all(g, &tr)?;
    let cycle = mean_all(g, &cyc)?;
    let contrast = if latents.len() >= 2 {
        contrastive_loss(g, &latents, temperature)?
    } else {
        zero(g)
    };
    let mut parts = Vec::with_capacity(4);
    for (w, v) in [
        (weights.tr, tr),
        (weights.dcy, dcy),
        (weights.cycle, cycle),
        (weights.contrast, contrast),
    ] {
        parts.push(g.scale(v, w)?);
    }
    let total = sum_all(g, &parts)?;
    Ok(RepLoss {
        tr,
        dcy,
        cycle,
        contrast,
        total,
    })
}

/// Stacks the named batch rows of every modality as graph constants.
pub fn batch_constants(g: &mut Graph, latents: &[Tensor], idx: &[usize]) -> Vec<(Modality, Var)> {
    Modality::ALL
        .iter()
        .map(|&m| (m, g.constant(latents[m.index()].gather_rows(idx))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_plan_has_seven_subsets() {
        let plan = SubsetPlan::full();
        assert_eq!(plan.subsets.len(), 7);
        assert_eq!(plan.subsets[0].encoders, vec![Modality::Attr]);
        assert_eq!(plan.subsets[3].encoders, vec![Modality::Attr, Modality::Image]);
        assert!(plan.subsets[6].complement.is_empty());
        assert!(plan.subsets[6].translation.is_empty());
    }
}
