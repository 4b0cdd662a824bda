//! Training loops for the three stages.

use gwsel_autodiff::{Adam, AdamConfig, Graph, OneCycle, ParamSet, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Attention;
use crate::corruption::Schedule;
use crate::data::SplitData;
use crate::error::{Error, Result};
use crate::eval::{corrupt, encode_rows, presence_groups, Frozen};
use crate::gw::{fuse, random_fusion_weights, Gw};
use crate::modality::{Modality, Task};
use crate::objectives::{
    batch_constants, total_rep_loss, LossWeights, RepLossValues, SubsetPlan, CONTRAST_TEMPERATURE,
};
use crate::probes::Probes;
use crate::seed::{self, stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
}

impl EpochConfig {
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * self.steps_per_epoch(n)
    }
}

fn check_batch(batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    Ok(())
}

/// One row of the stage-1 training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GwLogRow {
    pub step: usize,
    pub lr: f64,
    pub losses: RepLossValues,
}

/// One row of a classification training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossLogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

fn diverged(step: usize, e: impl std::fmt::Display) -> Error {
    Error::Diverged {
        step,
        detail: e.to_string(),
    }
}

/// Stage 1: minimizes the weighted representation loss with random fusion on
/// clean data. Batches are drawn with replacement.
///
/// On divergence `params` keeps the last finite update and the error says at
/// which step training stopped.
pub fn train_gw(
    gw: &Gw,
    params: &mut ParamSet,
    data: &SplitData,
    weights: &LossWeights,
    cfg: &StepConfig,
    seed: u64,
    mut on_step: impl FnMut(&GwLogRow),
) -> Result<Vec<GwLogRow>> {
    check_batch(cfg.batch_size)?;
    let plan = SubsetPlan::full();
    let sched = OneCycle::new(cfg.steps, cfg.peak_lr);
    let mut adam = Adam::new(AdamConfig::default());
    let mut log = Vec::with_capacity(cfg.steps);
    let n = data.len();
    for step in 0..cfg.steps {
        let mut rng = seed::rng(seed, stream::GW_STEP, step as u64);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect();
        let lr = sched.lr(step)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let xs = batch_constants(&mut g, &data.latents, &idx);
        let loss = total_rep_loss(&mut g, gw, &bound, &xs, &plan, weights, CONTRAST_TEMPERATURE, &mut rng)
            .map_err(|e| diverged(step, e))?;
        let values = loss.values(&g)?;
        let grads = g.backward(loss.total)?;
        adam.step(params, &bound, &grads, lr).map_err(|e| diverged(step, e))?;
        let row = GwLogRow {
            step,
            lr,
            losses: values,
        };
        on_step(&row);
        log.push(row);
    }
    Ok(log)
}

fn encode_clean(frozen: &Frozen<'_>, data: &SplitData) -> Result<Vec<Tensor>> {
    let n = data.len();
    let d = frozen.gw.config.d;
    let mut out: Vec<Vec<f64>> = (0..3).map(|_| Vec::with_capacity(n * d)).collect();
    let all = Modality::ALL.to_vec();
    for start in (0..n).step_by(1024) {
        let rows: Vec<usize> = (start..(start + 1024).min(n)).collect();
        let mut g = Graph::new();
        let bound = frozen.gw_params.bind(&mut g, false);
        let enc = encode_rows(&mut g, frozen, &bound, &data.latents, &all, &rows)?;
        for (buf, v) in out.iter_mut().zip(enc) {
            buf.extend_from_slice(g.value(v).data());
        }
    }
    out.into_iter().map(|b| Ok(Tensor::matrix(n, d, b)?)).collect()
}

/// Stage 2: one probe per task on clean, randomly fused latents of a frozen
/// workspace. The summed per-task cross-entropy is minimized; probes share
/// nothing, so this trains each independently.
pub fn train_probes(
    gw: &Gw,
    gw_params: &ParamSet,
    probes: &Probes,
    data: &SplitData,
    cfg: &EpochConfig,
    seed: u64,
) -> Result<(ParamSet, Vec<LossLogRow>)> {
    check_batch(cfg.batch_size)?;
    let mut params = probes.init(&mut seed::rng(seed, stream::PROBE_INIT, 0))?;
    let frozen = Frozen {
        gw,
        gw_params,
        probes,
        probe_params: &params.clone(),
    };
    let labels = data.labels()?.to_vec();
    let n = data.len();
    let total = cfg.total_steps(n);
    if total == 0 {
        return Ok((params, Vec::new()));
    }
    let encoded = encode_clean(&frozen, data)?;
    let sched = OneCycle::new(total, cfg.peak_lr);
    let mut adam = Adam::new(AdamConfig::default());
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(seed, stream::PROBE_SHUFFLE, epoch as u64));
        for idx in order.chunks(cfg.batch_size) {
            let mut rng = seed::rng(seed, stream::PROBE_STEP, step as u64);
            let lr = sched.lr(step)?;
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let latents: Vec<_> = encoded.iter().map(|t| g.constant(t.gather_rows(idx))).collect();
            let alpha = g.constant(random_fusion_weights(idx.len(), 3, gw.config.tau, &mut rng)?);
            let z = fuse(&mut g, &latents, alpha)?;
            let mut terms = Vec::with_capacity(5);
            for task in Task::ALL {
                let logits = probes.forward(&mut g, &bound, task, z)?;
                let targets: Vec<usize> = idx.iter().map(|&i| labels[i][task.index()]).collect();
                terms.push(g.cross_entropy(logits, &targets)?);
            }
            let mut loss = terms[0];
            for &t in &terms[1..] {
                loss = g.add(loss, t)?;
            }
            let value = g.scalar(loss)?;
            let grads = g.backward(loss)?;
            adam.step(&mut params, &bound, &grads, lr)
                .map_err(|e| diverged(step, e))?;
            log.push(LossLogRow { step, lr, loss: value });
            step += 1;
        }
    }
    Ok((params, log))
}

/// Stage 3: trains only the attention maps so the frozen probes classify
/// batches corrupted by `schedule`. The loss is the mean cross-entropy over
/// `tasks`.
#[allow(clippy::too_many_arguments)]
pub fn train_attention(
    frozen: &Frozen<'_>,
    attention: &Attention,
    schedule: &Schedule,
    tasks: &[Task],
    data: &SplitData,
    cfg: &EpochConfig,
    seed: u64,
) -> Result<(ParamSet, Vec<LossLogRow>)> {
    check_batch(cfg.batch_size)?;
    schedule.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("attention needs at least one training task".into()));
    }
    let mut params = attention.init(&mut seed::rng(seed, stream::ATTENTION_INIT, 0))?;
    let labels = data.labels()?;
    let n = data.len();
    let total = cfg.total_steps(n);
    if total == 0 {
        return Ok((params, Vec::new()));
    }
    let sched = OneCycle::new(total, cfg.peak_lr);
    let mut adam = Adam::new(AdamConfig::default());
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(seed, stream::ATTENTION_SHUFFLE, epoch as u64));
        for idx in order.chunks(cfg.batch_size) {
            let lr = sched.lr(step)?;
            let batch = corrupt(
                data,
                idx,
                schedule,
                seed,
                stream::ATTENTION_STEP,
                (step * cfg.batch_size) as u64,
            )?;
            let mut g = Graph::new();
            let gw_bound = frozen.gw_params.bind(&mut g, false);
            let probe_bound = frozen.probe_params.bind(&mut g, false);
            let bound = params.bind(&mut g, true);
            let mut parts = Vec::new();
            for (present, rows) in presence_groups(&batch.masks) {
                let latents = encode_rows(&mut g, frozen, &gw_bound, &batch.latents, &present, &rows)?;
                let out = attention.attend(&mut g, &bound, &latents)?;
                let mut terms = Vec::with_capacity(tasks.len());
                for &task in tasks {
                    let logits = frozen.probes.forward(&mut g, &probe_bound, task, out.z)?;
                    let targets: Vec<usize> = rows.iter().map(|&r| labels[idx[r]][task.index()]).collect();
                    terms.push(g.cross_entropy(logits, &targets)?);
                }
                let mut s = terms[0];
                for &t in &terms[1..] {
                    s = g.add(s, t)?;
                }
                // mean over tasks, weighted by the group's share of the batch
                let w = rows.len() as f64 / (idx.len() as f64 * tasks.len() as f64);
                parts.push(g.scale(s, w)?);
            }
            let mut loss = parts[0];
            for &p in &parts[1..] {
                loss = g.add(loss, p)?;
            }
            let value = g.scalar(loss)?;
            let grads = g.backward(loss)?;
            if grads.len() != params.len() {
                return Err(Error::Contract(format!(
                    "{} gradient tensors in attention training, expected {}",
                    grads.len(),
                    params.len()
                )));
            }
            adam.step(&mut params, &bound, &grads, lr)
                .map_err(|e| diverged(step, e))?;
            log.push(LossLogRow { step, lr, loss: value });
            step += 1;
        }
    }
    Ok((params, log))
}
