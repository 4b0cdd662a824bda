//! Train/eval matrices of the generalization experiments.

use std::fmt;
use std::str::FromStr;

use crate::corruption::{Schedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::eval::{Evaluation, Policy};
use crate::modality::{Modality, Task};

use super::{fmt_f, write_csv, AccuracyTable, CellAccuracy, Run, SCORES_HEADER};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Protocol {
    NoiseGrid,
    LeaveOutTask,
    ModalityGen1,
    ModalityGen2,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [
        Protocol::NoiseGrid,
        Protocol::LeaveOutTask,
        Protocol::ModalityGen1,
        Protocol::ModalityGen2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::NoiseGrid => "noise-grid",
            Protocol::LeaveOutTask => "leave-out-task",
            Protocol::ModalityGen1 => "modality-gen-1",
            Protocol::ModalityGen2 => "modality-gen-2",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown protocol `{s}`")))
    }
}

/// Attention vs random fusion, both trained/tested on the standard-pair schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct Robustness {
    pub sigma: f64,
    pub attention: CellAccuracy,
    pub random: CellAccuracy,
}

impl Robustness {
    pub fn gain(&self) -> f64 {
        self.attention.macro_mean() - self.random.macro_mean()
    }
}

pub fn robustness(run: &mut Run) -> Result<Robustness> {
    let sigma = run.config.eval.protocol_sigma;
    let schedule = Schedule::new(ScheduleKind::StandardPair, sigma);
    let sets = run.attention_seeds(&schedule, &Task::ALL)?;
    let attention = run.evaluate_cell(Policy::Attention, Some(&sets), &schedule)?;
    let random = run.evaluate_cell(Policy::Random, None, &schedule)?;
    let mut table = AccuracyTable::default();
    table.push(Policy::Attention, &schedule.to_string(), Some(sigma), sigma, &attention);
    table.push(Policy::Random, &schedule.to_string(), None, sigma, &random);
    table.write(&run.metrics_dir().join("robustness.csv"))?;
    run.save_manifest()?;
    Ok(Robustness {
        sigma,
        attention,
        random,
    })
}

/// Macro accuracy on every (train sigma, test sigma) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseGrid {
    pub sigmas: Vec<f64>,
    /// `[train][test]`.
    pub attention: Vec<Vec<f64>>,
    /// `[train][test]`; random fusion has no training, so rows repeat.
    pub random: Vec<Vec<f64>>,
}

pub const NOISE_GRID_CORNER: &str = "train_sigma";

fn write_heatmap(path: &std::path::Path, sigmas: &[f64], m: &[Vec<f64>]) -> Result<()> {
    let mut header = vec![NOISE_GRID_CORNER.to_string()];
    header.extend(sigmas.iter().map(|s| fmt_f(*s)));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = sigmas
        .iter()
        .zip(m)
        .map(|(s, row)| {
            std::iter::once(fmt_f(*s))
                .chain(row.iter().map(|v| fmt_f(*v)))
                .collect()
        })
        .collect();
    write_csv(path, &header, &rows)
}

pub fn noise_grid(run: &mut Run) -> Result<NoiseGrid> {
    let sigmas = run.config.eval.sigma_grid.clone();
    let mut table = AccuracyTable::default();
    let mut random_row = Vec::with_capacity(sigmas.len());
    for &test in &sigmas {
        let schedule = Schedule::new(ScheduleKind::StandardPair, test);
        let cell = run.evaluate_cell(Policy::Random, None, &schedule)?;
        table.push(Policy::Random, &schedule.to_string(), None, test, &cell);
        random_row.push(cell.macro_mean());
    }
    let mut attention = Vec::with_capacity(sigmas.len());
    for &train in &sigmas {
        let trained_on = Schedule::new(ScheduleKind::StandardPair, train);
        let sets = run.attention_seeds(&trained_on, &Task::ALL)?;
        let mut row = Vec::with_capacity(sigmas.len());
        for &test in &sigmas {
            let schedule = Schedule::new(ScheduleKind::StandardPair, test);
            let cell = run.evaluate_cell(Policy::Attention, Some(&sets), &schedule)?;
            table.push(Policy::Attention, &schedule.to_string(), Some(train), test, &cell);
            row.push(cell.macro_mean());
        }
        attention.push(row);
    }
    let random = vec![random_row; sigmas.len()];
    let dir = run.metrics_dir();
    write_heatmap(&dir.join("noise_grid_attention.csv"), &sigmas, &attention)?;
    write_heatmap(&dir.join("noise_grid_random.csv"), &sigmas, &random)?;
    table.write(&dir.join("accuracy_noise_grid.csv"))?;
    run.save_manifest()?;
    Ok(NoiseGrid {
        sigmas,
        attention,
        random,
    })
}

/// Attention trained on `train_task` only, evaluated on every task.
#[derive(Clone, Debug, PartialEq)]
pub struct LeaveOutRow {
    pub train_task: Task,
    pub attention: CellAccuracy,
    pub random: CellAccuracy,
}

impl LeaveOutRow {
    /// Left-out tasks where attention is not strictly better than random fusion.
    pub fn failures(&self) -> Vec<Task> {
        Task::ALL
            .into_iter()
            .filter(|&t| t != self.train_task && self.attention.task(t) <= self.random.task(t))
            .collect()
    }
}

pub const LEAVE_OUT_HEADER: [&str; 6] = ["train_task", "eval_task", "left_out", "attention", "random", "n"];

pub fn leave_out_task(run: &mut Run) -> Result<Vec<LeaveOutRow>> {
    let sigma = run.config.eval.protocol_sigma;
    let schedule = Schedule::new(ScheduleKind::LeaveOutTask, sigma);
    let random = run.evaluate_cell(Policy::Random, None, &schedule)?;
    let mut out = Vec::new();
    let mut table = AccuracyTable::default();
    table.push(Policy::Random, &schedule.to_string(), None, sigma, &random);
    for task in run.config.eval.leave_out_tasks.clone() {
        let sets = run.attention_seeds(&schedule, &[task])?;
        let attention = run.evaluate_cell(Policy::Attention, Some(&sets), &schedule)?;
        table.push(
            Policy::Attention,
            &format!("{schedule}:{task}"),
            Some(sigma),
            sigma,
            &attention,
        );
        out.push(LeaveOutRow {
            train_task: task,
            attention,
            random: random.clone(),
        });
    }
    let mut rows = Vec::new();
    for r in &out {
        for t in Task::ALL {
            rows.push(vec![
                r.train_task.name().into(),
                t.name().into(),
                (t != r.train_task).to_string(),
                fmt_f(r.attention.task(t)),
                fmt_f(r.random.task(t)),
                r.attention.n.to_string(),
            ]);
        }
    }
    let dir = run.metrics_dir();
    write_csv(&dir.join("leave_out_task.csv"), &LEAVE_OUT_HEADER, &rows)?;
    table.write(&dir.join("accuracy_leave_out_task.csv"))?;
    run.save_manifest()?;
    Ok(out)
}

/// Attention trained with `designated` always noised, compared with the
/// standard-pair model on standard-pair samples where `designated` is clean.
#[derive(Clone, Debug, PartialEq)]
pub struct Gen1Row {
    pub designated: Modality,
    pub gen1: CellAccuracy,
    pub full: CellAccuracy,
    pub random: CellAccuracy,
}

impl Gen1Row {
    pub fn drop(&self) -> f64 {
        self.full.macro_mean() - self.gen1.macro_mean()
    }
}

pub const GEN1_HEADER: [&str; 6] = ["designated", "task", "full", "gen1", "random", "n"];

fn restricted(evals: Vec<Evaluation>, m: Modality) -> CellAccuracy {
    let kept: Vec<Evaluation> = evals.iter().map(|e| e.filtered(|mask| mask.is_clean(m))).collect();
    CellAccuracy::from_evaluations(&kept)
}

pub fn modality_gen_1(run: &mut Run) -> Result<Vec<Gen1Row>> {
    let sigma = run.config.eval.protocol_sigma;
    let standard = Schedule::new(ScheduleKind::StandardPair, sigma);
    let full_sets = run.attention_seeds(&standard, &Task::ALL)?;
    let full_evals = run.evaluations(Policy::Attention, Some(&full_sets), &standard)?;
    let random_evals = run.evaluations(Policy::Random, None, &standard)?;
    let mut out = Vec::new();
    let mut table = AccuracyTable::default();
    for m in run.config.eval.designated.clone() {
        let train = Schedule::with_designated(ScheduleKind::ModalityGen1, sigma, m);
        let sets = run.attention_seeds(&train, &Task::ALL)?;
        let gen1 = restricted(run.evaluations(Policy::Attention, Some(&sets), &standard)?, m);
        let row = Gen1Row {
            designated: m,
            gen1,
            full: restricted(full_evals.clone(), m),
            random: restricted(random_evals.clone(), m),
        };
        let label = format!("{standard}|clean:{m}");
        table.push(
            Policy::Attention,
            &format!("{label}|trained:{train}"),
            Some(sigma),
            sigma,
            &row.gen1,
        );
        table.push(
            Policy::Attention,
            &format!("{label}|trained:{standard}"),
            Some(sigma),
            sigma,
            &row.full,
        );
        table.push(Policy::Random, &label, None, sigma, &row.random);
        out.push(row);
    }
    let mut rows = Vec::new();
    for r in &out {
        let per_task = Task::ALL.map(|t| (t.name().to_string(), r.full.task(t), r.gen1.task(t), r.random.task(t)));
        let macro_row = (
            "macro".to_string(),
            r.full.macro_mean(),
            r.gen1.macro_mean(),
            r.random.macro_mean(),
        );
        for (task, full, gen1, random) in per_task.into_iter().chain(std::iter::once(macro_row)) {
            rows.push(vec![
                r.designated.name().into(),
                task,
                fmt_f(full),
                fmt_f(gen1),
                fmt_f(random),
                r.gen1.n.to_string(),
            ]);
        }
    }
    let dir = run.metrics_dir();
    write_csv(&dir.join("modality_gen_1.csv"), &GEN1_HEADER, &rows)?;
    table.write(&dir.join("accuracy_modality_gen_1.csv"))?;
    run.save_manifest()?;
    Ok(out)
}

/// Mean fusion weights under the evaluation configuration of modality-gen-2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreSummary {
    /// Left-out modality when it is clean.
    pub left_clean: f64,
    /// Left-out modality when it is noised.
    pub left_noised: f64,
    /// Trained modalities when clean.
    pub trained_clean: f64,
    /// Trained modalities when noised.
    pub trained_noised: f64,
}

impl ScoreSummary {
    pub fn from_evaluations(evals: &[Evaluation], left: Modality) -> Self {
        let mut acc = [(0.0, 0usize); 4];
        for e in evals {
            for (mask, alpha) in e.masks.iter().zip(&e.alpha) {
                for m in Modality::ALL {
                    if !mask.present[m.index()] {
                        continue;
                    }
                    let slot = match (m == left, mask.is_noised(m)) {
                        (true, false) => 0,
                        (true, true) => 1,
                        (false, false) => 2,
                        (false, true) => 3,
                    };
                    acc[slot].0 += alpha[m.index()];
                    acc[slot].1 += 1;
                }
            }
        }
        let mean = |(s, n): (f64, usize)| if n == 0 { f64::NAN } else { s / n as f64 };
        Self {
            left_clean: mean(acc[0]),
            left_noised: mean(acc[1]),
            trained_clean: mean(acc[2]),
            trained_noised: mean(acc[3]),
        }
    }

    /// Clean beats noised on the left-out modality, and both stay within
    /// `tol` of the trained modalities.
    pub fn holds(&self, tol: f64) -> bool {
        self.left_clean > self.left_noised
            && (self.left_clean - self.trained_clean).abs() <= tol
            && (self.left_noised - self.trained_noised).abs() <= tol
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gen2Row {
    pub left_out: Modality,
    /// Attention on the two-modality training configuration.
    pub train_cfg: CellAccuracy,
    /// Same attention with all three modalities present.
    pub eval_cfg: CellAccuracy,
    pub random_train: CellAccuracy,
    pub random_eval: CellAccuracy,
    pub scores: ScoreSummary,
}

impl Gen2Row {
    pub fn gain(&self) -> f64 {
        self.eval_cfg.macro_mean() - self.train_cfg.macro_mean()
    }
}

pub const GEN2_HEADER: [&str; 7] = [
    "left_out",
    "task",
    "train_cfg",
    "eval_cfg",
    "random_train",
    "random_eval",
    "n",
];
pub const SCORE_SUMMARY_HEADER: [&str; 5] = [
    "left_out",
    "left_clean",
    "left_noised",
    "trained_clean",
    "trained_noised",
];

pub fn modality_gen_2(run: &mut Run) -> Result<Vec<Gen2Row>> {
    let sigma = run.config.eval.protocol_sigma;
    let eval_schedule = Schedule::new(ScheduleKind::ModalityGen2Eval, sigma);
    let random_eval = run.evaluate_cell(Policy::Random, None, &eval_schedule)?;
    let mut out = Vec::new();
    let mut table = AccuracyTable::default();
    table.push(Policy::Random, &eval_schedule.to_string(), None, sigma, &random_eval);
    let dir = run.metrics_dir();
    for m in run.config.eval.designated.clone() {
        let train = Schedule::with_designated(ScheduleKind::ModalityGen2Train, sigma, m);
        let sets = run.attention_seeds(&train, &Task::ALL)?;
        let train_cfg = run.evaluate_cell(Policy::Attention, Some(&sets), &train)?;
        let random_train = run.evaluate_cell(Policy::Random, None, &train)?;
        let evals = run.evaluations(Policy::Attention, Some(&sets), &eval_schedule)?;
        let row = Gen2Row {
            left_out: m,
            train_cfg,
            eval_cfg: CellAccuracy::from_evaluations(&evals),
            random_train,
            random_eval: random_eval.clone(),
            scores: ScoreSummary::from_evaluations(&evals, m),
        };
        let trained = format!("|trained:{train}");
        table.push(
            Policy::Attention,
            &format!("{train}{trained}"),
            Some(sigma),
            sigma,
            &row.train_cfg,
        );
        table.push(
            Policy::Attention,
            &format!("{eval_schedule}{trained}"),
            Some(sigma),
            sigma,
            &row.eval_cfg,
        );
        table.push(Policy::Random, &train.to_string(), None, sigma, &row.random_train);

        // per-sample dump of the first seed
        let dump: Vec<Vec<String>> = evals[0]
            .masks
            .iter()
            .zip(&evals[0].alpha)
            .enumerate()
            .map(|(i, (mask, a))| vec![i.to_string(), mask.code(), fmt_f(a[0]), fmt_f(a[1]), fmt_f(a[2])])
            .collect();
        write_csv(&dir.join(format!("attention_scores_{m}.csv")), &SCORES_HEADER, &dump)?;
        out.push(row);
    }
    let mut rows = Vec::new();
    for r in &out {
        let cells = [&r.train_cfg, &r.eval_cfg, &r.random_train, &r.random_eval];
        for (name, idx) in Task::ALL
            .iter()
            .map(|t| (t.name(), Some(*t)))
            .chain(std::iter::once(("macro", None)))
        {
            let v = |c: &CellAccuracy| fmt_f(idx.map_or_else(|| c.macro_mean(), |t| c.task(t)));
            let mut row = vec![r.left_out.name().to_string(), name.to_string()];
            row.extend(cells.iter().map(|c| v(c)));
            row.push(r.eval_cfg.n.to_string());
            rows.push(row);
        }
    }
    write_csv(&dir.join("modality_gen_2.csv"), &GEN2_HEADER, &rows)?;
    let summary: Vec<Vec<String>> = out
        .iter()
        .map(|r| {
            let s = r.scores;
            vec![
                r.left_out.name().into(),
                fmt_f(s.left_clean),
                fmt_f(s.left_noised),
                fmt_f(s.trained_clean),
                fmt_f(s.trained_noised),
            ]
        })
        .collect();
    write_csv(
        &dir.join("attention_score_summary.csv"),
        &SCORE_SUMMARY_HEADER,
        &summary,
    )?;
    table.write(&dir.join("accuracy_modality_gen_2.csv"))?;
    run.save_manifest()?;
    Ok(out)
}

/// Result of one protocol, for one-line summaries.
#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    NoiseGrid(NoiseGrid),
    LeaveOutTask(Vec<LeaveOutRow>),
    ModalityGen1(Vec<Gen1Row>),
    ModalityGen2(Vec<Gen2Row>),
}

impl Outcome {
    pub fn summary(&self) -> String {
        match self {
            Outcome::NoiseGrid(g) => {
                let diag: Vec<String> = (0..g.sigmas.len())
                    .map(|i| format!("{}:{:.3}/{:.3}", g.sigmas[i], g.attention[i][i], g.random[i][i]))
                    .collect();
                format!("noise-grid diagonal attention/random {}", diag.join(" "))
            }
            Outcome::LeaveOutTask(rows) => {
                let fails: usize = rows.iter().map(|r| r.failures().len()).sum();
                format!(
                    "leave-out-task {} training tasks, {fails} left-out tasks not above random",
                    rows.len()
                )
            }
            Outcome::ModalityGen1(rows) => {
                let drops: Vec<String> = rows
                    .iter()
                    .map(|r| format!("{}:{:+.3}", r.designated, -r.drop()))
                    .collect();
                format!("modality-gen-1 macro change vs full {}", drops.join(" "))
            }
            Outcome::ModalityGen2(rows) => {
                let gains: Vec<String> = rows
                    .iter()
                    .map(|r| {
                        format!(
                            "{}:{:+.3}(scores {})",
                            r.left_out,
                            r.gain(),
                            if r.scores.holds(0.1) { "ok" } else { "off" }
                        )
                    })
                    .collect();
                format!("modality-gen-2 eval minus train {}", gains.join(" "))
            }
        }
    }
}

pub fn run_protocol(run: &mut Run, protocol: Protocol) -> Result<Outcome> {
    Ok(match protocol {
        Protocol::NoiseGrid => Outcome::NoiseGrid(noise_grid(run)?),
        Protocol::LeaveOutTask => Outcome::LeaveOutTask(leave_out_task(run)?),
        Protocol::ModalityGen1 => Outcome::ModalityGen1(modality_gen_1(run)?),
        Protocol::ModalityGen2 => Outcome::ModalityGen2(modality_gen_2(run)?),
    })
}
