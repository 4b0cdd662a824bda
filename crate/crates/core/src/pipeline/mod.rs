//! Three-stage protocol: workspace training, probe training and attention
//! training, with every artifact recorded in a run manifest.

pub mod config;
pub mod protocols;
pub mod report;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gwsel_autodiff::checkpoint::{self, atomic_write};
use gwsel_autodiff::{Graph, ParamSet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::Attention;
use crate::corruption::Schedule;
use crate::data::{build_datasets, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Evaluation, Frozen, Fusion, Policy};
use crate::gw::{Gw, PREFIX as GW_PREFIX};
use crate::modality::{Modality, Task};
use crate::probes::Probes;
use crate::seed::{self, stream};
use crate::train::{train_attention, train_gw, train_probes, GwLogRow};

pub use config::RunConfig;

pub const MANIFEST_FORMAT: &str = "gwsel-run";
/// Parameter count reported for the reference attention module.
pub const REFERENCE_ATTENTION_PARAMS: usize = 4_544;

/// Seeds for the pipeline's top-level streams.
mod streams {
    pub const DATA: u64 = 0x100;
    pub const STAGE1: u64 = 0x101;
    pub const STAGE2: u64 = 0x102;
    pub const STAGE3: u64 = 0x103;
    pub const EVAL: u64 = 0x104;
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub wall_clock_seconds: f64,
}

/// Hash of a frozen component before and after a stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsolationRecord {
    pub stage: String,
    pub component: String,
    pub before: String,
    pub after: String,
}

impl IsolationRecord {
    pub fn holds(&self) -> bool {
        self.before == self.after
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub artifact_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: String,
    pub dataset: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
    pub checkpoints: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, String>,
    pub param_counts: BTreeMap<String, usize>,
    pub isolation: Vec<IsolationRecord>,
}

impl Manifest {
    fn new(config: &RunConfig) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            artifact_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config.hash(),
            seed: config.seed,
            config: config.to_toml(),
            dataset: BTreeMap::new(),
            stages: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            metrics: BTreeMap::new(),
            param_counts: BTreeMap::new(),
            isolation: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Checks every recorded checkpoint and metrics file against its hash.
    pub fn verify(&self, out_dir: &Path) -> Result<()> {
        for (dir, files) in [("checkpoints", &self.checkpoints), ("metrics", &self.metrics)] {
            for (name, hash) in files {
                let p = out_dir.join(dir).join(name);
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                if &sha256_hex(&bytes) != hash {
                    return Err(Error::Invalid(format!("{}: hash differs from manifest", p.display())));
                }
            }
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes a CSV file atomically.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    atomic_write(path, &bytes)?;
    Ok(())
}

pub fn fmt_f(v: f64) -> String {
    format!("{v}")
}

pub const TRAIN_GW_HEADER: [&str; 7] = ["step", "lr", "L_tr", "L_dcy", "L_cycle", "L_contrast", "total"];
pub const TRAIN_LOSS_HEADER: [&str; 3] = ["step", "lr", "loss"];
pub const ACCURACY_HEADER: [&str; 7] = [
    "policy",
    "schedule",
    "train_sigma",
    "test_sigma",
    "task",
    "accuracy",
    "n",
];
pub const SCORES_HEADER: [&str; 5] = ["sample_id", "noised_mask", "alpha_attr", "alpha_image", "alpha_text"];

/// Per-task accuracies of one evaluation cell across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CellAccuracy {
    pub per_seed: Vec<[f64; 5]>,
    /// Samples evaluated, summed over seeds.
    pub n: usize,
}

impl CellAccuracy {
    pub fn from_evaluations(evals: &[Evaluation]) -> Self {
        Self {
            per_seed: evals.iter().map(Evaluation::accuracies).collect(),
            n: evals.iter().map(Evaluation::len).sum(),
        }
    }

    pub fn mean(&self) -> [f64; 5] {
        let k = self.per_seed.len() as f64;
        let mut out = [0.0; 5];
        for row in &self.per_seed {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v / k;
            }
        }
        out
    }

    pub fn task(&self, t: Task) -> f64 {
        self.mean()[t.index()]
    }

    pub fn macro_mean(&self) -> f64 {
        self.mean().iter().sum::<f64>() / 5.0
    }

    /// `(task, accuracy, n)` rows including a trailing `macro` row.
    pub fn rows(&self) -> Vec<(String, f64, usize)> {
        let total = self.n;
        let mut out: Vec<(String, f64, usize)> = Task::ALL
            .iter()
            .map(|t| (t.name().to_string(), self.task(*t), total))
            .collect();
        out.push(("macro".into(), self.macro_mean(), total));
        out
    }
}

/// Row set for an accuracy CSV.
#[derive(Default)]
pub struct AccuracyTable {
    rows: Vec<Vec<String>>,
}

impl AccuracyTable {
    pub fn push(
        &mut self,
        policy: Policy,
        schedule: &str,
        train_sigma: Option<f64>,
        test_sigma: f64,
        cell: &CellAccuracy,
    ) {
        for (task, acc, n) in cell.rows() {
            self.rows.push(vec![
                policy.name().into(),
                schedule.into(),
                train_sigma.map_or_else(|| "-".into(), fmt_f),
                fmt_f(test_sigma),
                task,
                fmt_f(acc),
                n.to_string(),
            ]);
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_csv(path, &ACCURACY_HEADER, &self.rows)
    }
}

/// Result of stage 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Summary {
    pub final_losses: Option<GwLogRow>,
    /// `(source, target, mse)` for single-modality translation on validation.
    pub validation: Vec<(Modality, Modality, f64)>,
}

impl Stage1Summary {
    pub fn translation(&self, from: Modality, to: Modality) -> Option<f64> {
        self.validation.iter().find(|r| r.0 == from && r.1 == to).map(|r| r.2)
    }
}

/// An output directory plus the config that owns it.
pub struct Run {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    manifest: Manifest,
    dataset: Option<Dataset>,
    gw: Option<ParamSet>,
    probes: Option<ParamSet>,
    attention_cache: HashMap<String, ParamSet>,
}

impl Run {
    /// Opens (or starts) the run in `out_dir`. An existing manifest must
    /// belong to the same config.
    pub fn open(config: RunConfig, out_dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let out_dir = out_dir.into();
        let mpath = out_dir.join("manifest.json");
        let manifest = if mpath.exists() {
            let m = Manifest::load(&mpath)?;
            if m.config_hash != config.hash() {
                return Err(Error::Config(format!(
                    "{} belongs to a different config (hash {}); use a fresh output directory",
                    out_dir.display(),
                    &m.config_hash[..12]
                )));
            }
            m
        } else {
            Manifest::new(&config)
        };
        Ok(Self {
            config,
            out_dir,
            manifest,
            dataset: None,
            gw: None,
            probes: None,
            attention_cache: HashMap::new(),
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn metrics_dir(&self) -> PathBuf {
        self.out_dir.join("metrics")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    fn data_seed(&self) -> u64 {
        seed::derive(self.config.seed, streams::DATA, 0)
    }

    /// Seed of the `k`-th stage-3 run of any cell.
    pub fn attention_seed(&self, k: usize) -> u64 {
        seed::derive(self.config.seed, streams::STAGE3, k as u64)
    }

    /// Evaluation seed paired with the `k`-th stage-3 run.
    pub fn eval_seed(&self, k: usize) -> u64 {
        seed::derive(self.config.seed, streams::EVAL, k as u64)
    }

    pub fn gw_model(&self) -> Gw {
        Gw::new(self.config.gw)
    }

    pub fn probe_model(&self) -> Probes {
        Probes::new(self.config.gw.d, self.config.probes.hidden)
    }

    pub fn attention_model(&self) -> Attention {
        Attention::new(self.config.gw.d, self.config.attention.h)
    }

    /// Writes the manifest after re-hashing every file under checkpoints/ and metrics/.
    pub fn save_manifest(&mut self) -> Result<()> {
        let (ckpt_dir, metrics_dir) = (self.checkpoint_dir(), self.metrics_dir());
        for (dir, map) in [
            (ckpt_dir, &mut self.manifest.checkpoints),
            (metrics_dir, &mut self.manifest.metrics),
        ] {
            map.clear();
            if !dir.exists() {
                continue;
            }
            let mut stack = vec![dir.clone()];
            while let Some(d) = stack.pop() {
                for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
                    let p = entry.map_err(|e| Error::io(&d, e))?.path();
                    if p.is_dir() {
                        stack.push(p);
                    } else if !p.file_name().is_some_and(|n| n.to_string_lossy().contains(".tmp")) {
                        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                        let rel = p
                            .strip_prefix(&dir)
                            .expect("under dir")
                            .to_string_lossy()
                            .replace('\\', "/");
                        map.insert(rel, sha256_hex(&bytes));
                    }
                }
            }
        }
        let gw = self.gw_model();
        let probes = self.probe_model();
        let att = self.attention_model();
        self.manifest.param_counts = BTreeMap::from([
            ("gw".to_string(), gw.param_count()),
            ("probes".to_string(), probes.param_count()),
            ("attention".to_string(), att.param_count()),
            ("attention_reference".to_string(), REFERENCE_ATTENTION_PARAMS),
        ]);
        let bytes = serde_json::to_vec_pretty(&self.manifest)?;
        atomic_write(&self.out_dir.join("manifest.json"), &bytes)?;
        Ok(())
    }

    fn record_stage(&mut self, name: &str, started: Instant) {
        self.manifest.stages.insert(
            name.to_string(),
            StageRecord {
                wall_clock_seconds: started.elapsed().as_secs_f64(),
            },
        );
    }

    fn record_isolation(&mut self, stage: &str, component: &str, before: String, after: String) -> Result<()> {
        let rec = IsolationRecord {
            stage: stage.into(),
            component: component.into(),
            before,
            after,
        };
        self.manifest
            .isolation
            .retain(|r| !(r.stage == rec.stage && r.component == rec.component));
        let holds = rec.holds();
        self.manifest.isolation.push(rec);
        if !holds {
            return Err(Error::Contract(format!("{component} changed during {stage}")));
        }
        Ok(())
    }

    /// Loads the dataset, generating it on first use.
    pub fn dataset(&mut self) -> Result<&Dataset> {
        if self.dataset.is_none() {
            let dir = self.data_dir();
            let seed = self.data_seed();
            let existing = if dir.join("manifest.json").exists() {
                Dataset::load(&dir)
                    .ok()
                    .filter(|d| d.seed == seed && d.config == self.config.data)
            } else {
                None
            };
            let ds = match existing {
                Some(ds) => ds,
                None => {
                    let t = Instant::now();
                    eprintln!("generating dataset in {}", dir.display());
                    let ds = build_datasets(seed, &self.config.data)?;
                    let m = ds.save(&dir)?;
                    self.manifest.dataset = m.split_hashes.clone();
                    self.record_stage("gen-data", t);
                    ds
                }
            };
            self.dataset = Some(ds);
        }
        Ok(self.dataset.as_ref().expect("just set"))
    }

    pub fn gen_data(&mut self) -> Result<()> {
        self.dataset()?;
        self.save_manifest()
    }

    fn gw_path(&self) -> PathBuf {
        self.checkpoint_dir().join("gw.ckpt")
    }

    fn probes_path(&self) -> PathBuf {
        self.checkpoint_dir().join("probes.ckpt")
    }

    /// Stage 1.
    pub fn train_gw(&mut self) -> Result<Stage1Summary> {
        let started = Instant::now();
        let seed = seed::derive(self.config.seed, streams::STAGE1, 0);
        let gw = self.gw_model();
        let mut params = gw.init(&mut seed::rng(seed, stream::GW_INIT, 0))?;
        let (weights, step_cfg) = (self.config.loss, self.config.stage1);
        let rep = self.dataset()?.split(Split::Representation).clone();
        eprintln!("stage 1: {} steps, batch {}", step_cfg.steps, step_cfg.batch_size);
        let every = (step_cfg.steps / 10).max(1);
        let result = train_gw(&gw, &mut params, &rep, &weights, &step_cfg, seed, |row| {
            if row.step % every == 0 {
                eprintln!(
                    "  step {:>6}  lr {:.2e}  total {:.4}  tr {:.4}  dcy {:.4}  cycle {:.4}  contrast {:.4}",
                    row.step,
                    row.lr,
                    row.losses.total,
                    row.losses.tr,
                    row.losses.dcy,
                    row.losses.cycle,
                    row.losses.contrast
                );
            }
        });
        let log = match result {
            Ok(log) => log,
            Err(e @ Error::Diverged { .. }) => {
                let step = match &e {
                    Error::Diverged { step, .. } => *step,
                    _ => 0,
                };
                let p = self.checkpoint_dir().join("gw.last-good.ckpt");
                checkpoint::save(&p, &params, seed, step as u64)?;
                eprintln!("saved last good parameters to {}", p.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let rows: Vec<Vec<String>> = log
            .iter()
            .map(|r| {
                let l = &r.losses;
                vec![
                    r.step.to_string(),
                    fmt_f(r.lr),
                    fmt_f(l.tr),
                    fmt_f(l.dcy),
                    fmt_f(l.cycle),
                    fmt_f(l.contrast),
                    fmt_f(l.total),
                ]
            })
            .collect();
        write_csv(&self.metrics_dir().join("train_gw.csv"), &TRAIN_GW_HEADER, &rows)?;
        checkpoint::save(&self.gw_path(), &params, seed, step_cfg.steps as u64)?;

        let val = self.dataset()?.split(Split::Validation).clone();
        let validation = if val.is_empty() {
            Vec::new()
        } else {
            translation_matrix(&gw, &params, &val)?
        };
        let vrows: Vec<Vec<String>> = validation
            .iter()
            .map(|(a, b, v)| vec![a.name().into(), b.name().into(), fmt_f(*v)])
            .collect();
        write_csv(
            &self.metrics_dir().join("validation_gw.csv"),
            &["source", "target", "mse"],
            &vrows,
        )?;
        self.gw = Some(params);
        self.record_stage("train-gw", started);
        self.save_manifest()?;
        Ok(Stage1Summary {
            final_losses: log.last().copied(),
            validation,
        })
    }

    pub fn gw_params(&mut self) -> Result<&ParamSet> {
        if self.gw.is_none() {
            let p = self.gw_path();
            if !p.exists() {
                return Err(Error::Missing(format!("{} (run train-gw first)", p.display())));
            }
            self.gw = Some(checkpoint::load(&p)?.1);
        }
        Ok(self.gw.as_ref().expect("just set"))
    }

    pub fn probe_params(&mut self) -> Result<&ParamSet> {
        if self.probes.is_none() {
            let p = self.probes_path();
            if !p.exists() {
                return Err(Error::Missing(format!("{} (run train-probes first)", p.display())));
            }
            self.probes = Some(checkpoint::load(&p)?.1);
        }
        Ok(self.probes.as_ref().expect("just set"))
    }

    /// Stage 2. Returns the clean test accuracy of every probe.
    pub fn train_probes(&mut self) -> Result<[f64; 5]> {
        let started = Instant::now();
        let seed = seed::derive(self.config.seed, streams::STAGE2, 0);
        let gw_params = self.gw_params()?.clone();
        let before = gw_params.checksum();
        let (gw, probes) = (self.gw_model(), self.probe_model());
        let cls = self.dataset()?.split(Split::Classification).clone();
        let cfg = self.config.probes.train();
        eprintln!("stage 2: {} epochs over {} samples", cfg.epochs, cls.len());
        let (params, log) = train_probes(&gw, &gw_params, &probes, &cls, &cfg, seed)?;
        self.record_isolation("train-probes", "gw", before, gw_params.checksum())?;
        let rows: Vec<Vec<String>> = log
            .iter()
            .map(|r| vec![r.step.to_string(), fmt_f(r.lr), fmt_f(r.loss)])
            .collect();
        write_csv(&self.metrics_dir().join("train_probes.csv"), &TRAIN_LOSS_HEADER, &rows)?;
        checkpoint::save(&self.probes_path(), &params, seed, log.len() as u64)?;
        self.probes = Some(params);

        let clean = Schedule::new(crate::corruption::ScheduleKind::Clean, 0.0);
        let cell = self.evaluate_cell(Policy::Random, None, &clean)?;
        let mut table = AccuracyTable::default();
        table.push(Policy::Random, &clean.to_string(), None, 0.0, &cell);
        table.write(&self.metrics_dir().join("accuracy_probes.csv"))?;
        self.record_stage("train-probes", started);
        self.save_manifest()?;
        Ok(cell.mean())
    }

    /// Stage 3 for one cell and seed, cached per run.
    pub fn attention_params(&mut self, schedule: &Schedule, tasks: &[Task], k: usize) -> Result<ParamSet> {
        let tag = cell_tag(schedule, tasks);
        let key = format!("{tag}-s{k}");
        if let Some(p) = self.attention_cache.get(&key) {
            return Ok(p.clone());
        }
        let path = self.checkpoint_dir().join("attention").join(format!("{key}.ckpt"));
        let rel = format!("attention/{key}.ckpt");
        if path.exists() && self.manifest.checkpoints.contains_key(&rel) {
            let params = checkpoint::load(&path)?.1;
            self.attention_cache.insert(key, params.clone());
            return Ok(params);
        }

        let started = Instant::now();
        let gw_params = self.gw_params()?.clone();
        let probe_params = self.probe_params()?.clone();
        let (gw, probes, att) = (self.gw_model(), self.probe_model(), self.attention_model());
        let frozen = Frozen {
            gw: &gw,
            gw_params: &gw_params,
            probes: &probes,
            probe_params: &probe_params,
        };
        let (gw_before, probes_before) = (gw_params.checksum(), probe_params.checksum());
        let cls = self.dataset()?.split(Split::Classification).clone();
        let seed = self.attention_seed(k);
        let init = att.init(&mut seed::rng(seed, stream::ATTENTION_INIT, 0))?;
        eprintln!("stage 3: {key}");
        let (params, log) = train_attention(
            &frozen,
            &att,
            schedule,
            tasks,
            &cls,
            &self.config.attention.train(),
            seed,
        )?;
        let stage = format!("train-attention/{key}");
        self.record_isolation(&stage, "gw", gw_before, gw_params.checksum())?;
        self.record_isolation(&stage, "probes", probes_before, probe_params.checksum())?;
        if params
            .names()
            .any(|n| n.starts_with(GW_PREFIX) || n.starts_with(crate::probes::PREFIX))
        {
            return Err(Error::Contract(
                "attention parameter set holds frozen components".into(),
            ));
        }
        if init.checksum() == params.checksum() && !log.is_empty() {
            eprintln!("  warning: attention parameters did not move");
        }
        let rows: Vec<Vec<String>> = log
            .iter()
            .map(|r| vec![r.step.to_string(), fmt_f(r.lr), fmt_f(r.loss)])
            .collect();
        write_csv(
            &self.metrics_dir().join("attention").join(format!("train_{key}.csv")),
            &TRAIN_LOSS_HEADER,
            &rows,
        )?;
        checkpoint::save(&path, &params, seed, log.len() as u64)?;
        self.manifest.checkpoints.insert(rel, String::new());
        self.record_stage(&stage, started);
        self.attention_cache.insert(key, params.clone());
        Ok(params)
    }

    /// All seeds of a stage-3 cell.
    pub fn attention_seeds(&mut self, schedule: &Schedule, tasks: &[Task]) -> Result<Vec<ParamSet>> {
        (0..self.config.attention.seeds)
            .map(|k| self.attention_params(schedule, tasks, k))
            .collect()
    }

    /// Evaluations for every seed; `attention` supplies one parameter set per seed.
    pub fn evaluations(
        &mut self,
        policy: Policy,
        attention: Option<&[ParamSet]>,
        schedule: &Schedule,
    ) -> Result<Vec<Evaluation>> {
        let gw_params = self.gw_params()?.clone();
        let probe_params = self.probe_params()?.clone();
        let (gw, probes, att) = (self.gw_model(), self.probe_model(), self.attention_model());
        let frozen = Frozen {
            gw: &gw,
            gw_params: &gw_params,
            probes: &probes,
            probe_params: &probe_params,
        };
        let seeds: Vec<u64> = (0..self.config.attention.seeds).map(|k| self.eval_seed(k)).collect();
        let test = self.dataset()?.split(Split::Test).clone();
        let mut out = Vec::with_capacity(seeds.len());
        for (k, &s) in seeds.iter().enumerate() {
            let fusion = match policy {
                Policy::Random => Fusion::Random { tau: gw.config.tau },
                Policy::Uniform => Fusion::Uniform,
                Policy::Attention => {
                    let sets =
                        attention.ok_or_else(|| Error::Invalid("attention policy needs trained parameters".into()))?;
                    Fusion::Attention {
                        attention: &att,
                        params: &sets[k],
                    }
                }
            };
            out.push(evaluate(&frozen, &fusion, schedule, &test, s)?);
        }
        Ok(out)
    }

    pub fn evaluate_cell(
        &mut self,
        policy: Policy,
        attention: Option<&[ParamSet]>,
        schedule: &Schedule,
    ) -> Result<CellAccuracy> {
        Ok(CellAccuracy::from_evaluations(
            &self.evaluations(policy, attention, schedule)?,
        ))
    }

    /// Trains stage 3 on the configured schedule and task set.
    pub fn train_attention(&mut self) -> Result<CellAccuracy> {
        let schedule = self.config.schedule;
        let tasks = self.config.attention.tasks.clone();
        let sets = self.attention_seeds(&schedule, &tasks)?;
        let cell = self.evaluate_cell(Policy::Attention, Some(&sets), &schedule)?;
        let mut table = AccuracyTable::default();
        table.push(
            Policy::Attention,
            &schedule.to_string(),
            Some(schedule.sigma),
            schedule.sigma,
            &cell,
        );
        table.write(&self.metrics_dir().join("accuracy_attention.csv"))?;
        self.save_manifest()?;
        Ok(cell)
    }

    /// Evaluates `policy` on the configured schedule.
    pub fn eval(&mut self, policy: Policy) -> Result<CellAccuracy> {
        let schedule = self.config.schedule;
        let sets = match policy {
            Policy::Attention => Some(self.attention_seeds(&schedule, &self.config.attention.tasks.clone())?),
            _ => None,
        };
        let cell = self.evaluate_cell(policy, sets.as_deref(), &schedule)?;
        let train_sigma = (policy == Policy::Attention).then_some(schedule.sigma);
        let mut table = AccuracyTable::default();
        table.push(policy, &schedule.to_string(), train_sigma, schedule.sigma, &cell);
        table.write(&self.metrics_dir().join(format!("accuracy_eval_{policy}.csv")))?;
        self.save_manifest()?;
        Ok(cell)
    }
}

/// File-name tag of a stage-3 cell.
pub fn cell_tag(schedule: &Schedule, tasks: &[Task]) -> String {
    let tasks = if tasks == Task::ALL {
        "all".to_string()
    } else {
        tasks.iter().map(|t| t.name()).collect::<Vec<_>>().join("+")
    };
    format!(
        "{}-{tasks}-sigma{}",
        schedule.to_string().replace(':', "-"),
        schedule.sigma
    )
}

/// Single-source translation MSE `x_target` vs `D_target(tanh(E_source(x_source)))`.
pub fn translation_matrix(
    gw: &Gw,
    params: &ParamSet,
    split: &crate::data::SplitData,
) -> Result<Vec<(Modality, Modality, f64)>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let mut out = Vec::new();
    for src in Modality::ALL {
        let x = g.constant(split.latent(src).clone());
        let alpha = g.constant(crate::gw::uniform_weights(split.len(), 1));
        let gi = gw.encode(&mut g, &bound, src, x)?;
        let z = crate::gw::fuse(&mut g, &[gi], alpha)?;
        for dst in Modality::ALL {
            if dst == src {
                continue;
            }
            let pred = gw.decode(&mut g, &bound, dst, z)?;
            let target = g.constant(split.latent(dst).clone());
            let mse = g.mse(pred, target)?;
            out.push((src, dst, g.scalar(mse)?));
        }
    }
    Ok(out)
}
