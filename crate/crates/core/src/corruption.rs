//! Per-sample corruption schedules applied to backbone latents.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Nothing noised.
    Clean,
    /// One clean modality, the other two noised.
    StandardPair,
    /// Same masks as `StandardPair`; attention trains on a single task.
    LeaveOutTask,
    /// The designated modality is always among the noised.
    ModalityGen1,
    /// Designated modality absent; one of the other two noised.
    ModalityGen2Train,
    /// All present; exactly one noised.
    ModalityGen2Eval,
    /// Every modality noised.
    AllNoised,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Clean => "clean",
            ScheduleKind::StandardPair => "standard-pair",
            ScheduleKind::LeaveOutTask => "leave-out-task",
            ScheduleKind::ModalityGen1 => "modality-gen-1",
            ScheduleKind::ModalityGen2Train => "modality-gen-2-train",
            ScheduleKind::ModalityGen2Eval => "modality-gen-2-eval",
            ScheduleKind::AllNoised => "all-noised",
        }
    }

    fn needs_designated(self) -> bool {
        matches!(self, ScheduleKind::ModalityGen1 | ScheduleKind::ModalityGen2Train)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub designated: Option<Modality>,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, sigma: f64) -> Self {
        Self {
            kind,
            sigma,
            designated: None,
        }
    }

    pub fn with_designated(kind: ScheduleKind, sigma: f64, m: Modality) -> Self {
        Self {
            kind,
            sigma,
            designated: Some(m),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Invalid(format!(
                "noise sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if self.kind.needs_designated() && self.designated.is_none() {
            return Err(Error::Invalid(format!(
                "{} needs a designated modality",
                self.kind.name()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Schedule {
    /// `kind` or `kind:modality`; sigma is reported separately.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.designated.filter(|_| self.kind.needs_designated()) {
            Some(m) => write!(f, "{}:{m}", self.kind.name()),
            None => f.write_str(self.kind.name()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CorruptionMask {
    pub present: [bool; 3],
    pub noised: [bool; 3],
}

impl CorruptionMask {
    pub fn clean() -> Self {
        Self {
            present: [true; 3],
            noised: [false; 3],
        }
    }

    pub fn present_modalities(&self) -> Vec<Modality> {
        Modality::ALL.into_iter().filter(|m| self.present[m.index()]).collect()
    }

    pub fn is_noised(&self, m: Modality) -> bool {
        self.noised[m.index()]
    }

    pub fn is_clean(&self, m: Modality) -> bool {
        self.present[m.index()] && !self.noised[m.index()]
    }

    /// `'n'`/`'c'`/`'-'` per modality, e.g. `ncn`.
    pub fn code(&self) -> String {
        (0..3)
            .map(|i| match (self.present[i], self.noised[i]) {
                (false, _) => '-',
                (true, true) => 'n',
                (true, false) => 'c',
            })
            .collect()
    }
}

fn pick_other<R: Rng + ?Sized>(exclude: Modality, rng: &mut R) -> Modality {
    let others: Vec<Modality> = Modality::ALL.into_iter().filter(|&m| m != exclude).collect();
    others[rng.random_range(0..others.len())]
}

pub fn draw_mask<R: Rng + ?Sized>(schedule: &Schedule, rng: &mut R) -> CorruptionMask {
    let mut mask = CorruptionMask::clean();
    match schedule.kind {
        ScheduleKind::Clean => {}
        ScheduleKind::StandardPair | ScheduleKind::LeaveOutTask => {
            mask.noised = [true; 3];
            mask.noised[rng.random_range(0..3)] = false;
        }
        ScheduleKind::ModalityGen1 => {
            let d = schedule.designated.expect("validated schedule");
            mask.noised = [true; 3];
            mask.noised[pick_other(d, rng).index()] = false;
        }
        ScheduleKind::ModalityGen2Train => {
            let d = schedule.designated.expect("validated schedule");
            mask.present[d.index()] = false;
            mask.noised[pick_other(d, rng).index()] = true;
        }
        ScheduleKind::ModalityGen2Eval => {
            mask.noised[rng.random_range(0..3)] = true;
        }
        ScheduleKind::AllNoised => mask.noised = [true; 3],
    }
    mask
}

/// Adds `N(0, sigma^2)` to every coordinate of the noised, present modalities.
///
/// `rows[m]` is the latent row of modality `m` for one sample. With
/// `sigma == 0` nothing is drawn and the rows are left untouched.
pub fn apply<R: Rng + ?Sized>(mask: &CorruptionMask, rows: &mut [&mut [f64]], sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    for m in Modality::ALL {
        if mask.present[m.index()] && mask.noised[m.index()] {
            for v in rows[m.index()].iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v += sigma * e;
            }
        }
    }
}

/// Train/test noise levels for the grid experiments.
pub fn sigma_grid() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 2.0, 5.0, 10.0]
}
