use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The three input channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Attr,
    Image,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Attr, Modality::Image, Modality::Text];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Backbone latent width.
    pub fn dim(self) -> usize {
        match self {
            Modality::Attr => 10,
            Modality::Image => 8,
            Modality::Text => 64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Attr => "attr",
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown modality `{s}`")))
    }
}

/// The five binned classification tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Category,
    Color,
    Rotation,
    Position,
    Size,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Category, Task::Color, Task::Rotation, Task::Position, Task::Size];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn classes(self) -> usize {
        match self {
            Task::Category => 3,
            Task::Color => 9,
            Task::Rotation | Task::Position | Task::Size => 4,
        }
    }

    pub fn chance(self) -> f64 {
        1.0 / self.classes() as f64
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Category => "category",
            Task::Color => "color",
            Task::Rotation => "rotation",
            Task::Position => "position",
            Task::Size => "size",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown task `{s}`")))
    }
}

/// Mean of the per-task uniform-guessing accuracies.
pub fn chance_macro() -> f64 {
    Task::ALL.iter().map(|t| t.chance()).sum::<f64>() / Task::ALL.len() as f64
}
