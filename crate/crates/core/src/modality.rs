use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Imaging modality. The declaration order is the canonical order used when
/// a modality set must be sorted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visible,
    Lwir,
    Depth,
    Pressure,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Visible, Modality::Lwir, Modality::Depth, Modality::Pressure];

    /// Directory and config name.
    pub fn name(self) -> &'static str {
        match self {
            Modality::Visible => "visible",
            Modality::Lwir => "lwir",
            Modality::Depth => "depth",
            Modality::Pressure => "pressure",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Modality::Visible => 3,
            _ => 1,
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

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown modality `{s}`")))
    }
}

/// Bedding condition of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cover {
    Uncover,
    Cover1,
    Cover2,
}

impl Cover {
    pub const ALL: [Cover; 3] = [Cover::Uncover, Cover::Cover1, Cover::Cover2];

    pub fn name(self) -> &'static str {
        match self {
            Cover::Uncover => "uncover",
            Cover::Cover1 => "cover1",
            Cover::Cover2 => "cover2",
        }
    }
}

impl fmt::Display for Cover {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Cover {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Cover::ALL
            .into_iter()
            .find(|c| c.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown cover condition `{s}`")))
    }
}
