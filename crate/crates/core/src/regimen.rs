//! Drug-combination regimens, current-regimen groups, and treatment options.
//!
//! A regimen is fully described by three flags (metformin, insulin, one other
//! oral hypoglycemic), so all eight combinations are representable and the
//! label is a pure function of the flags.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regimen {
    NoMedication,
    OtherHypoMono,
    MetforminMono,
    MetforminPlusOther,
    InsulinMono,
    InsulinPlusOther,
    MetforminPlusInsulin,
    MetforminInsulinOther,
}

impl Regimen {
    pub const ALL: [Regimen; 8] = [
        Regimen::NoMedication,
        Regimen::OtherHypoMono,
        Regimen::MetforminMono,
        Regimen::MetforminPlusOther,
        Regimen::InsulinMono,
        Regimen::InsulinPlusOther,
        Regimen::MetforminPlusInsulin,
        Regimen::MetforminInsulinOther,
    ];

    pub fn from_flags(metformin: bool, insulin: bool, other: bool) -> Regimen {
        match (metformin, insulin, other) {
            (false, false, false) => Regimen::NoMedication,
            (false, false, true) => Regimen::OtherHypoMono,
            (true, false, false) => Regimen::MetforminMono,
            (true, false, true) => Regimen::MetforminPlusOther,
            (false, true, false) => Regimen::InsulinMono,
            (false, true, true) => Regimen::InsulinPlusOther,
            (true, true, false) => Regimen::MetforminPlusInsulin,
            (true, true, true) => Regimen::MetforminInsulinOther,
        }
    }

    /// `(metformin, insulin, other_hypoglycemic)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Regimen::NoMedication => (false, false, false),
            Regimen::OtherHypoMono => (false, false, true),
            Regimen::MetforminMono => (true, false, false),
            Regimen::MetforminPlusOther => (true, false, true),
            Regimen::InsulinMono => (false, true, false),
            Regimen::InsulinPlusOther => (false, true, true),
            Regimen::MetforminPlusInsulin => (true, true, false),
            Regimen::MetforminInsulinOther => (true, true, true),
        }
    }

    pub fn has_insulin(self) -> bool {
        self.flags().1
    }

    pub fn drug_count(self) -> usize {
        let (m, i, o) = self.flags();
        m as usize + i as usize + o as usize
    }

    /// Aggressiveness rank: insulin-containing triple (5) > insulin-containing
    /// double (4) > insulin mono (3) > metformin-containing double (2) >
    /// monotherapy (1) > none (0).
    pub fn aggressiveness(self) -> u8 {
        match self {
            Regimen::MetforminInsulinOther => 5,
            Regimen::InsulinPlusOther | Regimen::MetforminPlusInsulin => 4,
            Regimen::InsulinMono => 3,
            Regimen::MetforminPlusOther => 2,
            Regimen::MetforminMono | Regimen::OtherHypoMono => 1,
            Regimen::NoMedication => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regimen::NoMedication => "no_medication",
            Regimen::OtherHypoMono => "other_hypo_mono",
            Regimen::MetforminMono => "metformin_mono",
            Regimen::MetforminPlusOther => "metformin_plus_other",
            Regimen::InsulinMono => "insulin_mono",
            Regimen::InsulinPlusOther => "insulin_plus_other",
            Regimen::MetforminPlusInsulin => "metformin_plus_insulin",
            Regimen::MetforminInsulinOther => "metformin_insulin_other",
        }
    }

    pub fn group(self) -> Option<Group> {
        Group::from_current(self)
    }
}

impl fmt::Display for Regimen {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown label `{0}`")]
pub struct UnknownLabel(pub String);

impl FromStr for Regimen {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Regimen::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}

/// The four current-regimen groups a pipeline can serve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    NoMedication,
    OtherHypoMono,
    MetforminMono,
    MetforminPlusOther,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::NoMedication,
        Group::OtherHypoMono,
        Group::MetforminMono,
        Group::MetforminPlusOther,
    ];

    pub fn from_current(current: Regimen) -> Option<Group> {
        match current {
            Regimen::NoMedication => Some(Group::NoMedication),
            Regimen::OtherHypoMono => Some(Group::OtherHypoMono),
            Regimen::MetforminMono => Some(Group::MetforminMono),
            Regimen::MetforminPlusOther => Some(Group::MetforminPlusOther),
            _ => None,
        }
    }

    pub fn current(self) -> Regimen {
        match self {
            Group::NoMedication => Regimen::NoMedication,
            Group::OtherHypoMono => Regimen::OtherHypoMono,
            Group::MetforminMono => Regimen::MetforminMono,
            Group::MetforminPlusOther => Regimen::MetforminPlusOther,
        }
    }

    /// Regimens a pipeline for this group may recommend, the stay option first.
    pub fn options(self) -> &'static [Regimen] {
        match self {
            Group::NoMedication => &[
                Regimen::NoMedication,
                Regimen::InsulinMono,
                Regimen::MetforminMono,
                Regimen::OtherHypoMono,
            ],
            Group::OtherHypoMono => &[
                Regimen::OtherHypoMono,
                Regimen::InsulinPlusOther,
                Regimen::MetforminPlusOther,
            ],
            Group::MetforminMono => &[
                Regimen::MetforminMono,
                Regimen::MetforminPlusInsulin,
                Regimen::MetforminPlusOther,
            ],
            Group::MetforminPlusOther => {
                &[Regimen::MetforminPlusOther, Regimen::MetforminInsulinOther]
            }
        }
    }

    pub fn admits(self, option: Regimen) -> bool {
        self.options().contains(&option)
    }

    pub fn as_str(self) -> &'static str {
        self.current().as_str()
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}

/// An action a policy tree leaf can carry: a concrete regimen, or the
/// first-line router outcome that a downstream tree resolves into metformin
/// or other-hypoglycemic monotherapy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TreatmentOption {
    Regimen(Regimen),
    FirstLine,
}

impl TreatmentOption {
    pub fn aggressiveness(self) -> u8 {
        match self {
            TreatmentOption::Regimen(r) => r.aggressiveness(),
            TreatmentOption::FirstLine => 1,
        }
    }

    /// Whether a prescribed regimen falls in this option's arm.
    pub fn covers(self, prescribed: Regimen) -> bool {
        match self {
            TreatmentOption::Regimen(r) => r == prescribed,
            TreatmentOption::FirstLine => {
                matches!(prescribed, Regimen::MetforminMono | Regimen::OtherHypoMono)
            }
        }
    }

    pub fn regimens(self) -> Vec<Regimen> {
        match self {
            TreatmentOption::Regimen(r) => vec![r],
            TreatmentOption::FirstLine => vec![Regimen::MetforminMono, Regimen::OtherHypoMono],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TreatmentOption::Regimen(r) => r.as_str(),
            TreatmentOption::FirstLine => "first_line",
        }
    }
}

impl From<Regimen> for TreatmentOption {
    fn from(r: Regimen) -> Self {
        TreatmentOption::Regimen(r)
    }
}

impl fmt::Display for TreatmentOption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TreatmentOption {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "first_line" {
            return Ok(TreatmentOption::FirstLine);
        }
        s.parse::<Regimen>().map(TreatmentOption::Regimen)
    }
}

impl Serialize for TreatmentOption {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for TreatmentOption {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
