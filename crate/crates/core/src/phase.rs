//! Contrast phases of a dynamic contrast-enhanced CT study and subsets of them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CT contrast phase. The derived ordering (NC < AP < VP < DP) is the
/// canonical iteration order everywhere in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    /// Non-contrast.
    NC,
    /// Arterial.
    AP,
    /// Venous.
    VP,
    /// Delay.
    DP,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::NC, Phase::AP, Phase::VP, Phase::DP];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Phase> {
        Phase::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::NC => "NC",
            Phase::AP => "AP",
            Phase::VP => "VP",
            Phase::DP => "DP",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "NC" => Ok(Phase::NC),
            "AP" => Ok(Phase::AP),
            "VP" => Ok(Phase::VP),
            "DP" => Ok(Phase::DP),
            _ => Err(Error::InvalidPhaseSelector(s.to_string())),
        }
    }
}

/// A set of phases stored as a 4-bit mask (bit i = `Phase::ALL[i]`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub const EMPTY: PhaseSet = PhaseSet(0);
    pub const FULL: PhaseSet = PhaseSet(0b1111);

    pub fn from_bits(bits: u8) -> Option<PhaseSet> {
        (bits <= 0b1111).then_some(PhaseSet(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn single(p: Phase) -> PhaseSet {
        PhaseSet(1 << p.index())
    }

    pub fn insert(&mut self, p: Phase) {
        self.0 |= 1 << p.index();
    }

    pub fn contains(self, p: Phase) -> bool {
        self.0 & (1 << p.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_subset(self, other: PhaseSet) -> bool {
        self.0 & !other.0 == 0
    }

    /// Phases in canonical order.
    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |p| self.contains(*p))
    }

    /// The 15 nonempty subsets, ordered by bitmask.
    pub fn all_nonempty() -> impl Iterator<Item = PhaseSet> {
        (1u8..=15).map(PhaseSet)
    }
}

impl FromIterator<Phase> for PhaseSet {
    fn from_iter<I: IntoIterator<Item = Phase>>(iter: I) -> Self {
        let mut s = PhaseSet::EMPTY;
        for p in iter {
            s.insert(p);
        }
        s
    }
}

impl fmt::Display for PhaseSet {
    /// `NC+VP` style; `+` keeps the label CSV-safe.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(Phase::as_str).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for PhaseSet {
    type Err = Error;

    /// Accepts comma- or plus-separated phase names, e.g. `"NC,VP"` or `"NC+AP+VP+DP"`.
    /// `"DCE"` / `"ALL"` select all four phases.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("dce") || t.eq_ignore_ascii_case("all") {
            return Ok(PhaseSet::FULL);
        }
        let mut set = PhaseSet::EMPTY;
        for part in t.split([',', '+']) {
            let phase: Phase = part
                .parse()
                .map_err(|_| Error::InvalidPhaseSelector(s.to_string()))?;
            if set.contains(phase) {
                return Err(Error::InvalidPhaseSelector(s.to_string()));
            }
            set.insert(phase);
        }
        if set.is_empty() {
            return Err(Error::InvalidPhaseSelector(s.to_string()));
        }
        Ok(set)
    }
}

impl Serialize for PhaseSet {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PhaseSet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
