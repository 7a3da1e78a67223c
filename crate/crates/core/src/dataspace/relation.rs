use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::VsdError;

/// The closed inventory of nine spatial relations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialRelation {
    On,
    In,
    NextTo,
    Under,
    Above,
    Behind,
    InFrontOf,
    ToTheLeftOf,
    ToTheRightOf,
}

impl SpatialRelation {
    pub const COUNT: usize = 9;

    pub const ALL: [SpatialRelation; 9] = [
        SpatialRelation::On,
        SpatialRelation::In,
        SpatialRelation::NextTo,
        SpatialRelation::Under,
        SpatialRelation::Above,
        SpatialRelation::Behind,
        SpatialRelation::InFrontOf,
        SpatialRelation::ToTheLeftOf,
        SpatialRelation::ToTheRightOf,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Snake-case identifier used in files and configs.
    pub fn name(self) -> &'static str {
        match self {
            SpatialRelation::On => "on",
            SpatialRelation::In => "in",
            SpatialRelation::NextTo => "next_to",
            SpatialRelation::Under => "under",
            SpatialRelation::Above => "above",
            SpatialRelation::Behind => "behind",
            SpatialRelation::InFrontOf => "in_front_of",
            SpatialRelation::ToTheLeftOf => "to_the_left_of",
            SpatialRelation::ToTheRightOf => "to_the_right_of",
        }
    }

    /// Canonical textual expression, e.g. "to the left of".
    pub fn phrase(self) -> &'static str {
        match self {
            SpatialRelation::On => "on",
            SpatialRelation::In => "in",
            SpatialRelation::NextTo => "next to",
            SpatialRelation::Under => "under",
            SpatialRelation::Above => "above",
            SpatialRelation::Behind => "behind",
            SpatialRelation::InFrontOf => "in front of",
            SpatialRelation::ToTheLeftOf => "to the left of",
            SpatialRelation::ToTheRightOf => "to the right of",
        }
    }

    pub fn phrase_tokens(self) -> Vec<&'static str> {
        self.phrase().split(' ').collect()
    }

    pub fn from_phrase(phrase: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.phrase() == phrase)
    }

    /// Alternative wordings accepted in generated descriptions.
    pub fn paraphrases(self) -> &'static [&'static str] {
        match self {
            SpatialRelation::On => &["on top of"],
            SpatialRelation::In => &["inside"],
            SpatialRelation::NextTo => &["beside"],
            SpatialRelation::Under => &["below"],
            SpatialRelation::Above => &["over"],
            SpatialRelation::Behind => &[],
            SpatialRelation::InFrontOf => &[],
            SpatialRelation::ToTheLeftOf => &["on the left of"],
            SpatialRelation::ToTheRightOf => &["on the right of"],
        }
    }

    /// The relation obtained by swapping the two objects, for the pairs
    /// where that is well defined.
    pub fn inverse(self) -> Option<Self> {
        match self {
            SpatialRelation::Under => Some(SpatialRelation::Above),
            SpatialRelation::Above => Some(SpatialRelation::Under),
            SpatialRelation::Behind => Some(SpatialRelation::InFrontOf),
            SpatialRelation::InFrontOf => Some(SpatialRelation::Behind),
            SpatialRelation::ToTheLeftOf => Some(SpatialRelation::ToTheRightOf),
            SpatialRelation::ToTheRightOf => Some(SpatialRelation::ToTheLeftOf),
            _ => None,
        }
    }
}

impl fmt::Display for SpatialRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SpatialRelation {
    type Err = VsdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| VsdError::InvalidInput(format!("unknown spatial relation `{s}`")))
    }
}
