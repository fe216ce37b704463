//! Target speaker selection.
//!
//! A target is drawn independently for every utterance from a stream keyed by
//! `(seed, utterance_id)`, so the draw for one utterance does not depend on
//! which utterances were processed before it.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Gender;
use crate::error::{Error, Result};
use crate::seed::keyed_rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpeaker {
    pub speaker_id: String,
    pub gender: Gender,
}

/// Strategy names as written in experiment configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Random,
    SameGender,
    CrossGender,
    /// Disjoint gender-balanced groups; group 1 serves female sources.
    Disjoint1,
    /// Same split with the groups swapped.
    Disjoint2,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Random,
        StrategyKind::SameGender,
        StrategyKind::CrossGender,
        StrategyKind::Disjoint1,
        StrategyKind::Disjoint2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Random => "random",
            StrategyKind::SameGender => "same_gender",
            StrategyKind::CrossGender => "cross_gender",
            StrategyKind::Disjoint1 => "disjoint_1",
            StrategyKind::Disjoint2 => "disjoint_2",
        }
    }

    /// Suffix appended to a configuration identifier, e.g. `(0-8)_r`.
    pub fn suffix(self) -> &'static str {
        match self {
            StrategyKind::Random => "_r",
            StrategyKind::SameGender => "",
            StrategyKind::CrossGender => "_c",
            StrategyKind::Disjoint1 => "_d,1",
            StrategyKind::Disjoint2 => "_d,2",
        }
    }

    pub fn from_suffix(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.suffix() == s)
    }

    /// Builds the concrete strategy for a pool; `seed` drives the disjoint split.
    pub fn realize(self, pool: &[TargetSpeaker], seed: u64) -> Result<SelectionStrategy> {
        Ok(match self {
            StrategyKind::Random => SelectionStrategy::Random,
            StrategyKind::SameGender => SelectionStrategy::SameGender,
            StrategyKind::CrossGender => SelectionStrategy::CrossGender,
            StrategyKind::Disjoint1 => build_disjoint_split(pool, seed, false)?,
            StrategyKind::Disjoint2 => build_disjoint_split(pool, seed, true)?,
        })
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown selection strategy {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SelectionStrategy {
    Random,
    SameGender,
    CrossGender,
    DisjointSplit {
        /// Two disjoint, gender-balanced groups of speaker ids.
        groups: [Vec<String>; 2],
        /// Index of the group that serves female sources; males use the other.
        female_group: usize,
    },
}

impl SelectionStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionStrategy::Random => "random",
            SelectionStrategy::SameGender => "same_gender",
            SelectionStrategy::CrossGender => "cross_gender",
            SelectionStrategy::DisjointSplit { .. } => "disjoint_split",
        }
    }

    fn eligible(&self, source: Gender, target: &TargetSpeaker) -> bool {
        match self {
            SelectionStrategy::Random => true,
            SelectionStrategy::SameGender => target.gender == source,
            SelectionStrategy::CrossGender => target.gender != source,
            SelectionStrategy::DisjointSplit { groups, female_group } => {
                let g = match source {
                    Gender::Female => *female_group,
                    Gender::Male => 1 - *female_group,
                };
                groups[g].contains(&target.speaker_id)
            }
        }
    }
}

/// The selection stream for one utterance.
pub fn selection_rng(seed: u64, utterance_id: &str) -> ChaCha8Rng {
    keyed_rng(seed, &format!("select/{utterance_id}"))
}

/// Uniform draw among the targets eligible for a source of `source_gender`.
pub fn select_target<'a>(
    source_gender: Gender,
    pool: &'a [TargetSpeaker],
    strategy: &SelectionStrategy,
    rng: &mut impl Rng,
) -> Result<&'a TargetSpeaker> {
    if pool.is_empty() {
        return Err(Error::Empty("target pool"));
    }
    let eligible: Vec<&TargetSpeaker> =
        pool.iter().filter(|t| strategy.eligible(source_gender, t)).collect();
    if eligible.is_empty() {
        return Err(Error::NoEligibleTarget(format!(
            "{} ({} source)",
            strategy.name(),
            source_gender.as_str()
        )));
    }
    Ok(eligible[rng.random_range(0..eligible.len())])
}

/// Splits the pool into two disjoint groups, each with half of the female and
/// half of the male speakers. Group 1 serves female sources unless `swapped`.
pub fn build_disjoint_split(
    pool: &[TargetSpeaker],
    seed: u64,
    swapped: bool,
) -> Result<SelectionStrategy> {
    let mut rng = keyed_rng(seed, "disjoint-split");
    let mut groups: [Vec<String>; 2] = [Vec::new(), Vec::new()];
    for gender in Gender::ALL {
        let mut ids: Vec<String> = pool
            .iter()
            .filter(|t| t.gender == gender)
            .map(|t| t.speaker_id.clone())
            .collect();
        if ids.len() < 2 || !ids.len().is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "disjoint split needs an even number (≥ 2) of {} targets, got {}",
                gender.as_str(),
                ids.len()
            )));
        }
        ids.shuffle(&mut rng);
        let second = ids.split_off(ids.len() / 2);
        groups[0].extend(ids);
        groups[1].extend(second);
    }
    Ok(SelectionStrategy::DisjointSplit { groups, female_group: usize::from(swapped) })
}
