//! Trajectory rewards.
//!
//! The grounded retrieval reward is the recall of the gold evidence set in
//! the union of everything retrieved before answering. It is mixed with the
//! exact-match outcome reward as `λ·r_g + (1−λ)·r_o`. Two simplified
//! competitor retrieval rewards are available for comparison runs.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout::{Termination, Trajectory};
use crate::synthenv::{Corpus, DocId, EntityId, QAInstance};

pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardPlugin {
    /// Recall of D* over the cumulative retrieved set.
    Grounded,
    /// 1 if any answer document was retrieved.
    AnswerDoc,
    /// Mean per-step entity overlap with the gold evidence.
    Lexical,
}

impl fmt::Display for RewardPlugin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RewardPlugin::Grounded => "grounded",
            RewardPlugin::AnswerDoc => "answer_doc",
            RewardPlugin::Lexical => "lexical",
        })
    }
}

impl FromStr for RewardPlugin {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grounded" => Ok(RewardPlugin::Grounded),
            "answer_doc" => Ok(RewardPlugin::AnswerDoc),
            "lexical" => Ok(RewardPlugin::Lexical),
            other => Err(Error::Config(format!("unknown reward plugin `{other}`"))),
        }
    }
}

/// Which reward the truncation search compares prefixes with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixMode {
    /// Grounded component only: `r_g(τ_≤t) = r_g(τ)`.
    Grounded,
    /// Full reward with `r_o = 0` on prefixes: `λ·r_g(τ_≤t) = R(τ)`.
    Full,
}

impl FromStr for PrefixMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grounded" => Ok(PrefixMode::Grounded),
            "full" => Ok(PrefixMode::Full),
            other => Err(Error::Config(format!("unknown prefix mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardConfig {
    pub plugin: RewardPlugin,
    pub lambda: f64,
    pub prefix_mode: PrefixMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            plugin: RewardPlugin::Grounded,
            lambda: DEFAULT_LAMBDA,
            prefix_mode: PrefixMode::Grounded,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_g: f64,
    pub r_o: f64,
    /// Retrieval score of the configured plugin (equals `r_g` when grounded).
    pub retrieval: f64,
    pub total: f64,
    /// `r_g` of each prefix with 1..=T−1 query steps.
    pub prefix_rg: Vec<f64>,
    pub reward_plugin_id: RewardPlugin,
}

/// D_union: every document retrieved by a query step.
pub fn union_retrieved(traj: &Trajectory) -> BTreeSet<DocId> {
    traj.retrieved_sets().flatten().copied().collect()
}

fn recall(union: &BTreeSet<DocId>, inst: &QAInstance) -> f64 {
    let hits = union.iter().filter(|d| inst.is_gold(**d)).count();
    hits as f64 / inst.gold_len() as f64
}

pub fn grounded_reward(traj: &Trajectory, inst: &QAInstance) -> f64 {
    recall(&union_retrieved(traj), inst)
}

pub fn outcome_reward(traj: &Trajectory, inst: &QAInstance) -> f64 {
    match (traj.termination, traj.final_answer) {
        (Termination::Answered, Some(a)) if a == inst.gold_answer => 1.0,
        _ => 0.0,
    }
}

pub fn answer_doc_reward(traj: &Trajectory, inst: &QAInstance) -> f64 {
    let hit = traj
        .retrieved_sets()
        .flatten()
        .any(|d| inst.gold_answer_docs.contains(d));
    if hit {
        1.0
    } else {
        0.0
    }
}

fn doc_entities<'a>(corpus: &Corpus, docs: impl IntoIterator<Item = &'a DocId>) -> BTreeSet<EntityId> {
    docs.into_iter()
        .flat_map(|&d| corpus.document(d).entities())
        .collect()
}

pub fn lexical_step_reward(traj: &Trajectory, inst: &QAInstance, corpus: &Corpus) -> f64 {
    let gold = doc_entities(corpus, &inst.gold_docs());
    let steps: Vec<&Vec<DocId>> = traj.retrieved_sets().collect();
    if steps.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let total: f64 = steps
        .iter()
        .map(|docs| {
            let ents = doc_entities(corpus, docs.iter());
            ents.intersection(&gold).count() as f64 / gold.len() as f64
        })
        .sum();
    total / steps.len() as f64
}

/// Grounded reward of every query prefix, by incremental union.
pub fn prefix_grounded(traj: &Trajectory, inst: &QAInstance) -> Vec<f64> {
    let mut union = BTreeSet::new();
    traj.retrieved_sets()
        .map(|docs| {
            union.extend(docs.iter().copied());
            recall(&union, inst)
        })
        .collect()
}

/// Scores a trajectory under `cfg`.
pub fn total_reward(
    traj: &Trajectory,
    inst: &QAInstance,
    corpus: &Corpus,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    cfg.validate()?;
    let r_g = grounded_reward(traj, inst);
    let r_o = outcome_reward(traj, inst);
    let retrieval = match cfg.plugin {
        RewardPlugin::Grounded => r_g,
        RewardPlugin::AnswerDoc => answer_doc_reward(traj, inst),
        RewardPlugin::Lexical => lexical_step_reward(traj, inst, corpus),
    };
    Ok(RewardBreakdown {
        r_g,
        r_o,
        retrieval,
        total: cfg.lambda * retrieval + (1.0 - cfg.lambda) * r_o,
        prefix_rg: prefix_grounded(traj, inst),
        reward_plugin_id: cfg.plugin,
    })
}

/// t′: fewest query steps whose prefix already holds all the trajectory's
/// grounded evidence. `None` when the trajectory retrieved no gold document.
pub fn truncation_point(breakdown: &RewardBreakdown) -> Option<usize> {
    if breakdown.r_g <= 0.0 {
        return None;
    }
    breakdown
        .prefix_rg
        .iter()
        .position(|&r| r == breakdown.r_g)
        .map(|i| i + 1)
}

/// t′ under an explicit prefix reading.
pub fn truncation_point_with(
    breakdown: &RewardBreakdown,
    mode: PrefixMode,
    lambda: f64,
) -> Option<usize> {
    match mode {
        PrefixMode::Grounded => truncation_point(breakdown),
        PrefixMode::Full => {
            if breakdown.r_g <= 0.0 {
                return None;
            }
            breakdown
                .prefix_rg
                .iter()
                .position(|&r| lambda * r == breakdown.total)
                .map(|i| i + 1)
        }
    }
}
