//! Grounded expansion of near-miss groups.
//!
//! When no member of a group reaches the maximal reward, the best member is
//! cut after its last evidence-gaining query, `l` completions are resampled
//! from that point, and the best completion replaces the worst member if it
//! beats the original best.

use crate::error::Result;
use crate::policy::PolicyParams;
use crate::rewards::{total_reward, truncation_point_with, RewardConfig};
use crate::rollout::{continue_trajectory, replay_prefix, Group, Source};
use crate::seed;
use crate::synthenv::{Corpus, QAInstance};

pub const DEFAULT_EXPANSION_SAMPLES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpansionConfig {
    pub enabled: bool,
    /// l, completions sampled per expansion attempt.
    pub samples: usize,
    pub max_search: usize,
    pub reward: RewardConfig,
    /// Base of the completion random streams.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpansionOutcome {
    pub group: Group,
    pub expanded: bool,
    pub resamples_used: usize,
    /// t′ of the best member, when an attempt was made.
    pub truncation: Option<usize>,
}

/// (argmax, argmin) of total reward, lowest index on ties. The worst member
/// is chosen among the others so a replacement never overwrites the best.
pub fn select_extremes(totals: &[f64]) -> (usize, usize) {
    let mut best = 0;
    for (i, &r) in totals.iter().enumerate() {
        if r > totals[best] {
            best = i;
        }
    }
    let mut worst: Option<usize> = None;
    for (i, &r) in totals.iter().enumerate() {
        if i != best && worst.is_none_or(|w| r < totals[w]) {
            worst = Some(i);
        }
    }
    (best, worst.unwrap_or(best))
}

const MAX_REWARD_TOL: f64 = 1e-12;

/// One grounded-expansion pass over `group`; rewards must be populated and
/// advantages not yet assigned. Completions are sampled from `params` and
/// record their log-probs under it.
pub fn expand_group(
    group: Group,
    params: &PolicyParams,
    corpus: &Corpus,
    inst: &QAInstance,
    cfg: &ExpansionConfig,
) -> Result<ExpansionOutcome> {
    let unchanged = |group: Group, resamples_used, truncation| ExpansionOutcome {
        group,
        expanded: false,
        resamples_used,
        truncation,
    };
    if !cfg.enabled || group.is_empty() {
        return Ok(unchanged(group, 0, None));
    }
    let totals = group.totals();
    let (best, worst) = select_extremes(&totals);
    let best_total = totals[best];
    if best_total >= 1.0 - MAX_REWARD_TOL {
        return Ok(unchanged(group, 0, None));
    }
    let best_reward = &group.rewards[best];
    let Some(cut) = truncation_point_with(best_reward, cfg.reward.prefix_mode, cfg.reward.lambda)
    else {
        return Ok(unchanged(group, 0, None));
    };

    let best_traj = &group.trajectories[best];
    let prefix = best_traj.truncate(cut).steps;
    let state = replay_prefix(corpus, inst, best_traj, cut);

    let mut top: Option<(f64, usize, _, _)> = None;
    for sample in 0..cfg.samples {
        let mut rng = seed::stream(cfg.seed, &[inst.instance_id as u64, sample as u64]);
        let candidate = continue_trajectory(
            params,
            corpus,
            inst,
            prefix.clone(),
            state.clone(),
            cfg.max_search,
            Source::Expansion,
            &mut rng,
        )?;
        let reward = total_reward(&candidate, inst, corpus, &cfg.reward)?;
        if top.as_ref().is_none_or(|(r, ..)| reward.total > *r) {
            top = Some((reward.total, sample, candidate, reward));
        }
    }
    let resamples_used = cfg.samples;
    match top {
        Some((total, _, candidate, reward)) if total > best_total => {
            let mut group = group;
            group.trajectories[worst] = candidate;
            group.rewards[worst] = reward;
            Ok(ExpansionOutcome {
                group,
                expanded: true,
                resamples_used,
                truncation: Some(cut),
            })
        }
        _ => Ok(unchanged(group, resamples_used, Some(cut))),
    }
}

/// Improvement-only check: max strictly up, min not down, size unchanged.
pub fn improvement_holds(before: &Group, after: &Group) -> bool {
    before.len() == after.len()
        && after.max_total() > before.max_total()
        && after.min_total() >= before.min_total()
}
