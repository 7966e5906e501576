//! Few-shot warm-start: a k-example expert store and the mixed
//! off-/on-policy warm-up phase.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grpo::{assign_advantages, group_objective, ObjectiveValue, OptimConfig, Optimizer};
use crate::metrics::{GroupStats, Phase, RunSink, StepMetrics};
use crate::policy::{snapshot, FeatureMap, PolicyParams};
use crate::rewards::{total_reward, RewardConfig};
use crate::rollout::{build_group, oracle_trajectory, Group, GroupSpec, WarmStore};
use crate::seed;
use crate::synthenv::Corpus;

pub const DEFAULT_WARM_K: usize = 4;
pub const DEFAULT_WARMUP_STEPS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WarmupMode {
    /// 1 expert + G−1 on-policy members per group.
    Mixed,
    /// Expert only, advantage +1, ρ* = 1, KL kept.
    OffPolicyOnly,
    /// Maximum likelihood on expert actions (advantage +1, no KL).
    Sft,
}

impl fmt::Display for WarmupMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WarmupMode::Mixed => "mixed",
            WarmupMode::OffPolicyOnly => "off_policy_only",
            WarmupMode::Sft => "sft",
        })
    }
}

impl FromStr for WarmupMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(WarmupMode::Mixed),
            "off_policy_only" => Ok(WarmupMode::OffPolicyOnly),
            "sft" => Ok(WarmupMode::Sft),
            other => Err(Error::Config(format!("unknown warm-up mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarmupConfig {
    pub steps: usize,
    pub k: usize,
    pub batch: usize,
    pub lr: f64,
    pub mode: WarmupMode,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            steps: DEFAULT_WARMUP_STEPS,
            k: DEFAULT_WARM_K,
            batch: 4,
            lr: 1e-5,
            mode: WarmupMode::Mixed,
        }
    }
}

/// Samples `k` distinct instances from `train_ids` and attaches their
/// expert trajectories; each must score a total reward of exactly 1.
pub fn build_warm_store(
    corpus: &Corpus,
    train_ids: &[u32],
    k: usize,
    seed: u64,
    map: FeatureMap,
) -> Result<WarmStore> {
    if k > train_ids.len() {
        return Err(Error::Config(format!(
            "warm-start k = {k} exceeds the {} training instances",
            train_ids.len()
        )));
    }
    let mut rng = seed::stream(seed, &[0x5741_524D]);
    let mut picks = index::sample(&mut rng, train_ids.len(), k).into_vec();
    picks.sort_unstable();
    let check = RewardConfig::default();
    let mut entries = Vec::with_capacity(k);
    for i in picks {
        let inst = corpus.instance(train_ids[i])?;
        let expert = oracle_trajectory(corpus, inst, map)?;
        let r = total_reward(&expert, inst, corpus, &check)?;
        if r.total != 1.0 {
            return Err(Error::Precondition(format!(
                "expert trajectory for instance {} scores {} instead of 1",
                inst.instance_id, r.total
            )));
        }
        entries.push((inst.instance_id, expert));
    }
    Ok(WarmStore { entries })
}

/// Everything the warm-up loop needs besides the policy.
#[derive(Clone, Debug)]
pub struct WarmupContext<'a> {
    pub corpus: &'a Corpus,
    pub store: &'a WarmStore,
    pub warmup: &'a WarmupConfig,
    pub optim: &'a OptimConfig,
    pub reward: RewardConfig,
    pub max_search: usize,
    pub seed: u64,
    /// Global index of the first warm-up step in the metrics log.
    pub step_offset: usize,
}

fn expert_only_group(ctx: &WarmupContext<'_>, entry: usize, params_old: &PolicyParams) -> Result<Group> {
    let (id, traj) = &ctx.store.entries[entry];
    let inst = ctx.corpus.instance(*id)?;
    let mut expert = traj.clone();
    expert.relabel_log_probs(params_old)?;
    let reward = total_reward(&expert, inst, ctx.corpus, &ctx.reward)?;
    Ok(Group {
        instance_id: *id,
        trajectories: vec![expert],
        rewards: vec![reward],
        advantages: vec![1.0],
        contains_expert: true,
    })
}

/// Runs the warm-up phase and returns the warmed policy. Grounded
/// expansion is never applied here.
pub fn run_warmup(
    params: PolicyParams,
    ctx: &WarmupContext<'_>,
    sink: &mut dyn RunSink,
) -> Result<PolicyParams> {
    if ctx.warmup.steps == 0 || ctx.store.k() == 0 {
        return Ok(params);
    }
    let batch = ctx.warmup.batch.max(1);
    let mut optim = ctx.optim.clone();
    optim.lr = ctx.warmup.lr;
    if ctx.warmup.mode == WarmupMode::Sft {
        optim.beta_kl = 0.0;
    }
    optim.validate()?;
    let reference = snapshot(&params);
    let mut optimizer = Optimizer::new(optim.lr, optim.momentum);
    let mut params = params;

    for step in 0..ctx.warmup.steps {
        let params_old = snapshot(&params);
        let entries: Vec<usize> = (0..batch)
            .map(|j| (step * batch + j) % ctx.store.k())
            .collect();
        let step_seed = seed::derive_seed(ctx.seed, &[Phase::Warmup as u64, step as u64]);
        let results: Vec<(Group, ObjectiveValue)> = entries
            .par_iter()
            .enumerate()
            .map(|(slot, &entry)| {
                let group = match ctx.warmup.mode {
                    WarmupMode::Mixed => {
                        let (id, _) = &ctx.store.entries[entry];
                        let inst = ctx.corpus.instance(*id)?;
                        let spec = GroupSpec {
                            group_size: optim.group_size,
                            max_search: ctx.max_search,
                            reward: ctx.reward,
                            seed: seed::derive_seed(step_seed, &[slot as u64]),
                        };
                        let mut g = build_group(&params_old, ctx.corpus, inst, &spec, Some(ctx.store))?;
                        assign_advantages(&mut g, &optim)?;
                        g
                    }
                    WarmupMode::OffPolicyOnly | WarmupMode::Sft => {
                        expert_only_group(ctx, entry, &params_old)?
                    }
                };
                let value = group_objective(&group, &params, &params_old, &reference, &optim)?;
                Ok((group, value))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut gradient = vec![0.0; params.weights().len()];
        for (_, v) in &results {
            for (g, x) in gradient.iter_mut().zip(&v.gradient) {
                *g += x;
            }
        }
        let scale = 1.0 / results.len() as f64;
        gradient.iter_mut().for_each(|g| *g *= scale);

        let global_step = ctx.step_offset + step + 1;
        let stats: Vec<GroupStats> = results
            .iter()
            .map(|(g, v)| GroupStats::from_group(g, v, false, 0))
            .collect();
        let metrics = StepMetrics::aggregate(global_step, Phase::Warmup, &stats, &gradient);
        for (g, _) in &results {
            sink.group(global_step, Phase::Warmup, g)?;
        }
        sink.metrics(&metrics)?;
        params = optimizer.step(&params, &gradient)?;
    }
    Ok(params)
}
