//! Two-phase training: few-shot warm-up followed by on-policy GRPO with
//! grounded expansion.

use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::{expand_group, improvement_holds, ExpansionConfig};
use crate::grpo::{assign_advantages, group_objective, ExpertAdvantage, OptimConfig, Optimizer};
use crate::harness::config::RunConfig;
use crate::harness::eval::{evaluate, split_instances, EvalReport};
use crate::metrics::{FileSink, GroupStats, MemorySink, Phase, RunSink, StepMetrics};
use crate::policy::{snapshot, FeatureMap, PolicyParams};
use crate::rollout::{build_group, Group, GroupSpec, WarmStore};
use crate::seed;
use crate::synthenv::{generate_corpus, Corpus};
use crate::warmstart::{build_warm_store, run_warmup, WarmupContext};

/// Seed-stream tags separating the independent uses of the run seed.
const TAG_WARM_STORE: u64 = 0x10;
const TAG_BATCH: u64 = 0x11;
const TAG_EXPANSION: u64 = 0x12;
const TAG_EVAL: u64 = 0x13;

/// Surrogate magnitude allowed at θ = θ_old when advantages are zero-mean.
const SELF_TEST_TOL: f64 = 1e-9;

/// Corpus, split and warm-start store for one run.
#[derive(Clone, Debug)]
pub struct RunData {
    pub corpus: Corpus,
    pub train_ids: Vec<u32>,
    pub eval_ids: Vec<u32>,
    pub store: WarmStore,
    pub map: FeatureMap,
}

impl RunData {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let corpus = generate_corpus(&cfg.corpus_spec()?)?;
        RunData::from_corpus(cfg, corpus)
    }

    pub fn from_corpus(cfg: &RunConfig, corpus: Corpus) -> Result<Self> {
        let (train_ids, eval_ids) = split_instances(&corpus, cfg.eval_fraction);
        if train_ids.is_empty() {
            return Err(Error::Config("no training instances after the split".into()));
        }
        let map = FeatureMap::new(corpus.entity_count(), cfg.max_search);
        let store = build_warm_store(
            &corpus,
            &train_ids,
            cfg.warmup.k,
            seed::derive_seed(cfg.train.seed, &[TAG_WARM_STORE]),
            map,
        )?;
        Ok(RunData {
            corpus,
            train_ids,
            eval_ids,
            store,
            map,
        })
    }
}

/// Counters accumulated over the main phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpansionTally {
    pub groups: usize,
    pub attempts: usize,
    pub expansions: usize,
    pub improvement_violations: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub metrics: Vec<StepMetrics>,
    pub expansion: ExpansionTally,
    pub warm_instance_ids: Vec<u32>,
    /// Expert trajectories used over the whole run.
    pub expert_trajectories: usize,
    pub warmup_rollouts: usize,
    pub main_rollouts: usize,
    pub main_resamples: usize,
    pub eval: Option<EvalReport>,
}

impl TrainSummary {
    /// Mean number of extra rollouts expansion spent per main-phase group.
    pub fn extra_rollouts_per_group(&self) -> f64 {
        if self.expansion.groups == 0 {
            0.0
        } else {
            self.main_resamples as f64 / self.expansion.groups as f64
        }
    }

    /// Mean main-phase expansion ratio over the first and the last quarter
    /// of main-phase steps.
    pub fn expansion_ratio_quartiles(&self) -> (f64, f64) {
        let main: Vec<f64> = self
            .metrics
            .iter()
            .filter(|m| m.phase == Phase::Main)
            .map(|m| m.expansion_ratio)
            .collect();
        let q = main.len() / 4;
        if q == 0 {
            return (0.0, 0.0);
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        (mean(&main[..q]), mean(&main[main.len() - q..]))
    }
}

/// Result of one main-phase optimization step.
pub struct StepResult {
    pub params: PolicyParams,
    pub metrics: StepMetrics,
    pub groups: Vec<Group>,
    pub tally: ExpansionTally,
}

/// One main-phase update: sample a batch, build and expand groups under
/// the current policy, and ascend the averaged group objective.
#[allow(clippy::too_many_arguments)]
pub fn main_step(
    params: &PolicyParams,
    reference: &PolicyParams,
    data: &RunData,
    cfg: &RunConfig,
    optim: &OptimConfig,
    optimizer: &mut Optimizer,
    step: usize,
    global_step: usize,
) -> Result<StepResult> {
    let params_old = snapshot(params);
    let step_seed = seed::derive_seed(cfg.train.seed, &[Phase::Main as u64, step as u64]);
    let batch = cfg.train.batch.min(data.train_ids.len());
    let mut rng = seed::stream(step_seed, &[TAG_BATCH]);
    let mut picks = index::sample(&mut rng, data.train_ids.len(), batch).into_vec();
    picks.sort_unstable();

    let spec = GroupSpec {
        group_size: optim.group_size,
        max_search: cfg.max_search,
        reward: cfg.reward,
        seed: step_seed,
    };
    let expansion = ExpansionConfig {
        enabled: cfg.train.expansion,
        samples: cfg.train.expansion_samples,
        max_search: cfg.max_search,
        reward: cfg.reward,
        seed: seed::derive_seed(step_seed, &[TAG_EXPANSION]),
    };

    let results = picks
        .par_iter()
        .map(|&i| {
            let inst = data.corpus.instance(data.train_ids[i])?;
            let group = build_group(&params_old, &data.corpus, inst, &spec, None)?;
            let before = group.clone();
            let out = expand_group(group, &params_old, &data.corpus, inst, &expansion)?;
            let violated = out.expanded && !improvement_holds(&before, &out.group);
            let mut group = out.group;
            assign_advantages(&mut group, optim)?;
            let value = group_objective(&group, params, &params_old, reference, optim)?;
            if optim.expert_advantage == ExpertAdvantage::Joint && value.surrogate.abs() > SELF_TEST_TOL {
                return Err(Error::Precondition(format!(
                    "surrogate at the sampling policy is {} instead of 0",
                    value.surrogate
                )));
            }
            let stats = GroupStats::from_group(&group, &value, out.expanded, out.resamples_used);
            Ok((group, value.gradient, stats, out.truncation.is_some(), violated))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut gradient = vec![0.0; params.weights().len()];
    let mut tally = ExpansionTally::default();
    let mut stats = Vec::with_capacity(results.len());
    let mut groups = Vec::with_capacity(results.len());
    for (group, grad, s, attempted, violated) in results {
        for (g, x) in gradient.iter_mut().zip(&grad) {
            *g += x;
        }
        tally.groups += 1;
        tally.attempts += usize::from(attempted);
        tally.expansions += usize::from(s.expanded);
        tally.improvement_violations += usize::from(violated);
        stats.push(s);
        groups.push(group);
    }
    let scale = 1.0 / groups.len().max(1) as f64;
    gradient.iter_mut().for_each(|g| *g *= scale);
    let metrics = StepMetrics::aggregate(global_step, Phase::Main, &stats, &gradient);
    let params = optimizer.step(params, &gradient)?;
    Ok(StepResult {
        params,
        metrics,
        groups,
        tally,
    })
}

/// Runs both phases; checkpoints go to `checkpoint_dir` when given.
pub fn train_with(
    cfg: &RunConfig,
    data: &RunData,
    sink: &mut dyn RunSink,
    checkpoint_dir: Option<&Path>,
) -> Result<(PolicyParams, TrainSummary)> {
    cfg.validate()?;
    let optim = cfg.main_optim();
    let params = PolicyParams::zeros(data.map, cfg.temperature)?;

    let warm_optim = OptimConfig {
        lambda: cfg.reward.lambda,
        ..optim.clone()
    };
    let ctx = WarmupContext {
        corpus: &data.corpus,
        store: &data.store,
        warmup: &cfg.warmup,
        optim: &warm_optim,
        reward: cfg.reward,
        max_search: cfg.max_search,
        seed: cfg.train.seed,
        step_offset: 0,
    };
    let mut counting = CountingSink { inner: sink, rollouts: 0 };
    let mut params = run_warmup(params, &ctx, &mut counting)?;
    let warmup_rollouts = counting.rollouts;
    let warmup_steps = if data.store.k() == 0 { 0 } else { cfg.warmup.steps };
    let sink = counting.inner;
    if let Some(dir) = checkpoint_dir {
        params.save(&dir.join("warmup.ckpt"))?;
    }

    let reference = snapshot(&params);
    let mut optimizer = Optimizer::new(optim.lr, optim.momentum);
    let mut tally = ExpansionTally::default();
    let mut main_rollouts = 0;
    let mut main_resamples = 0;
    for step in 0..cfg.train.steps {
        let global = warmup_steps + step + 1;
        let out = main_step(&params, &reference, data, cfg, &optim, &mut optimizer, step, global)?;
        for g in &out.groups {
            sink.group(global, Phase::Main, g)?;
        }
        sink.metrics(&out.metrics)?;
        main_rollouts += out.metrics.rollouts;
        main_resamples += out.metrics.resamples_used;
        tally.groups += out.tally.groups;
        tally.attempts += out.tally.attempts;
        tally.expansions += out.tally.expansions;
        tally.improvement_violations += out.tally.improvement_violations;
        params = out.params;
        if let Some(dir) = checkpoint_dir {
            let every = cfg.train.checkpoint_every;
            if every > 0 && (step + 1) % every == 0 {
                params.save(&dir.join(format!("step_{:05}.ckpt", step + 1)))?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        params.save(&dir.join("final.ckpt"))?;
    }

    let eval = if data.eval_ids.is_empty() {
        None
    } else {
        Some(evaluate(
            &params,
            &data.corpus,
            &data.eval_ids,
            cfg.max_search,
            cfg.eval_mode,
            seed::derive_seed(cfg.train.seed, &[TAG_EVAL]),
        )?)
    };
    let summary = TrainSummary {
        metrics: Vec::new(),
        expansion: tally,
        warm_instance_ids: data.store.entries.iter().map(|(id, _)| *id).collect(),
        expert_trajectories: data.store.k(),
        warmup_rollouts,
        main_rollouts,
        main_resamples,
        eval,
    };
    Ok((params, summary))
}

struct CountingSink<'a> {
    inner: &'a mut dyn RunSink,
    rollouts: usize,
}

impl RunSink for CountingSink<'_> {
    fn metrics(&mut self, row: &StepMetrics) -> Result<()> {
        self.rollouts += row.rollouts;
        self.inner.metrics(row)
    }

    fn group(&mut self, step: usize, phase: Phase, group: &Group) -> Result<()> {
        self.inner.group(step, phase, group)
    }
}

/// Trains in memory, without touching the filesystem.
pub fn train_in_memory(cfg: &RunConfig, data: &RunData) -> Result<(PolicyParams, TrainSummary)> {
    let mut sink = MemorySink::default();
    let (params, mut summary) = train_with(cfg, data, &mut sink, None)?;
    summary.metrics = sink.rows;
    Ok((params, summary))
}

/// Full run: generates the corpus, trains, and writes config, corpus,
/// checkpoints, metrics, trajectories and a summary to `out_dir`.
pub fn train_to_dir(cfg: &RunConfig, out_dir: &Path) -> Result<(PolicyParams, TrainSummary)> {
    let data = RunData::generate(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join("config.resolved");
    std::fs::write(&cfg_path, cfg.to_config_string()).map_err(|e| Error::io(&cfg_path, e))?;
    data.corpus.save(&out_dir.join("corpus.jsonl"))?;
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;

    let mut sink = FileSink::create(out_dir, cfg.train.log_trajectories)?;
    let (params, mut summary) = train_with(cfg, &data, &mut sink, Some(&ckpt_dir))?;
    summary.metrics = sink.finish()?;
    let summary_path = out_dir.join("summary.json");
    let file = std::fs::File::create(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    serde_json::to_writer_pretty(file, &SummaryFile::from(&summary))?;
    Ok((params, summary))
}

/// `summary.json` layout; metrics live in the CSV instead.
#[derive(Serialize)]
struct SummaryFile<'a> {
    expansion: &'a ExpansionTally,
    warm_instance_ids: &'a [u32],
    expert_trajectories: usize,
    warmup_rollouts: usize,
    main_rollouts: usize,
    main_resamples: usize,
    extra_rollouts_per_group: f64,
    eval: &'a Option<EvalReport>,
}

impl<'a> From<&'a TrainSummary> for SummaryFile<'a> {
    fn from(s: &'a TrainSummary) -> Self {
        SummaryFile {
            expansion: &s.expansion,
            warm_instance_ids: &s.warm_instance_ids,
            expert_trajectories: s.expert_trajectories,
            warmup_rollouts: s.warmup_rollouts,
            main_rollouts: s.main_rollouts,
            main_resamples: s.main_resamples,
            extra_rollouts_per_group: s.extra_rollouts_per_group(),
            eval: &s.eval,
        }
    }
}
