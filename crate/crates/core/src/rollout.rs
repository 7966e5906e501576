//! Trajectory execution, GRPO group construction and expert demonstrations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{sample_action, Action, FeatureMap, FeatureVector, PolicyParams};
use crate::rewards::{total_reward, RewardBreakdown, RewardConfig};
use crate::seed;
use crate::synthenv::{retrieve, Corpus, DocId, EntityId, EnvState, QAInstance};

pub const DEFAULT_MAX_SEARCH: usize = 5;
pub const DEFAULT_GROUP_SIZE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answered,
    BudgetExhausted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    OnPolicy,
    Expert,
    Expansion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// φ(s_t) at the time the action was taken.
    pub features: FeatureVector,
    pub action: Action,
    /// log π_θold(a_t|s_t).
    pub log_prob_old: f64,
    /// D_t; empty for the terminal answer step.
    pub retrieved: Vec<DocId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub instance_id: u32,
    pub steps: Vec<Step>,
    pub final_answer: Option<EntityId>,
    pub termination: Termination,
    pub source: Source,
}

impl Trajectory {
    /// D_1 … D_{T−1}, one per query step.
    pub fn retrieved_sets(&self) -> impl Iterator<Item = &Vec<DocId>> + '_ {
        self.steps
            .iter()
            .filter(|s| !s.action.is_answer())
            .map(|s| &s.retrieved)
    }

    pub fn query_count(&self) -> usize {
        self.steps.iter().filter(|s| !s.action.is_answer()).count()
    }

    pub fn actions(&self) -> impl Iterator<Item = Action> + '_ {
        self.steps.iter().map(|s| s.action)
    }

    /// Distinct query entities.
    pub fn unique_queries(&self) -> usize {
        let mut seen: Vec<EntityId> = self
            .steps
            .iter()
            .filter_map(|s| match s.action {
                Action::Query(e) => Some(e),
                Action::Answer(_) => None,
            })
            .collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    /// τ_≤t: the first `t` query steps, without a terminal answer.
    pub fn truncate(&self, t: usize) -> Trajectory {
        Trajectory {
            instance_id: self.instance_id,
            steps: self
                .steps
                .iter()
                .filter(|s| !s.action.is_answer())
                .take(t)
                .cloned()
                .collect(),
            final_answer: None,
            termination: Termination::BudgetExhausted,
            source: self.source,
        }
    }

    /// Re-evaluates every step's log_prob_old under `params`.
    pub fn relabel_log_probs(&mut self, params: &PolicyParams) -> Result<()> {
        for step in &mut self.steps {
            let idx = step.action.index(params.entity_count());
            step.log_prob_old = params.log_prob(&step.features, idx)?;
        }
        Ok(())
    }

    /// Σ_t log π(a_t|s_t) under `params`.
    pub fn log_prob_under(&self, params: &PolicyParams) -> Result<f64> {
        self.steps.iter().try_fold(0.0, |acc, s| {
            Ok(acc + params.log_prob(&s.features, s.action.index(params.entity_count()))?)
        })
    }

    /// Checks structural invariants; returns a description of the first
    /// violation.
    pub fn check(&self, max_search: usize) -> std::result::Result<(), String> {
        let answers = self.steps.iter().filter(|s| s.action.is_answer()).count();
        if answers > 1 {
            return Err("more than one answer action".into());
        }
        if answers == 1 && !self.steps.last().unwrap().action.is_answer() {
            return Err("answer action is not last".into());
        }
        if self.query_count() > max_search {
            return Err(format!(
                "{} queries exceed the budget of {max_search}",
                self.query_count()
            ));
        }
        if self.steps.iter().any(|s| !s.log_prob_old.is_finite()) {
            return Err("non-finite log_prob_old".into());
        }
        match (self.termination, self.final_answer, answers) {
            (Termination::Answered, Some(_), 1) | (Termination::BudgetExhausted, None, 0) => Ok(()),
            _ => Err("termination does not match the action record".into()),
        }
    }
}

/// Samples from `state` until an answer or the query budget runs out,
/// appending to `steps`.
#[allow(clippy::too_many_arguments)]
pub fn continue_trajectory<R: Rng + ?Sized>(
    params: &PolicyParams,
    corpus: &Corpus,
    inst: &QAInstance,
    mut steps: Vec<Step>,
    mut state: EnvState,
    max_search: usize,
    source: Source,
    rng: &mut R,
) -> Result<Trajectory> {
    if max_search == 0 {
        return Err(Error::Precondition("max_search must be >= 1".into()));
    }
    let map = params.feature_map()?;
    let mut queries = steps.iter().filter(|s| !s.action.is_answer()).count();
    while queries < max_search {
        let phi = map.features(&state)?;
        let (action, log_prob) = sample_action(params, &phi, rng)?;
        match action {
            Action::Answer(e) => {
                steps.push(Step {
                    features: phi,
                    action,
                    log_prob_old: log_prob,
                    retrieved: Vec::new(),
                });
                return Ok(Trajectory {
                    instance_id: inst.instance_id,
                    steps,
                    final_answer: Some(e),
                    termination: Termination::Answered,
                    source,
                });
            }
            Action::Query(e) => {
                let docs = retrieve(corpus, e, corpus.retriever_k());
                state = state.with_retrieved(corpus, docs.clone());
                steps.push(Step {
                    features: phi,
                    action,
                    log_prob_old: log_prob,
                    retrieved: docs,
                });
                queries += 1;
            }
        }
    }
    Ok(Trajectory {
        instance_id: inst.instance_id,
        steps,
        final_answer: None,
        termination: Termination::BudgetExhausted,
        source,
    })
}

/// One on-policy rollout from s_0.
pub fn run_trajectory<R: Rng + ?Sized>(
    params: &PolicyParams,
    corpus: &Corpus,
    inst: &QAInstance,
    max_search: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    continue_trajectory(
        params,
        corpus,
        inst,
        Vec::new(),
        EnvState::initial(inst),
        max_search,
        Source::OnPolicy,
        rng,
    )
}

/// State after replaying the first `t` query steps of `traj` from their
/// recorded retrievals.
pub fn replay_prefix(corpus: &Corpus, inst: &QAInstance, traj: &Trajectory, t: usize) -> EnvState {
    traj.retrieved_sets()
        .take(t)
        .fold(EnvState::initial(inst), |s, docs| {
            s.with_retrieved(corpus, docs.clone())
        })
}

/// Expert demonstration: query each chain entity in order, then answer.
/// log_prob_old is left at 0 until the trajectory joins a group.
pub fn oracle_trajectory(corpus: &Corpus, inst: &QAInstance, map: FeatureMap) -> Result<Trajectory> {
    let chain = corpus.chain(inst);
    let mut state = EnvState::initial(inst);
    let mut steps = Vec::with_capacity(chain.len());
    for &e in &chain[..chain.len() - 1] {
        let docs = retrieve(corpus, e, corpus.retriever_k());
        steps.push(Step {
            features: map.features(&state)?,
            action: Action::Query(e),
            log_prob_old: 0.0,
            retrieved: docs.clone(),
        });
        state = state.with_retrieved(corpus, docs);
    }
    steps.push(Step {
        features: map.features(&state)?,
        action: Action::Answer(inst.gold_answer),
        log_prob_old: 0.0,
        retrieved: Vec::new(),
    });
    Ok(Trajectory {
        instance_id: inst.instance_id,
        steps,
        final_answer: Some(inst.gold_answer),
        termination: Termination::Answered,
        source: Source::Expert,
    })
}

/// X_warm: a handful of instances with expert trajectories.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WarmStore {
    pub entries: Vec<(u32, Trajectory)>,
}

impl WarmStore {
    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, instance_id: u32) -> Result<&Trajectory> {
        self.entries
            .iter()
            .find(|(id, _)| *id == instance_id)
            .map(|(_, t)| t)
            .ok_or(Error::UnknownInstance(instance_id))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub instance_id: u32,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
    pub contains_expert: bool,
}

impl Group {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rewards.iter().map(|r| r.total).collect()
    }

    pub fn max_total(&self) -> f64 {
        self.totals().into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_total(&self) -> f64 {
        self.totals().into_iter().fold(f64::INFINITY, f64::min)
    }
}

/// Inputs shared by every group built in one optimization step.
#[derive(Clone, Copy, Debug)]
pub struct GroupSpec {
    pub group_size: usize,
    pub max_search: usize,
    pub reward: RewardConfig,
    /// Base of the per-rollout random streams for this step.
    pub seed: u64,
}

/// Builds a GRPO group sampled from `params_old`. With a warm store, slot 0
/// is the stored expert trajectory (log-probs relabelled under
/// `params_old`) and the remaining `G − 1` members are on-policy.
pub fn build_group(
    params_old: &PolicyParams,
    corpus: &Corpus,
    inst: &QAInstance,
    spec: &GroupSpec,
    warm: Option<&WarmStore>,
) -> Result<Group> {
    if spec.group_size < 2 {
        return Err(Error::Precondition(format!(
            "group size must be >= 2, got {}",
            spec.group_size
        )));
    }
    let mut trajectories = Vec::with_capacity(spec.group_size);
    if let Some(store) = warm {
        let mut expert = store.get(inst.instance_id)?.clone();
        expert.relabel_log_probs(params_old)?;
        trajectories.push(expert);
    }
    let first = trajectories.len();
    for idx in first..spec.group_size {
        let mut rng = seed::stream(spec.seed, &[inst.instance_id as u64, idx as u64]);
        let t = run_trajectory(params_old, corpus, inst, spec.max_search, &mut rng)?;
        debug_assert!(t.check(spec.max_search).is_ok());
        trajectories.push(t);
    }
    let rewards = trajectories
        .iter()
        .map(|t| total_reward(t, inst, corpus, &spec.reward))
        .collect::<Result<Vec<_>>>()?;
    Ok(Group {
        instance_id: inst.instance_id,
        trajectories,
        rewards,
        advantages: Vec::new(),
        contains_expert: warm.is_some(),
    })
}
