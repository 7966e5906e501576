//! Held-out evaluation: answer accuracy and retrieval hit rates.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::config::EvalMode;
use crate::policy::{greedy_action, sample_action, Action, FeatureMap, FeatureVector, PolicyParams};
use crate::rollout::{oracle_trajectory, Step, Termination, Trajectory, Source};
use crate::seed;
use crate::synthenv::{retrieve, Corpus, DocId, EnvState, QAInstance};

/// Chooses the next action during evaluation.
pub trait Actor: Sync {
    fn act(&self, inst: &QAInstance, state: &EnvState, phi: &FeatureVector, rng: &mut ChaCha8Rng) -> Result<Action>;
}

pub struct GreedyActor<'a>(pub &'a PolicyParams);

impl Actor for GreedyActor<'_> {
    fn act(&self, _: &QAInstance, _: &EnvState, phi: &FeatureVector, _: &mut ChaCha8Rng) -> Result<Action> {
        Ok(greedy_action(self.0, phi)?.0)
    }
}

pub struct SampledActor<'a>(pub &'a PolicyParams);

impl Actor for SampledActor<'_> {
    fn act(&self, _: &QAInstance, _: &EnvState, phi: &FeatureVector, rng: &mut ChaCha8Rng) -> Result<Action> {
        Ok(sample_action(self.0, phi, rng)?.0)
    }
}

/// Replays the expert demonstration of each instance.
pub struct OracleActor<'a> {
    pub corpus: &'a Corpus,
}

impl Actor for OracleActor<'_> {
    fn act(&self, inst: &QAInstance, state: &EnvState, _: &FeatureVector, _: &mut ChaCha8Rng) -> Result<Action> {
        let map = FeatureMap::new(self.corpus.entity_count(), 1);
        let expert = oracle_trajectory(self.corpus, inst, map)?;
        let t = state.step_index.min(expert.steps.len() - 1);
        Ok(expert.steps[t].action)
    }
}

/// Runs `actor` on one instance from s_0.
pub fn run_episode<A: Actor + ?Sized>(
    actor: &A,
    corpus: &Corpus,
    inst: &QAInstance,
    map: FeatureMap,
    max_search: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let mut state = EnvState::initial(inst);
    let mut steps = Vec::new();
    let mut queries = 0;
    while queries < max_search {
        let phi = map.features(&state)?;
        let action = actor.act(inst, &state, &phi, rng)?;
        match action {
            Action::Answer(e) => {
                steps.push(Step {
                    features: phi,
                    action,
                    log_prob_old: 0.0,
                    retrieved: Vec::new(),
                });
                return Ok(Trajectory {
                    instance_id: inst.instance_id,
                    steps,
                    final_answer: Some(e),
                    termination: Termination::Answered,
                    source: Source::OnPolicy,
                });
            }
            Action::Query(e) => {
                let docs = retrieve(corpus, e, corpus.retriever_k());
                state = state.with_retrieved(corpus, docs.clone());
                steps.push(Step {
                    features: phi,
                    action,
                    log_prob_old: 0.0,
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
        source: Source::OnPolicy,
    })
}

/// Token-level F1 between whitespace-tokenized, lower-cased strings.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let tokens = |s: &str| -> Vec<String> { s.split_whitespace().map(str::to_lowercase).collect() };
    let pred = tokens(prediction);
    let gold = tokens(gold);
    if pred.is_empty() || gold.is_empty() {
        return if pred == gold { 1.0 } else { 0.0 };
    }
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HopReport {
    pub count: usize,
    pub em: f64,
    pub hit_all_bridge: f64,
    pub hit_all_gold: f64,
    pub avg_unique_queries: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: usize,
    pub em: f64,
    pub f1: f64,
    /// Over instances that have bridge documents.
    pub hit_any_bridge: f64,
    pub hit_all_bridge: f64,
    pub hit_any_answer: f64,
    pub hit_all_answer: f64,
    pub hit_all_gold: f64,
    pub avg_unique_queries: f64,
    pub per_hop: BTreeMap<u32, HopReport>,
}

struct Outcome {
    hop: u32,
    em: f64,
    f1: f64,
    bridge: Option<(bool, bool)>,
    answer: (bool, bool),
    all_gold: bool,
    unique_queries: usize,
}

fn hits(retrieved: &BTreeSet<DocId>, wanted: &BTreeSet<DocId>) -> (bool, bool) {
    let any = wanted.iter().any(|d| retrieved.contains(d));
    let all = wanted.iter().all(|d| retrieved.contains(d));
    (any, all)
}

fn score(traj: &Trajectory, inst: &QAInstance) -> Outcome {
    let retrieved: BTreeSet<DocId> = traj.retrieved_sets().flatten().copied().collect();
    let pred = traj.final_answer.map(|e| e.to_string()).unwrap_or_default();
    let gold = inst.gold_answer.to_string();
    Outcome {
        hop: inst.hop_count,
        em: f64::from(u8::from(traj.final_answer == Some(inst.gold_answer))),
        f1: token_f1(&pred, &gold),
        bridge: (!inst.gold_bridge_docs.is_empty()).then(|| hits(&retrieved, &inst.gold_bridge_docs)),
        answer: hits(&retrieved, &inst.gold_answer_docs),
        all_gold: inst.gold_docs().iter().all(|d| retrieved.contains(d)),
        unique_queries: traj.unique_queries(),
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn rate(flags: impl Iterator<Item = bool>) -> f64 {
    mean(flags.map(|b| f64::from(u8::from(b))))
}

/// Evaluates `actor` on `instance_ids`. Sampled actors draw from a stream
/// keyed by (`seed`, instance id), so results do not depend on threading.
pub fn evaluate_with<A: Actor + ?Sized>(
    actor: &A,
    corpus: &Corpus,
    instance_ids: &[u32],
    map: FeatureMap,
    max_search: usize,
    seed: u64,
) -> Result<EvalReport> {
    let outcomes = instance_ids
        .par_iter()
        .map(|&id| {
            let inst = corpus.instance(id)?;
            let mut rng = seed::stream(seed, &[0xE7A1, id as u64]);
            let traj = run_episode(actor, corpus, inst, map, max_search, &mut rng)?;
            Ok(score(&traj, inst))
        })
        .collect::<Result<Vec<Outcome>>>()?;

    let bridged = || outcomes.iter().filter_map(|o| o.bridge);
    let mut per_hop = BTreeMap::new();
    let hops: BTreeSet<u32> = outcomes.iter().map(|o| o.hop).collect();
    for hop in hops {
        let sel = || outcomes.iter().filter(move |o| o.hop == hop);
        per_hop.insert(
            hop,
            HopReport {
                count: sel().count(),
                em: mean(sel().map(|o| o.em)),
                hit_all_bridge: rate(sel().filter_map(|o| o.bridge).map(|b| b.1)),
                hit_all_gold: rate(sel().map(|o| o.all_gold)),
                avg_unique_queries: mean(sel().map(|o| o.unique_queries as f64)),
            },
        );
    }
    Ok(EvalReport {
        instances: outcomes.len(),
        em: mean(outcomes.iter().map(|o| o.em)),
        f1: mean(outcomes.iter().map(|o| o.f1)),
        hit_any_bridge: rate(bridged().map(|b| b.0)),
        hit_all_bridge: rate(bridged().map(|b| b.1)),
        hit_any_answer: rate(outcomes.iter().map(|o| o.answer.0)),
        hit_all_answer: rate(outcomes.iter().map(|o| o.answer.1)),
        hit_all_gold: rate(outcomes.iter().map(|o| o.all_gold)),
        avg_unique_queries: mean(outcomes.iter().map(|o| o.unique_queries as f64)),
        per_hop,
    })
}

/// Evaluates a policy in greedy or sampled mode.
pub fn evaluate(
    params: &PolicyParams,
    corpus: &Corpus,
    instance_ids: &[u32],
    max_search: usize,
    mode: EvalMode,
    seed: u64,
) -> Result<EvalReport> {
    let map = params.feature_map()?;
    match mode {
        EvalMode::Greedy => evaluate_with(&GreedyActor(params), corpus, instance_ids, map, max_search, seed),
        EvalMode::Sampled => evaluate_with(&SampledActor(params), corpus, instance_ids, map, max_search, seed),
    }
}

/// Deterministic train/eval partition of a corpus's instances.
pub fn split_instances(corpus: &Corpus, eval_fraction: f64) -> (Vec<u32>, Vec<u32>) {
    use rand::seq::SliceRandom;
    let mut ids: Vec<u32> = corpus.instances().iter().map(|i| i.instance_id).collect();
    let mut rng = seed::stream(corpus.rng_seed(), &[0x5B17]);
    ids.shuffle(&mut rng);
    let n_eval = ((ids.len() as f64) * eval_fraction).round() as usize;
    let n_eval = n_eval.min(ids.len().saturating_sub(1));
    let mut eval = ids.split_off(ids.len() - n_eval);
    ids.sort_unstable();
    eval.sort_unstable();
    (ids, eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthenv::{generate_corpus, parse_hop_distribution, CorpusSpec};

    fn corpus() -> Corpus {
        generate_corpus(&CorpusSpec {
            entity_count: 30,
            instance_count: 40,
            hop_distribution: parse_hop_distribution("1:0.2,2:0.4,3:0.4").unwrap(),
            distractor_ratio: 1.0,
            retriever_k: 3,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn token_f1_cases() {
        assert_eq!(token_f1("e3", "e3"), 1.0);
        assert_eq!(token_f1("e3", "e4"), 0.0);
        assert_eq!(token_f1("", "e4"), 0.0);
        assert!((token_f1("a b", "a c") - 0.5).abs() < 1e-12);
        assert_eq!(token_f1("The Cat", "the cat"), 1.0);
    }

    #[test]
    fn oracle_actor_is_perfect() {
        let c = corpus();
        let ids: Vec<u32> = c.instances().iter().map(|i| i.instance_id).collect();
        let map = FeatureMap::new(c.entity_count(), 5);
        let r = evaluate_with(&OracleActor { corpus: &c }, &c, &ids, map, 5, 0).unwrap();
        assert_eq!(r.em, 1.0);
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.hit_all_bridge, 1.0);
        assert_eq!(r.hit_all_answer, 1.0);
        assert_eq!(r.hit_all_gold, 1.0);
        for (hop, h) in &r.per_hop {
            assert_eq!(h.avg_unique_queries, *hop as f64);
        }
    }

    #[test]
    fn zero_policy_exhausts_budget() {
        let c = corpus();
        let ids: Vec<u32> = c.instances().iter().map(|i| i.instance_id).collect();
        let p = PolicyParams::zeros(FeatureMap::new(c.entity_count(), 5), 0.6).unwrap();
        let r = evaluate(&p, &c, &ids, 5, EvalMode::Greedy, 0).unwrap();
        assert_eq!(r.em, 0.0);
        assert_eq!(r.avg_unique_queries, 1.0);
    }

    #[test]
    fn split_is_disjoint_and_stable() {
        let c = corpus();
        let (train, eval) = split_instances(&c, 0.25);
        assert_eq!(eval.len(), 10);
        assert_eq!(train.len(), 30);
        assert!(train.iter().all(|t| !eval.contains(t)));
        assert_eq!(split_instances(&c, 0.25), (train, eval));
    }
}
