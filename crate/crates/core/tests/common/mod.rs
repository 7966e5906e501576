#![allow(dead_code)]

use grounded_grpo::grpo::{group_objective, OptimConfig};
use grounded_grpo::policy::{FeatureMap, PolicyParams};
use grounded_grpo::rewards::{total_reward, RewardConfig};
use grounded_grpo::rollout::{oracle_trajectory, run_trajectory, Group, Source, Trajectory};
use grounded_grpo::synthenv::{generate_corpus, parse_hop_distribution, Corpus, CorpusSpec, QAInstance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn corpus(entities: u32, instances: usize, hops: &str, seed: u64) -> Corpus {
    generate_corpus(&CorpusSpec {
        entity_count: entities,
        instance_count: instances,
        hop_distribution: parse_hop_distribution(hops).unwrap(),
        distractor_ratio: 1.0,
        retriever_k: 3,
        seed,
    })
    .unwrap()
}

pub fn random_params<R: Rng>(map: FeatureMap, temperature: f64, scale: f64, rng: &mut R) -> PolicyParams {
    let weights = (0..map.action_count() * map.dim())
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    PolicyParams::from_weights(weights, map.action_count(), map.dim(), temperature, 0).unwrap()
}

/// Copy of `params` with weight `i` shifted by `delta`.
pub fn nudged(params: &PolicyParams, i: usize, delta: f64) -> PolicyParams {
    let mut p = params.clone();
    p.weights_mut()[i] += delta;
    p
}

/// |a − b| ≤ rel · max(|a|, |b|) + abs.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}

/// Central finite difference of `f` along every weight of `params`.
pub fn finite_difference(params: &PolicyParams, h: f64, f: impl Fn(&PolicyParams) -> f64) -> Vec<f64> {
    (0..params.weights().len())
        .map(|i| (f(&nudged(params, i, h)) - f(&nudged(params, i, -h))) / (2.0 * h))
        .collect()
}

/// A small random group with perturbed current params, for objective and
/// gradient checks.
pub struct GroupCase {
    pub group: Group,
    pub params: PolicyParams,
    pub params_old: PolicyParams,
    pub reference: PolicyParams,
    pub cfg: OptimConfig,
}

pub fn group_case(seed: u64, with_expert: bool, rho_fixed: bool) -> GroupCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = corpus(6, 4, "1:0.5,2:0.5", seed % 3);
    let inst = corpus.instances()[rng.gen_range(0..corpus.instances().len())].clone();
    let map = FeatureMap::new(corpus.entity_count(), 5);
    let params_old = random_params(map, 0.6, 1.0, &mut rng);
    let reference = random_params(map, 0.6, 1.0, &mut rng);
    let mut params = params_old.clone();
    for w in params.weights_mut() {
        *w += rng.gen_range(-0.15..0.15);
    }

    let size = rng.gen_range(2..=5);
    let mut trajectories = Vec::with_capacity(size);
    if with_expert {
        let mut expert = oracle_trajectory(&corpus, &inst, map).unwrap();
        expert.relabel_log_probs(&params_old).unwrap();
        trajectories.push(expert);
    }
    while trajectories.len() < size {
        trajectories.push(run_trajectory(&params_old, &corpus, &inst, 4, &mut rng).unwrap());
    }
    let rewards = trajectories
        .iter()
        .map(|t| total_reward(t, &inst, &corpus, &RewardConfig::default()).unwrap())
        .collect();
    let advantages = (0..size).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let cfg = OptimConfig {
        beta_kl: rng.gen_range(0.0..0.5),
        expert_rho_fixed: rho_fixed,
        ..OptimConfig::default()
    };
    GroupCase {
        group: Group {
            instance_id: inst.instance_id,
            trajectories,
            rewards,
            advantages,
            contains_expert: with_expert,
        },
        params,
        params_old,
        reference,
        cfg,
    }
}

impl GroupCase {
    pub fn objective(&self, params: &PolicyParams) -> f64 {
        group_objective(&self.group, params, &self.params_old, &self.reference, &self.cfg)
            .unwrap()
            .objective
    }

    /// Whether every free ratio sits away from the clip kinks, where the
    /// objective is not differentiable.
    pub fn away_from_kinks(&self, margin: f64) -> bool {
        let n = self.params.entity_count();
        let eps = self.cfg.epsilon_clip;
        self.group.trajectories.iter().all(|t| {
            (t.source == Source::Expert && self.cfg.expert_rho_fixed)
                || t.steps.iter().all(|s| {
                    let lp = self.params.log_prob(&s.features, s.action.index(n)).unwrap();
                    let rho = (lp - s.log_prob_old).exp();
                    (rho - (1.0 - eps)).abs() > margin && (rho - (1.0 + eps)).abs() > margin
                })
        })
    }

    /// Finite-difference oracle for the gradient. A fixed-ratio expert adds
    /// a constant to the objective, so its policy-gradient term
    /// `Â · mean_t log π(a_t|s_t) / G` is added to the probe function.
    pub fn fd_gradient(&self, h: f64) -> Vec<f64> {
        let n = self.params.entity_count();
        let g = self.group.len() as f64;
        finite_difference(&self.params, h, |p| {
            let mut value = self.objective(p);
            for (t, adv) in self.group.trajectories.iter().zip(&self.group.advantages) {
                if t.source == Source::Expert && self.cfg.expert_rho_fixed {
                    let sum: f64 = t
                        .steps
                        .iter()
                        .map(|s| p.log_prob(&s.features, s.action.index(n)).unwrap())
                        .sum();
                    value += adv * sum / (g * t.steps.len() as f64);
                }
            }
            value
        })
    }

    /// Largest relative error between analytic and finite-difference
    /// gradients; magnitudes below `floor` are measured against `floor`.
    pub fn gradient_error(&self, h: f64, floor: f64) -> f64 {
        let analytic = group_objective(&self.group, &self.params, &self.params_old, &self.reference, &self.cfg)
            .unwrap()
            .gradient;
        analytic
            .iter()
            .zip(self.fd_gradient(h))
            .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

/// Gold recall by explicit membership tests over every document id.
#[allow(clippy::manual_contains)]
pub fn brute_rg(corpus: &Corpus, inst: &QAInstance, sets: &[Vec<u32>]) -> f64 {
    let gold: Vec<u32> = inst.gold_docs().iter().map(|d| d.0).collect();
    let mut hit = 0usize;
    for id in 0..corpus.documents().len() as u32 {
        let is_gold = gold.iter().any(|&g| g == id);
        let seen = sets.iter().any(|s| s.iter().any(|&d| d == id));
        if is_gold && seen {
            hit += 1;
        }
    }
    hit as f64 / gold.len() as f64
}

/// First prefix length whose recall equals the full recall; none when
/// nothing gold was retrieved.
pub fn brute_truncation(corpus: &Corpus, inst: &QAInstance, sets: &[Vec<u32>]) -> Option<usize> {
    let full = brute_rg(corpus, inst, sets);
    if full == 0.0 {
        return None;
    }
    (1..=sets.len()).find(|&t| brute_rg(corpus, inst, &sets[..t]) == full)
}

pub fn sets_of(traj: &Trajectory) -> Vec<Vec<u32>> {
    traj.retrieved_sets().map(|s| s.iter().map(|d| d.0).collect()).collect()
}

/// A sampled trajectory on a small mixed-hop corpus.
pub fn random_trajectory(seed: u64) -> (Corpus, QAInstance, Trajectory) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = corpus(10, 8, "1:0.2,2:0.4,3:0.4", seed % 5);
    let inst = corpus.instances()[rng.gen_range(0..corpus.instances().len())].clone();
    let map = FeatureMap::new(corpus.entity_count(), 5);
    // Bias toward queries so most trajectories retrieve something.
    let mut params = random_params(map, 0.6, 1.5, &mut rng);
    let bias = params.feature_dim() - 1;
    for e in 0..corpus.entity_count() as usize {
        params.set_weight(e, bias, 2.0);
    }
    let traj = run_trajectory(&params, &corpus, &inst, 5, &mut rng).unwrap();
    (corpus, inst, traj)
}
