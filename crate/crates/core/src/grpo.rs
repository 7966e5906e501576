//! Group-relative advantages, the clipped surrogate with KL penalty, and the
//! parameter update.
//!
//! Ratios are taken per action: `ρ_t = exp(log π_θ(a_t|s_t) − log π_old(a_t|s_t))`,
//! and a trajectory's surrogate is the mean of `f_clip(ρ_t, Â_i)` over its
//! actions. The group objective is
//!
//! ```text
//! J(θ) = (1/G) Σ_i mean_t f_clip(ρ_it, Â_i) − β · mean_s KL(π_θ(·|s) ‖ π_ref(·|s))
//! ```
//!
//! with the KL taken exactly over the full action distribution at every
//! visited state. An expert member with a fixed ratio contributes the
//! constant `Â(τ*)` to `J` but still back-propagates `Â(τ*) ∇ log π_θ` through
//! its actions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{FeatureVector, PolicyParams};
use crate::rollout::{Group, Source};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertAdvantage {
    /// Include R(τ*) in the group standardization.
    Joint,
    /// Override Â(τ*) with a constant after standardizing the rest.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub epsilon_clip: f64,
    pub beta_kl: f64,
    pub lr: f64,
    pub group_size: usize,
    pub lambda: f64,
    pub expert_rho_fixed: bool,
    pub std_epsilon: f64,
    pub expert_advantage: ExpertAdvantage,
    /// Heavy-ball momentum coefficient; 0 is plain gradient ascent.
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            epsilon_clip: 0.2,
            beta_kl: 1e-3,
            lr: 1e-6,
            group_size: 5,
            lambda: 0.5,
            expert_rho_fixed: true,
            std_epsilon: 1e-8,
            expert_advantage: ExpertAdvantage::Joint,
            momentum: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_clip > 0.0 && self.epsilon_clip < 1.0) {
            return Err(Error::Config(format!(
                "epsilon_clip must lie in (0, 1), got {}",
                self.epsilon_clip
            )));
        }
        if !(self.beta_kl >= 0.0 && self.beta_kl.is_finite()) {
            return Err(Error::Config(format!("beta_kl must be >= 0, got {}", self.beta_kl)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.std_epsilon.is_nan() || self.std_epsilon < 0.0 {
            return Err(Error::Config("std_epsilon must be >= 0".into()));
        }
        Ok(())
    }
}

/// `Â_i = (R_i − mean) / max(std, ε)` with the population std; all-equal
/// groups get zero advantages. ε only floors the denominator, so the output
/// std is exactly 1 whenever the reward std exceeds it.
pub fn standardize_advantages(rewards: &[f64], std_epsilon: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Precondition(format!(
            "advantage standardization needs >= 2 rewards, got {}",
            rewards.len()
        )));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt().max(std_epsilon);
    if denom == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// Fills `group.advantages` according to the expert-advantage rule.
pub fn assign_advantages(group: &mut Group, cfg: &OptimConfig) -> Result<()> {
    let totals = group.totals();
    let expert = group
        .trajectories
        .iter()
        .position(|t| t.source == Source::Expert);
    group.advantages = match (cfg.expert_advantage, expert) {
        (ExpertAdvantage::Fixed(value), Some(e)) => {
            let rest: Vec<f64> = totals
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != e)
                .map(|(_, &r)| r)
                .collect();
            let mut adv = if rest.len() >= 2 {
                standardize_advantages(&rest, cfg.std_epsilon)?
            } else {
                vec![0.0; rest.len()]
            };
            adv.insert(e, value);
            adv
        }
        _ => standardize_advantages(&totals, cfg.std_epsilon)?,
    };
    Ok(())
}

/// `min(ρA, clip(ρ, 1−ε, 1+ε) A)`.
pub fn clipped_term(rho: f64, advantage: f64, epsilon_clip: f64) -> f64 {
    let clipped = rho.clamp(1.0 - epsilon_clip, 1.0 + epsilon_clip);
    (rho * advantage).min(clipped * advantage)
}

/// Whether the unclipped branch is the active minimum (its gradient flows).
fn unclipped_active(rho: f64, advantage: f64, epsilon_clip: f64) -> bool {
    let clipped = rho.clamp(1.0 - epsilon_clip, 1.0 + epsilon_clip);
    rho * advantage <= clipped * advantage
}

fn kl_and_grad(
    params: &PolicyParams,
    reference: &PolicyParams,
    phi: &FeatureVector,
    grad: Option<(&mut [f64], f64)>,
) -> Result<f64> {
    let lp = params.log_distribution(phi)?;
    let lq = reference.log_distribution(phi)?;
    let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let kl: f64 = p
        .iter()
        .zip(lp.iter().zip(&lq))
        .map(|(pa, (la, qa))| pa * (la - qa))
        .sum();
    if let Some((grad, coef)) = grad {
        // ∂KL/∂z_a = p_a ((log p_a − log q_a) − KL) / T
        let dim = params.feature_dim();
        let scale = coef / params.temperature();
        for a in 0..p.len() {
            let g = scale * p[a] * ((lp[a] - lq[a]) - kl);
            if g == 0.0 {
                continue;
            }
            let row = &mut grad[a * dim..(a + 1) * dim];
            for &i in &phi.active {
                row[i] += g;
            }
        }
    }
    Ok(kl)
}

/// Mean exact KL(π_θ ‖ π_ref) over `states`.
pub fn kl_penalty(params: &PolicyParams, reference: &PolicyParams, states: &[&FeatureVector]) -> Result<f64> {
    if states.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for phi in states {
        total += kl_and_grad(params, reference, phi, None)?;
    }
    Ok(total / states.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveValue {
    /// J(θ), the quantity ascended.
    pub objective: f64,
    /// −J(θ).
    pub loss: f64,
    pub surrogate: f64,
    pub kl: f64,
    /// ∇_θ J(θ).
    pub gradient: Vec<f64>,
}

/// Evaluates the (mixed) GRPO objective of one group and its gradient.
///
/// `params_old` is implied by each step's recorded `log_prob_old`; the
/// argument is used only to check shapes.
pub fn group_objective(
    group: &Group,
    params: &PolicyParams,
    params_old: &PolicyParams,
    reference: &PolicyParams,
    cfg: &OptimConfig,
) -> Result<ObjectiveValue> {
    for other in [params_old, reference] {
        if other.weights().len() != params.weights().len()
            || other.feature_dim() != params.feature_dim()
        {
            return Err(Error::Dimension {
                expected: params.weights().len(),
                found: other.weights().len(),
            });
        }
    }
    if group.advantages.len() != group.trajectories.len() {
        return Err(Error::Precondition(format!(
            "group has {} advantages for {} trajectories",
            group.advantages.len(),
            group.trajectories.len()
        )));
    }
    let g = group.trajectories.len() as f64;
    let n = params.entity_count();
    let mut gradient = vec![0.0; params.weights().len()];
    let mut surrogate = 0.0;
    let mut states: Vec<&FeatureVector> = Vec::new();

    for (traj, &adv) in group.trajectories.iter().zip(&group.advantages) {
        if traj.steps.is_empty() {
            return Err(Error::Precondition("trajectory without actions".into()));
        }
        let steps = traj.steps.len() as f64;
        let fixed = traj.source == Source::Expert && cfg.expert_rho_fixed;
        let mut traj_sum = 0.0;
        for step in &traj.steps {
            let action = step.action.index(n);
            let log_probs = params.log_distribution(&step.features)?;
            let rho = if fixed {
                1.0
            } else {
                (log_probs[action] - step.log_prob_old).exp()
            };
            traj_sum += clipped_term(rho, adv, cfg.epsilon_clip);
            if adv != 0.0 && unclipped_active(rho, adv, cfg.epsilon_clip) {
                // ∇(ρA) = A ρ ∇log π; at ρ ≡ 1 this is the plain score-function term.
                let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
                params.accumulate_score(&mut gradient, &step.features, &probs, action, adv * rho / (g * steps));
            }
            states.push(&step.features);
        }
        surrogate += traj_sum / steps;
    }
    surrogate /= g;

    let mut kl = 0.0;
    if !states.is_empty() {
        let coef = -cfg.beta_kl / states.len() as f64;
        for phi in &states {
            let grad = (cfg.beta_kl != 0.0).then_some((&mut gradient[..], coef));
            kl += kl_and_grad(params, reference, phi, grad)?;
        }
        kl /= states.len() as f64;
    }
    let objective = surrogate - cfg.beta_kl * kl;
    Ok(ObjectiveValue {
        objective,
        loss: -objective,
        surrogate,
        kl,
        gradient,
    })
}

/// Gradient ascent `θ ← θ + lr·g`, bumping the version.
pub fn apply_update(params: &PolicyParams, gradient: &[f64], lr: f64) -> Result<PolicyParams> {
    if gradient.len() != params.weights().len() {
        return Err(Error::Dimension {
            expected: params.weights().len(),
            found: gradient.len(),
        });
    }
    let mut next = params.clone();
    for (w, g) in next.weights_mut().iter_mut().zip(gradient) {
        *w += lr * g;
    }
    next.bump_version();
    Ok(next)
}

/// Plain ascent with optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Optimizer {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Optimizer {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &PolicyParams, gradient: &[f64]) -> Result<PolicyParams> {
        if self.momentum == 0.0 {
            return apply_update(params, gradient, self.lr);
        }
        if self.velocity.len() != gradient.len() {
            self.velocity = vec![0.0; gradient.len()];
        }
        for (v, g) in self.velocity.iter_mut().zip(gradient) {
            *v = self.momentum * *v + g;
        }
        apply_update(params, &self.velocity, self.lr)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardize_single_winner() {
        let adv = standardize_advantages(&[1.0, 0.0, 0.0, 0.0, 0.0], 0.0).unwrap();
        let want = [2.0, -0.5, -0.5, -0.5, -0.5];
        for (a, w) in adv.iter().zip(want) {
            assert!((a - w).abs() < 1e-12);
        }
    }

    #[test]
    fn standardize_degenerate_group() {
        assert_eq!(standardize_advantages(&[0.7, 0.7, 0.7], 1e-8).unwrap(), vec![0.0; 3]);
        assert!(standardize_advantages(&[1.0], 1e-8).is_err());
    }

    #[test]
    fn clipped_term_cases() {
        assert!((clipped_term(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_term(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
        for a in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            assert_eq!(clipped_term(1.0, a, 0.2), a);
        }
    }

    #[test]
    fn update_arithmetic() {
        let map = crate::policy::FeatureMap::new(2, 1);
        let p = PolicyParams::zeros(map, 0.6).unwrap();
        let zero = vec![0.0; p.weights().len()];
        assert_eq!(apply_update(&p, &zero, 0.1).unwrap().weights(), p.weights());
        let g: Vec<f64> = (0..p.weights().len()).map(|i| i as f64).collect();
        assert_eq!(apply_update(&p, &g, 0.0).unwrap().weights(), p.weights());
        let next = apply_update(&p, &g, 0.25).unwrap();
        for (w, gi) in next.weights().iter().zip(&g) {
            assert_eq!(*w, 0.25 * gi);
        }
        assert_eq!(next.version(), p.version() + 1);
    }

    #[test]
    fn momentum_accumulates() {
        let map = crate::policy::FeatureMap::new(1, 1);
        let p = PolicyParams::zeros(map, 1.0).unwrap();
        let g = vec![1.0; p.weights().len()];
        let mut opt = Optimizer::new(1.0, 0.5);
        let p1 = opt.step(&p, &g).unwrap();
        let p2 = opt.step(&p1, &g).unwrap();
        assert_eq!(p1.weights()[0], 1.0);
        assert_eq!(p2.weights()[0], 2.5);
    }

    #[test]
    fn invalid_configs() {
        let base = OptimConfig::default();
        assert!(base.validate().is_ok());
        assert!(OptimConfig { epsilon_clip: 1.0, ..base.clone() }.validate().is_err());
        assert!(OptimConfig { beta_kl: -1.0, ..base.clone() }.validate().is_err());
        assert!(OptimConfig { lr: 0.0, ..base.clone() }.validate().is_err());
    }
}
