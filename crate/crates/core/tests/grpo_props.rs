mod common;

use grounded_grpo::grpo::{
    apply_update, assign_advantages, clipped_term, group_objective, kl_penalty, standardize_advantages, OptimConfig,
};
use grounded_grpo::policy::{grad_log_prob, Action, FeatureMap, PolicyParams};
use grounded_grpo::rewards::{total_reward, RewardBreakdown, RewardConfig};
use grounded_grpo::rollout::{build_group, oracle_trajectory, Group, GroupSpec, Source, WarmStore};
use grounded_grpo::synthenv::{EntityId, EnvState};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn objective_gradient_matches_finite_differences(
        seed in any::<u64>(), with_expert in any::<bool>(), rho_fixed in any::<bool>(),
    ) {
        let case = common::group_case(seed, with_expert, rho_fixed);
        prop_assume!(case.away_from_kinks(1e-3));
        let err = case.gradient_error(1e-5, 1e-4);
        prop_assert!(err < 1e-4, "max relative error {}", err);
    }

    #[test]
    fn kl_matches_direct_sum(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = FeatureMap::new(7, 5);
        let p = common::random_params(map, 0.6, 2.0, &mut rng);
        let q = common::random_params(map, 0.6, 2.0, &mut rng);
        let states: Vec<_> = (0..4)
            .map(|i| {
                map.features(&state_at(EntityId(i % 7), i as usize)).unwrap()
            })
            .collect();
        let refs: Vec<_> = states.iter().collect();
        let direct: f64 = states
            .iter()
            .map(|phi| {
                let (pp, qq) = (p.distribution(phi).unwrap(), q.distribution(phi).unwrap());
                pp.iter().zip(&qq).map(|(a, b)| a * (a / b).ln()).sum::<f64>()
            })
            .sum::<f64>()
            / states.len() as f64;
        let kl = kl_penalty(&p, &q, &refs).unwrap();
        prop_assert!((kl - direct).abs() < 1e-10, "kl {} direct {}", kl, direct);
        prop_assert!(kl >= 0.0);
        prop_assert_eq!(kl_penalty(&p, &p, &refs).unwrap(), 0.0);
    }

    #[test]
    fn clip_term_is_the_pessimistic_minimum(rho in 0.0f64..3.0, adv in -3.0f64..3.0, eps in 0.01f64..0.99) {
        let term = clipped_term(rho, adv, eps);
        let clipped = if rho < 1.0 - eps { 1.0 - eps } else if rho > 1.0 + eps { 1.0 + eps } else { rho };
        let (a, b) = (rho * adv, clipped * adv);
        prop_assert!(term <= a.max(b));
        prop_assert_eq!(term, if a <= b { a } else { b });
    }

    #[test]
    fn standardization_contract(rewards in prop::collection::vec(0.0f64..1.0, 2..9)) {
        let adv = standardize_advantages(&rewards, 1e-8).unwrap();
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        let raw_mean = rewards.iter().sum::<f64>() / n;
        let sigma = (rewards.iter().map(|r| (r - raw_mean).powi(2)).sum::<f64>() / n).sqrt();
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        if sigma > 1e-4 {
            prop_assert!((std - 1.0).abs() < 1e-6, "std {} for input std {}", std, sigma);
        } else {
            prop_assert!((std - sigma / sigma.max(1e-8)).abs() < 1e-9);
        }
    }

    #[test]
    fn better_on_policy_member_outranks_the_expert(
        rewards in prop::collection::vec(0.0f64..1.0, 1..6), expert_reward in 0.0f64..1.0,
    ) {
        let mut totals = vec![expert_reward];
        totals.extend(&rewards);
        let mut group = fake_group(&totals);
        assign_advantages(&mut group, &OptimConfig::default()).unwrap();
        for (i, &r) in rewards.iter().enumerate() {
            if r > expert_reward {
                prop_assert!(group.advantages[i + 1] > group.advantages[0]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn expert_is_reinforced_when_exploration_fails(seed in 0u64..1000, group_size in 2usize..7, lr in 0.01f64..1.0) {
        let corpus = common::corpus(12, 6, "2:0.5,3:0.5", seed);
        let inst = corpus.instances()[(seed % 6) as usize].clone();
        let map = FeatureMap::new(corpus.entity_count(), 5);
        // Every on-policy rollout answers a wrong entity at once: reward 0.
        let wrong = EntityId((inst.gold_answer.0 + 1) % corpus.entity_count());
        let mut params = PolicyParams::zeros(map, 0.6).unwrap();
        let bias = params.feature_dim() - 1;
        params.set_weight(Action::Answer(wrong).index(corpus.entity_count()), bias, 40.0);

        let store = WarmStore { entries: vec![(inst.instance_id, oracle_trajectory(&corpus, &inst, map).unwrap())] };
        let spec = GroupSpec { group_size, max_search: 4, reward: RewardConfig::default(), seed };
        let mut group = build_group(&params, &corpus, &inst, &spec, Some(&store)).unwrap();
        prop_assert_eq!(group.rewards[0].total, 1.0);
        prop_assert!(group.rewards[1..].iter().all(|r| r.total == 0.0));

        let cfg = OptimConfig { group_size, ..OptimConfig::default() };
        assign_advantages(&mut group, &cfg).unwrap();
        let expected = ((group_size - 1) as f64).sqrt();
        prop_assert!((group.advantages[0] - expected).abs() < 1e-6, "{} vs {}", group.advantages[0], expected);

        let value = group_objective(&group, &params, &params, &params, &cfg).unwrap();
        let next = apply_update(&params, &value.gradient, lr).unwrap();
        let expert = &group.trajectories[0];
        prop_assert!(expert.log_prob_under(&next).unwrap() > expert.log_prob_under(&params).unwrap());
    }
}

#[test]
fn kl_closed_form_ln2() {
    // KL(uniform over M ‖ q) where half the actions carry weight w and half
    // weight 1 equals ln((w + 1) / (2√w)); w = 7 + 4√3 makes it ln 2.
    let map = FeatureMap::new(4, 3);
    let p = PolicyParams::zeros(map, 0.6).unwrap();
    let mut q = p.clone();
    let w: f64 = 7.0 + 4.0 * 3f64.sqrt();
    let bias = q.feature_dim() - 1;
    for a in 0..q.action_count() / 2 {
        q.set_weight(a, bias, 0.6 * w.ln());
    }
    let phi = map.features(&state_at(EntityId(0), 0)).unwrap();
    let kl = kl_penalty(&p, &q, &[&phi]).unwrap();
    assert!((kl - std::f64::consts::LN_2).abs() < 1e-12, "kl = {kl}");
}

#[test]
fn zero_advantages_without_kl_give_nothing() {
    for seed in 0..20 {
        let mut case = common::group_case(seed, seed % 2 == 0, true);
        case.group.advantages.iter_mut().for_each(|a| *a = 0.0);
        case.cfg.beta_kl = 0.0;
        let value = group_objective(&case.group, &case.params, &case.params_old, &case.reference, &case.cfg).unwrap();
        assert_eq!(value.loss, 0.0);
        assert!(value.gradient.iter().all(|&g| g == 0.0));
    }
}

#[test]
fn ratio_one_gives_mean_advantage_and_reinforce_gradient() {
    for seed in 0..50 {
        let mut case = common::group_case(seed, seed % 3 == 0, seed % 2 == 0);
        case.params = case.params_old.clone();
        case.cfg.beta_kl = 0.0;
        let value = group_objective(&case.group, &case.params, &case.params_old, &case.reference, &case.cfg).unwrap();
        let g = case.group.len() as f64;
        let mean_adv = case.group.advantages.iter().sum::<f64>() / g;
        assert!((value.surrogate - mean_adv).abs() < 1e-12);

        let mut reinforce = vec![0.0; case.params.weights().len()];
        for (t, adv) in case.group.trajectories.iter().zip(&case.group.advantages) {
            for s in &t.steps {
                let grad = grad_log_prob(&case.params, &s.features, s.action).unwrap();
                for (r, x) in reinforce.iter_mut().zip(grad) {
                    *r += adv * x / (g * t.steps.len() as f64);
                }
            }
        }
        for (a, b) in value.gradient.iter().zip(&reinforce) {
            assert!(common::close(*a, *b, 1e-10, 1e-13), "{a} vs {b}");
        }
    }
}

fn state_at(entity: EntityId, step_index: usize) -> EnvState {
    EnvState {
        instance_id: 0,
        step_index,
        visible_entities: [entity].into(),
        retrieved_history: Vec::new(),
    }
}

/// A group whose member 0 is an expert and whose totals are overridden.
fn fake_group(totals: &[f64]) -> Group {
    let corpus = common::corpus(6, 2, "1:1.0", 0);
    let inst = corpus.instances()[0].clone();
    let map = FeatureMap::new(corpus.entity_count(), 5);
    let expert = oracle_trajectory(&corpus, &inst, map).unwrap();
    let base = total_reward(&expert, &inst, &corpus, &RewardConfig::default()).unwrap();
    let trajectories = (0..totals.len())
        .map(|i| {
            let mut t = expert.clone();
            if i > 0 {
                t.source = Source::OnPolicy;
            }
            t
        })
        .collect();
    let rewards = totals.iter().map(|&total| RewardBreakdown { total, ..base.clone() }).collect();
    Group { instance_id: inst.instance_id, trajectories, rewards, advantages: Vec::new(), contains_expert: true }
}
