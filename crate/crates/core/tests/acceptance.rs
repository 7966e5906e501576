//! End-to-end acceptance criteria. Each criterion prints one PASS/FAIL line
//! (written straight to stderr so it shows up without `--nocapture`) and
//! the test fails if any criterion does.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use grounded_grpo::grpo::standardize_advantages;
use grounded_grpo::harness::{ablate, evaluate, train_in_memory, train_to_dir, AblationReport, Arm, EvalMode, EvalReport, RunConfig, RunData};
use grounded_grpo::policy::{FeatureMap, PolicyParams};
use grounded_grpo::rewards::{grounded_reward, prefix_grounded, total_reward, truncation_point, RewardConfig, RewardPlugin};
use grounded_grpo::rollout::{build_group, GroupSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 4] = [0, 1, 2, 3];

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(v: &Verdict) {
    let line = format!("{} {}: {}\n", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
    std::io::stderr().write_all(line.as_bytes()).unwrap();
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn gradient_fidelity() -> Verdict {
    let ((checked, skipped, worst), took) = timed(|| {
        let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
        let mut seed = 0u64;
        while checked < 120 {
            let case = common::group_case(seed, !seed.is_multiple_of(3), seed.is_multiple_of(2));
            seed += 1;
            if !case.away_from_kinks(1e-3) {
                skipped += 1;
                continue;
            }
            worst = worst.max(case.gradient_error(1e-5, 1e-4));
            checked += 1;
        }
        (checked, skipped, worst)
    });
    Verdict {
        name: "gradient fidelity",
        pass: worst < 1e-4 && took < Duration::from_secs(30),
        detail: format!("{checked} groups ({skipped} near clip kinks skipped), max rel err {worst:.2e}, {took:.1?}"),
    }
}

fn reward_oracles() -> Verdict {
    let (mismatches, took) = timed(|| {
        let mut mismatches = 0;
        for seed in 0..1000u64 {
            let (corpus, inst, traj) = common::random_trajectory(seed.wrapping_mul(0x9E37_79B9));
            let sets = common::sets_of(&traj);
            let prefix = prefix_grounded(&traj, &inst);
            let breakdown = total_reward(&traj, &inst, &corpus, &RewardConfig::default()).unwrap();
            let ok = grounded_reward(&traj, &inst) == common::brute_rg(&corpus, &inst, &sets)
                && prefix.len() == sets.len()
                && (1..=sets.len()).all(|t| prefix[t - 1] == common::brute_rg(&corpus, &inst, &sets[..t]))
                && truncation_point(&breakdown) == common::brute_truncation(&corpus, &inst, &sets);
            if !ok {
                mismatches += 1;
            }
        }
        mismatches
    });
    Verdict {
        name: "reward oracle equivalence",
        pass: mismatches == 0 && took < Duration::from_secs(10),
        detail: format!("1000 trajectories, {mismatches} mismatches, {took:.1?}"),
    }
}

/// Reward totals of groups built by real rollouts: random policies, every
/// retrieval plugin, and the λ values the ablation arms use.
fn rollout_groups(count: usize) -> Vec<Vec<f64>> {
    let corpora: Vec<_> = (0..4).map(|s| common::corpus(20, 40, "1:0.2,2:0.4,3:0.4", s)).collect();
    let plugins = [RewardPlugin::Grounded, RewardPlugin::AnswerDoc, RewardPlugin::Lexical];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    (0..count)
        .map(|i| {
            let corpus = &corpora[i % corpora.len()];
            let inst = &corpus.instances()[rng.gen_range(0..corpus.instances().len())];
            let map = FeatureMap::new(corpus.entity_count(), 5);
            let mut params = common::random_params(map, 0.6, rng.gen_range(0.01..3.0), &mut rng);
            let bias = params.feature_dim() - 1;
            let query_bias = rng.gen_range(0.0..3.0);
            for e in 0..corpus.entity_count() as usize {
                params.set_weight(e, bias, query_bias);
            }
            let reward = RewardConfig {
                plugin: plugins[rng.gen_range(0..plugins.len())],
                lambda: [0.0, 0.5, 1.0][rng.gen_range(0..3)],
                ..RewardConfig::default()
            };
            let spec = GroupSpec { group_size: rng.gen_range(2..=8), max_search: 4, reward, seed: i as u64 };
            build_group(&params, corpus, inst, &spec, None).unwrap().totals()
        })
        .collect()
}

fn std_of(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn advantage_contract() -> Verdict {
    let (mut degenerate, mut violations, mut worst_std) = (0, 0, 0.0f64);
    for rewards in rollout_groups(10_000) {
        let adv = standardize_advantages(&rewards, 1e-8).unwrap();
        if rewards.iter().all(|&r| r == rewards[0]) {
            degenerate += 1;
            if adv.iter().any(|&a| a != 0.0) {
                violations += 1;
            }
            continue;
        }
        let mean = adv.iter().sum::<f64>() / adv.len() as f64;
        let std = std_of(&adv);
        worst_std = worst_std.max((std - 1.0).abs());
        if mean.abs() > 1e-9 || (std - 1.0).abs() > 1e-6 {
            violations += 1;
        }
    }
    // Random real 5-vectors with input std above 1e-4.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut random_checked, mut random_violations) = (0, 0);
    while random_checked < 10_000 {
        let scale = 10f64.powf(rng.gen_range(-3.5..0.0));
        let rewards: Vec<f64> = (0..5).map(|_| scale * rng.gen::<f64>()).collect();
        if std_of(&rewards) <= 1e-4 {
            continue;
        }
        random_checked += 1;
        let adv = standardize_advantages(&rewards, 1e-8).unwrap();
        let mean = adv.iter().sum::<f64>() / 5.0;
        let std = std_of(&adv);
        worst_std = worst_std.max((std - 1.0).abs());
        if mean.abs() > 1e-9 || (std - 1.0).abs() > 1e-6 {
            random_violations += 1;
        }
    }
    Verdict {
        name: "advantage contract",
        pass: violations == 0 && random_violations == 0,
        detail: format!(
            "10000 rollout groups ({degenerate} degenerate, {violations} violations); \
             {random_checked} random 5-vectors ({random_violations} violations); max |std-1| {worst_std:.1e}"
        ),
    }
}

fn warm_start_rescue(violations: &mut usize) -> Verdict {
    let (gaps, took) = timed(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let mut cfg = RunConfig::default();
                cfg.corpus.entities = 30;
                cfg.corpus.hops = "2:1.0".into();
                cfg.train.seed = seed;
                cfg.train.steps = 0;
                let data = RunData::generate(&cfg).unwrap();
                let untrained = PolicyParams::zeros(data.map, cfg.temperature).unwrap();
                let em = |p: &PolicyParams| {
                    evaluate(p, &data.corpus, &data.eval_ids, cfg.max_search, EvalMode::Greedy, 0).unwrap().em
                };
                let before = em(&untrained);
                let (warm, summary) = train_in_memory(&cfg, &data).unwrap();
                *violations += summary.expansion.improvement_violations;
                em(&warm) - before
            })
            .collect::<Vec<f64>>()
    });
    let wins = gaps.iter().filter(|&&g| g >= 0.20).count();
    Verdict {
        name: "warm-start cold-start rescue",
        pass: wins >= 3 && took < Duration::from_secs(120),
        detail: format!("EM gain per seed {}, {wins}/4 >= 0.20, {took:.1?}", fmt(&gaps)),
    }
}

fn fmt(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn per_seed(ablation: &AblationReport, arm: Arm, metric: impl Fn(&EvalReport) -> f64) -> Vec<f64> {
    SEEDS
        .iter()
        .map(|&s| metric(&ablation.runs.iter().find(|r| r.arm == arm && r.seed == s).unwrap().report))
        .collect()
}

/// All-bridge hit rate over instances with at least three hops.
fn bridge_3plus(r: &EvalReport) -> f64 {
    let (hits, count) = r
        .per_hop
        .iter()
        .filter(|(h, _)| **h >= 3)
        .fold((0.0, 0), |(hits, count), (_, hop)| (hits + hop.hit_all_bridge * hop.count as f64, count + hop.count));
    if count == 0 {
        0.0
    } else {
        hits / count as f64
    }
}

fn ablation_ordering(ablation: &AblationReport, took: Duration) -> Verdict {
    let em = |arm| per_seed(ablation, arm, |r| r.em);
    let gold = |arm| per_seed(ablation, arm, |r| r.hit_all_gold);
    let (full, no_exp, outcome) = (em(Arm::Full), em(Arm::NoExpansion), em(Arm::OutcomeOnly));
    let ordered = (0..4).filter(|&i| full[i] >= no_exp[i] && no_exp[i] >= outcome[i]).count();
    let (gf, go) = (gold(Arm::Full), gold(Arm::OutcomeOnly));
    let covered = (0..4).filter(|&i| gf[i] - go[i] >= 0.10).count();
    Verdict {
        name: "grounded-reward ablation ordering",
        pass: ordered >= 3 && covered >= 3 && took < Duration::from_secs(600),
        detail: format!(
            "EM full {} / no_expansion {} / outcome_only {} ordered on {ordered}/4; \
             all-gold full {} vs outcome_only {} gap >= 0.10 on {covered}/4; {took:.1?}",
            fmt(&full),
            fmt(&no_exp),
            fmt(&outcome),
            fmt(&gf),
            fmt(&go)
        ),
    }
}

fn plugin_ordering(ablation: &AblationReport) -> Verdict {
    let grounded = per_seed(ablation, Arm::Full, bridge_3plus);
    let answer_doc = per_seed(ablation, Arm::AnswerDoc, bridge_3plus);
    let wins = (0..4).filter(|&i| grounded[i] - answer_doc[i] >= 0.10).count();
    Verdict {
        name: "reward-plugin ordering",
        pass: wins >= 3,
        detail: format!(
            "3+-hop all-bridge grounded {} vs answer_doc {}, gap >= 0.10 on {wins}/4",
            fmt(&grounded),
            fmt(&answer_doc)
        ),
    }
}

fn expansion_dynamics(ablation: &AblationReport) -> Verdict {
    let full: Vec<_> = ablation.runs_of(Arm::Full).collect();
    let falling = full.iter().filter(|r| r.expansion_ratio_quartiles.0 > r.expansion_ratio_quartiles.1).count();
    let warm_max = ablation.runs.iter().map(|r| r.warmup_expansion_max).fold(0.0, f64::max);
    let quartiles: Vec<String> = full
        .iter()
        .map(|r| format!("{:.4}->{:.4}", r.expansion_ratio_quartiles.0, r.expansion_ratio_quartiles.1))
        .collect();
    Verdict {
        name: "expansion dynamics",
        pass: falling >= 3 && warm_max == 0.0,
        detail: format!(
            "first->last quartile ratio {}, falling on {falling}/4; max warm-up ratio {warm_max}",
            quartiles.join(", ")
        ),
    }
}

fn improvement_only(ablation: &AblationReport, other: usize) -> Verdict {
    let in_ablation: usize = ablation.runs.iter().map(|r| r.improvement_violations).sum();
    let total = in_ablation + other;
    Verdict {
        name: "expansion improvement-only",
        pass: total == 0,
        detail: format!("{} runs, {total} violations", ablation.runs.len() + SEEDS.len() + 2),
    }
}

fn determinism(violations: &mut usize) -> Verdict {
    let cfg = RunConfig::default();
    let csv = || {
        let dir = tempfile::tempdir().unwrap();
        let (_, summary) = train_to_dir(&cfg, dir.path()).unwrap();
        (std::fs::read(dir.path().join("metrics.csv")).unwrap(), summary.expansion.improvement_violations)
    };
    let ((a, va), (b, vb)) = (csv(), csv());
    *violations += va + vb;
    Verdict {
        name: "determinism",
        pass: !a.is_empty() && a == b,
        detail: format!("two full-arm runs, metrics.csv {} bytes, identical: {}", a.len(), a == b),
    }
}

#[test]
fn acceptance_criteria() {
    let mut verdicts = Vec::new();
    let mut emit = |v: Verdict| {
        report(&v);
        verdicts.push(v);
    };
    emit(gradient_fidelity());
    emit(reward_oracles());
    emit(advantage_contract());
    let mut violations = 0;
    emit(warm_start_rescue(&mut violations));

    let arms = [Arm::Full, Arm::NoExpansion, Arm::OutcomeOnly, Arm::AnswerDoc];
    let (ablation, took) = timed(|| ablate(&RunConfig::default(), &arms, &SEEDS).unwrap());
    emit(ablation_ordering(&ablation, took));
    emit(plugin_ordering(&ablation));
    emit(expansion_dynamics(&ablation));
    let determinism = determinism(&mut violations);
    emit(improvement_only(&ablation, violations));
    emit(determinism);

    let failed: Vec<&str> = verdicts.iter().filter(|v| !v.pass).map(|v| v.name).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
