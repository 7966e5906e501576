//! Ablation arms trained from identical corpora and seeds.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::eval::EvalReport;
use crate::harness::train::{train_in_memory, RunData, TrainSummary};
use crate::metrics::Phase;
use crate::rewards::RewardPlugin;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Grounded reward, λ from the config, expansion on.
    Full,
    NoExpansion,
    /// λ = 0: answer correctness only.
    OutcomeOnly,
    AnswerDoc,
    Lexical,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Full, Arm::NoExpansion, Arm::OutcomeOnly, Arm::AnswerDoc, Arm::Lexical];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoExpansion => "no_expansion",
            Arm::OutcomeOnly => "outcome_only",
            Arm::AnswerDoc => "answer_doc",
            Arm::Lexical => "lexical",
        }
    }

    /// The arm's configuration derived from a base run.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            Arm::Full => {}
            Arm::NoExpansion => cfg.train.expansion = false,
            Arm::OutcomeOnly => cfg.reward.lambda = 0.0,
            Arm::AnswerDoc => cfg.reward.plugin = RewardPlugin::AnswerDoc,
            Arm::Lexical => cfg.reward.plugin = RewardPlugin::Lexical,
        }
        cfg
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation arm `{s}`")))
    }
}

/// Parses a comma-separated arm list; `all` selects every arm.
pub fn parse_arms(text: &str) -> Result<Vec<Arm>> {
    if text.trim() == "all" {
        return Ok(Arm::ALL.to_vec());
    }
    let arms = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Arm>>>()?;
    if arms.is_empty() {
        return Err(Error::Config("no ablation arms given".into()));
    }
    Ok(arms)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: Arm,
    pub seed: u64,
    pub report: EvalReport,
    pub extra_rollouts_per_group: f64,
    pub improvement_violations: usize,
    /// Mean main-phase expansion ratio over the first and last quartile of steps.
    pub expansion_ratio_quartiles: (f64, f64),
    pub warmup_expansion_max: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<ArmRun>,
}

impl AblationReport {
    pub fn runs_of(&self, arm: Arm) -> impl Iterator<Item = &ArmRun> + '_ {
        self.runs.iter().filter(move |r| r.arm == arm)
    }

    pub fn mean(&self, arm: Arm, metric: fn(&EvalReport) -> f64) -> f64 {
        let vals: Vec<f64> = self.runs_of(arm).map(|r| metric(&r.report)).collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    /// Seeds on which `a` scores at least `b` on `metric`, out of the
    /// seeds both arms were run with.
    pub fn wins(&self, a: Arm, b: Arm, metric: fn(&EvalReport) -> f64) -> (usize, usize) {
        let of = |arm| -> BTreeMap<u64, f64> { self.runs_of(arm).map(|r| (r.seed, metric(&r.report))).collect() };
        let (ra, rb) = (of(a), of(b));
        let shared: Vec<u64> = ra.keys().filter(|s| rb.contains_key(s)).copied().collect();
        let wins = shared.iter().filter(|s| ra[s] >= rb[s]).count();
        (wins, shared.len())
    }

    /// Plain-text table of mean metrics per arm.
    pub fn table(&self) -> String {
        let mut arms: Vec<Arm> = self.runs.iter().map(|r| r.arm).collect();
        arms.sort();
        arms.dedup();
        let mut out = format!(
            "{:<14} {:>5} {:>7} {:>9} {:>9} {:>9} {:>8}\n",
            "arm", "seeds", "em", "all_brdg", "all_ans", "all_gold", "queries"
        );
        for arm in arms {
            out.push_str(&format!(
                "{:<14} {:>5} {:>7.3} {:>9.3} {:>9.3} {:>9.3} {:>8.2}\n",
                arm.as_str(),
                self.runs_of(arm).count(),
                self.mean(arm, |r| r.em),
                self.mean(arm, |r| r.hit_all_bridge),
                self.mean(arm, |r| r.hit_all_answer),
                self.mean(arm, |r| r.hit_all_gold),
                self.mean(arm, |r| r.avg_unique_queries),
            ));
        }
        out
    }
}

fn record(arm: Arm, seed: u64, summary: TrainSummary) -> Result<ArmRun> {
    let report = summary
        .eval
        .clone()
        .ok_or_else(|| Error::Config("ablation needs a non-empty eval split".into()))?;
    Ok(ArmRun {
        arm,
        seed,
        report,
        extra_rollouts_per_group: summary.extra_rollouts_per_group(),
        improvement_violations: summary.expansion.improvement_violations,
        expansion_ratio_quartiles: summary.expansion_ratio_quartiles(),
        warmup_expansion_max: summary
            .metrics
            .iter()
            .filter(|m| m.phase == Phase::Warmup)
            .map(|m| m.expansion_ratio)
            .fold(0.0, f64::max),
    })
}

/// Trains every arm on every seed. Within a seed, all arms share the
/// corpus, split, warm-start store and random streams.
pub fn ablate(base: &RunConfig, arms: &[Arm], seeds: &[u64]) -> Result<AblationReport> {
    let mut report = AblationReport::default();
    for &seed in seeds {
        let mut seeded = base.clone();
        seeded.train.seed = seed;
        let data = RunData::generate(&seeded)?;
        for &arm in arms {
            let cfg = arm.apply(&seeded);
            let (_, summary) = train_in_memory(&cfg, &data)?;
            report.runs.push(record(arm, seed, summary)?);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_names_round_trip() {
        for arm in Arm::ALL {
            assert_eq!(arm.as_str().parse::<Arm>().unwrap(), arm);
        }
        assert_eq!(parse_arms("all").unwrap().len(), 5);
        assert_eq!(parse_arms("full, lexical").unwrap(), vec![Arm::Full, Arm::Lexical]);
        assert!(parse_arms("full,bogus").is_err());
    }

    #[test]
    fn arms_change_one_knob() {
        let base = RunConfig::default();
        assert_eq!(Arm::Full.apply(&base), base);
        assert!(!Arm::NoExpansion.apply(&base).train.expansion);
        assert_eq!(Arm::OutcomeOnly.apply(&base).reward.lambda, 0.0);
        assert_eq!(Arm::Lexical.apply(&base).reward.plugin, RewardPlugin::Lexical);
    }
}
