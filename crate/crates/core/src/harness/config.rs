//! Run configuration: a flat `key = value` file with dotted keys.
//!
//! ```text
//! # comments and blank lines are ignored
//! corpus.entities = 40
//! [train]
//! steps = 300      # a `[section]` header prefixes the keys below it
//! ```
//!
//! Unknown keys are rejected. Defaults describe a desk-scale run; the
//! reference-scale values are available from [`RunConfig::reference_scale`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::expansion::DEFAULT_EXPANSION_SAMPLES;
use crate::grpo::{ExpertAdvantage, OptimConfig};
use crate::policy::DEFAULT_TEMPERATURE;
use crate::rewards::{PrefixMode, RewardConfig};
use crate::rollout::DEFAULT_MAX_SEARCH;
use crate::synthenv::{format_hop_distribution, parse_hop_distribution, CorpusSpec};
use crate::warmstart::WarmupConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Greedy,
    Sampled,
}

impl FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(EvalMode::Greedy),
            "sampled" => Ok(EvalMode::Sampled),
            other => Err(Error::Config(format!("unknown eval mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Greedy => "greedy",
            EvalMode::Sampled => "sampled",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub entities: u32,
    pub instances: usize,
    pub hops: String,
    pub distractor_ratio: f64,
    pub retriever_k: usize,
    /// Falls back to `train.seed` when unset.
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub output_dir: Option<PathBuf>,
    pub log_trajectories: bool,
    /// Expansion on/off for the main phase.
    pub expansion: bool,
    pub expansion_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub eval_fraction: f64,
    pub temperature: f64,
    pub max_search: usize,
    pub reward: RewardConfig,
    pub optim: OptimConfig,
    pub warmup: WarmupConfig,
    pub train: TrainConfig,
    pub eval_mode: EvalMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: CorpusConfig {
                entities: 40,
                instances: 300,
                hops: "2:0.5,3:0.5".into(),
                distractor_ratio: 1.0,
                retriever_k: 3,
                seed: None,
            },
            eval_fraction: 1.0 / 3.0,
            temperature: DEFAULT_TEMPERATURE,
            max_search: DEFAULT_MAX_SEARCH,
            reward: RewardConfig::default(),
            optim: OptimConfig {
                lr: 0.5,
                ..OptimConfig::default()
            },
            warmup: WarmupConfig {
                lr: 0.5,
                ..WarmupConfig::default()
            },
            train: TrainConfig {
                steps: 300,
                batch: 8,
                seed: 0,
                checkpoint_every: 0,
                output_dir: None,
                log_trajectories: true,
                expansion: true,
                expansion_samples: DEFAULT_EXPANSION_SAMPLES,
            },
            eval_mode: EvalMode::Greedy,
        }
    }
}

impl RunConfig {
    /// Step counts, batch sizes and learning rates of the reference
    /// large-model setup, kept selectable for completeness.
    pub fn reference_scale() -> Self {
        let mut cfg = RunConfig::default();
        cfg.optim.lr = 1e-6;
        cfg.warmup.lr = 1e-5;
        cfg.warmup.batch = 4;
        cfg.train.steps = 215;
        cfg.train.batch = 24;
        cfg
    }

    pub fn corpus_seed(&self) -> u64 {
        self.corpus.seed.unwrap_or(self.train.seed)
    }

    pub fn corpus_spec(&self) -> Result<CorpusSpec> {
        Ok(CorpusSpec {
            entity_count: self.corpus.entities,
            instance_count: self.corpus.instances,
            hop_distribution: parse_hop_distribution(&self.corpus.hops)?,
            distractor_ratio: self.corpus.distractor_ratio,
            retriever_k: self.corpus.retriever_k,
            seed: self.corpus_seed(),
        })
    }

    /// Optimizer settings for the main phase, with group size and λ taken
    /// from the rollout and reward sections.
    pub fn main_optim(&self) -> OptimConfig {
        OptimConfig {
            group_size: self.optim.group_size,
            lambda: self.reward.lambda,
            ..self.optim.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus_spec()?;
        self.reward.validate()?;
        self.main_optim().validate()?;
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split.eval_fraction must lie in (0, 1), got {}",
                self.eval_fraction
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("policy.temperature must be > 0".into()));
        }
        if self.max_search == 0 {
            return Err(Error::Config("rollout.max_search must be >= 1".into()));
        }
        if self.train.batch == 0 || self.warmup.batch == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if !(self.warmup.lr > 0.0 && self.warmup.lr.is_finite()) {
            return Err(Error::Config("warmup.lr must be > 0".into()));
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            let key = key.trim();
            let key = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            let value = unquote(value.trim());
            cfg.set(&key, value).map_err(|e| match e {
                Error::Config(msg) => err(msg),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text, &path.display().to_string())
    }

    /// Sets one dotted key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
        }
        match key {
            "corpus.entities" => self.corpus.entities = num(key, value)?,
            "corpus.instances" => self.corpus.instances = num(key, value)?,
            "corpus.hops" => {
                parse_hop_distribution(value)?;
                self.corpus.hops = value.to_string();
            }
            "corpus.distractor_ratio" => self.corpus.distractor_ratio = num(key, value)?,
            "corpus.retriever_k" => self.corpus.retriever_k = num(key, value)?,
            "corpus.seed" => self.corpus.seed = Some(num(key, value)?),
            "split.eval_fraction" => self.eval_fraction = num(key, value)?,
            "policy.temperature" => self.temperature = num(key, value)?,
            "rollout.max_search" => self.max_search = num(key, value)?,
            "rollout.group_size" => self.optim.group_size = num(key, value)?,
            "reward.plugin" => self.reward.plugin = value.parse()?,
            "reward.lambda" => self.reward.lambda = num(key, value)?,
            "reward.prefix_mode" => self.reward.prefix_mode = value.parse()?,
            "grpo.epsilon_clip" => self.optim.epsilon_clip = num(key, value)?,
            "grpo.beta_kl" => self.optim.beta_kl = num(key, value)?,
            "grpo.lr" => self.optim.lr = num(key, value)?,
            "grpo.std_epsilon" => self.optim.std_epsilon = num(key, value)?,
            "grpo.momentum" => self.optim.momentum = num(key, value)?,
            "grpo.expert_rho_fixed" => self.optim.expert_rho_fixed = num(key, value)?,
            "grpo.expert_advantage" => {
                self.optim.expert_advantage = match value {
                    "joint" => ExpertAdvantage::Joint,
                    v => ExpertAdvantage::Fixed(num(key, v)?),
                }
            }
            "warmup.steps" => self.warmup.steps = num(key, value)?,
            "warmup.k" => self.warmup.k = num(key, value)?,
            "warmup.batch" => self.warmup.batch = num(key, value)?,
            "warmup.lr" => self.warmup.lr = num(key, value)?,
            "warmup.mode" => self.warmup.mode = value.parse()?,
            "expansion.enabled" => self.train.expansion = num(key, value)?,
            "expansion.samples" => self.train.expansion_samples = num(key, value)?,
            "train.steps" => self.train.steps = num(key, value)?,
            "train.batch" => self.train.batch = num(key, value)?,
            "train.seed" => self.train.seed = num(key, value)?,
            "train.checkpoint_every" => self.train.checkpoint_every = num(key, value)?,
            "train.output_dir" => self.train.output_dir = Some(PathBuf::from(value)),
            "train.log_trajectories" => self.train.log_trajectories = num(key, value)?,
            "eval.mode" => self.eval_mode = value.parse()?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Serializes every key; `parse(to_config_string())` reproduces `self`.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("corpus.entities", self.corpus.entities.to_string());
        put("corpus.instances", self.corpus.instances.to_string());
        put("corpus.hops", self.corpus.hops.clone());
        put("corpus.distractor_ratio", format!("{:?}", self.corpus.distractor_ratio));
        put("corpus.retriever_k", self.corpus.retriever_k.to_string());
        if let Some(seed) = self.corpus.seed {
            put("corpus.seed", seed.to_string());
        }
        put("split.eval_fraction", format!("{:?}", self.eval_fraction));
        put("policy.temperature", format!("{:?}", self.temperature));
        put("rollout.max_search", self.max_search.to_string());
        put("rollout.group_size", self.optim.group_size.to_string());
        put("reward.plugin", self.reward.plugin.to_string());
        put("reward.lambda", format!("{:?}", self.reward.lambda));
        put(
            "reward.prefix_mode",
            match self.reward.prefix_mode {
                PrefixMode::Grounded => "grounded".into(),
                PrefixMode::Full => "full".into(),
            },
        );
        put("grpo.epsilon_clip", format!("{:?}", self.optim.epsilon_clip));
        put("grpo.beta_kl", format!("{:?}", self.optim.beta_kl));
        put("grpo.lr", format!("{:?}", self.optim.lr));
        put("grpo.std_epsilon", format!("{:?}", self.optim.std_epsilon));
        put("grpo.momentum", format!("{:?}", self.optim.momentum));
        put("grpo.expert_rho_fixed", self.optim.expert_rho_fixed.to_string());
        put(
            "grpo.expert_advantage",
            match self.optim.expert_advantage {
                ExpertAdvantage::Joint => "joint".into(),
                ExpertAdvantage::Fixed(v) => format!("{v:?}"),
            },
        );
        put("warmup.steps", self.warmup.steps.to_string());
        put("warmup.k", self.warmup.k.to_string());
        put("warmup.batch", self.warmup.batch.to_string());
        put("warmup.lr", format!("{:?}", self.warmup.lr));
        put("warmup.mode", self.warmup.mode.to_string());
        put("expansion.enabled", self.train.expansion.to_string());
        put("expansion.samples", self.train.expansion_samples.to_string());
        put("train.steps", self.train.steps.to_string());
        put("train.batch", self.train.batch.to_string());
        put("train.seed", self.train.seed.to_string());
        put("train.checkpoint_every", self.train.checkpoint_every.to_string());
        if let Some(dir) = &self.train.output_dir {
            put("train.output_dir", dir.display().to_string());
        }
        put("train.log_trajectories", self.train.log_trajectories.to_string());
        put("eval.mode", self.eval_mode.to_string());
        s
    }

    /// Normalized hop distribution string.
    pub fn hops_normalized(&self) -> Result<String> {
        Ok(format_hop_distribution(&parse_hop_distribution(&self.corpus.hops)?))
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::RewardPlugin;
    use crate::warmstart::WarmupMode;

    #[test]
    fn parses_dotted_and_sectioned_keys() {
        let cfg = RunConfig::parse(
            "# run\ncorpus.entities = 40\n[train]\nsteps = 12 # few\nseed = 3\n[reward]\nplugin = \"lexical\"\n",
            "inline",
        )
        .unwrap();
        assert_eq!(cfg.corpus.entities, 40);
        assert_eq!(cfg.train.steps, 12);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.corpus_seed(), 3);
        assert_eq!(cfg.reward.plugin, RewardPlugin::Lexical);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let err = RunConfig::parse("train.stepz = 3\n", "x.cfg").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        assert!(RunConfig::parse("train.steps = many\n", "x").is_err());
        assert!(RunConfig::parse("reward.lambda = 1.5\n", "x").is_err());
        assert!(RunConfig::parse("just text\n", "x").is_err());
    }

    #[test]
    fn config_string_round_trips() {
        let mut cfg = RunConfig::reference_scale();
        cfg.corpus.seed = Some(9);
        cfg.optim.expert_advantage = ExpertAdvantage::Fixed(1.0);
        cfg.train.output_dir = Some(PathBuf::from("/tmp/run"));
        cfg.warmup.mode = WarmupMode::Sft;
        let back = RunConfig::parse(&cfg.to_config_string(), "round").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.optim.group_size, 5);
        assert_eq!(cfg.optim.epsilon_clip, 0.2);
        assert_eq!(cfg.optim.beta_kl, 1e-3);
        assert_eq!(cfg.reward.lambda, 0.5);
        assert_eq!(cfg.temperature, 0.6);
        assert_eq!(cfg.max_search, 5);
        assert_eq!(cfg.warmup.k, 4);
        assert_eq!(cfg.warmup.steps, 50);
        assert_eq!(cfg.train.expansion_samples, 5);
        let reference = RunConfig::reference_scale();
        assert_eq!(reference.optim.lr, 1e-6);
        assert_eq!(reference.warmup.lr, 1e-5);
        assert_eq!(reference.train.batch, 24);
    }
}
