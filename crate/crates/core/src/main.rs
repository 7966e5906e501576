use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use grounded_grpo::harness::{ablate, evaluate, parse_arms, split_instances, train_to_dir, EvalMode, RunConfig};
use grounded_grpo::policy::PolicyParams;
use grounded_grpo::synthenv::{generate_corpus, parse_hop_distribution, Corpus, CorpusSpec};
use grounded_grpo::{Error, Result};

#[derive(Parser)]
#[command(name = "grounded-grpo", version, about = "Train and evaluate multi-hop retrieval agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus as JSONL.
    GenCorpus {
        #[arg(long, default_value_t = 40)]
        entities: u32,
        #[arg(long, default_value_t = 300)]
        instances: usize,
        /// Hop-count distribution, e.g. `2:0.5,3:0.5`.
        #[arg(long, default_value = "2:0.5,3:0.5")]
        hops: String,
        #[arg(long, default_value_t = 1.0)]
        distractor_ratio: f64,
        #[arg(long, default_value_t = 3)]
        retriever_k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run warm-up and main-phase training.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides `train.output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a corpus split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Eval)]
        split: Split,
        #[arg(long, default_value_t = 1.0 / 3.0)]
        eval_fraction: f64,
        #[arg(long, default_value = "greedy")]
        mode: String,
        #[arg(long, default_value_t = 5)]
        max_search: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train several ablation arms over several seeds and compare them.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated arms, or `all`.
        #[arg(long, default_value = "all")]
        arms: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2,3")]
        seeds: String,
        /// Write the full report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn load_config(path: Option<&PathBuf>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus {
            entities,
            instances,
            hops,
            distractor_ratio,
            retriever_k,
            seed,
            out,
        } => {
            let corpus = generate_corpus(&CorpusSpec {
                entity_count: entities,
                instance_count: instances,
                hop_distribution: parse_hop_distribution(&hops)?,
                distractor_ratio,
                retriever_k,
                seed,
            })?;
            corpus.save(&out)?;
            println!(
                "wrote {} documents and {} instances to {}",
                corpus.documents().len(),
                corpus.instances().len(),
                out.display()
            );
        }
        Command::Train {
            config,
            seed,
            out,
            overrides,
        } => {
            let mut cfg = load_config(config.as_ref(), &overrides)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let dir = out
                .or_else(|| cfg.train.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from(format!("runs/seed{}", cfg.train.seed)));
            let (_, summary) = train_to_dir(&cfg, &dir)?;
            println!("run written to {}", dir.display());
            if let Some(report) = &summary.eval {
                println!("{}", serde_json::to_string_pretty(report)?);
            }
        }
        Command::Eval {
            checkpoint,
            corpus,
            split,
            eval_fraction,
            mode,
            max_search,
            seed,
        } => {
            let params = PolicyParams::load(&checkpoint)?;
            let corpus = Corpus::load(&corpus)?;
            let mode: EvalMode = mode.parse()?;
            let (train_ids, eval_ids) = split_instances(&corpus, eval_fraction);
            let ids = match split {
                Split::Train => train_ids,
                Split::Eval => eval_ids,
                Split::All => corpus.instances().iter().map(|i| i.instance_id).collect(),
            };
            let report = evaluate(&params, &corpus, &ids, max_search, mode, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate {
            config,
            arms,
            seeds,
            out,
            overrides,
        } => {
            let cfg = load_config(config.as_ref(), &overrides)?;
            let arms = parse_arms(&arms)?;
            let seeds = seeds
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<u64>()
                        .map_err(|e| Error::Config(format!("bad seed `{s}`: {e}")))
                })
                .collect::<Result<Vec<u64>>>()?;
            let report = ablate(&cfg, &arms, &seeds)?;
            print!("{}", report.table());
            if let Some(path) = out {
                let file = std::fs::File::create(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                serde_json::to_writer_pretty(file, &report)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
