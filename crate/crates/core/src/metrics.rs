//! Per-step training metrics, trajectory records and the sinks that
//! persist them.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::{l2_norm, ObjectiveValue};
use crate::policy::Action;
use crate::rewards::RewardBreakdown;
use crate::rollout::{Group, Source};
use crate::synthenv::DocId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup = 1,
    Main = 2,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Main => "main",
        }
    }

    fn parse(s: &str) -> Option<Phase> {
        match s {
            "warmup" => Some(Phase::Warmup),
            "main" => Some(Phase::Main),
            _ => None,
        }
    }
}

/// Summary of one group after its update contribution was computed.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    /// Totals, r_g and r_o over sampled members (all members when the group
    /// holds only an expert).
    pub rewards: Vec<(f64, f64, f64)>,
    pub kl: f64,
    pub loss: f64,
    pub expanded: bool,
    pub rollouts: usize,
    pub resamples_used: usize,
}

impl GroupStats {
    pub fn from_group(group: &Group, value: &ObjectiveValue, expanded: bool, resamples_used: usize) -> Self {
        let pick = |sampled_only: bool| -> Vec<(f64, f64, f64)> {
            group
                .trajectories
                .iter()
                .zip(&group.rewards)
                .filter(|(t, _)| !sampled_only || t.source != Source::Expert)
                .map(|(_, r)| (r.total, r.r_g, r.r_o))
                .collect()
        };
        let mut rewards = pick(true);
        if rewards.is_empty() {
            rewards = pick(false);
        }
        let sampled = group
            .trajectories
            .iter()
            .filter(|t| t.source != Source::Expert)
            .count();
        GroupStats {
            rewards,
            kl: value.kl,
            loss: value.loss,
            expanded,
            rollouts: sampled + resamples_used - usize::from(expanded),
            resamples_used,
        }
    }
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Global step, counted across both phases starting at 1.
    pub step: usize,
    pub phase: Phase,
    pub mean_reward: f64,
    pub mean_r_g: f64,
    pub mean_r_o: f64,
    pub kl: f64,
    pub loss: f64,
    pub expansion_ratio: f64,
    pub grad_norm: f64,
    /// Trajectories sampled this step, including expansion resamples.
    pub rollouts: usize,
    pub resamples_used: usize,
}

pub const METRICS_HEADER: &str =
    "step,phase,mean_reward,mean_r_g,mean_r_o,kl,loss,expansion_ratio,grad_norm,rollouts,resamples_used";

impl StepMetrics {
    pub fn aggregate(step: usize, phase: Phase, groups: &[GroupStats], gradient: &[f64]) -> Self {
        let member_count: usize = groups.iter().map(|g| g.rewards.len()).sum();
        let mean_of = |f: fn(&(f64, f64, f64)) -> f64| {
            if member_count == 0 {
                return 0.0;
            }
            groups.iter().flat_map(|g| g.rewards.iter()).map(f).sum::<f64>() / member_count as f64
        };
        let n = groups.len().max(1) as f64;
        StepMetrics {
            step,
            phase,
            mean_reward: mean_of(|r| r.0),
            mean_r_g: mean_of(|r| r.1),
            mean_r_o: mean_of(|r| r.2),
            kl: groups.iter().map(|g| g.kl).sum::<f64>() / n,
            loss: groups.iter().map(|g| g.loss).sum::<f64>() / n,
            expansion_ratio: groups.iter().filter(|g| g.expanded).count() as f64 / n,
            grad_norm: l2_norm(gradient),
            rollouts: groups.iter().map(|g| g.rollouts).sum(),
            resamples_used: groups.iter().map(|g| g.resamples_used).sum(),
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.phase.as_str(),
            self.mean_reward,
            self.mean_r_g,
            self.mean_r_o,
            self.kl,
            self.loss,
            self.expansion_ratio,
            self.grad_norm,
            self.rollouts,
            self.resamples_used
        )
    }

    pub fn parse_csv_row(line: &str) -> std::result::Result<Self, String> {
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != 11 {
            return Err(format!("expected 11 columns, found {}", cols.len()));
        }
        let f = |i: usize| cols[i].parse::<f64>().map_err(|e| format!("column {i}: {e}"));
        let u = |i: usize| cols[i].parse::<usize>().map_err(|e| format!("column {i}: {e}"));
        Ok(StepMetrics {
            step: u(0)?,
            phase: Phase::parse(cols[1]).ok_or_else(|| format!("unknown phase `{}`", cols[1]))?,
            mean_reward: f(2)?,
            mean_r_g: f(3)?,
            mean_r_o: f(4)?,
            kl: f(5)?,
            loss: f(6)?,
            expansion_ratio: f(7)?,
            grad_norm: f(8)?,
            rollouts: u(9)?,
            resamples_used: u(10)?,
        })
    }
}

/// Reads a metrics file written by [`FileSink`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<StepMetrics>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 {
            if line.trim() != METRICS_HEADER {
                return Err(parse_err(path, 1, "unexpected header"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        rows.push(StepMetrics::parse_csv_row(&line).map_err(|m| parse_err(path, i + 1, &m))?);
    }
    Ok(rows)
}

fn parse_err(path: &Path, line: usize, msg: &str) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.to_string(),
    }
}

/// One line of the trajectory log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub phase: Phase,
    pub instance_id: u32,
    pub source: Source,
    pub actions: Vec<Action>,
    pub retrieved_sets: Vec<Vec<DocId>>,
    pub rewards: RewardBreakdown,
    pub advantage: f64,
}

impl TrajectoryRecord {
    pub fn from_group(step: usize, phase: Phase, group: &Group) -> Vec<TrajectoryRecord> {
        group
            .trajectories
            .iter()
            .enumerate()
            .map(|(i, t)| TrajectoryRecord {
                step,
                phase,
                instance_id: t.instance_id,
                source: t.source,
                actions: t.actions().collect(),
                retrieved_sets: t.retrieved_sets().cloned().collect(),
                rewards: group.rewards[i].clone(),
                advantage: group.advantages.get(i).copied().unwrap_or(0.0),
            })
            .collect()
    }
}

/// Receives per-step output of a training run.
pub trait RunSink {
    fn metrics(&mut self, row: &StepMetrics) -> Result<()>;
    fn group(&mut self, step: usize, phase: Phase, group: &Group) -> Result<()>;
}

/// Keeps metrics in memory and drops trajectories.
#[derive(Clone, Debug, Default)]
pub struct MemorySink {
    pub rows: Vec<StepMetrics>,
    pub records: Vec<TrajectoryRecord>,
    pub keep_records: bool,
}

impl RunSink for MemorySink {
    fn metrics(&mut self, row: &StepMetrics) -> Result<()> {
        self.rows.push(row.clone());
        Ok(())
    }

    fn group(&mut self, step: usize, phase: Phase, group: &Group) -> Result<()> {
        if self.keep_records {
            self.records.extend(TrajectoryRecord::from_group(step, phase, group));
        }
        Ok(())
    }
}

/// Streams `metrics.csv` and (optionally) `trajectories.jsonl` into a run
/// directory while also keeping the metric rows in memory.
pub struct FileSink {
    metrics_path: PathBuf,
    metrics: BufWriter<File>,
    trajectories: Option<(PathBuf, BufWriter<File>)>,
    pub rows: Vec<StepMetrics>,
}

impl FileSink {
    pub fn create(dir: &Path, log_trajectories: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let metrics_path = dir.join("metrics.csv");
        let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        let mut metrics = BufWriter::new(file);
        writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
        let trajectories = if log_trajectories {
            let path = dir.join("trajectories.jsonl");
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            Some((path, BufWriter::new(file)))
        } else {
            None
        };
        Ok(FileSink {
            metrics_path,
            metrics,
            trajectories,
            rows: Vec::new(),
        })
    }

    pub fn finish(mut self) -> Result<Vec<StepMetrics>> {
        self.metrics.flush().map_err(|e| Error::io(&self.metrics_path, e))?;
        if let Some((path, w)) = self.trajectories.as_mut() {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(self.rows)
    }
}

impl RunSink for FileSink {
    fn metrics(&mut self, row: &StepMetrics) -> Result<()> {
        writeln!(self.metrics, "{}", row.csv_row()).map_err(|e| Error::io(&self.metrics_path, e))?;
        self.rows.push(row.clone());
        Ok(())
    }

    fn group(&mut self, step: usize, phase: Phase, group: &Group) -> Result<()> {
        if let Some((path, w)) = self.trajectories.as_mut() {
            for rec in TrajectoryRecord::from_group(step, phase, group) {
                serde_json::to_writer(&mut *w, &rec)?;
                writeln!(w).map_err(|e| Error::io(path.as_path(), e))?;
            }
        }
        Ok(())
    }
}
