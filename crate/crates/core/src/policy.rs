//! Featurized linear softmax policy over query/answer actions.
//!
//! Logits are `W φ(s)`; the distribution is `softmax(W φ(s) / T)`. The
//! feature map `φ` has one indicator per entity (visible or not), a one-hot
//! step index and a constant bias, so `φ` is sparse and every quantity the
//! objective needs (log-probs, ratios, KL, score-function gradients) is
//! computed exactly.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthenv::{EntityId, EnvState};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_TEMPERATURE: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Query(EntityId),
    Answer(EntityId),
}

impl Action {
    pub fn is_answer(self) -> bool {
        matches!(self, Action::Answer(_))
    }

    pub fn entity(self) -> EntityId {
        match self {
            Action::Query(e) | Action::Answer(e) => e,
        }
    }

    /// Index in the action space: queries first, then answers.
    pub fn index(self, entity_count: u32) -> usize {
        match self {
            Action::Query(e) => e.0 as usize,
            Action::Answer(e) => (entity_count + e.0) as usize,
        }
    }

    pub fn from_index(index: usize, entity_count: u32) -> Action {
        let n = entity_count as usize;
        debug_assert!(index < 2 * n);
        if index < n {
            Action::Query(EntityId(index as u32))
        } else {
            Action::Answer(EntityId((index - n) as u32))
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Query(e) => write!(f, "query({e})"),
            Action::Answer(e) => write!(f, "answer({e})"),
        }
    }
}

/// Shape of the feature map: `entity_count + max_steps + 1` columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub entity_count: u32,
    pub max_steps: usize,
}

impl FeatureMap {
    pub fn new(entity_count: u32, max_steps: usize) -> Self {
        FeatureMap {
            entity_count,
            max_steps: max_steps.max(1),
        }
    }

    pub fn dim(&self) -> usize {
        self.entity_count as usize + self.max_steps + 1
    }

    pub fn action_count(&self) -> usize {
        2 * self.entity_count as usize
    }

    /// Sparse φ(s). Step indices past the horizon share the last slot.
    pub fn features(&self, state: &EnvState) -> Result<FeatureVector> {
        let n = self.entity_count as usize;
        let mut active = Vec::with_capacity(state.visible_entities.len() + 2);
        for e in &state.visible_entities {
            if e.0 as usize >= n {
                return Err(Error::Dimension {
                    expected: n,
                    found: e.0 as usize + 1,
                });
            }
            active.push(e.0 as usize);
        }
        active.push(n + state.step_index.min(self.max_steps - 1));
        active.push(n + self.max_steps);
        Ok(FeatureVector {
            dim: self.dim(),
            active,
        })
    }
}

/// 0/1 feature vector stored as its sorted active indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub dim: usize,
    pub active: Vec<usize>,
}

impl FeatureVector {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &i in &self.active {
            v[i] = 1.0;
        }
        v
    }
}

/// Weight matrix of shape `action_count x feature_dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    weights: Vec<f64>,
    action_count: usize,
    feature_dim: usize,
    temperature: f64,
    version: u64,
}

impl PolicyParams {
    /// Zero weights: the uniform policy.
    pub fn zeros(map: FeatureMap, temperature: f64) -> Result<Self> {
        Self::from_weights(
            vec![0.0; map.action_count() * map.dim()],
            map.action_count(),
            map.dim(),
            temperature,
            0,
        )
    }

    pub fn from_weights(
        weights: Vec<f64>,
        action_count: usize,
        feature_dim: usize,
        temperature: f64,
        version: u64,
    ) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
        }
        if weights.len() != action_count * feature_dim {
            return Err(Error::Dimension {
                expected: action_count * feature_dim,
                found: weights.len(),
            });
        }
        if action_count == 0 || !action_count.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "action_count must be a positive even number, got {action_count}"
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("weights must be finite".into()));
        }
        Ok(PolicyParams {
            weights,
            action_count,
            feature_dim,
            temperature,
            version,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn entity_count(&self) -> u32 {
        (self.action_count / 2) as u32
    }

    pub fn weight(&self, action: usize, feature: usize) -> f64 {
        self.weights[action * self.feature_dim + feature]
    }

    pub fn set_weight(&mut self, action: usize, feature: usize, value: f64) {
        self.weights[action * self.feature_dim + feature] = value;
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Feature map implied by the parameter shape.
    pub fn feature_map(&self) -> Result<FeatureMap> {
        let n = self.entity_count() as usize;
        if self.feature_dim < n + 2 {
            return Err(Error::Dimension {
                expected: n + 2,
                found: self.feature_dim,
            });
        }
        Ok(FeatureMap::new(n as u32, self.feature_dim - n - 1))
    }

    pub fn check_map(&self, map: FeatureMap) -> Result<()> {
        if map.action_count() != self.action_count {
            return Err(Error::Dimension {
                expected: self.action_count,
                found: map.action_count(),
            });
        }
        if map.dim() != self.feature_dim {
            return Err(Error::Dimension {
                expected: self.feature_dim,
                found: map.dim(),
            });
        }
        Ok(())
    }

    /// Untempered logits `W φ`.
    pub fn logits(&self, phi: &FeatureVector) -> Result<Vec<f64>> {
        if phi.dim != self.feature_dim {
            return Err(Error::Dimension {
                expected: self.feature_dim,
                found: phi.dim,
            });
        }
        Ok((0..self.action_count)
            .map(|a| {
                let row = &self.weights[a * self.feature_dim..(a + 1) * self.feature_dim];
                phi.active.iter().map(|&i| row[i]).sum()
            })
            .collect())
    }

    /// π(·|φ).
    pub fn distribution(&self, phi: &FeatureVector) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(phi)?, self.temperature))
    }

    /// log π(·|φ), computed stably.
    pub fn log_distribution(&self, phi: &FeatureVector) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.logits(phi)?, self.temperature))
    }

    pub fn log_prob(&self, phi: &FeatureVector, action: usize) -> Result<f64> {
        Ok(self.log_distribution(phi)?[action])
    }

    /// Adds `coef * ∇_W log π(action|φ)` to `grad`.
    pub fn accumulate_grad_log_prob(
        &self,
        grad: &mut [f64],
        phi: &FeatureVector,
        action: usize,
        coef: f64,
    ) -> Result<()> {
        let probs = self.distribution(phi)?;
        self.accumulate_score(grad, phi, &probs, action, coef);
        Ok(())
    }

    pub(crate) fn accumulate_score(
        &self,
        grad: &mut [f64],
        phi: &FeatureVector,
        probs: &[f64],
        action: usize,
        coef: f64,
    ) {
        let scale = coef / self.temperature;
        for (a, &p) in probs.iter().enumerate() {
            let g = scale * (if a == action { 1.0 } else { 0.0 } - p);
            if g == 0.0 {
                continue;
            }
            let row = &mut grad[a * self.feature_dim..(a + 1) * self.feature_dim];
            for &i in &phi.active {
                row[i] += g;
            }
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = serde_json::json!({
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "action_count": self.action_count,
            "feature_dim": self.feature_dim,
            "temperature": self.temperature,
            "version": self.version,
        });
        writeln!(out, "{header}")?;
        for row in self.weights.chunks(self.feature_dim) {
            let line: Vec<String> = row.iter().map(|w| format!("{w:?}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R, origin: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Header {
            format_version: u32,
            action_count: usize,
            feature_dim: usize,
            temperature: f64,
            version: u64,
        }
        let perr = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut lines = input.lines();
        let first = lines
            .next()
            .ok_or_else(|| perr(1, "empty checkpoint".into()))?
            .map_err(|e| perr(1, e.to_string()))?;
        let header: Header =
            serde_json::from_str(&first).map_err(|e| perr(1, format!("bad header: {e}")))?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(perr(
                1,
                format!("unsupported format_version {}", header.format_version),
            ));
        }
        let mut weights = Vec::with_capacity(header.action_count * header.feature_dim);
        let mut rows = 0;
        for (idx, line) in lines.enumerate() {
            let line = line.map_err(|e| perr(idx + 2, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let before = weights.len();
            for tok in line.split_whitespace() {
                let w: f64 = tok
                    .parse()
                    .map_err(|_| perr(idx + 2, format!("bad weight `{tok}`")))?;
                weights.push(w);
            }
            if weights.len() - before != header.feature_dim {
                return Err(perr(
                    idx + 2,
                    format!(
                        "row has {} weights, expected {}",
                        weights.len() - before,
                        header.feature_dim
                    ),
                ));
            }
            rows += 1;
        }
        if rows != header.action_count {
            return Err(perr(
                rows + 1,
                format!("found {rows} rows, expected {}", header.action_count),
            ));
        }
        PolicyParams::from_weights(
            weights,
            header.action_count,
            header.feature_dim,
            header.temperature,
            header.version,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        PolicyParams::read_checkpoint(std::io::BufReader::new(file), &path.display().to_string())
    }
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|z| ((z - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logits.iter().map(|z| (z - max) / temperature).collect();
    let lse = scaled.iter().map(|s| s.exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - lse).collect()
}

/// π(·|s) for an environment state.
pub fn action_distribution(params: &PolicyParams, state: &EnvState) -> Result<Vec<f64>> {
    let map = params.feature_map()?;
    params.distribution(&map.features(state)?)
}

/// Draws an action index from `probs` by inverse CDF.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the cumulative sum.
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// Samples an action, returning it with its log-probability.
pub fn sample_action<R: Rng + ?Sized>(
    params: &PolicyParams,
    phi: &FeatureVector,
    rng: &mut R,
) -> Result<(Action, f64)> {
    let log_probs = params.log_distribution(phi)?;
    let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
    let idx = sample_index(&probs, rng);
    Ok((Action::from_index(idx, params.entity_count()), log_probs[idx]))
}

/// Highest-probability action; ties go to the lowest index.
pub fn greedy_action(params: &PolicyParams, phi: &FeatureVector) -> Result<(Action, f64)> {
    let log_probs = params.log_distribution(phi)?;
    let mut best = 0;
    for (i, &lp) in log_probs.iter().enumerate() {
        if lp > log_probs[best] {
            best = i;
        }
    }
    Ok((Action::from_index(best, params.entity_count()), log_probs[best]))
}

/// Dense ∇_W log π(action|φ): `(onehot(action) − π) ⊗ φ / T`.
pub fn grad_log_prob(params: &PolicyParams, phi: &FeatureVector, action: Action) -> Result<Vec<f64>> {
    let idx = action.index(params.entity_count());
    if idx >= params.action_count() {
        return Err(Error::Dimension {
            expected: params.action_count(),
            found: idx + 1,
        });
    }
    let mut grad = vec![0.0; params.weights().len()];
    params.accumulate_grad_log_prob(&mut grad, phi, idx, 1.0)?;
    Ok(grad)
}

/// Frozen value copy (π_θold or π_ref); keeps the source's version tag.
pub fn snapshot(params: &PolicyParams) -> PolicyParams {
    params.clone()
}
