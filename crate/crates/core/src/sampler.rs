//! Choice of the trajectory index `n` in `[1, N-1]` at each training step.
//!
//! Every sampler assigns a weight `c_n` to each index and draws with
//! probability `s_n = c_n / sum(c)`:
//!
//! * uniform: `c_n = 1`
//! * linear up: `c_n = alpha * n`
//! * linear down: `c_n = alpha * (N - n)`
//! * importance: `c_n = (1 - phi) * L_n / sum_i L_i + phi`, where `L_n` is the
//!   mean of the last `H` losses recorded for index `n`.
//!
//! The importance sampler draws uniformly until every index has at least one
//! recorded loss (and whenever the recorded losses are all zero).

use serde::{Deserialize, Serialize};

use crate::tensor::Rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SamplerError {
    #[error("sampler needs N >= 2 (got {0})")]
    TooFewBoundaries(usize),
    #[error("index {n} outside 1..={max}")]
    IndexOutOfRange { n: usize, max: usize },
    #[error("recorded loss must be finite and nonnegative (got {0})")]
    BadLoss(f64),
    #[error("invalid sampler setting: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Uniform,
    LinearUp,
    LinearDown,
    Importance,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 4] = [
        SamplerKind::Uniform,
        SamplerKind::LinearUp,
        SamplerKind::LinearDown,
        SamplerKind::Importance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Uniform => "uniform",
            SamplerKind::LinearUp => "linear_up",
            SamplerKind::LinearDown => "linear_down",
            SamplerKind::Importance => "importance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Slope of the linear samplers.
    pub alpha: f64,
    /// Balancing floor of the importance sampler, in `(0, 1]`.
    pub phi: f64,
    /// Losses remembered per index.
    pub history: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Importance,
            alpha: 1.0,
            phi: 0.1,
            history: 10,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(SamplerError::Config(format!("alpha must be > 0 (got {})", self.alpha)));
        }
        if !(self.phi > 0.0 && self.phi <= 1.0) {
            return Err(SamplerError::Config(format!("phi must lie in (0, 1] (got {})", self.phi)));
        }
        if self.history == 0 {
            return Err(SamplerError::Config("history must be >= 1".into()));
        }
        Ok(())
    }
}

/// Ring buffer of recent losses for one index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LossRow {
    values: Vec<f64>,
    next: usize,
    filled: usize,
}

impl LossRow {
    fn new(depth: usize) -> Self {
        Self {
            values: vec![0.0; depth],
            next: 0,
            filled: 0,
        }
    }

    fn push(&mut self, loss: f64) {
        self.values[self.next] = loss;
        self.next = (self.next + 1) % self.values.len();
        self.filled = (self.filled + 1).min(self.values.len());
    }

    fn mean(&self) -> Option<f64> {
        if self.filled == 0 {
            return None;
        }
        // Slots that were never written are zero.
        Some(self.values.iter().sum::<f64>() / self.filled as f64)
    }
}

/// Sampler settings plus the loss history matrix (one row per index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    config: SamplerConfig,
    rows: Vec<LossRow>,
}

impl SamplerState {
    pub fn new(config: SamplerConfig, n: usize) -> Result<Self, SamplerError> {
        config.validate()?;
        let mut state = Self {
            config,
            rows: Vec::new(),
        };
        state.resize(n)?;
        Ok(state)
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn kind(&self) -> SamplerKind {
        self.config.kind
    }

    /// Grows or shrinks the history to `N - 1` rows. Surviving rows keep
    /// their contents; new rows start empty.
    pub fn resize(&mut self, n: usize) -> Result<(), SamplerError> {
        if n < 2 {
            return Err(SamplerError::TooFewBoundaries(n));
        }
        let depth = self.config.history;
        self.rows.resize_with(n - 1, || LossRow::new(depth));
        Ok(())
    }

    /// Number of losses recorded for each index, oldest index first.
    pub fn fill_counts(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.filled).collect()
    }

    /// Loss history for index `n` in insertion order (oldest first).
    pub fn history(&self, n: usize) -> Vec<f64> {
        let row = &self.rows[n - 1];
        let depth = row.values.len();
        let start = (row.next + depth - row.filled) % depth;
        (0..row.filled).map(|i| row.values[(start + i) % depth]).collect()
    }

    /// Probabilities `s_1..s_{N-1}` for a grid with `N` boundaries.
    pub fn weights(&self, n: usize) -> Result<Vec<f64>, SamplerError> {
        if n < 2 {
            return Err(SamplerError::TooFewBoundaries(n));
        }
        let count = n - 1;
        let alpha = self.config.alpha;
        let c: Vec<f64> = match self.config.kind {
            SamplerKind::Uniform => vec![1.0; count],
            SamplerKind::LinearUp => (1..=count).map(|i| alpha * i as f64).collect(),
            SamplerKind::LinearDown => (1..=count).map(|i| alpha * (n - i) as f64).collect(),
            SamplerKind::Importance => self.importance_weights(count),
        };
        let total: f64 = c.iter().sum();
        Ok(c.into_iter().map(|v| v / total).collect())
    }

    fn importance_weights(&self, count: usize) -> Vec<f64> {
        let means: Option<Vec<f64>> = (0..count)
            .map(|i| self.rows.get(i).and_then(LossRow::mean))
            .collect();
        let Some(means) = means else {
            return vec![1.0; count];
        };
        let total: f64 = means.iter().sum();
        if total <= 0.0 {
            return vec![1.0; count];
        }
        let phi = self.config.phi;
        let c: Vec<f64> = means.iter().map(|m| (1.0 - phi) * m / total + phi).collect();
        // Equal weights normalize to exactly the uniform law.
        if c.iter().all(|v| *v == c[0]) {
            return vec![1.0; count];
        }
        c
    }

    /// Draws an index in `[1, N-1]`.
    pub fn draw(&self, n: usize, rng: &mut Rng) -> Result<usize, SamplerError> {
        let probs = self.weights(n)?;
        Ok(draw_from(&probs, rng.uniform()) + 1)
    }

    pub fn record_loss(&mut self, n: usize, loss: f64) -> Result<(), SamplerError> {
        if !(loss.is_finite() && loss >= 0.0) {
            return Err(SamplerError::BadLoss(loss));
        }
        let max = self.rows.len();
        if n == 0 || n > max {
            return Err(SamplerError::IndexOutOfRange { n, max });
        }
        self.rows[n - 1].push(loss);
        Ok(())
    }
}

/// Inverse-CDF lookup of `u ∈ [0, 1)`; skips zero-probability entries.
fn draw_from(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        last_positive = i;
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left the cumulative sum just below `u`.
    last_positive
}
