//! Discretized noise horizon and the training curriculum for its resolution.
//!
//! The horizon `[epsilon, t_max]` is cut into `N - 1` sub-intervals whose
//! boundaries are evenly spaced in `t^(1/p)`. Larger `p` packs boundaries
//! toward `epsilon`. The curriculum grows `N` with the training step and
//! adapts the EMA decay to it.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScheduleError {
    #[error("grid requires 0 < epsilon < t_max (got epsilon={epsilon}, t_max={t_max})")]
    Horizon { epsilon: f64, t_max: f64 },
    #[error("grid requires at least 2 boundaries (got {0})")]
    TooFewBoundaries(usize),
    #[error("warp exponent must be >= 1 (got {0})")]
    Warp(f64),
    #[error("step {k} outside 0..={total}")]
    StepOutOfRange { k: u64, total: u64 },
    #[error("invalid curriculum: {0}")]
    Curriculum(String),
}

/// Grid hyperparameters, as they appear in the run config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridParams {
    pub epsilon: f64,
    pub t_max: f64,
    pub p: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            epsilon: 0.002,
            t_max: 80.0,
            p: 7.0,
        }
    }
}

/// Boundaries `t_1 = epsilon < t_2 < ... < t_N = t_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    params: GridParams,
    boundaries: Vec<f64>,
}

impl TimeGrid {
    pub fn build(epsilon: f64, t_max: f64, p: f64, n: usize) -> Result<Self, ScheduleError> {
        if !(epsilon > 0.0 && epsilon < t_max && t_max.is_finite()) {
            return Err(ScheduleError::Horizon { epsilon, t_max });
        }
        if n < 2 {
            return Err(ScheduleError::TooFewBoundaries(n));
        }
        if !(p >= 1.0 && p.is_finite()) {
            return Err(ScheduleError::Warp(p));
        }
        let lo = epsilon.powf(1.0 / p);
        let hi = t_max.powf(1.0 / p);
        let last = (n - 1) as f64;
        let mut boundaries: Vec<f64> = (0..n)
            .map(|i| (lo + i as f64 / last * (hi - lo)).powf(p))
            .collect();
        // The endpoints are the horizon itself, not a round trip through powf.
        boundaries[0] = epsilon;
        boundaries[n - 1] = t_max;
        Ok(Self {
            params: GridParams { epsilon, t_max, p },
            boundaries,
        })
    }

    pub fn from_params(params: GridParams, n: usize) -> Result<Self, ScheduleError> {
        Self::build(params.epsilon, params.t_max, params.p, n)
    }

    pub fn params(&self) -> GridParams {
        self.params
    }

    pub fn epsilon(&self) -> f64 {
        self.params.epsilon
    }

    pub fn t_max(&self) -> f64 {
        self.params.t_max
    }

    /// Number of boundaries `N`.
    pub fn len(&self) -> usize {
        self.boundaries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// The 1-based boundary `t_n`.
    pub fn t(&self, n: usize) -> f64 {
        self.boundaries[n - 1]
    }
}

/// Settings for the step-dependent discretization and EMA decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Curriculum {
    /// Initial discretization.
    pub s0: u32,
    /// Final discretization.
    pub s1: u32,
    /// Base EMA decay.
    pub mu0: f64,
    /// Total training steps `K`.
    pub total_steps: u64,
}

impl Default for Curriculum {
    fn default() -> Self {
        Self {
            s0: 2,
            s1: 150,
            mu0: 0.9,
            total_steps: 20_000,
        }
    }
}

impl Curriculum {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.s0 < 1 || self.s1 < self.s0 {
            return Err(ScheduleError::Curriculum(format!(
                "need 1 <= s0 <= s1 (got s0={}, s1={})",
                self.s0, self.s1
            )));
        }
        if !(self.mu0 > 0.0 && self.mu0 <= 1.0) {
            return Err(ScheduleError::Curriculum(format!(
                "mu0 must lie in (0, 1] (got {})",
                self.mu0
            )));
        }
        if self.total_steps == 0 {
            return Err(ScheduleError::Curriculum("total_steps must be positive".into()));
        }
        Ok(())
    }

    /// `(N(k), mu(k))` for training step `k`.
    pub fn at(&self, k: u64) -> Result<(usize, f64), ScheduleError> {
        self.validate()?;
        if k > self.total_steps {
            return Err(ScheduleError::StepOutOfRange {
                k,
                total: self.total_steps,
            });
        }
        let frac = k as f64 / self.total_steps as f64;
        let s0 = f64::from(self.s0);
        let s1 = f64::from(self.s1);
        let ramp = (frac * ((s1 + 1.0).powi(2) - s0 * s0) + s0 * s0).sqrt();
        let n = ((ramp - 1.0).ceil().max(1.0) as usize) + 1;
        let mu = (s0 * self.mu0.ln() / n as f64).exp();
        Ok((n, mu))
    }
}
