//! Generation from a trained consistency function, and a probability-flow
//! ODE solver used as a reference.
//!
//! Single-step generation evaluates `f(t_max * z, t_max)`. The multi-step
//! loop alternates a denoise at `tau_i` with re-injection of noise of
//! standard deviation `sqrt(tau_{i+1}^2 - eps^2)`, using fresh noise per hop.

use crate::model::{Coefficients, DenoiserParams, FrameContext, ModelError};
use crate::schedule::TimeGrid;
use crate::tensor::{Array, Rng, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InferenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid step plan: {0}")]
    Plan(String),
    #[error("ODE step underflow between t={from} and t={to}")]
    StepUnderflow { from: f64, to: f64 },
}

/// Decreasing noise levels `tau_1 = t_max > tau_2 > ... > tau_T >= eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    times: Vec<f64>,
}

impl StepPlan {
    pub fn new(times: Vec<f64>, t_max: f64, epsilon: f64) -> Result<Self, InferenceError> {
        match times.first() {
            None => return Err(InferenceError::Plan("at least one step is required".into())),
            Some(&first) if first != t_max => {
                return Err(InferenceError::Plan(format!(
                    "first time must be t_max={t_max} (got {first})"
                )))
            }
            _ => {}
        }
        if times.windows(2).any(|w| w[1] >= w[0]) {
            return Err(InferenceError::Plan("times must be strictly decreasing".into()));
        }
        if times.last().is_some_and(|&t| t < epsilon) {
            return Err(InferenceError::Plan(format!("times must stay >= epsilon={epsilon}")));
        }
        Ok(Self { times })
    }

    /// `steps` grid boundaries at evenly spaced indices, both endpoints
    /// included (a one-step plan is just `t_max`).
    pub fn from_grid(grid: &TimeGrid, steps: usize) -> Result<Self, InferenceError> {
        if steps == 0 || steps > grid.len() {
            return Err(InferenceError::Plan(format!(
                "{steps} steps cannot be taken from a grid of {}",
                grid.len()
            )));
        }
        let last = grid.len() - 1;
        let times = if steps == 1 {
            vec![grid.t_max()]
        } else {
            (0..steps)
                .map(|i| {
                    let idx = ((last as f64) * (1.0 - i as f64 / (steps - 1) as f64)).round();
                    grid.boundaries()[idx as usize]
                })
                .collect()
        };
        Self::new(times, grid.t_max(), grid.epsilon())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len()
    }
}

/// Standard deviations of the noise injected between hops.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InjectionTrace {
    pub scales: Vec<f64>,
}

/// `f(t_max * z, t_max)` for `z ~ N(0, I)` of the given `[rows, bins]` shape.
pub fn generate_single(
    params: &DenoiserParams,
    ctx: &FrameContext,
    shape: [usize; 2],
    rng: &mut Rng,
    t_max: f64,
    coeffs: &Coefficients,
) -> Result<Array, InferenceError> {
    let x_t = rng.gaussian(&shape).scale(t_max)?;
    Ok(params.predict(&x_t, ctx, t_max, coeffs)?)
}

/// Alternating denoise / noise-injection generation over `plan`.
pub fn generate_multi(
    params: &DenoiserParams,
    ctx: &FrameContext,
    shape: [usize; 2],
    rng: &mut Rng,
    plan: &StepPlan,
    coeffs: &Coefficients,
) -> Result<Array, InferenceError> {
    generate_multi_traced(params, ctx, shape, rng, plan, coeffs).map(|(x, _)| x)
}

pub fn generate_multi_traced(
    params: &DenoiserParams,
    ctx: &FrameContext,
    shape: [usize; 2],
    rng: &mut Rng,
    plan: &StepPlan,
    coeffs: &Coefficients,
) -> Result<(Array, InjectionTrace), InferenceError> {
    let times = plan.times();
    let eps = coeffs.epsilon;
    let mut x = rng.gaussian(&shape).scale(times[0])?;
    let mut trace = InjectionTrace::default();
    let mut denoised = None;
    for (i, &tau) in times.iter().enumerate() {
        let x_hat = params.predict(&x, ctx, tau, coeffs)?;
        if let Some(&next) = times.get(i + 1) {
            let scale = (next * next - eps * eps).max(0.0).sqrt();
            trace.scales.push(scale);
            x = x_hat.axpy(scale, &rng.gaussian(&shape))?;
        }
        denoised = Some(x_hat);
    }
    Ok((denoised.expect("plan has at least one step"), trace))
}

/// Heun integration of `dx/dt = -t * score(x, t)` along `t_grid`, which runs
/// from the starting noise level down to the final one.
pub fn ode_reference_solve<F>(
    mut score: F,
    x_start: &Array,
    t_grid: &[f64],
) -> Result<Array, InferenceError>
where
    F: FnMut(&Array, f64) -> Result<Array, InferenceError>,
{
    if t_grid.len() < 2 {
        return Err(InferenceError::Plan("ODE grid needs at least two points".into()));
    }
    let mut slope = |x: &Array, t: f64| -> Result<Array, InferenceError> {
        Ok(score(x, t)?.scale(-t)?)
    };
    let mut x = x_start.clone();
    for w in t_grid.windows(2) {
        let (t, next) = (w[0], w[1]);
        let h = next - t;
        if !(h < 0.0) || t + h == t {
            return Err(InferenceError::StepUnderflow { from: t, to: next });
        }
        let d1 = slope(&x, t)?;
        let euler = x.axpy(h, &d1)?;
        let d2 = slope(&euler, next)?;
        x = x.zip_map(&d1.add(&d2)?, |xi, d| xi + 0.5 * h * d)?;
    }
    Ok(x)
}

/// Descending ODE grid with `steps` Heun steps on the warped boundaries.
pub fn ode_grid(epsilon: f64, t_max: f64, p: f64, steps: usize) -> Result<Vec<f64>, InferenceError> {
    let grid = TimeGrid::build(epsilon, t_max, p, steps + 1)
        .map_err(|e| InferenceError::Plan(e.to_string()))?;
    Ok(grid.boundaries().iter().rev().copied().collect())
}

/// Score of the learned model: `(f(x, t) - x) / t^2`.
pub fn learned_score<'a>(
    params: &'a DenoiserParams,
    ctx: &'a FrameContext,
    coeffs: &'a Coefficients,
) -> impl FnMut(&Array, f64) -> Result<Array, InferenceError> + 'a {
    move |x, t| {
        let f = params.predict(x, ctx, t, coeffs)?;
        Ok(crate::model::score_from_denoiser(&f, x, t)?)
    }
}
