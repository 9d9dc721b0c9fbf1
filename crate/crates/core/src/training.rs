//! Consistency training: the two-point forward diffusion, the consistency and
//! reconstruction losses, the EMA target update and the optimizer loop.

use serde::{Deserialize, Serialize};

use crate::model::{
    BoundContext, Coefficients, Conditioning, DenoiserParams, FrameContext, ModelError, Sample,
};
use crate::sampler::{SamplerError, SamplerState};
use crate::schedule::{Curriculum, GridParams, ScheduleError, TimeGrid};
use crate::tensor::{Array, Rng, RngState, Tape, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("index {n} outside 1..={max}")]
    IndexOutOfRange { n: usize, max: usize },
    #[error("EMA decay must lie in [0, 1] (got {0})")]
    Decay(f64),
    #[error("non-finite loss at step {step} (index {n}): {detail}")]
    NonFinite { step: u64, n: usize, detail: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    L1,
    L2,
}

/// Whether padded frames count toward loss averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    Include,
    Exclude,
}

impl PaddingMode {
    pub fn row_weights(self, mask: &[bool]) -> Vec<f64> {
        match self {
            PaddingMode::Include => vec![1.0; mask.len()],
            PaddingMode::Exclude => mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Shape of the consistency weight `lambda(t_n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaKind {
    /// `lambda(t_n) = lambda`.
    Constant,
    /// `lambda(t_n) = lambda / (t_{n+1} - t_n)`.
    InverseGap,
}

impl LambdaKind {
    pub fn weight(self, scale: f64, t_n: f64, t_next: f64) -> f64 {
        match self {
            LambdaKind::Constant => scale,
            LambdaKind::InverseGap => scale / (t_next - t_n),
        }
    }
}

/// Optimizer, learning-rate and loss settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    /// Multiplicative learning-rate decay applied every `decay_every` steps.
    pub lr_decay: f64,
    pub decay_every: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss_norm: LossNorm,
    pub padding: PaddingMode,
    /// Scale of the consistency weight `lambda(t_n)`.
    pub lambda: f64,
    pub lambda_kind: LambdaKind,
    pub ct_weight: f64,
    pub recon_weight: f64,
    /// Duration, pitch and energy weights of the full reconstruction loss.
    /// Recorded for completeness; those terms have no inputs here.
    pub lambda_duration: f64,
    pub lambda_pitch: f64,
    pub lambda_energy: f64,
    pub sigma_data: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr0: 1e-4,
            lr_decay: 0.999,
            decay_every: 1000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss_norm: LossNorm::L1,
            padding: PaddingMode::Include,
            lambda: 1.0,
            lambda_kind: LambdaKind::Constant,
            ct_weight: 1.0,
            recon_weight: 1.0,
            lambda_duration: 0.1,
            lambda_pitch: 0.1,
            lambda_energy: 0.1,
            sigma_data: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(TrainError::Config(format!("{name} must lie in (0, 1] (got {v})")))
            }
        };
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(TrainError::Config(format!("lr0 must be finite and >= 0 (got {})", self.lr0)));
        }
        unit("lr_decay", self.lr_decay)?;
        if self.decay_every == 0 {
            return Err(TrainError::Config("decay_every must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(TrainError::Config("adam_eps must be > 0".into()));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("ct_weight", self.ct_weight),
            ("recon_weight", self.recon_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be finite and >= 0 (got {v})")));
            }
        }
        if !(self.sigma_data > 0.0) {
            return Err(TrainError::Config("sigma_data must be > 0".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at step `k`.
    pub fn lr_at(&self, k: u64) -> f64 {
        let decays = (k / self.decay_every) as i32;
        self.lr0 * self.lr_decay.powi(decays)
    }
}

/// A stack of samples laid out frame by frame: row `b * frames + f` is frame
/// `f` of sample `b`. Shorter samples are zero-padded with a false mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x0: Array,
    pub ctx: FrameContext,
    pub mask: Vec<bool>,
    pub samples: usize,
    pub frames: usize,
}

impl Batch {
    pub fn from_items(
        items: &[(&Sample, &Conditioning)],
        n_speakers: usize,
    ) -> Result<Self, TrainError> {
        let Some((first, first_cond)) = items.first() else {
            return Err(TrainError::Shape("empty batch".into()));
        };
        let bins = first.bins();
        let cond_dim = first_cond.dim();
        let frames = items.iter().map(|(s, _)| s.frames()).max().unwrap_or(1);
        let rows = items.len() * frames;
        let mut x0 = vec![0.0; rows * bins];
        let mut cond = vec![0.0; rows * cond_dim];
        let mut speakers = vec![0.0; rows * n_speakers];
        let mut mask = vec![false; rows];
        for (b, (s, c)) in items.iter().enumerate() {
            if s.bins() != bins || c.dim() != cond_dim {
                return Err(TrainError::Shape("batch items disagree on bins or conditioning".into()));
            }
            if let Some(v) = &c.vector {
                if v.rows() != s.frames() {
                    return Err(TrainError::Shape(format!(
                        "conditioning has {} frames, sample has {}",
                        v.rows(),
                        s.frames()
                    )));
                }
            }
            for f in 0..s.frames() {
                let r = b * frames + f;
                x0[r * bins..(r + 1) * bins].copy_from_slice(s.values().row(f));
                mask[r] = s.mask()[f];
                if let Some(v) = &c.vector {
                    cond[r * cond_dim..(r + 1) * cond_dim].copy_from_slice(v.row(f));
                }
            }
            if n_speakers > 0 {
                let id = c.speaker.unwrap_or(0);
                if id >= n_speakers {
                    return Err(TrainError::Shape(format!("speaker {id} >= {n_speakers}")));
                }
                for f in 0..frames {
                    speakers[(b * frames + f) * n_speakers + id] = 1.0;
                }
            }
        }
        Ok(Self {
            x0: Array::new(vec![rows, bins], x0)?,
            ctx: FrameContext {
                cond: (cond_dim > 0).then(|| Array::new(vec![rows, cond_dim], cond)).transpose()?,
                speakers: (n_speakers > 0)
                    .then(|| Array::new(vec![rows, n_speakers], speakers))
                    .transpose()?,
            },
            mask,
            samples: items.len(),
            frames,
        })
    }

    pub fn rows(&self) -> usize {
        self.x0.rows()
    }
}

/// `(x0 + t_{n+1} z, x0 + t_n z)` with one shared noise draw.
pub fn forward_pair(
    x0: &Array,
    z: &Array,
    grid: &TimeGrid,
    n: usize,
) -> Result<(Array, Array), TrainError> {
    let max = grid.len() - 1;
    if n == 0 || n > max {
        return Err(TrainError::IndexOutOfRange { n, max });
    }
    let hi = x0.axpy(grid.t(n + 1), z)?;
    let lo = x0.axpy(grid.t(n), z)?;
    Ok((hi, lo))
}

/// Online parameters, their EMA copy, and the decay in effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPair {
    pub online: DenoiserParams,
    pub target: DenoiserParams,
    pub mu: f64,
}

impl ModelPair {
    /// Target starts as an exact copy of the online network.
    pub fn new(online: DenoiserParams, mu: f64) -> Self {
        Self {
            target: online.clone(),
            online,
            mu,
        }
    }

    /// `target <- mu * target + (1 - mu) * online`, elementwise.
    pub fn ema_update(&mut self, mu: f64) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(TrainError::Decay(mu));
        }
        if !self.online.same_layout(&self.target) {
            return Err(TrainError::Shape("online and target layouts differ".into()));
        }
        let updated = self
            .target
            .tensors()
            .iter()
            .zip(self.online.tensors())
            .map(|(tgt, on)| tgt.zip_map(on, |a, b| mu * a + (1.0 - mu) * b))
            .collect::<Result<Vec<_>, _>>()?;
        self.target.set_tensors(updated)?;
        self.mu = mu;
        Ok(())
    }
}

/// Composite loss recorded on a tape, with handles to inspect it.
pub struct LossGraph {
    pub tape: Tape,
    pub online: Vec<Var>,
    pub target: Vec<Var>,
    pub l_ct: Var,
    pub l_recon: Option<Var>,
    pub total: Var,
}

/// Everything a loss evaluation needs besides the networks and the batch.
#[derive(Debug, Clone, Copy)]
pub struct LossSpec {
    pub coeffs: Coefficients,
    pub lambda: f64,
    pub lambda_kind: LambdaKind,
    pub ct_weight: f64,
    pub recon_weight: f64,
    pub norm: LossNorm,
    pub padding: PaddingMode,
}

impl LossSpec {
    pub fn from_config(cfg: &TrainConfig, epsilon: f64) -> Self {
        Self {
            coeffs: Coefficients::new(epsilon, cfg.sigma_data),
            lambda: cfg.lambda,
            lambda_kind: cfg.lambda_kind,
            ct_weight: cfg.ct_weight,
            recon_weight: cfg.recon_weight,
            norm: cfg.loss_norm,
            padding: cfg.padding,
        }
    }
}

fn bind_ctx(tape: &mut Tape, ctx: &FrameContext) -> BoundContext {
    BoundContext::constants(tape, ctx)
}

/// Records `ct_weight * lambda(t_n) * d(f_online(x_hi, t_{n+1}), f_target(x_lo, t_n))`
/// plus `recon_weight * |x0 - f_online(x0 + t_N z, t_N)|` on a fresh tape.
/// The target network is bound as constants, so no gradient can reach it.
pub fn build_loss_graph(
    pair: &ModelPair,
    batch: &Batch,
    grid: &TimeGrid,
    n: usize,
    z: &Array,
    spec: &LossSpec,
) -> Result<LossGraph, TrainError> {
    let (hi, lo) = forward_pair(&batch.x0, z, grid, n)?;
    let weights = spec.padding.row_weights(&batch.mask);

    let mut tape = Tape::new();
    let online = pair.online.bind(&mut tape, true);
    let target = pair.target.bind(&mut tape, false);
    let ctx = bind_ctx(&mut tape, &batch.ctx);

    let x_hi = tape.constant(hi);
    let x_lo = tape.constant(lo);
    let pred = pair
        .online
        .consistency_on(&mut tape, &online, x_hi, &ctx, grid.t(n + 1), &spec.coeffs)?;
    let anchor = pair
        .target
        .consistency_on(&mut tape, &target, x_lo, &ctx, grid.t(n), &spec.coeffs)?;
    let diff = tape.sub(pred, anchor)?;
    let sq = tape.square(diff)?;
    let d = tape.masked_mean(sq, weights.clone())?;
    let lambda = spec.lambda_kind.weight(spec.lambda, grid.t(n), grid.t(n + 1));
    let l_ct = tape.scale(d, lambda)?;
    let mut total = tape.scale(l_ct, spec.ct_weight)?;

    let mut l_recon = None;
    if spec.recon_weight > 0.0 {
        let r = recon_on_tape(&mut tape, pair, &online, &ctx, batch, grid, z, spec, weights)?;
        let weighted = tape.scale(r, spec.recon_weight)?;
        total = tape.add(total, weighted)?;
        l_recon = Some(r);
    }
    Ok(LossGraph {
        tape,
        online,
        target,
        l_ct,
        l_recon,
        total,
    })
}

#[allow(clippy::too_many_arguments)]
fn recon_on_tape(
    tape: &mut Tape,
    pair: &ModelPair,
    online: &[Var],
    ctx: &BoundContext,
    batch: &Batch,
    grid: &TimeGrid,
    z: &Array,
    spec: &LossSpec,
    weights: Vec<f64>,
) -> Result<Var, TrainError> {
    let t_top = grid.t_max();
    let noisy = tape.constant(batch.x0.axpy(t_top, z)?);
    let clean = tape.constant(batch.x0.clone());
    let pred = pair
        .online
        .consistency_on(tape, online, noisy, ctx, t_top, &spec.coeffs)?;
    let err = tape.sub(clean, pred)?;
    let e = match spec.norm {
        LossNorm::L1 => tape.abs(err)?,
        LossNorm::L2 => tape.square(err)?,
    };
    Ok(tape.masked_mean(e, weights)?)
}

/// Value of the consistency term for index `n`, with a caller-supplied
/// `lambda(t_n)`.
pub fn consistency_loss(
    pair: &ModelPair,
    batch: &Batch,
    grid: &TimeGrid,
    n: usize,
    z: &Array,
    coeffs: &Coefficients,
    padding: PaddingMode,
    lambda_fn: impl Fn(f64) -> f64,
) -> Result<f64, TrainError> {
    let (hi, lo) = forward_pair(&batch.x0, z, grid, n)?;
    let pred = pair.online.predict(&hi, &batch.ctx, grid.t(n + 1), coeffs)?;
    let anchor = pair.target.predict(&lo, &batch.ctx, grid.t(n), coeffs)?;
    let w = padding.row_weights(&batch.mask);
    Ok(lambda_fn(grid.t(n)) * weighted_mean(&pred.sub(&anchor)?, &w, |v| v * v)?)
}

/// Reconstruction error of the single-step prediction from `t_max`.
pub fn recon_loss(
    pair: &ModelPair,
    batch: &Batch,
    grid: &TimeGrid,
    z: &Array,
    coeffs: &Coefficients,
    norm: LossNorm,
    padding: PaddingMode,
) -> Result<f64, TrainError> {
    let noisy = batch.x0.axpy(grid.t_max(), z)?;
    let pred = pair.online.predict(&noisy, &batch.ctx, grid.t_max(), coeffs)?;
    let w = padding.row_weights(&batch.mask);
    let err = batch.x0.sub(&pred)?;
    match norm {
        LossNorm::L1 => weighted_mean(&err, &w, f64::abs),
        LossNorm::L2 => weighted_mean(&err, &w, |v| v * v),
    }
}

/// Row-weighted mean of `f(a_ij)`, matching the tape's `masked_mean`.
pub fn weighted_mean(a: &Array, weights: &[f64], f: impl Fn(f64) -> f64) -> Result<f64, TrainError> {
    let c = a.cols();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || weights.len() != a.rows() {
        return Err(TrainError::Shape("row weights do not select any row".into()));
    }
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        let row_sum: f64 = a.row(i).iter().map(|v| f(*v)).sum();
        acc += w * row_sum;
    }
    Ok(acc / (c as f64 * total))
}

/// Adam with bias correction:
/// `m <- b1 m + (1 - b1) g`, `v <- b2 v + (1 - b2) g^2`,
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)` where
/// `m_hat = m / (1 - b1^k)` and `v_hat = v / (1 - b2^k)` at step `k >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

impl Adam {
    pub fn new(params: &DenoiserParams, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Array> = params.tensors().iter().map(|a| Array::zeros(a.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(
        &mut self,
        params: &mut DenoiserParams,
        grads: &[Array],
        lr: f64,
    ) -> Result<(), TrainError> {
        if grads.len() != self.m.len() {
            return Err(TrainError::Shape("gradient count does not match parameters".into()));
        }
        let k = (self.steps + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(k);
        let bc2 = 1.0 - self.beta2.powi(k);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        // Everything is computed before anything is committed, so a
        // non-finite update leaves parameters and moments untouched.
        let mut updated = Vec::with_capacity(grads.len());
        let mut moments = Vec::with_capacity(grads.len());
        for (i, (p, g)) in params.tensors().iter().zip(grads).enumerate() {
            let m = self.m[i].zip_map(g, |m, g| b1 * m + (1.0 - b1) * g)?;
            let v = self.v[i].zip_map(g, |v, g| b2 * v + (1.0 - b2) * g * g)?;
            let mut data = p.data().to_vec();
            for ((x, mi), vi) in data.iter_mut().zip(m.data()).zip(v.data()) {
                *x -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
            updated.push(Array::new(p.shape().to_vec(), data)?);
            moments.push((m, v));
        }
        params.set_tensors(updated)?;
        for (i, (m, v)) in moments.into_iter().enumerate() {
            self.m[i] = m;
            self.v[i] = v;
        }
        self.steps += 1;
        Ok(())
    }
}

/// Metrics of one training step; one row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub n_drawn: usize,
    pub l_ct: f64,
    pub l_recon: f64,
    pub l_total: f64,
    pub lr: f64,
    pub n_k: usize,
    pub mu_k: f64,
}

/// Complete mutable state of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub grid: GridParams,
    pub curriculum: Curriculum,
    pub pair: ModelPair,
    pub sampler: SamplerState,
    pub optimizer: Adam,
    pub rng: Rng,
    pub step: u64,
}

/// Serializable snapshot of a [`Trainer`]'s dynamic state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: u64,
    pub pair: ModelPair,
    pub optimizer: Adam,
    pub sampler: SamplerState,
    pub rng: RngState,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        grid: GridParams,
        curriculum: Curriculum,
        sampler: SamplerState,
        online: DenoiserParams,
        rng: Rng,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        curriculum.validate()?;
        TimeGrid::from_params(grid, 2)?;
        let (_, mu0) = curriculum.at(0)?;
        let optimizer = Adam::new(&online, config.beta1, config.beta2, config.adam_eps);
        Ok(Self {
            config,
            grid,
            curriculum,
            pair: ModelPair::new(online, mu0),
            sampler,
            optimizer,
            rng,
            step: 0,
        })
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            step: self.step,
            pair: self.pair.clone(),
            optimizer: self.optimizer.clone(),
            sampler: self.sampler.clone(),
            rng: self.rng.state(),
        }
    }

    pub fn restore(&mut self, state: TrainerState) -> Result<(), TrainError> {
        if !state.pair.online.same_layout(&self.pair.online) {
            return Err(TrainError::Shape("checkpoint layout does not match model".into()));
        }
        self.step = state.step;
        self.pair = state.pair;
        self.optimizer = state.optimizer;
        self.sampler = state.sampler;
        self.rng = Rng::from_state(state.rng);
        Ok(())
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec::from_config(&self.config, self.grid.epsilon)
    }

    /// Draws `batch_size` items with replacement using the run's stream.
    pub fn sample_batch(
        &mut self,
        data: &[(Sample, Conditioning)],
    ) -> Result<Batch, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Shape("empty dataset".into()));
        }
        let picks: Vec<(&Sample, &Conditioning)> = (0..self.config.batch_size)
            .map(|_| {
                let (s, c) = &data[self.rng.below(data.len())];
                (s, c)
            })
            .collect();
        Batch::from_items(&picks, self.pair.online.architecture().n_speakers)
    }

    /// One optimizer step on `batch`.
    ///
    /// Draws `n`, takes a gradient step on the online network only, moves the
    /// target by EMA with `mu(k)`, and feeds the consistency loss back to the
    /// sampler.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord, TrainError> {
        let k = self.step.min(self.curriculum.total_steps);
        let (n_k, mu_k) = self.curriculum.at(k)?;
        let grid = TimeGrid::from_params(self.grid, n_k)?;
        self.sampler.resize(n_k)?;
        let n = self.sampler.draw(n_k, &mut self.rng)?;
        let z = self.rng.gaussian(batch.x0.shape());

        let spec = self.loss_spec();
        let non_finite = |e: TrainError, step| match e {
            TrainError::Tensor(TensorError::NonFinite(op))
            | TrainError::Model(ModelError::Tensor(TensorError::NonFinite(op))) => {
                TrainError::NonFinite {
                    step,
                    n,
                    detail: format!("non-finite value in {op}"),
                }
            }
            other => other,
        };
        let graph = build_loss_graph(&self.pair, batch, &grid, n, &z, &spec)
            .map_err(|e| non_finite(e, self.step))?;
        let l_ct = graph.tape.value(graph.l_ct).item()?;
        // With the reconstruction term switched off its value is still
        // logged, from a gradient-free evaluation on the same noise.
        let l_recon = match graph.l_recon {
            Some(v) => graph.tape.value(v).item()?,
            None => recon_loss(&self.pair, batch, &grid, &z, &spec.coeffs, spec.norm, spec.padding)
                .map_err(|e| non_finite(e, self.step))?,
        };
        let l_total = graph.tape.value(graph.total).item()?;
        let grads = graph
            .tape
            .backward(graph.total, &graph.online, false)
            .map_err(|e| non_finite(e.into(), self.step))?;

        let lr = self.config.lr_at(self.step);
        self.optimizer
            .step(&mut self.pair.online, grads.values(), lr)
            .map_err(|e| non_finite(e, self.step))?;
        self.pair.ema_update(mu_k)?;
        self.sampler.record_loss(n, l_ct)?;

        let record = StepRecord {
            step: self.step,
            n_drawn: n,
            l_ct,
            l_recon,
            l_total,
            lr,
            n_k,
            mu_k,
        };
        self.step += 1;
        Ok(record)
    }
}

/// Mean L2 distance between consistency outputs at adjacent grid points of
/// shared trajectories `x0 + t z`. Zero for a perfectly self-consistent model.
pub fn self_consistency_gap(
    params: &DenoiserParams,
    batch: &Batch,
    z: &Array,
    grid: &TimeGrid,
    coeffs: &Coefficients,
) -> Result<f64, TrainError> {
    let preds = grid
        .boundaries()
        .iter()
        .map(|&t| params.predict(&batch.x0.axpy(t, z)?, &batch.ctx, t, coeffs))
        .collect::<Result<Vec<_>, _>>()?;
    let f = batch.frames;
    let mut total = 0.0;
    for pair in preds.windows(2) {
        let d = pair[0].sub(&pair[1])?;
        let mut per_sample = 0.0;
        for b in 0..batch.samples {
            let rows = b * f..(b + 1) * f;
            let sq: f64 = rows.flat_map(|r| d.row(r).iter().map(|v| v * v)).sum();
            per_sample += sq.sqrt();
        }
        total += per_sample / batch.samples as f64;
    }
    Ok(total / (preds.len() - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::sampler::{SamplerConfig, SamplerKind};

    fn arch() -> Architecture {
        Architecture {
            bins: 2,
            cond_dim: 0,
            n_speakers: 0,
            width: 8,
            blocks: 1,
            time_dim: 4,
        }
    }

    fn toy_items(rng: &mut Rng, count: usize) -> Vec<(Sample, Conditioning)> {
        (0..count)
            .map(|_| {
                let v = rng.gaussian(&[1, 2]).scale(0.5).unwrap();
                (Sample::full(v).unwrap(), Conditioning::none())
            })
            .collect()
    }

    fn trainer(seed: u64, cfg: TrainConfig) -> Trainer {
        let mut rng = Rng::new(seed);
        let params = DenoiserParams::init(arch(), &mut rng).unwrap();
        let sampler = SamplerState::new(
            SamplerConfig {
                kind: SamplerKind::Importance,
                ..SamplerConfig::default()
            },
            2,
        )
        .unwrap();
        Trainer::new(
            cfg,
            GridParams::default(),
            Curriculum {
                total_steps: 200,
                ..Curriculum::default()
            },
            sampler,
            params,
            Rng::with_stream(seed, 1),
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_pair_is_clean() {
        let grid = TimeGrid::build(0.002, 80.0, 7.0, 10).unwrap();
        let x0 = Array::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let (hi, lo) = forward_pair(&x0, &Array::zeros(&[2, 2]), &grid, 4).unwrap();
        assert_eq!(hi, x0);
        assert_eq!(lo, x0);
        assert!(forward_pair(&x0, &x0, &grid, 10).is_err());
        assert!(forward_pair(&x0, &x0, &grid, 0).is_err());
    }

    #[test]
    fn pair_difference_is_grid_gap_times_noise() {
        let grid = TimeGrid::build(0.002, 80.0, 7.0, 10).unwrap();
        let mut rng = Rng::new(1);
        let x0 = rng.gaussian(&[3, 2]);
        let z = rng.gaussian(&[3, 2]);
        let (hi, lo) = forward_pair(&x0, &z, &grid, 9).unwrap();
        // Top index reaches t_max exactly.
        assert_eq!(hi, x0.axpy(80.0, &z).unwrap());
        let gap = grid.t(10) - grid.t(9);
        let d = hi.sub(&lo).unwrap();
        for (a, b) in d.data().iter().zip(z.data()) {
            assert!((a - gap * b).abs() < 1e-10);
        }
    }

    #[test]
    fn ema_cases() {
        let mut rng = Rng::new(2);
        let p = DenoiserParams::init(arch(), &mut rng).unwrap();
        let mut pair = ModelPair::new(p.clone(), 0.9);
        let mut other = p.clone();
        other.set_tensors(p.tensors().iter().map(|a| rng.gaussian(a.shape())).collect()).unwrap();
        pair.online = other.clone();
        let before = pair.target.clone();
        pair.ema_update(1.0).unwrap();
        assert_eq!(pair.target, before);
        pair.ema_update(0.0).unwrap();
        assert_eq!(pair.target, other);
        assert!(pair.ema_update(1.5).is_err());

        let zero = p.tensors().iter().map(|a| Array::zeros(a.shape())).collect();
        let two = p.tensors().iter().map(|a| Array::filled(a.shape(), 2.0)).collect();
        pair.target.set_tensors(zero).unwrap();
        pair.online.set_tensors(two).unwrap();
        pair.ema_update(0.5).unwrap();
        assert!(pair.target.tensors().iter().all(|a| a.data().iter().all(|v| *v == 1.0)));
    }

    #[test]
    fn recon_padding_modes() {
        // Frame 1 error 0, padded frame 2 error 1.
        let err = Array::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let mask = [true, false];
        let l1 = |mode: PaddingMode| weighted_mean(&err, &mode.row_weights(&mask), f64::abs).unwrap();
        assert_eq!(l1(PaddingMode::Include), 0.5);
        assert_eq!(l1(PaddingMode::Exclude), 0.0);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut rng = Rng::new(3);
        let mut p = DenoiserParams::init(arch(), &mut rng).unwrap();
        let before = p.clone();
        let grads: Vec<Array> = p.tensors().iter().map(|a| rng.gaussian(a.shape())).collect();
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        adam.step(&mut p, &grads, 0.01).unwrap();
        for ((new, old), g) in p.tensors().iter().zip(before.tensors()).zip(&grads) {
            for ((n, o), g) in new.data().iter().zip(old.data()).zip(g.data()) {
                // m_hat = g, v_hat = g^2 after one step.
                let m_hat = (0.1 * g) / 0.1;
                let v_hat = (0.001 * g * g) / (1.0 - 0.999);
                let want = o - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
                assert!((n - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_lr_leaves_online_unchanged() {
        let mut t = trainer(
            4,
            TrainConfig {
                lr0: 0.0,
                batch_size: 4,
                ..TrainConfig::default()
            },
        );
        let mut rng = Rng::new(10);
        let data = toy_items(&mut rng, 16);
        let before = t.pair.online.clone();
        for _ in 0..3 {
            let b = t.sample_batch(&data).unwrap();
            let r = t.train_step(&b).unwrap();
            assert!(r.l_total.is_finite() && r.l_total > 0.0);
        }
        assert_eq!(t.pair.online, before);
    }

    #[test]
    fn identical_runs_identical_traces() {
        let run = || {
            let mut t = trainer(
                5,
                TrainConfig {
                    batch_size: 4,
                    lr0: 1e-3,
                    ..TrainConfig::default()
                },
            );
            let mut rng = Rng::new(11);
            let data = toy_items(&mut rng, 16);
            (0..20)
                .map(|_| {
                    let b = t.sample_batch(&data).unwrap();
                    t.train_step(&b).unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn target_receives_no_gradient() {
        let t = trainer(6, TrainConfig::default());
        let mut rng = Rng::new(12);
        let data = toy_items(&mut rng, 4);
        let refs: Vec<_> = data.iter().map(|(s, c)| (s, c)).collect();
        let batch = Batch::from_items(&refs, 0).unwrap();
        let grid = TimeGrid::build(0.002, 80.0, 7.0, 10).unwrap();
        let z = rng.gaussian(batch.x0.shape());
        let g = build_loss_graph(&t.pair, &batch, &grid, 3, &z, &t.loss_spec()).unwrap();
        let grads = g.tape.backward(g.total, &g.target, false).unwrap();
        assert!(grads.values().iter().all(|a| a.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn lr_schedule_decays_in_blocks() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert_eq!(cfg.lr_at(999), 1e-4);
        assert_eq!(cfg.lr_at(1000), 1e-4 * 0.999);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr_decay: 1.5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
