//! The consistency function and the small conditional denoiser behind it.
//!
//! `f(x, t) = c_skip(t) * x + c_out(t) * F(x, t)` with
//! `c_skip(t) = s^2 / ((t - eps)^2 + s^2)` and
//! `c_out(t) = s * (t - eps) / sqrt(s^2 + t^2)`, where `s` is the data scale.
//! At `t = eps` the coefficients are exactly 1 and 0, so `f(x, eps) = x`
//! whatever the network weights are.
//!
//! `F` works frame by frame: an input projection, a stack of residual
//! perceptron blocks that each receive the time embedding and the
//! conditioning projection additively, and a zero-initialized output layer.

use serde::{Deserialize, Serialize};

use crate::tensor::{Array, Rng, Tape, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("time {t} is below epsilon {epsilon}")]
    TimeBelowEpsilon { t: f64, epsilon: f64 },
    #[error("time must be positive (got {0})")]
    NonPositiveTime(f64),
    #[error("embedding dimension must be even and positive (got {0})")]
    EmbeddingDim(usize),
    #[error("{0}")]
    Shape(String),
    #[error("invalid sample: {0}")]
    Sample(String),
}

/// One data item: `[frames, bins]` values plus a per-frame validity mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    values: Array,
    mask: Vec<bool>,
}

impl Sample {
    pub fn new(values: Array, mask: Vec<bool>) -> Result<Self, ModelError> {
        if values.shape().len() != 2 {
            return Err(ModelError::Sample(format!(
                "values must be [frames, bins], got {:?}",
                values.shape()
            )));
        }
        if values.rows() == 0 || values.cols() == 0 {
            return Err(ModelError::Sample("frames and bins must be >= 1".into()));
        }
        if mask.len() != values.rows() {
            return Err(ModelError::Sample(format!(
                "mask has {} entries for {} frames",
                mask.len(),
                values.rows()
            )));
        }
        if !mask.iter().any(|m| *m) {
            return Err(ModelError::Sample("mask has no valid frame".into()));
        }
        Ok(Self { values, mask })
    }

    /// All frames valid.
    pub fn full(values: Array) -> Result<Self, ModelError> {
        let frames = values.rows();
        Self::new(values, vec![true; frames])
    }

    /// A padded sample whose first `valid` frames are real content.
    pub fn with_length(values: Array, valid: usize) -> Result<Self, ModelError> {
        let frames = values.rows();
        Self::new(values, (0..frames).map(|i| i < valid).collect())
    }

    pub fn values(&self) -> &Array {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn bins(&self) -> usize {
        self.values.cols()
    }

    pub fn valid_frames(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Per-frame conditioning vector (output of an upstream encoder) and an
/// optional speaker id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub vector: Option<Array>,
    pub speaker: Option<usize>,
}

impl Conditioning {
    pub fn none() -> Self {
        Self {
            vector: None,
            speaker: None,
        }
    }

    pub fn vector(vector: Array) -> Self {
        Self {
            vector: Some(vector),
            speaker: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.as_ref().map_or(0, Array::cols)
    }
}

/// Frame-stacked model inputs for a batch: row `r` is one frame of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameContext {
    pub cond: Option<Array>,
    /// One-hot speaker rows `[rows, n_speakers]`.
    pub speakers: Option<Array>,
}

impl FrameContext {
    pub fn empty() -> Self {
        Self {
            cond: None,
            speakers: None,
        }
    }
}

/// Layer sizes of the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub bins: usize,
    pub cond_dim: usize,
    pub n_speakers: usize,
    pub width: usize,
    pub blocks: usize,
    pub time_dim: usize,
}

/// Weights and biases of the denoiser, in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    arch: Architecture,
    names: Vec<String>,
    tensors: Vec<Array>,
}

fn normal_init(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Array {
    rng.gaussian(&[rows, cols])
        .scale(std)
        .expect("scaled normals are finite")
}

impl DenoiserParams {
    pub fn init(arch: Architecture, rng: &mut Rng) -> Result<Self, ModelError> {
        if arch.bins == 0 || arch.width == 0 || arch.time_dim == 0 || arch.time_dim % 2 != 0 {
            return Err(ModelError::Shape(format!("invalid architecture {arch:?}")));
        }
        let w = arch.width;
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let mut p = Self {
            arch,
            names: Vec::new(),
            tensors: Vec::new(),
        };
        p.push("in.w", normal_init(rng, arch.bins, w, (1.0 / arch.bins as f64).sqrt()));
        p.push("in.b", Array::zeros(&[1, w]));
        p.push("time.w1", normal_init(rng, arch.time_dim, w, he(arch.time_dim)));
        p.push("time.b1", Array::zeros(&[1, w]));
        p.push("time.w2", normal_init(rng, w, w, (1.0 / w as f64).sqrt()));
        p.push("time.b2", Array::zeros(&[1, w]));
        if arch.cond_dim > 0 {
            p.push("cond.w", normal_init(rng, arch.cond_dim, w, (1.0 / arch.cond_dim as f64).sqrt()));
            p.push("cond.b", Array::zeros(&[1, w]));
        }
        if arch.n_speakers > 0 {
            p.push("speaker.table", normal_init(rng, arch.n_speakers, w, 1.0));
        }
        for r in 0..arch.blocks {
            p.push(&format!("block{r}.w1"), normal_init(rng, w, w, he(w)));
            p.push(&format!("block{r}.b1"), Array::zeros(&[1, w]));
            p.push(&format!("block{r}.w2"), normal_init(rng, w, w, (0.5 / w as f64).sqrt()));
            p.push(&format!("block{r}.b2"), Array::zeros(&[1, w]));
        }
        p.push("out.w", Array::zeros(&[w, arch.bins]));
        p.push("out.b", Array::zeros(&[1, arch.bins]));
        Ok(p)
    }

    fn push(&mut self, name: &str, a: Array) {
        self.names.push(name.to_string());
        self.tensors.push(a);
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Array] {
        &self.tensors
    }

    /// Replaces all tensors; shapes must match the current ones.
    pub fn set_tensors(&mut self, tensors: Vec<Array>) -> Result<(), ModelError> {
        if tensors.len() != self.tensors.len()
            || tensors
                .iter()
                .zip(&self.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(ModelError::Shape("replacement tensors do not match layout".into()));
        }
        self.tensors = tensors;
        Ok(())
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Array> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn tensor(&self, name: &str) -> Option<&Array> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&self.tensors[i])
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Array::len).sum()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Puts every tensor on the tape, as leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|a| {
                if trainable {
                    tape.leaf(a.clone())
                } else {
                    tape.constant(a.clone())
                }
            })
            .collect()
    }

    fn check_inputs(&self, tape: &Tape, x: Var, ctx: &BoundContext) -> Result<(), ModelError> {
        let xv = tape.value(x);
        if xv.cols() != self.arch.bins {
            return Err(ModelError::Shape(format!(
                "input has {} bins, model expects {}",
                xv.cols(),
                self.arch.bins
            )));
        }
        let rows = xv.rows();
        match (ctx.cond, self.arch.cond_dim) {
            (None, 0) => {}
            (Some(c), d) if d > 0 => {
                let cv = tape.value(c);
                if cv.cols() != d || cv.rows() != rows {
                    return Err(ModelError::Shape(format!(
                        "conditioning {:?} does not match [{rows}, {d}]",
                        cv.shape()
                    )));
                }
            }
            (got, d) => {
                return Err(ModelError::Shape(format!(
                    "model expects {d} conditioning columns, got {}",
                    if got.is_some() { "a vector" } else { "none" }
                )))
            }
        }
        match (ctx.speakers, self.arch.n_speakers) {
            (None, 0) => {}
            (Some(s), n) if n > 0 => {
                let sv = tape.value(s);
                if sv.cols() != n || sv.rows() != rows {
                    return Err(ModelError::Shape("speaker rows do not match input".into()));
                }
            }
            _ => return Err(ModelError::Shape("speaker conditioning mismatch".into())),
        }
        Ok(())
    }

    /// `F(x, t)` on the tape. `params` are the handles from [`Self::bind`].
    pub fn denoise_on(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        ctx: &BoundContext,
        t: f64,
        sigma_data: f64,
    ) -> Result<Var, ModelError> {
        if t <= 0.0 {
            return Err(ModelError::NonPositiveTime(t));
        }
        self.check_inputs(tape, x, ctx)?;
        let mut it = params.iter().copied();
        let mut next = || it.next().expect("parameter list matches layout");

        let (in_w, in_b) = (next(), next());
        let (tw1, tb1, tw2, tb2) = (next(), next(), next(), next());

        let c_in = 1.0 / (sigma_data * sigma_data + t * t).sqrt();
        let xin = tape.scale(x, c_in)?;
        let h0 = tape.matmul(xin, in_w)?;
        let mut h = tape.add_row(h0, in_b)?;

        let emb = tape.constant(sinusoidal(noise_feature(t), self.arch.time_dim));
        let te = tape.matmul(emb, tw1)?;
        let te = tape.add_row(te, tb1)?;
        let te = tape.relu(te)?;
        let te = tape.matmul(te, tw2)?;
        let te = tape.add_row(te, tb2)?;

        let mut frame_ctx = None;
        if self.arch.cond_dim > 0 {
            let (cw, cb) = (next(), next());
            let c = ctx.cond.expect("checked above");
            let p = tape.matmul(c, cw)?;
            frame_ctx = Some(tape.add_row(p, cb)?);
        }
        if self.arch.n_speakers > 0 {
            let table = next();
            let s = tape.matmul(ctx.speakers.expect("checked above"), table)?;
            frame_ctx = Some(match frame_ctx {
                Some(c) => tape.add(c, s)?,
                None => s,
            });
        }

        for _ in 0..self.arch.blocks {
            let (w1, b1, w2, b2) = (next(), next(), next(), next());
            let mut u = tape.add_row(h, te)?;
            if let Some(c) = frame_ctx {
                u = tape.add(u, c)?;
            }
            let u = tape.matmul(u, w1)?;
            let u = tape.add_row(u, b1)?;
            let u = tape.relu(u)?;
            let u = tape.matmul(u, w2)?;
            let u = tape.add_row(u, b2)?;
            h = tape.add(h, u)?;
        }

        let (out_w, out_b) = (next(), next());
        let h = tape.relu(h)?;
        let out = tape.matmul(h, out_w)?;
        Ok(tape.add_row(out, out_b)?)
    }

    /// `f(x, t)` on the tape.
    #[allow(clippy::too_many_arguments)]
    pub fn consistency_on(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        ctx: &BoundContext,
        t: f64,
        coeffs: &Coefficients,
    ) -> Result<Var, ModelError> {
        let (skip, out) = coeffs.at(t)?;
        let raw = self.denoise_on(tape, params, x, ctx, t, coeffs.sigma_data)?;
        let a = tape.scale(x, skip)?;
        let b = tape.scale(raw, out)?;
        Ok(tape.add(a, b)?)
    }

    /// `F(x, t)` evaluated directly, without gradients.
    pub fn denoise_raw(
        &self,
        x: &Array,
        ctx: &FrameContext,
        t: f64,
        sigma_data: f64,
    ) -> Result<Array, ModelError> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.as_matrix());
        let bound = BoundContext::constants(&mut tape, ctx);
        let out = self.denoise_on(&mut tape, &params, xv, &bound, t, sigma_data)?;
        Ok(tape.value(out).clone())
    }

    /// `f(x, t)` evaluated directly, without gradients.
    pub fn predict(
        &self,
        x: &Array,
        ctx: &FrameContext,
        t: f64,
        coeffs: &Coefficients,
    ) -> Result<Array, ModelError> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.as_matrix());
        let bound = BoundContext::constants(&mut tape, ctx);
        let out = self.consistency_on(&mut tape, &params, xv, &bound, t, coeffs)?;
        Ok(tape.value(out).clone())
    }
}

/// Conditioning inputs already placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundContext {
    pub cond: Option<Var>,
    pub speakers: Option<Var>,
}

impl BoundContext {
    pub fn constants(tape: &mut Tape, ctx: &FrameContext) -> Self {
        Self {
            cond: ctx.cond.as_ref().map(|c| tape.constant(c.as_matrix())),
            speakers: ctx.speakers.as_ref().map(|s| tape.constant(s.as_matrix())),
        }
    }
}

/// The skip/output coefficient pair of the consistency parameterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub epsilon: f64,
    pub sigma_data: f64,
}

impl Coefficients {
    pub fn new(epsilon: f64, sigma_data: f64) -> Self {
        Self { epsilon, sigma_data }
    }

    pub fn c_skip(&self, t: f64) -> f64 {
        let s2 = self.sigma_data * self.sigma_data;
        let d = t - self.epsilon;
        s2 / (d * d + s2)
    }

    pub fn c_out(&self, t: f64) -> f64 {
        let s = self.sigma_data;
        s * (t - self.epsilon) / (s * s + t * t).sqrt()
    }

    /// `(c_skip(t), c_out(t))`, rejecting `t < epsilon`.
    pub fn at(&self, t: f64) -> Result<(f64, f64), ModelError> {
        if !(t >= self.epsilon) {
            return Err(ModelError::TimeBelowEpsilon {
                t,
                epsilon: self.epsilon,
            });
        }
        Ok((self.c_skip(t), self.c_out(t)))
    }
}

/// Value fed to the sinusoidal embedding for noise level `t`.
///
/// A log scale keeps small noise levels distinguishable; the factor of 250
/// maps `ln t` onto the embedding's frequency band.
pub fn noise_feature(t: f64) -> f64 {
    250.0 * t.ln()
}

fn sinusoidal(value: f64, dim: usize) -> Array {
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = if half == 1 {
            1.0
        } else {
            (1e-4f64).powf(i as f64 / (half - 1) as f64)
        };
        data.push((value * freq).sin());
        data.push((value * freq).cos());
    }
    Array::new(vec![1, dim], data).expect("sin/cos are finite")
}

/// `[sin(t w_1), cos(t w_1), ...]` with frequencies geometrically spaced
/// from 1 down to 1e-4 over `dim / 2` bands.
pub fn time_embed(t: f64, dim: usize) -> Result<Array, ModelError> {
    if dim == 0 || dim % 2 != 0 {
        return Err(ModelError::EmbeddingDim(dim));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(ModelError::NonPositiveTime(t));
    }
    Ok(sinusoidal(t, dim))
}

/// Score estimate `(f(x, t) - x) / t^2` for the noising `x_t = x_0 + t z`.
pub fn score_from_denoiser(f_out: &Array, x: &Array, t: f64) -> Result<Array, ModelError> {
    if !(t > 0.0) {
        return Err(ModelError::NonPositiveTime(t));
    }
    let inv = 1.0 / (t * t);
    Ok(f_out.zip_map(x, |f, xi| (f - xi) * inv)?)
}
