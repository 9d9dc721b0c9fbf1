//! Finite-difference sweeps shared by the oracle tests and the acceptance
//! run. Each returns the worst relative error seen.

use cmgen::model::{Architecture, BoundContext, Coefficients, DenoiserParams, FrameContext, ModelError};
use cmgen::schedule::TimeGrid;
use cmgen::tensor::{check_gradients, Array, Rng, Tape, TensorError, Var};

pub const H: f64 = 1e-5;
pub const FLOOR: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

type Graph = fn(&mut Tape, &[Var]) -> Result<Var, TensorError>;

/// Reduces an output to a scalar through fixed random weights, so every
/// output entry gets a distinct upstream gradient.
fn weighted_sum(t: &mut Tape, out: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = t.value(out).shape().to_vec();
    let w = t.constant(Rng::new(seed).gaussian(&shape));
    let p = t.mul(out, w)?;
    t.sum(p)
}

fn worst_over<F>(f: F, shapes: &[&[usize]], points: usize, seed: u64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut rng = Rng::new(seed);
    (0..points)
        .map(|_| {
            let inputs: Vec<Array> = shapes.iter().map(|s| rng.gaussian(s)).collect();
            check_gradients(&f, &inputs, H, FLOOR).unwrap().max_rel_error
        })
        .fold(0.0, f64::max)
}

fn cases() -> Vec<(&'static str, Graph, Vec<&'static [usize]>)> {
    vec![
        ("matmul", |t, v| { let o = t.matmul(v[0], v[1])?; weighted_sum(t, o, 1) }, vec![&[3, 4], &[4, 2]]),
        ("add", |t, v| { let o = t.add(v[0], v[1])?; weighted_sum(t, o, 2) }, vec![&[3, 2], &[3, 2]]),
        ("sub", |t, v| { let o = t.sub(v[0], v[1])?; weighted_sum(t, o, 3) }, vec![&[2, 3], &[2, 3]]),
        ("mul", |t, v| { let o = t.mul(v[0], v[1])?; weighted_sum(t, o, 4) }, vec![&[3, 3], &[3, 3]]),
        ("add_row", |t, v| { let o = t.add_row(v[0], v[1])?; weighted_sum(t, o, 5) }, vec![&[4, 3], &[1, 3]]),
        ("concat_cols", |t, v| { let o = t.concat_cols(&[v[0], v[1]])?; weighted_sum(t, o, 6) }, vec![&[3, 2], &[3, 1]]),
        ("slice_cols", |t, v| { let o = t.slice_cols(v[0], 1, 3)?; weighted_sum(t, o, 7) }, vec![&[3, 4]]),
        ("scale", |t, v| { let o = t.scale(v[0], -1.7)?; weighted_sum(t, o, 8) }, vec![&[2, 3]]),
        ("scale_rows", |t, v| { let o = t.scale_rows(v[0], vec![0.5, -2.0, 3.0])?; weighted_sum(t, o, 9) }, vec![&[3, 2]]),
        ("relu", |t, v| { let o = t.relu(v[0])?; weighted_sum(t, o, 10) }, vec![&[4, 3]]),
        ("abs", |t, v| { let o = t.abs(v[0])?; weighted_sum(t, o, 11) }, vec![&[4, 3]]),
        ("square", |t, v| { let o = t.square(v[0])?; weighted_sum(t, o, 12) }, vec![&[3, 3]]),
        ("sum", |t, v| { let o = t.scale(v[0], 0.7)?; let s = t.square(o)?; t.sum(s) }, vec![&[3, 2]]),
        ("mean", |t, v| { let s = t.square(v[0])?; t.mean(s) }, vec![&[3, 2]]),
        ("masked_mean", |t, v| {
            let w = t.constant(Rng::new(13).gaussian(&[4, 2]));
            let o = t.mul(v[0], w)?;
            t.masked_mean(o, vec![1.0, 0.0, 1.0, 0.5])
        }, vec![&[4, 2]]),
    ]
}

/// Worst error per primitive (and a three-layer perceptron) over `points`
/// random inputs each.
pub fn primitive_errors(points: usize) -> Vec<(&'static str, f64)> {
    let mut errors: Vec<(&'static str, f64)> = cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, f, shapes))| (name, worst_over(f, &shapes, points, 7919 * (i as u64 + 1))))
        .collect();
    errors.push(("mlp", mlp_error(points)));
    errors
}

const MLP_SHAPES: [&[usize]; 6] = [&[3, 6], &[1, 6], &[6, 4], &[1, 4], &[4, 2], &[1, 2]];

/// Three-layer perceptron; also returns the smallest hidden pre-activation
/// magnitude so callers can keep away from the ReLU kinks.
fn mlp(t: &mut Tape, v: &[Var]) -> Result<(Var, f64), TensorError> {
    let x = t.constant(Rng::new(14).gaussian(&[5, 3]));
    let h = t.matmul(x, v[0])?;
    let z1 = t.add_row(h, v[1])?;
    let h = t.relu(z1)?;
    let h = t.matmul(h, v[2])?;
    let z2 = t.add_row(h, v[3])?;
    let h = t.relu(z2)?;
    let o = t.matmul(h, v[4])?;
    let o = t.add_row(o, v[5])?;
    let s = t.square(o)?;
    let margin = [z1, z2]
        .iter()
        .flat_map(|z| t.value(*z).data().to_vec())
        .fold(f64::INFINITY, |m, z| m.min(z.abs()));
    Ok((t.mean(s)?, margin))
}

fn mlp_error(points: usize) -> f64 {
    let mut rng = Rng::new(7919 * 100);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < points {
        let inputs: Vec<Array> = MLP_SHAPES.iter().map(|s| rng.gaussian(s)).collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.constant(a.clone())).collect();
        // A perturbation of h in any weight moves a pre-activation by at most
        // a few h; points closer than that to a kink are not differentiable
        // at the finite-difference scale.
        if mlp(&mut tape, &vars).unwrap().1 < 1e-3 {
            continue;
        }
        let f = |t: &mut Tape, v: &[Var]| Ok(mlp(t, v)?.0);
        worst = worst.max(check_gradients(f, &inputs, H, FLOOR).unwrap().max_rel_error);
        done += 1;
    }
    worst
}

/// A small conditioned denoiser with every parameter perturbed away from
/// its initial value, so the zero-initialized output layer carries gradient.
pub fn small_model(seed: u64) -> DenoiserParams {
    let arch = Architecture {
        bins: 3,
        cond_dim: 2,
        n_speakers: 2,
        width: 6,
        blocks: 2,
        time_dim: 4,
    };
    let mut params = DenoiserParams::init(arch, &mut Rng::new(seed)).unwrap();
    let mut rng = Rng::new(seed + 1);
    let perturbed: Vec<Array> = params
        .tensors()
        .iter()
        .map(|a| a.axpy(0.3, &rng.gaussian(a.shape())).unwrap())
        .collect();
    params.set_tensors(perturbed).unwrap();
    params
}

pub fn frame_ctx(rows: usize, seed: u64) -> FrameContext {
    let mut rng = Rng::new(seed);
    let mut speakers = vec![0.0; rows * 2];
    for r in 0..rows {
        speakers[r * 2 + r % 2] = 1.0;
    }
    FrameContext {
        cond: Some(rng.gaussian(&[rows, 2])),
        speakers: Some(Array::new(vec![rows, 2], speakers).unwrap()),
    }
}

fn model_err(e: ModelError) -> TensorError {
    TensorError::InvalidArgument(e.to_string())
}

/// Gradient of the consistency function with respect to every parameter.
pub fn denoiser_error(points: usize) -> f64 {
    let coeffs = Coefficients::new(0.002, 0.5);
    (0..points as u64)
        .map(|point| {
            let model = small_model(point);
            let rows = 4;
            let ctx = frame_ctx(rows, 1000 + point);
            let x = Rng::new(2000 + point).gaussian(&[rows, 3]).scale(2.0).unwrap();
            let t = 0.01 + 5.0 * Rng::new(3000 + point).uniform();
            let f = |tape: &mut Tape, v: &[Var]| {
                let xv = tape.constant(x.clone());
                let bound = BoundContext::constants(tape, &ctx);
                let out = model.consistency_on(tape, v, xv, &bound, t, &coeffs).map_err(model_err)?;
                weighted_sum(tape, out, point)
            };
            check_gradients(f, model.tensors(), H, FLOOR).unwrap().max_rel_error
        })
        .fold(0.0, f64::max)
}

/// Gradient of a masked consistency term against a constant target plus an
/// L1 reconstruction term, with respect to the online parameters.
pub fn loss_error(points: usize) -> f64 {
    let coeffs = Coefficients::new(0.002, 0.5);
    let grid = TimeGrid::build(0.002, 80.0, 7.0, 12).unwrap();
    (0..points as u64)
        .map(|point| {
            let online = small_model(point);
            let target = small_model(point + 500);
            let rows = 5;
            let ctx = frame_ctx(rows, 4000 + point);
            let mut rng = Rng::new(5000 + point);
            let x0 = rng.gaussian(&[rows, 3]);
            let z = rng.gaussian(&[rows, 3]);
            let n = 1 + rng.below(grid.len() - 1);
            let (t_lo, t_hi) = (grid.t(n), grid.t(n + 1));
            let mask = vec![1.0, 1.0, 1.0, 0.0, 0.0];
            let f = |tape: &mut Tape, v: &[Var]| {
                let bound = BoundContext::constants(tape, &ctx);
                let target_vars = target.bind(tape, false);
                let hi = tape.constant(x0.axpy(t_hi, &z)?);
                let lo = tape.constant(x0.axpy(t_lo, &z)?);
                let pred = online.consistency_on(tape, v, hi, &bound, t_hi, &coeffs).map_err(model_err)?;
                let anchor = target
                    .consistency_on(tape, &target_vars, lo, &bound, t_lo, &coeffs)
                    .map_err(model_err)?;
                let d = tape.sub(pred, anchor)?;
                let d = tape.square(d)?;
                let ct = tape.masked_mean(d, mask.clone())?;
                let noisy = tape.constant(x0.axpy(80.0, &z)?);
                let clean = tape.constant(x0.clone());
                let rec = online.consistency_on(tape, v, noisy, &bound, 80.0, &coeffs).map_err(model_err)?;
                let e = tape.sub(clean, rec)?;
                let e = tape.abs(e)?;
                let recon = tape.masked_mean(e, mask.clone())?;
                tape.add(ct, recon)
            };
            check_gradients(f, online.tensors(), H, FLOOR).unwrap().max_rel_error
        })
        .fold(0.0, f64::max)
}
