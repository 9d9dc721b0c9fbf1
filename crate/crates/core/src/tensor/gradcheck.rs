//! Central finite-difference checks of tape gradients.

use super::{Array, Tape, TensorError, Var};

/// Worst disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `h` in every coordinate of every input.
///
/// `f` must build the same scalar function every time it is called. `floor`
/// keeps the relative error meaningful where both gradients are near zero.
pub fn check_gradients<F>(
    f: F,
    inputs: &[Array],
    h: f64,
    floor: f64,
) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[Array]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let analytic = tape.backward(out, &vars, true)?.into_values();

    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        entries: 0,
    };
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i] = nudge(input, j, orig + h)?;
            let up = eval(&work)?;
            work[i] = nudge(input, j, orig - h)?;
            let down = eval(&work)?;
            work[i] = input.clone();

            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.entries += 1;
        }
    }
    Ok(report)
}

fn nudge(a: &Array, j: usize, value: f64) -> Result<Array, TensorError> {
    let mut data = a.data().to_vec();
    data[j] = value;
    Array::new(a.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let a = Array::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7]]).unwrap();
        let b = Array::from_rows(&[vec![1.5, 0.1], vec![-0.4, 0.9]]).unwrap();
        let r = check_gradients(
            |t, v| {
                let m = t.mul(v[0], v[1])?;
                let mm = t.matmul(m, v[1])?;
                t.sum(mm)
            },
            &[a, b],
            1e-6,
            1e-8,
        )
        .unwrap();
        assert_eq!(r.entries, 8);
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu at exactly 0 has a one-sided derivative; the central
        // difference sees 1/2 and the tape reports 0.
        let a = Array::from_rows(&[vec![0.0]]).unwrap();
        let r = check_gradients(
            |t, v| {
                let r = t.relu(v[0])?;
                t.sum(r)
            },
            &[a],
            1e-6,
            1e-8,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.4);
    }
}
