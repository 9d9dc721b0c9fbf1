//! Tape-based reverse-mode differentiation over [`Array`] values.
//!
//! Operations are recorded on a [`Tape`] as they are evaluated. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients for every requested leaf.
//!
//! ```
//! use cmgen::tensor::{Array, Tape};
//!
//! let mut tape = Tape::new();
//! let p = tape.leaf(Array::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap());
//! let sq = tape.square(p).unwrap();
//! let s = tape.sum(sq).unwrap();
//! let half = tape.scale(s, 0.5).unwrap();
//! let grads = tape.backward(half, &[p], false).unwrap();
//! // d(0.5 * |p|^2)/dp = p
//! assert_eq!(grads.get(p).unwrap().data(), &[1.0, -2.0, 3.0]);
//! ```

use super::array::{check_finite, gemm, Array};
use super::TensorError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MaskedMean(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable operations for one forward/backward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients for the leaves passed to [`Tape::backward`], in request order.
#[derive(Debug, Clone)]
pub struct Gradients {
    vars: Vec<Var>,
    values: Vec<Array>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Array> {
        self.vars
            .iter()
            .position(|&v| v == var)
            .map(|i| &self.values[i])
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn into_values(self) -> Vec<Array> {
        self.values
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (parameter or anything else to take gradients of).
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(
        &mut self,
        op_name: &'static str,
        value: Array,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var, TensorError> {
        check_finite(value.data(), op_name)?;
        let rg = self.rg(inputs);
        Ok(self.push(value, op, rg))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::Shape {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        self.record("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).add(self.value(b))?;
        self.record("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).sub(self.value(b))?;
        self.record("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.record("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(self.shape_err("add_row", a, row));
        }
        let c = av.cols();
        let r = rv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + r[i % c])
            .collect();
        let value = Array::from_parts_unchecked(av.rows(), c, data);
        self.record("add_row", value, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let value = self.value(a).scale(c)?;
        self.record("scale", value, Op::Scale(a, c), &[a])
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var, TensorError> {
        let av = self.value(a);
        if factors.len() != av.rows() {
            return Err(TensorError::Shape {
                op: "scale_rows",
                left: av.shape().to_vec(),
                right: vec![factors.len()],
            });
        }
        let c = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * factors[i / c])
            .collect();
        let value = Array::from_parts_unchecked(av.rows(), c, data);
        self.record("scale_rows", value, Op::ScaleRows(a, factors), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).map(|v| v.max(0.0))?;
        self.record("relu", value, Op::Relu(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).map(f64::abs)?;
        self.record("abs", value, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).map(|v| v * v)?;
        self.record("square", value, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = Array::scalar(self.value(a).sum())?;
        self.record("sum", value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(TensorError::Empty("mean"));
        }
        let value = Array::scalar(v.mean())?;
        self.record("mean", value, Op::Mean(a), &[a])
    }

    /// Weighted mean over rows: `sum_i w_i * sum_j a_ij / (cols * sum_i w_i)`.
    ///
    /// With 0/1 weights this is the mean over the selected rows only.
    pub fn masked_mean(&mut self, a: Var, row_weights: Vec<f64>) -> Result<Var, TensorError> {
        let av = self.value(a);
        if row_weights.len() != av.rows() {
            return Err(TensorError::Shape {
                op: "masked_mean",
                left: av.shape().to_vec(),
                right: vec![row_weights.len()],
            });
        }
        if row_weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(TensorError::InvalidArgument(
                "masked_mean weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = row_weights.iter().sum();
        if total <= 0.0 {
            return Err(TensorError::Empty("masked_mean"));
        }
        let c = av.cols();
        let mut acc = 0.0;
        for (i, w) in row_weights.iter().enumerate() {
            let row_sum: f64 = av.data()[i * c..(i + 1) * c].iter().sum();
            acc += w * row_sum;
        }
        let value = Array::scalar(acc / (c as f64 * total))?;
        self.record("masked_mean", value, Op::MaskedMean(a, row_weights), &[a])
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = match parts.first() {
            Some(p) => self.value(*p).rows(),
            None => return Err(TensorError::Empty("concat_cols")),
        };
        if let Some(bad) = parts.iter().find(|p| self.value(**p).rows() != rows) {
            return Err(self.shape_err("concat_cols", parts[0], *bad));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Array::from_parts_unchecked(rows, total, data);
        self.record("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let av = self.value(a);
        if start >= end || end > av.cols() {
            return Err(TensorError::InvalidArgument(format!(
                "slice {start}..{end} out of range for {} columns",
                av.cols()
            )));
        }
        let mut data = Vec::with_capacity(av.rows() * (end - start));
        for r in 0..av.rows() {
            data.extend_from_slice(&av.row(r)[start..end]);
        }
        let value = Array::from_parts_unchecked(av.rows(), end - start, data);
        self.record("slice_cols", value, Op::SliceCols(a, start, end), &[a])
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// A requested variable that `loss` does not depend on at all is an error
    /// unless `zero_fill` is set, in which case it gets an all-zero gradient.
    /// Variables that are on the path but whose derivative vanishes always get
    /// exact zeros.
    pub fn backward(
        &self,
        loss: Var,
        wrt: &[Var],
        zero_fill: bool,
    ) -> Result<Gradients, TensorError> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(TensorError::NotScalar(loss_value.shape().to_vec()));
        }
        let reachable = self.ancestors(loss);
        if !zero_fill {
            if let Some(v) = wrt.iter().find(|v| !reachable[v.0]) {
                return Err(TensorError::Detached(v.0));
            }
        }

        let mut grads: Vec<Option<Array>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array::from_parts_unchecked(
            loss_value.rows(),
            loss_value.cols(),
            vec![1.0],
        ));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        let values = wrt
            .iter()
            .map(|v| {
                grads
                    .get(v.0)
                    .and_then(|g| g.clone())
                    .map(|g| g.reshape(self.value(*v).shape().to_vec()))
                    .transpose()
                    .map(|g| g.unwrap_or_else(|| Array::zeros(self.value(*v).shape())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        for g in &values {
            check_finite(g.data(), "backward")?;
        }
        Ok(Gradients {
            vars: wrt.to_vec(),
            values,
        })
    }

    fn ancestors(&self, root: Var) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![root.0];
        while let Some(i) = stack.pop() {
            if seen[i] {
                continue;
            }
            seen[i] = true;
            stack.extend(inputs(&self.nodes[i].op).into_iter().map(|v| v.0));
        }
        seen
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) {
        let (gr, gc) = (g.rows(), g.cols());
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, gemm(g, false, self.value(*b), true));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, gemm(self.value(*a), true, g, false));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, elementwise(g, |x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, zip(g, self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, zip(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*row) {
                    let mut col_sums = vec![0.0; gc];
                    for r in 0..gr {
                        for (s, v) in col_sums.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    accumulate(grads, *row, Array::from_parts_unchecked(1, gc, col_sums));
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    accumulate(grads, *a, elementwise(g, |x| c * x));
                }
            }
            Op::ScaleRows(a, factors) => {
                if self.wants(*a) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x * factors[i / gc])
                        .collect();
                    accumulate(grads, *a, Array::from_parts_unchecked(gr, gc, data));
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let d = zip(g, self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 });
                    accumulate(grads, *a, d);
                }
            }
            Op::Abs(a) => {
                if self.wants(*a) {
                    let d = zip(g, self.value(*a), |x, v| {
                        if v > 0.0 {
                            x
                        } else if v < 0.0 {
                            -x
                        } else {
                            0.0
                        }
                    });
                    accumulate(grads, *a, d);
                }
            }
            Op::Square(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, zip(g, self.value(*a), |x, v| 2.0 * v * x));
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    let s = g.data()[0];
                    accumulate(grads, *a, filled_like(av, s));
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    let s = g.data()[0] / av.len() as f64;
                    accumulate(grads, *a, filled_like(av, s));
                }
            }
            Op::MaskedMean(a, w) => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    let c = av.cols();
                    let scale = g.data()[0] / (c as f64 * w.iter().sum::<f64>());
                    let data = (0..av.len()).map(|i| scale * w[i / c]).collect();
                    accumulate(grads, *a, Array::from_parts_unchecked(av.rows(), c, data));
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if self.wants(*p) {
                        let mut data = Vec::with_capacity(gr * pc);
                        for r in 0..gr {
                            data.extend_from_slice(&g.row(r)[offset..offset + pc]);
                        }
                        accumulate(grads, *p, Array::from_parts_unchecked(gr, pc, data));
                    }
                    offset += pc;
                }
            }
            Op::SliceCols(a, start, end) => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    let c = av.cols();
                    let mut data = vec![0.0; av.len()];
                    for r in 0..gr {
                        data[r * c + start..r * c + end].copy_from_slice(g.row(r));
                    }
                    accumulate(grads, *a, Array::from_parts_unchecked(av.rows(), c, data));
                }
            }
        }
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::ScaleRows(a, _)
        | Op::Relu(a)
        | Op::Abs(a)
        | Op::Square(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::MaskedMean(a, _)
        | Op::SliceCols(a, _, _) => vec![*a],
        Op::ConcatCols(parts) => parts.clone(),
    }
}

fn filled_like(a: &Array, v: f64) -> Array {
    Array::from_parts_unchecked(a.rows(), a.cols(), vec![v; a.len()])
}

fn elementwise(g: &Array, f: impl Fn(f64) -> f64) -> Array {
    Array::from_parts_unchecked(g.rows(), g.cols(), g.data().iter().map(|&x| f(x)).collect())
}

fn zip(g: &Array, v: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = g.data().iter().zip(v.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::from_parts_unchecked(g.rows(), g.cols(), data)
}

fn accumulate(grads: &mut [Option<Array>], v: Var, g: Array) {
    let slot = &mut grads[v.0];
    match slot {
        Some(existing) => {
            // Shapes agree by construction; only the 2-D view may differ.
            let sum = existing
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a + b)
                .collect();
            *existing = Array::from_parts_unchecked(existing.rows(), existing.cols(), sum);
        }
        None => *slot = Some(g),
    }
}
