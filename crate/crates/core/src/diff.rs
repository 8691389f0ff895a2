//! Minimal reverse-mode differentiation engine.
//!
//! The engine is deliberately closed: the [`Op`] enumeration lists every
//! primitive the coupling networks, logistic regression, and MLP baselines
//! need, and nothing else. A [`Tape`] records ops during the forward build;
//! [`Tape::backward`] visits them in exact reverse order and accumulates
//! gradients into [`ParamSet`] buffers with a fixed accumulation order, so a
//! run is reproducible bit-for-bit on one thread.
//!
//! [`finite_diff_grad`] is the independent oracle used by tests: central
//! differences around the current parameter values.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

// ── Parameters ──────────────────────────────────────────────────────────

/// One trainable tensor: values plus a gradient buffer of equal length.
#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub id: usize,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamTensor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_matrix(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.values.clone(),
        }
    }
}

/// Ordered collection of parameters; ids are indices into the collection.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    pub params: Vec<ParamTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    /// Registers a tensor and returns its id.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, values: Vec<f64>) -> Result<usize> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "parameter {name}: dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::shape(format!(
                "parameter {name}: {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        let id = self.params.len();
        let grad = vec![0.0; values.len()];
        self.params.push(ParamTensor {
            id,
            name: name.to_string(),
            rows,
            cols,
            values,
            grad,
        });
        Ok(id)
    }

    pub fn get(&self, id: usize) -> &ParamTensor {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut ParamTensor {
        &mut self.params[id]
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// All values concatenated in id order.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        for p in &self.params {
            out.extend_from_slice(&p.values);
        }
        out
    }

    /// All gradients concatenated in id order.
    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        for p in &self.params {
            out.extend_from_slice(&p.grad);
        }
        out
    }

    /// Overwrites all values from a flat buffer laid out as [`Self::flat_values`].
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_scalars() {
            return Err(Error::shape(format!(
                "flat buffer has {} values, parameter set needs {}",
                flat.len(),
                self.n_scalars()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.values.len();
            p.values.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn validate_finite(&self) -> Result<()> {
        for p in &self.params {
            if !p.values.iter().all(|v| v.is_finite()) {
                return Err(Error::numerical(format!(
                    "parameter {} contains a non-finite value",
                    p.name
                )));
            }
        }
        Ok(())
    }
}

// ── Operation set ───────────────────────────────────────────────────────

/// The closed primitive set. Input arity and shapes are documented per
/// variant; `inputs` on the node refer to earlier node ids.
#[derive(Clone, Debug)]
pub enum Op {
    /// Leaf: snapshot of a parameter's values at record time.
    Param(usize),
    /// Leaf: constant data, no gradient.
    Const,
    /// y = x W^T + b with x: n x in, W: out x in, b: 1 x out.
    Affine,
    Tanh,
    Exp,
    Ln,
    /// Elementwise max(x, 0).
    Relu,
    /// y = c * x for a fixed constant c.
    Scale(f64),
    /// y = x + c for a fixed constant c.
    AddScalar(f64),
    /// Elementwise sum of two same-shape nodes.
    Add,
    /// Elementwise difference a - b.
    Sub,
    /// Elementwise product of two same-shape nodes.
    Mul,
    /// y_ij = x_ij * r_j with r: 1 x m.
    MulRowVec,
    /// y_ij = x_ij + r_j with r: 1 x m.
    AddRowVec,
    /// y_ij = x_ij + c_i with c: n x 1.
    AddColVec,
    /// y = x * s with s a 1 x 1 node (learnable scalar gate).
    MulScalarNode,
    /// Row-wise sum: n x m -> n x 1.
    RowSum,
    /// Sum of all entries -> 1 x 1.
    SumAll,
    /// Mean of all entries -> 1 x 1.
    MeanAll,
    /// Row-wise log-sum-exp: n x m -> n x 1, computed stably.
    LogSumExpRows,
    /// Squared distances to fixed centers: x (n x d) -> n x C with
    /// y_ic = ||x_i - centers_c||^2. Centers are constants.
    SqDistTo(Matrix),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Const => "const",
            Op::Affine => "affine",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Relu => "relu",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MulRowVec => "mul_row_vec",
            Op::AddRowVec => "add_row_vec",
            Op::AddColVec => "add_col_vec",
            Op::MulScalarNode => "mul_scalar_node",
            Op::RowSum => "row_sum",
            Op::SumAll => "sum_all",
            Op::MeanAll => "mean_all",
            Op::LogSumExpRows => "log_sum_exp_rows",
            Op::SqDistTo(_) => "sq_dist_to",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Matrix,
}

/// Recorded forward computation. Node ids are creation order; backward walks
/// them in exact reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Evaluates one op from its input values. Shared by the recording builders
/// and by [`Tape::replay`], which guarantees replays are bit-identical.
fn compute_op(op: &Op, inputs: &[&Matrix]) -> Result<Matrix> {
    match op {
        Op::Param(_) | Op::Const => Err(Error::invalid(
            "leaf nodes carry their own values".to_string(),
        )),
        Op::Affine => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            if b.rows != 1 || b.cols != w.rows {
                return Err(Error::shape(format!(
                    "affine: bias is {}x{}, expected 1x{}",
                    b.rows, b.cols, w.rows
                )));
            }
            let mut y = x.matmul_nt(w)?;
            for i in 0..y.rows {
                let row = y.row_mut(i);
                for (j, v) in row.iter_mut().enumerate() {
                    *v += b.data[j];
                }
            }
            Ok(y)
        }
        Op::Tanh => Ok(map_unary(inputs[0], f64::tanh)),
        Op::Exp => Ok(map_unary(inputs[0], f64::exp)),
        Op::Ln => Ok(map_unary(inputs[0], f64::ln)),
        Op::Relu => Ok(map_unary(inputs[0], |v| if v > 0.0 { v } else { 0.0 })),
        Op::Scale(c) => Ok(map_unary(inputs[0], |v| c * v)),
        Op::AddScalar(c) => Ok(map_unary(inputs[0], |v| v + c)),
        Op::Add => zip_binary(inputs[0], inputs[1], "add", |a, b| a + b),
        Op::Sub => zip_binary(inputs[0], inputs[1], "sub", |a, b| a - b),
        Op::Mul => zip_binary(inputs[0], inputs[1], "mul", |a, b| a * b),
        Op::MulRowVec | Op::AddRowVec => {
            let (x, r) = (inputs[0], inputs[1]);
            if r.rows != 1 || r.cols != x.cols {
                return Err(Error::shape(format!(
                    "row-vector op: operand is {}x{}, expected 1x{}",
                    r.rows, r.cols, x.cols
                )));
            }
            let mut y = x.clone();
            let add = matches!(op, Op::AddRowVec);
            for i in 0..y.rows {
                let row = y.row_mut(i);
                for (j, v) in row.iter_mut().enumerate() {
                    if add {
                        *v += r.data[j];
                    } else {
                        *v *= r.data[j];
                    }
                }
            }
            Ok(y)
        }
        Op::AddColVec => {
            let (x, c) = (inputs[0], inputs[1]);
            if c.cols != 1 || c.rows != x.rows {
                return Err(Error::shape(format!(
                    "add_col_vec: operand is {}x{}, expected {}x1",
                    c.rows, c.cols, x.rows
                )));
            }
            let mut y = x.clone();
            for i in 0..y.rows {
                let ci = c.data[i];
                for v in y.row_mut(i) {
                    *v += ci;
                }
            }
            Ok(y)
        }
        Op::MulScalarNode => {
            let (x, s) = (inputs[0], inputs[1]);
            if s.rows != 1 || s.cols != 1 {
                return Err(Error::shape(format!(
                    "mul_scalar_node: scalar operand is {}x{}",
                    s.rows, s.cols
                )));
            }
            Ok(map_unary(x, |v| v * s.data[0]))
        }
        Op::RowSum => {
            let x = inputs[0];
            let mut y = Matrix::zeros(x.rows, 1);
            for i in 0..x.rows {
                y.data[i] = x.row(i).iter().sum();
            }
            Ok(y)
        }
        Op::SumAll => Ok(Matrix {
            rows: 1,
            cols: 1,
            data: vec![inputs[0].data.iter().sum()],
        }),
        Op::MeanAll => {
            let x = inputs[0];
            if x.data.is_empty() {
                return Err(Error::invalid("mean of an empty matrix".to_string()));
            }
            let sum: f64 = x.data.iter().sum();
            Ok(Matrix {
                rows: 1,
                cols: 1,
                data: vec![sum / x.data.len() as f64],
            })
        }
        Op::LogSumExpRows => {
            let x = inputs[0];
            let mut y = Matrix::zeros(x.rows, 1);
            for i in 0..x.rows {
                y.data[i] = log_sum_exp(x.row(i));
            }
            Ok(y)
        }
        Op::SqDistTo(centers) => {
            let x = inputs[0];
            if x.cols != centers.cols {
                return Err(Error::shape(format!(
                    "sq_dist_to: points have {} columns, centers {}",
                    x.cols, centers.cols
                )));
            }
            let mut y = Matrix::zeros(x.rows, centers.rows);
            for i in 0..x.rows {
                let xi = x.row(i);
                for c in 0..centers.rows {
                    let mu = centers.row(c);
                    let mut acc = 0.0;
                    for k in 0..xi.len() {
                        let d = xi[k] - mu[k];
                        acc += d * d;
                    }
                    y.set(i, c, acc);
                }
            }
            Ok(y)
        }
    }
}

fn map_unary(x: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip_binary(
    a: &Matrix,
    b: &Matrix,
    what: &str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Matrix> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

/// Stable log(sum(exp(row))).
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: usize) -> &Matrix {
        &self.nodes[id].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: usize) -> f64 {
        debug_assert_eq!(self.nodes[id].value.data.len(), 1);
        self.nodes[id].value.data[0]
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Matrix) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node { op, inputs, value });
        id
    }

    fn push_computed(&mut self, op: Op, inputs: Vec<usize>) -> Result<usize> {
        let vals: Vec<&Matrix> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
        let value = compute_op(&op, &vals)?;
        Ok(self.push(op, inputs, value))
    }

    /// Leaf carrying a snapshot of the parameter's current values.
    pub fn param(&mut self, set: &ParamSet, pid: usize) -> usize {
        let p = set.get(pid);
        self.push(Op::Param(pid), vec![], p.as_matrix())
    }

    pub fn constant(&mut self, m: Matrix) -> usize {
        self.push(Op::Const, vec![], m)
    }

    pub fn affine(&mut self, x: usize, w: usize, b: usize) -> Result<usize> {
        self.push_computed(Op::Affine, vec![x, w, b])
    }

    pub fn tanh(&mut self, x: usize) -> Result<usize> {
        self.push_computed(Op::Tanh, vec![x])
    }

    pub fn exp(&mut self, x: usize) -> Result<usize> {
        self.push_computed(Op::Exp, vec![x])
    }

    pub fn ln(&mut self, x: usize) -> Result<usize> {
        self.push_computed(Op::Ln, vec![x])
    }

    pub fn relu(&mut self, x: usize) -> Result<usize> {
        self.push_computed(Op::Relu, vec![x])
    }

    pub fn scale(&mut self, x: usize, c: f64) -> Result<usize> {
        self.push_computed(Op::Scale(c), vec![x])
    }

    pub fn add_scalar(&mut self, x: usize, c: f64) -> Result<usize> {
        self.push_computed(Op::AddScalar(c), vec![x])
    }

    pub fn add(&mut self, a: usize, b: usize) -> Result<usize> {
        self.push_computed(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: usize, b: usize) -> Result<usize> {
        self.push_computed(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: usize, b: usize) -> Result<usize> {
        self.push_computed(Op::Mul, vec![a, b])
    }

    pub fn mul_row_vec(&mut self, x: usize, r: usize) -> Result<usize> {
        self.push_computed(Op::MulRowVec, vec![x, r])
    }

    pub fn add_row_vec(&mut self, x: usize, r: usize) -> Result<usize> {
        self.push_computed(Op::AddRowVec, vec![x, r])
    }

    pub fn add_col_vec(&mut self, x: usize, c: usize) -> Result<usize> {
        self.push_computed(Op::AddColVec, vec![x, c])
    }

    pub fn mul_scalar_node(&mut self, x: usize, s: usize) -> Result<usize> {
        self.push_computed(Op::MulScalarNode, vec![x, s])
    }

    pub fn row_sum(&mut self, x: usize) -> Result<usize> {
        self.push_computed(Op::RowSum, vec![x])
    }

    pub fn sum_all(&mut self, x: usize) -> Result<usize> {
        self.push_computed(Op::SumAll, vec![x])
    }

    pub fn mean_all(&mut self, x: usize) -> Result<usize> {
        self.push_computed(Op::MeanAll, vec![x])
    }

    pub fn log_sum_exp_rows(&mut self, x: usize) -> Result<usize> {
        self.push_computed(Op::LogSumExpRows, vec![x])
    }

    pub fn sq_dist_to(&mut self, x: usize, centers: Matrix) -> Result<usize> {
        self.push_computed(Op::SqDistTo(centers), vec![x])
    }

    /// Recomputes every non-leaf node from the recorded leaves and verifies the
    /// results are bit-identical to the recorded values.
    pub fn replay(&self) -> Result<()> {
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param(_) | Op::Const) {
                continue;
            }
            let vals: Vec<&Matrix> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let recomputed = compute_op(&node.op, &vals)?;
            let identical = recomputed
                .data
                .iter()
                .zip(&node.value.data)
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !identical {
                return Err(Error::numerical(format!(
                    "replay mismatch at node {} ({})",
                    id,
                    node.op.name()
                )));
            }
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar `root`. Parameter gradients are written
    /// into `set` (zeroed first; parameters not reachable from `root` end up
    /// with zero gradient).
    pub fn backward(&self, root: usize, set: &mut ParamSet) -> Result<()> {
        let node = self
            .nodes
            .get(root)
            .ok_or_else(|| Error::invalid(format!("backward: no node {root}")))?;
        if node.value.rows != 1 || node.value.cols != 1 {
            return Err(Error::invalid(format!(
                "backward: loss node must be 1x1, got {}x{}",
                node.value.rows, node.value.cols
            )));
        }

        // Reachability from the root, so unrelated nodes cost nothing.
        let mut reached = vec![false; root + 1];
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            if reached[id] {
                continue;
            }
            reached[id] = true;
            stack.extend(self.nodes[id].inputs.iter().copied());
        }

        // Diagnose non-finite forward values before differentiating, naming
        // the first offending operation in record order.
        for (id, node) in self.nodes.iter().enumerate().take(root + 1) {
            if reached[id] && !node.value.all_finite() {
                return Err(Error::numerical(format!(
                    "non-finite value produced by op {} (node {})",
                    node.op.name(),
                    id
                )));
            }
        }

        let mut grads: Vec<Vec<f64>> = (0..=root)
            .map(|id| {
                if reached[id] {
                    vec![0.0; self.nodes[id].value.data.len()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        grads[root][0] = 1.0;

        for id in (0..=root).rev() {
            if !reached[id] {
                continue;
            }
            if grads[id].iter().all(|&g| g == 0.0) {
                continue;
            }
            // Take the output gradient out to satisfy the borrow checker while
            // writing input gradients.
            let dy = std::mem::take(&mut grads[id]);
            self.propagate(id, &dy, &mut grads)?;
            grads[id] = dy;
        }

        // Flush leaf gradients into the parameter set in record order.
        set.zero_grads();
        for id in 0..=root {
            if !reached[id] {
                continue;
            }
            if let Op::Param(pid) = self.nodes[id].op {
                let dst = &mut set.get_mut(pid).grad;
                if dst.len() != grads[id].len() {
                    return Err(Error::shape(format!(
                        "parameter {pid} changed shape since recording"
                    )));
                }
                for (d, g) in dst.iter_mut().zip(&grads[id]) {
                    *d += g;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, dy: &[f64], grads: &mut [Vec<f64>]) -> Result<()> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        match &node.op {
            Op::Param(_) | Op::Const => {}
            Op::Affine => {
                let x = &self.nodes[ins[0]].value;
                let w = &self.nodes[ins[1]].value;
                let dy_m = Matrix {
                    rows: x.rows,
                    cols: w.rows,
                    data: dy.to_vec(),
                };
                // dx = dy W
                let dx = dy_m.matmul_nn(w)?;
                accumulate(&mut grads[ins[0]], &dx.data);
                // dW = dy^T x
                let dw = dy_m.matmul_tn(x)?;
                accumulate(&mut grads[ins[1]], &dw.data);
                // db = column sums of dy
                let db = &mut grads[ins[2]];
                for i in 0..dy_m.rows {
                    let row = dy_m.row(i);
                    for (j, g) in db.iter_mut().enumerate() {
                        *g += row[j];
                    }
                }
            }
            Op::Tanh => {
                let y = &node.value.data;
                let dx = &mut grads[ins[0]];
                for k in 0..dy.len() {
                    dx[k] += dy[k] * (1.0 - y[k] * y[k]);
                }
            }
            Op::Exp => {
                let y = &node.value.data;
                let dx = &mut grads[ins[0]];
                for k in 0..dy.len() {
                    dx[k] += dy[k] * y[k];
                }
            }
            Op::Ln => {
                let x = &self.nodes[ins[0]].value.data;
                let dx = &mut grads[ins[0]];
                for k in 0..dy.len() {
                    dx[k] += dy[k] / x[k];
                }
            }
            Op::Relu => {
                let x = &self.nodes[ins[0]].value.data;
                let dx = &mut grads[ins[0]];
                for k in 0..dy.len() {
                    if x[k] > 0.0 {
                        dx[k] += dy[k];
                    }
                }
            }
            Op::Scale(c) => {
                let dx = &mut grads[ins[0]];
                for k in 0..dy.len() {
                    dx[k] += c * dy[k];
                }
            }
            Op::AddScalar(_) => accumulate(&mut grads[ins[0]], dy),
            Op::Add => {
                accumulate(&mut grads[ins[0]], dy);
                accumulate(&mut grads[ins[1]], dy);
            }
            Op::Sub => {
                accumulate(&mut grads[ins[0]], dy);
                let db = &mut grads[ins[1]];
                for k in 0..dy.len() {
                    db[k] -= dy[k];
                }
            }
            Op::Mul => {
                let a = &self.nodes[ins[0]].value.data;
                let b = &self.nodes[ins[1]].value.data;
                {
                    let da = &mut grads[ins[0]];
                    for k in 0..dy.len() {
                        da[k] += dy[k] * b[k];
                    }
                }
                let db = &mut grads[ins[1]];
                for k in 0..dy.len() {
                    db[k] += dy[k] * a[k];
                }
            }
            Op::MulRowVec => {
                let x = &self.nodes[ins[0]].value;
                let r = &self.nodes[ins[1]].value.data;
                let cols = x.cols;
                {
                    let dx = &mut grads[ins[0]];
                    for k in 0..dy.len() {
                        dx[k] += dy[k] * r[k % cols];
                    }
                }
                let dr = &mut grads[ins[1]];
                for k in 0..dy.len() {
                    dr[k % cols] += dy[k] * x.data[k];
                }
            }
            Op::AddRowVec => {
                let cols = self.nodes[ins[0]].value.cols;
                accumulate(&mut grads[ins[0]], dy);
                let dr = &mut grads[ins[1]];
                for k in 0..dy.len() {
                    dr[k % cols] += dy[k];
                }
            }
            Op::AddColVec => {
                let cols = self.nodes[ins[0]].value.cols;
                accumulate(&mut grads[ins[0]], dy);
                let dc = &mut grads[ins[1]];
                for k in 0..dy.len() {
                    dc[k / cols] += dy[k];
                }
            }
            Op::MulScalarNode => {
                let x = &self.nodes[ins[0]].value.data;
                let s = self.nodes[ins[1]].value.data[0];
                {
                    let dx = &mut grads[ins[0]];
                    for k in 0..dy.len() {
                        dx[k] += dy[k] * s;
                    }
                }
                let ds = &mut grads[ins[1]];
                let mut acc = 0.0;
                for k in 0..dy.len() {
                    acc += dy[k] * x[k];
                }
                ds[0] += acc;
            }
            Op::RowSum => {
                let cols = self.nodes[ins[0]].value.cols;
                let dx = &mut grads[ins[0]];
                for (k, g) in dx.iter_mut().enumerate() {
                    *g += dy[k / cols];
                }
            }
            Op::SumAll => {
                let dx = &mut grads[ins[0]];
                for g in dx.iter_mut() {
                    *g += dy[0];
                }
            }
            Op::MeanAll => {
                let n = self.nodes[ins[0]].value.data.len() as f64;
                let dx = &mut grads[ins[0]];
                for g in dx.iter_mut() {
                    *g += dy[0] / n;
                }
            }
            Op::LogSumExpRows => {
                let x = &self.nodes[ins[0]].value;
                let lse = &node.value.data;
                let cols = x.cols;
                let dx = &mut grads[ins[0]];
                for k in 0..dx.len() {
                    let i = k / cols;
                    dx[k] += dy[i] * (x.data[k] - lse[i]).exp();
                }
            }
            Op::SqDistTo(centers) => {
                let x = &self.nodes[ins[0]].value;
                let dx = &mut grads[ins[0]];
                for i in 0..x.rows {
                    let xi = x.row(i);
                    for c in 0..centers.rows {
                        let g = dy[i * centers.rows + c];
                        if g == 0.0 {
                            continue;
                        }
                        let mu = centers.row(c);
                        for k in 0..xi.len() {
                            dx[i * x.cols + k] += g * 2.0 * (xi[k] - mu[k]);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

// ── Finite-difference oracle ────────────────────────────────────────────

/// Central-difference gradient of `loss` with respect to every parameter
/// scalar, in [`ParamSet::flat_values`] order. The loss closure must be
/// deterministic; this is checked by evaluating it twice up front.
pub fn finite_diff_grad<F>(set: &mut ParamSet, mut loss: F, h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::invalid(format!("step size must be positive, got {h}")));
    }
    let base_a = loss(set)?;
    let base_b = loss(set)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::invalid(
            "loss function is not deterministic; finite differences are invalid".to_string(),
        ));
    }
    let mut grad = Vec::with_capacity(set.n_scalars());
    for pid in 0..set.params.len() {
        for k in 0..set.params[pid].values.len() {
            let orig = set.params[pid].values[k];
            set.params[pid].values[k] = orig + h;
            let up = loss(set)?;
            set.params[pid].values[k] = orig - h;
            let down = loss(set)?;
            set.params[pid].values[k] = orig;
            grad.push((up - down) / (2.0 * h));
        }
    }
    Ok(grad)
}

// ── Adam ────────────────────────────────────────────────────────────────

/// Optimizer state: per-scalar moment buffers over the flat parameter layout.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(n_scalars: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; n_scalars],
            v: vec![0.0; n_scalars],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }
}

/// One bias-corrected Adam update from the gradients currently stored in
/// `set`. Gradients are zeroed afterwards. A non-finite gradient aborts the
/// step before any mutation; a non-finite updated value is rejected after.
pub fn adam_step(set: &mut ParamSet, state: &mut AdamState) -> Result<()> {
    if state.m.len() != set.n_scalars() {
        return Err(Error::shape(format!(
            "optimizer state sized for {} scalars, parameter set has {}",
            state.m.len(),
            set.n_scalars()
        )));
    }
    for p in &set.params {
        if !p.grad.iter().all(|g| g.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite gradient for parameter {}; step aborted",
                p.name
            )));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    let mut k = 0;
    for p in &mut set.params {
        for (val, g) in p.values.iter_mut().zip(&p.grad) {
            let m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g;
            let v = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g;
            state.m[k] = m;
            state.v[k] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            *val -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
            k += 1;
        }
    }
    set.validate_finite()?;
    set.zero_grads();
    Ok(())
}
