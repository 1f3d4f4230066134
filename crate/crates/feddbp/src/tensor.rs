//! Dense f64 tensors and a Wengert tape for reverse-mode gradients.
//!
//! The tape is an arena: every operand lives in a node indexed by a
//! [`Var`] handle, and each operation records enough to replay its
//! vector-Jacobian product in reverse. One backward sweep computes its
//! own adjoints from scratch and then adds them into the persistent
//! per-node gradients, so running `backward` twice doubles every
//! gradient exactly (additive accumulation).
//!
//! A tape and its nodes belong to one worker at a time; independent
//! tapes may run on any number of workers in parallel. All arithmetic
//! is sequential f64, so identical inputs give bit-identical outputs.

use crate::error::{Error, Result};

/// Norm floor below which normalization refuses to proceed.
pub const NORM_EPS: f64 = 1e-12;

/// Distance floor below which distance gradients are treated as zero
/// (the subgradient choice at the non-differentiable point).
const DIST_EPS: f64 = 1e-30;

/// A dense row-major array with an optional gradient of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, validating that the shape matches the data and
    /// every entry is finite.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                left: shape,
                right: vec![values.len()],
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "Tensor::new" });
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Tensor::new(vec![n], values)
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of rows when viewed as a matrix ([] and [n] count as one row).
    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Length of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Borrow row `i` of a matrix-shaped tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Scale { a: Var, c: f64 },
    Offset { a: Var },
    Relu { a: Var },
    Exp { a: Var },
    Ln { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    RowSum { a: Var },
    NormalizeRows { a: Var },
    Distance { a: Var, b: Var },
    PairDistance { a: Var, b: Var },
    Pick { a: Var, indices: Vec<usize> },
    LogSoftmaxPick { a: Var, label: usize },
    LogSoftmaxPickRows { a: Var, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
}

/// Recorded computation: forward values plus the reverse-order program.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// a [m×k] · b [k×n]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

// a [m×n] · bᵀ where b is [k×n]; result [m×k]
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            out[i * k + l] += acc;
        }
    }
}

// aᵀ · b where a is [m×k], b is [m×n]; result [k×n]
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = arow[l];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn log_softmax_at(row: &[f64], label: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row[label] - lse
}

// dx = g * (onehot(label) - softmax(row))
fn log_softmax_pick_backward(row: &[f64], label: usize, g: f64, dx: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = row.iter().map(|&x| (x - max).exp()).sum();
    for (j, (&x, d)) in row.iter().zip(dx.iter_mut()).enumerate() {
        let p = (x - max).exp() / denom;
        let indicator = if j == label { 1.0 } else { 0.0 };
        *d += g * (indicator - p);
    }
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

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>) -> Var {
        let n = values.len();
        self.nodes.push(Node {
            op,
            shape,
            values,
            grad: vec![0.0; n],
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op_name: &'static str, op: Op, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        Ok(self.push(op, shape, values))
    }

    /// Record a leaf (input, parameter, or constant) on the tape.
    pub fn leaf(&mut self, shape: &[usize], values: &[f64]) -> Result<Var> {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                left: shape.to_vec(),
                right: vec![values.len()],
            });
        }
        self.push_checked("leaf", Op::Leaf, shape.to_vec(), values.to_vec())
    }

    pub fn leaf_tensor(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t.shape(), t.values())
    }

    pub fn scalar_leaf(&mut self, v: f64) -> Result<Var> {
        self.leaf(&[], &[v])
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    /// Value of a scalar-shaped node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].values.len(), 1);
        self.nodes[v.0].values[0]
    }

    /// Accumulated gradient of a node (zeros before any backward pass).
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    /// Copy a node out as a standalone tensor with its gradient attached.
    pub fn extract(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor {
            shape: node.shape.clone(),
            values: node.values.clone(),
            grad: Some(node.grad.clone()),
        }
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        if s.len() < 2 {
            (1, s.last().copied().unwrap_or(1))
        } else {
            (s[..s.len() - 1].iter().product(), s[s.len() - 1])
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    /// Matrix product of `a` [m×k] and `b` [k×n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n, &mut out);
        self.push_checked("matmul", Op::MatMul { a, b }, vec![m, n], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push_checked("add", Op::Add { a, b }, shape, out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push_checked("sub", Op::Sub { a, b }, shape, out)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push_checked("mul", Op::Mul { a, b }, shape, out)
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push_checked("div", Op::Div { a, b }, shape, out)
    }

    /// Broadcast-add a `[n]` bias to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = &self.nodes[bias.0].shape;
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: sa,
                right: sb.clone(),
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(self.nodes[a.0].values[i * n + j] + self.nodes[bias.0].values[j]);
            }
        }
        self.push_checked("add_row", Op::AddRow { a, bias }, vec![m, n], out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| c * x).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push_checked("scale", Op::Scale { a, c }, shape, out)
    }

    /// Add a constant to every entry.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push_checked("offset", Op::Offset { a }, shape, out)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push_checked("relu", Op::Relu { a }, shape, out)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x.exp()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push_checked("exp", Op::Exp { a }, shape, out)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push_checked("ln", Op::Ln { a }, shape, out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].values.iter().sum();
        self.push_checked("sum", Op::Sum { a }, vec![], vec![s])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].values.len();
        if n == 0 {
            return Err(Error::DegenerateInput {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let s: f64 = self.nodes[a.0].values.iter().sum::<f64>() / n as f64;
        self.push_checked("mean", Op::Mean { a }, vec![], vec![s])
    }

    /// Sum each row of an `[m×n]` matrix, producing `[m]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rows_cols(a);
        let vals = &self.nodes[a.0].values;
        let out: Vec<f64> = (0..m).map(|i| vals[i * n..(i + 1) * n].iter().sum()).collect();
        self.push_checked("row_sum", Op::RowSum { a }, vec![m], out)
    }

    /// Scale every row to unit Euclidean norm. Works on `[d]` vectors
    /// (one row) and `[m×d]` matrices (row-wise). Rows with norm below
    /// [`NORM_EPS`] are rejected rather than clamped.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rows_cols(a);
        let vals = &self.nodes[a.0].values;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &vals[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= NORM_EPS {
                return Err(Error::DegenerateInput {
                    op: "l2_normalize",
                    detail: format!("row {i} has norm {norm:.3e}"),
                });
            }
            out.extend(row.iter().map(|x| x / norm));
        }
        let shape = self.nodes[a.0].shape.clone();
        self.push_checked("l2_normalize", Op::NormalizeRows { a }, shape, out)
    }

    /// Euclidean distance between two equal-length vectors (scalar output).
    pub fn euclidean_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("euclidean_distance", a, b)?;
        let d = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        self.push_checked("euclidean_distance", Op::Distance { a, b }, vec![], vec![d])
    }

    /// All pairwise Euclidean distances between rows of `a` [m×d] and
    /// rows of `b` [n×d], producing [m×n].
    pub fn pairwise_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "pairwise_distance",
                left: sa,
                right: sb,
            });
        }
        let (m, n, d) = (sa[0], sb[0], sa[1]);
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let arow = &av[i * d..(i + 1) * d];
            for j in 0..n {
                let brow = &bv[j * d..(j + 1) * d];
                let dist = arow
                    .iter()
                    .zip(brow)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                out.push(dist);
            }
        }
        self.push_checked("pairwise_distance", Op::PairDistance { a, b }, vec![m, n], out)
    }

    /// Gather one entry per row: `out[i] = a[i, indices[i]]`.
    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.rows_cols(a);
        if indices.len() != m {
            return Err(Error::ShapeMismatch {
                op: "pick",
                left: vec![m, n],
                right: vec![indices.len()],
            });
        }
        let mut out = Vec::with_capacity(m);
        for (i, &j) in indices.iter().enumerate() {
            if j >= n {
                return Err(Error::IndexOutOfRange {
                    what: "pick",
                    index: j,
                    bound: n,
                });
            }
            out.push(self.nodes[a.0].values[i * n + j]);
        }
        self.push_checked(
            "pick",
            Op::Pick {
                a,
                indices: indices.to_vec(),
            },
            vec![m],
            out,
        )
    }

    /// Log of the softmax probability of `label`, max-stabilized.
    pub fn log_softmax_pick(&mut self, logits: Var, label: usize) -> Result<Var> {
        let s = &self.nodes[logits.0].shape;
        if s.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "log_softmax_pick",
                left: s.clone(),
                right: vec![0],
            });
        }
        let c = s[0];
        if label >= c {
            return Err(Error::IndexOutOfRange {
                what: "log_softmax_pick label",
                index: label,
                bound: c,
            });
        }
        let v = log_softmax_at(&self.nodes[logits.0].values, label);
        self.push_checked(
            "log_softmax_pick",
            Op::LogSoftmaxPick { a: logits, label },
            vec![],
            vec![v],
        )
    }

    /// Row-wise [`Tape::log_softmax_pick`]: `out[i] = log softmax(a[i,:])[labels[i]]`.
    pub fn log_softmax_pick_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = self.rows_cols(logits);
        if labels.len() != m {
            return Err(Error::ShapeMismatch {
                op: "log_softmax_pick_rows",
                left: vec![m, c],
                right: vec![labels.len()],
            });
        }
        let mut out = Vec::with_capacity(m);
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::IndexOutOfRange {
                    what: "log_softmax_pick_rows label",
                    index: y,
                    bound: c,
                });
            }
            out.push(log_softmax_at(
                &self.nodes[logits.0].values[i * c..(i + 1) * c],
                y,
            ));
        }
        self.push_checked(
            "log_softmax_pick_rows",
            Op::LogSoftmaxPickRows {
                a: logits,
                labels: labels.to_vec(),
            },
            vec![m],
            out,
        )
    }

    /// Reverse sweep from a scalar loss. Fresh adjoints are computed for
    /// this sweep and then added into every node's persistent gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.values.len()])
            .collect();
        adj[loss.0][0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if adj[idx].iter().all(|&g| g == 0.0) {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let g = std::mem::take(&mut adj[idx]);
            self.backward_op(idx, &op, &g, &mut adj)?;
            adj[idx] = g;
        }

        for (node, a) in self.nodes.iter_mut().zip(&adj) {
            for (dst, src) in node.grad.iter_mut().zip(a) {
                *dst += src;
            }
            if !node.grad.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(())
    }

    fn backward_op(&self, idx: usize, op: &Op, g: &[f64], adj: &mut [Vec<f64>]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sa = &self.nodes[a.0].shape;
                let (m, k) = (sa[0], sa[1]);
                let n = self.nodes[b.0].shape[1];
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                mm_nt(g, &self.nodes[b.0].values, m, n, k, &mut adj[a.0]);
                mm_tn(&self.nodes[a.0].values, g, m, k, n, &mut adj[b.0]);
            }
            Op::Add { a, b } => {
                for (d, &gi) in adj[a.0].iter_mut().zip(g) {
                    *d += gi;
                }
                for (d, &gi) in adj[b.0].iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::Sub { a, b } => {
                for (d, &gi) in adj[a.0].iter_mut().zip(g) {
                    *d += gi;
                }
                for (d, &gi) in adj[b.0].iter_mut().zip(g) {
                    *d -= gi;
                }
            }
            Op::Mul { a, b } => {
                for i in 0..g.len() {
                    adj[a.0][i] += g[i] * self.nodes[b.0].values[i];
                }
                for i in 0..g.len() {
                    adj[b.0][i] += g[i] * self.nodes[a.0].values[i];
                }
            }
            Op::Div { a, b } => {
                for i in 0..g.len() {
                    let bv = self.nodes[b.0].values[i];
                    adj[a.0][i] += g[i] / bv;
                    adj[b.0][i] -= g[i] * self.nodes[idx].values[i] / bv;
                }
            }
            Op::AddRow { a, bias } => {
                let n = self.nodes[bias.0].values.len();
                for (d, &gi) in adj[a.0].iter_mut().zip(g) {
                    *d += gi;
                }
                for (i, &gi) in g.iter().enumerate() {
                    adj[bias.0][i % n] += gi;
                }
            }
            Op::Scale { a, c } => {
                for (d, &gi) in adj[a.0].iter_mut().zip(g) {
                    *d += c * gi;
                }
            }
            Op::Offset { a } => {
                for (d, &gi) in adj[a.0].iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::Relu { a } => {
                for i in 0..g.len() {
                    if self.nodes[a.0].values[i] > 0.0 {
                        adj[a.0][i] += g[i];
                    }
                }
            }
            Op::Exp { a } => {
                for i in 0..g.len() {
                    adj[a.0][i] += g[i] * self.nodes[idx].values[i];
                }
            }
            Op::Ln { a } => {
                for i in 0..g.len() {
                    adj[a.0][i] += g[i] / self.nodes[a.0].values[i];
                }
            }
            Op::Sum { a } => {
                for d in adj[a.0].iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean { a } => {
                let n = self.nodes[a.0].values.len() as f64;
                for d in adj[a.0].iter_mut() {
                    *d += g[0] / n;
                }
            }
            Op::RowSum { a } => {
                let (m, n) = self.rows_cols(a);
                for i in 0..m {
                    for j in 0..n {
                        adj[a.0][i * n + j] += g[i];
                    }
                }
            }
            Op::NormalizeRows { a } => {
                // y = x/‖x‖ per row; dx = (g − (g·y)·y)/‖x‖
                let (m, n) = self.rows_cols(a);
                for i in 0..m {
                    let x = &self.nodes[a.0].values[i * n..(i + 1) * n];
                    let y = &self.nodes[idx].values[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = gr.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    for j in 0..n {
                        adj[a.0][i * n + j] += (gr[j] - dot * y[j]) / norm;
                    }
                }
            }
            Op::Distance { a, b } => {
                let d = self.nodes[idx].values[0];
                if d > DIST_EPS {
                    let scale = g[0] / d;
                    for i in 0..self.nodes[a.0].values.len() {
                        let diff = self.nodes[a.0].values[i] - self.nodes[b.0].values[i];
                        adj[a.0][i] += scale * diff;
                        adj[b.0][i] -= scale * diff;
                    }
                }
            }
            Op::PairDistance { a, b } => {
                let d = self.nodes[a.0].shape[1];
                let n = self.nodes[b.0].shape[0];
                let m = self.nodes[a.0].shape[0];
                for i in 0..m {
                    for j in 0..n {
                        let dist = self.nodes[idx].values[i * n + j];
                        let gij = g[i * n + j];
                        if gij == 0.0 || dist <= DIST_EPS {
                            continue;
                        }
                        let scale = gij / dist;
                        for l in 0..d {
                            let diff =
                                self.nodes[a.0].values[i * d + l] - self.nodes[b.0].values[j * d + l];
                            adj[a.0][i * d + l] += scale * diff;
                            adj[b.0][j * d + l] -= scale * diff;
                        }
                    }
                }
            }
            Op::Pick { a, ref indices } => {
                let (_, n) = self.rows_cols(a);
                for (i, &j) in indices.iter().enumerate() {
                    adj[a.0][i * n + j] += g[i];
                }
            }
            Op::LogSoftmaxPick { a, label } => {
                log_softmax_pick_backward(&self.nodes[a.0].values, label, g[0], &mut adj[a.0]);
            }
            Op::LogSoftmaxPickRows { a, ref labels } => {
                let (_, c) = self.rows_cols(a);
                for (i, &y) in labels.iter().enumerate() {
                    log_softmax_pick_backward(
                        &self.nodes[a.0].values[i * c..(i + 1) * c],
                        y,
                        g[i],
                        &mut adj[a.0][i * c..(i + 1) * c],
                    );
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::{central_difference, max_mismatch};

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn tensor_shape_product_must_match() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![], vec![1.0]).is_ok());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let eye = tape.leaf(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = tape.leaf(&[2, 2], &[3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.leaf(&[1, 2], &[1.0, 2.0]).unwrap();
        let v = tape.leaf(&[2, 1], &[3.0, 4.0]).unwrap();
        let p = tape.matmul(a, v).unwrap();
        assert_eq!(tape.value(p), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&[2, 3], &[0.0; 6]).unwrap();
        let b = tape.leaf(&[2, 2], &[0.0; 4]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn normalize_three_four_five() {
        let mut tape = Tape::new();
        let v = tape.leaf(&[2], &[3.0, 4.0]).unwrap();
        let n = tape.l2_normalize(v).unwrap();
        assert_eq!(tape.value(n), &[0.6, 0.8]);

        let unit = tape.leaf(&[2], &[1.0, 0.0]).unwrap();
        let nu = tape.l2_normalize(unit).unwrap();
        assert_eq!(tape.value(nu), &[1.0, 0.0]);
    }

    #[test]
    fn normalize_rejects_near_zero() {
        let mut tape = Tape::new();
        let v = tape.leaf(&[2], &[0.0, 0.0]).unwrap();
        assert!(matches!(
            tape.l2_normalize(v),
            Err(Error::DegenerateInput { .. })
        ));
    }

    #[test]
    fn distance_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(&[2], &[1.0, 2.0]).unwrap();
        let same = tape.euclidean_distance(a, a).unwrap();
        assert_eq!(tape.scalar_value(same), 0.0);

        let o = tape.leaf(&[2], &[0.0, 0.0]).unwrap();
        let p = tape.leaf(&[2], &[3.0, 4.0]).unwrap();
        let d = tape.euclidean_distance(o, p).unwrap();
        assert_eq!(tape.scalar_value(d), 5.0);

        let bad = tape.leaf(&[3], &[0.0; 3]).unwrap();
        assert!(tape.euclidean_distance(o, bad).is_err());
    }

    #[test]
    fn log_softmax_uniform_and_peaked() {
        let mut tape = Tape::new();
        let u = tape.leaf(&[4], &[0.5, 0.5, 0.5, 0.5]).unwrap();
        let lp = tape.log_softmax_pick(u, 2).unwrap();
        assert!((tape.scalar_value(lp) - (0.25f64).ln()).abs() < 1e-12);

        let peaked = tape.leaf(&[2], &[10.0, 0.0]).unwrap();
        let lp2 = tape.log_softmax_pick(peaked, 0).unwrap();
        // log(e^10 / (e^10 + 1)) = -ln(1 + e^-10)
        assert!((tape.scalar_value(lp2) + (1.0 + (-10.0f64).exp()).ln()).abs() < 1e-12);

        let err = tape.log_softmax_pick(peaked, 2).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { .. }));
    }

    #[test]
    fn log_softmax_grad_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&[3], &[0.3, -1.2, 0.8]).unwrap();
        let lp = tape.log_softmax_pick(logits, 1).unwrap();
        tape.backward(lp).unwrap();
        let vals: [f64; 3] = [0.3, -1.2, 0.8];
        let denom: f64 = vals.iter().map(|v| v.exp()).sum();
        for (j, g) in tape.grad(logits).iter().enumerate() {
            let p = vals[j].exp() / denom;
            let expect = if j == 1 { 1.0 - p } else { -p };
            assert!((g - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_sum_gives_ones_and_norm_sq_gives_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2], &[1.0, 2.0]).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2, 2], &[0.5, -1.0, 2.0, 0.25]).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        let once: Vec<f64> = tape.grad(x).to_vec();
        tape.backward(l).unwrap();
        let twice: Vec<f64> = tape.grad(x).to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn grads_not_reaching_loss_stay_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2], &[1.0, 2.0]).unwrap();
        let unused = tape.leaf(&[2], &[5.0, 6.0]).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused), &[0.0, 0.0]);
    }

    // Finite-difference checks on random inputs in [-1, 1].
    fn fd_check(build: impl Fn(&mut Tape, &[f64]) -> (Var, Var), x0: &[f64]) {
        let mut tape = Tape::new();
        let (leaf, loss) = build(&mut tape, x0);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(leaf).to_vec();
        let numeric = central_difference(
            &mut |x: &[f64]| {
                let mut t = Tape::new();
                let (_, l) = build(&mut t, x);
                t.scalar_value(l)
            },
            x0,
            1e-3,
        );
        let err = max_mismatch(&analytic, &numeric);
        assert!(err < 1e-4, "fd mismatch {err}");
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = crate::rng::stream(&[seed]);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn fd_matmul() {
        let fixed = rand_vec(8, 42);
        for trial in 0..5 {
            let x0 = rand_vec(12, trial);
            fd_check(
                |tape, x| {
                    let a = tape.leaf(&[3, 4], x).unwrap();
                    let b = tape.leaf(&[4, 2], &fixed).unwrap();
                    let c = tape.matmul(a, b).unwrap();
                    let sq = tape.mul(c, c).unwrap();
                    (a, tape.sum(sq).unwrap())
                },
                &x0,
            );
        }
    }

    #[test]
    fn fd_normalize_distance_and_softmax() {
        for trial in 0..5 {
            let x0 = rand_vec(8, 100 + trial);
            fd_check(
                |tape, x| {
                    let v = tape.leaf(&[8], x).unwrap();
                    let n = tape.l2_normalize(v).unwrap();
                    let w = tape.leaf(&[8], &[0.3; 8]).unwrap();
                    let d = tape.euclidean_distance(n, w).unwrap();
                    (v, d)
                },
                &x0,
            );
            fd_check(
                |tape, x| {
                    let v = tape.leaf(&[8], x).unwrap();
                    let lp = tape.log_softmax_pick(v, 3).unwrap();
                    (v, lp)
                },
                &x0,
            );
        }
    }

    #[test]
    fn fd_two_layer_composition() {
        // Full-Jacobian check of a two-layer network loss w.r.t. first-layer weights.
        let w2 = rand_vec(6, 7);
        for trial in 0..3 {
            let x0 = rand_vec(6, 200 + trial);
            fd_check(
                |tape, x| {
                    let w1 = tape.leaf(&[2, 3], x).unwrap();
                    let input = tape.leaf(&[2, 2], &[0.4, -0.2, 0.9, 0.1]).unwrap();
                    let h = tape.matmul(input, w1).unwrap();
                    let h = tape.relu(h).unwrap();
                    let w2 = tape.leaf(&[3, 2], &w2).unwrap();
                    let out = tape.matmul(h, w2).unwrap();
                    let lp = tape.log_softmax_pick_rows(out, &[0, 1]).unwrap();
                    let m = tape.mean(lp).unwrap();
                    (w1, tape.scale(m, -1.0).unwrap())
                },
                &x0,
            );
        }
    }

    #[test]
    fn deterministic_outputs() {
        let x = rand_vec(12, 9);
        let run = || {
            let mut tape = Tape::new();
            let a = tape.leaf(&[3, 4], &x).unwrap();
            let n = tape.l2_normalize(a).unwrap();
            let s = tape.sum(n).unwrap();
            tape.backward(s).unwrap();
            (tape.value(n).to_vec(), tape.grad(a).to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pairwise_distance_matches_scalar_distance() {
        let a = t(&[2, 3], &rand_vec(6, 11));
        let b = t(&[4, 3], &rand_vec(12, 12));
        let mut tape = Tape::new();
        let av = tape.leaf_tensor(&a).unwrap();
        let bv = tape.leaf_tensor(&b).unwrap();
        let dm = tape.pairwise_distance(av, bv).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let mut t2 = Tape::new();
                let x = t2.leaf(&[3], a.row(i)).unwrap();
                let y = t2.leaf(&[3], b.row(j)).unwrap();
                let d = t2.euclidean_distance(x, y).unwrap();
                assert_eq!(tape.value(dm)[i * 4 + j], t2.scalar_value(d));
            }
        }
    }

    #[test]
    fn nonfinite_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1], &[800.0]).unwrap();
        // exp(800) overflows to infinity
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { .. })));
        let z = tape.leaf(&[1], &[0.0]).unwrap();
        assert!(matches!(tape.ln(z), Err(Error::NonFinite { .. })));
    }
}
