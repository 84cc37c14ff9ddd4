//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding the forward
//! value plus enough information to push gradients back to its parents.
//! Nodes only ever reference earlier nodes, so backward is a single reverse
//! sweep — no explicit topological sort.
//!
//! The tape also keeps a deterministic multiply-accumulate counter used by
//! the paradigm benchmark. Counting rules: a matrix product `m×k by k×n`
//! costs `m*k*n`; elementwise products (`mul`, `mul_row_broadcast`,
//! `mul_const`, `scale`) cost one per element; layer normalization costs two
//! per element (the 1/sigma and gamma multiplies). Additions, lookups and
//! transcendental evaluations are not counted.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to this range before any logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBroadcast(Var, Var),
    MulRowBroadcast(Var, Var),
    AddScalar(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    SoftmaxMasked(Var, Option<Vec<bool>>),
    RowSum(Var),
    SumAll(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    Embedding(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    OuterSum(Var, Var),
    BceSum {
        probs: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    macs: u64,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Deterministic count of multiply-accumulates recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target w.r.t. `v`. Zero-filled for
    /// grad-requiring nodes the loss never touched; `None` for nodes outside
    /// the differentiable set.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, macs: u64) -> Var {
        debug_assert!(value.all_finite(), "non-finite forward value");
        self.macs += macs;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, 0)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    // ---- arithmetic -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(ta.data(), tb.data(), m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push(value, Op::Matmul(a, b), needs, (m * k * n) as u64))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "add",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs, 0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "mul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let macs = data.len() as u64;
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs, macs))
    }

    /// `x + bias` with `bias` broadcast over the rows of `x` (the documented
    /// bias-add broadcast).
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let cols = tx.cols();
        if tb.numel() != cols {
            return Err(Error::Shape {
                op: "add_row_broadcast",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let value = Tensor::from_vec(tx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddRowBroadcast(x, bias), needs, 0))
    }

    /// `x * row` elementwise, `row` broadcast over the rows of `x`.
    pub fn mul_row_broadcast(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let cols = tx.cols();
        if tr.numel() != cols {
            return Err(Error::Shape {
                op: "mul_row_broadcast",
                left: tx.shape().to_vec(),
                right: tr.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            for (o, r) in chunk.iter_mut().zip(tr.data()) {
                *o *= r;
            }
        }
        let macs = data.len() as u64;
        let value = Tensor::from_vec(tx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(value, Op::MulRowBroadcast(x, row), needs, macs))
    }

    /// Adds a scalar node to every entry of `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if !ts.is_scalar() {
            return Err(Error::Shape {
                op: "add_scalar",
                left: self.value(x).shape().to_vec(),
                right: ts.shape().to_vec(),
            });
        }
        let sv = ts.data()[0];
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v + sv).collect();
        let value = Tensor::from_vec(tx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(value, Op::AddScalar(x, s), needs, 0))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let tx = self.value(x);
        let data: Vec<f64> = tx.data().iter().map(|v| v * k).collect();
        let macs = data.len() as u64;
        let value = Tensor::from_vec(tx.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Scale(x, k), needs, macs))
    }

    /// Elementwise product with a fixed buffer (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.numel() {
            return Err(Error::Shape {
                op: "mul_const",
                left: tx.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let data: Vec<f64> = tx.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let macs = data.len() as u64;
        let value = Tensor::from_vec(tx.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::MulConst(x, mask), needs, macs))
    }

    // ---- activations ------------------------------------------------------

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| sigmoid(*v)).collect();
        let value = Tensor::from_vec(tx.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid(x), needs, 0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::from_vec(tx.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Tanh(x), needs, 0)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::from_vec(tx.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Gelu(x), needs, 0)
    }

    /// Softmax over the last axis, numerically stabilized by max-subtraction.
    /// Entries where `mask` is false behave as -inf logits: their output is
    /// exactly 0 and they are excluded from the normalization.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        let rows = tx.rows();
        if let Some(m) = mask {
            if m.len() != tx.numel() {
                return Err(Error::Shape {
                    op: "softmax_masked",
                    left: tx.shape().to_vec(),
                    right: vec![m.len()],
                });
            }
        }
        let mut data = vec![0.0; tx.numel()];
        for r in 0..rows {
            let xs = &tx.data()[r * cols..(r + 1) * cols];
            let keep = |j: usize| mask.map_or(true, |m| m[r * cols + j]);
            let mut max = f64::NEG_INFINITY;
            for j in 0..cols {
                if keep(j) && xs[j] > max {
                    max = xs[j];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateSlice { slice: r });
            }
            let mut denom = 0.0;
            for j in 0..cols {
                if keep(j) {
                    let e = (xs[j] - max).exp();
                    data[r * cols + j] = e;
                    denom += e;
                }
            }
            for j in 0..cols {
                data[r * cols + j] /= denom;
            }
        }
        let value = Tensor::from_vec(tx.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SoftmaxMasked(x, mask.map(|m| m.to_vec())), needs, 0))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    // ---- reductions & shape ----------------------------------------------

    /// Sums each row over the last axis: `[r, c] -> [r]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let cols = tx.cols();
        let rows = tx.rows();
        let data = (0..rows)
            .map(|r| tx.data()[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let value = Tensor::from_vec(vec![rows], data).expect("rows");
        let needs = self.needs(x);
        self.push(value, Op::RowSum(x), needs, 0)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::SumAll(x), needs, 0)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                left: tx.shape().to_vec(),
                right: vec![],
            });
        }
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = tx.data()[i * c + j];
            }
        }
        let value = Tensor::from_vec(vec![c, r], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Transpose(x), needs, 0))
    }

    /// Concatenates along the last axis; all inputs must have the same row
    /// count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut total_cols = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: tp.shape().to_vec(),
                });
            }
            total_cols += tp.cols();
        }
        let mut data = vec![0.0; rows * total_cols];
        let mut offset = 0;
        for &p in parts {
            let tp = self.value(p);
            let c = tp.cols();
            for r in 0..rows {
                data[r * total_cols + offset..r * total_cols + offset + c]
                    .copy_from_slice(&tp.data()[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let value = Tensor::from_vec(vec![rows, total_cols], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), needs, 0))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        let rows = tx.rows();
        if start + len > rows {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{} out of {rows} rows",
                start + len
            )));
        }
        let data = tx.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::from_vec(vec![len, cols], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SliceRows(x, start), needs, 0))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        let rows = tx.rows();
        if start + len > cols {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{} out of {cols} cols",
                start + len
            )));
        }
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&tx.data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::from_vec(vec![rows, len], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SliceCols(x, start), needs, 0))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != tx.numel() {
            return Err(Error::Shape {
                op: "reshape",
                left: tx.shape().to_vec(),
                right: shape,
            });
        }
        let value = Tensor::from_vec(shape, tx.data().to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs, 0))
    }

    /// Gathers rows of `table` by id; gradients accumulate per id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                left: tt.shape().to_vec(),
                right: vec![ids.len()],
            });
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut data = vec![0.0; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::Contract(format!(
                    "embedding id {id} out of vocabulary size {v}"
                )));
            }
            data[r * d..(r + 1) * d].copy_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::from_vec(vec![ids.len(), d], data)?;
        let needs = self.needs(table);
        Ok(self.push(value, Op::Embedding(table, ids.to_vec()), needs, 0))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let cols = tx.cols();
        if tg.numel() != cols || tb.numel() != cols {
            return Err(Error::Shape {
                op: "layer_norm",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let rows = tx.rows();
        let mut data = vec![0.0; tx.numel()];
        for r in 0..rows {
            let xs = &tx.data()[r * cols..(r + 1) * cols];
            let mean = xs.iter().sum::<f64>() / cols as f64;
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                data[r * cols + j] = tg.data()[j] * (xs[j] - mean) * rstd + tb.data()[j];
            }
        }
        let macs = 2 * (rows * cols) as u64;
        let value = Tensor::from_vec(tx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, eps }, needs, macs))
    }

    /// `out[i, j] = a[i] + b[j]` for rank-1 inputs.
    pub fn outer_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 1 || tb.shape().len() != 1 {
            return Err(Error::Shape {
                op: "outer_sum",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, n) = (ta.numel(), tb.numel());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = ta.data()[i] + tb.data()[j];
            }
        }
        let value = Tensor::from_vec(vec![m, n], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::OuterSum(a, b), needs, 0))
    }

    /// Weighted binary cross entropy, summed over all entries:
    /// `sum_i w_i * -(y_i ln p_i + (1-y_i) ln(1-p_i))` with probabilities
    /// clamped to `[PROB_CLAMP, 1-PROB_CLAMP]` before the logarithms.
    /// Targets and weights are fixed values and carry no gradient.
    pub fn bce_sum(&mut self, probs: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let tp = self.value(probs);
        if targets.len() != tp.numel() || weights.len() != tp.numel() {
            return Err(Error::Shape {
                op: "bce_sum",
                left: tp.shape().to_vec(),
                right: vec![targets.len(), weights.len()],
            });
        }
        let mut total = 0.0;
        for ((&p, &y), &w) in tp.data().iter().zip(targets).zip(weights) {
            if !(-1e-9..=1.0 + 1e-9).contains(&p) {
                return Err(Error::Contract(format!(
                    "bce_sum probability {p} outside [0, 1]"
                )));
            }
            if w == 0.0 {
                continue;
            }
            let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            total += w * -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        }
        let needs = self.needs(probs);
        Ok(self.push(
            Tensor::scalar(total),
            Op::BceSum {
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            needs,
            0,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Populates gradients of every grad-requiring node reachable from
    /// `loss`, which must be scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward target must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| {
                if n.needs_grad {
                    Some(vec![0.0; n.value.numel()])
                } else {
                    None
                }
            })
            .collect();
        if self.grads[loss.0].is_none() {
            // Loss does not depend on any grad-requiring leaf; nothing to do.
            return Ok(());
        }
        self.grads[loss.0].as_mut().unwrap()[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if self.grads[idx].is_none() {
                continue;
            }
            let g = self.grads[idx].take().unwrap();
            self.step_backward(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, delta: &[f64]) {
        if let Some(g) = self.grads[v.0].as_mut() {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    fn step_backward(&mut self, idx: usize, g: &[f64]) {
        // Temporarily take the op to satisfy the borrow checker.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = {
                    let ta = self.value(*a);
                    (ta.shape()[0], ta.shape()[1])
                };
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    // dA = G * B^T
                    let mut da = vec![0.0; m * k];
                    matmul_nt(g, self.value(*b).data(), m, n, k, &mut da);
                    self.add_grad(*a, &da);
                }
                if self.wants(*b) {
                    // dB = A^T * G
                    let mut db = vec![0.0; k * n];
                    matmul_tn(self.value(*a).data(), g, m, k, n, &mut db);
                    self.add_grad(*b, &db);
                }
            }
            Op::Add(a, b) => {
                self.add_grad(*a, g);
                self.add_grad(*b, g);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let da: Vec<f64> =
                        g.iter().zip(self.value(*b).data()).map(|(g, b)| g * b).collect();
                    self.add_grad(*a, &da);
                }
                if self.wants(*b) {
                    let db: Vec<f64> =
                        g.iter().zip(self.value(*a).data()).map(|(g, a)| g * a).collect();
                    self.add_grad(*b, &db);
                }
            }
            Op::AddRowBroadcast(x, bias) => {
                self.add_grad(*x, g);
                if self.wants(*bias) {
                    let cols = self.value(*bias).numel();
                    let mut db = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    self.add_grad(*bias, &db);
                }
            }
            Op::MulRowBroadcast(x, row) => {
                let cols = self.value(*row).numel();
                if self.wants(*x) {
                    let rowv = self.value(*row).data().to_vec();
                    let dx: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * rowv[i % cols])
                        .collect();
                    self.add_grad(*x, &dx);
                }
                if self.wants(*row) {
                    let xv = self.value(*x).data();
                    let mut dr = vec![0.0; cols];
                    for (i, gv) in g.iter().enumerate() {
                        dr[i % cols] += gv * xv[i];
                    }
                    self.add_grad(*row, &dr);
                }
            }
            Op::AddScalar(x, s) => {
                self.add_grad(*x, g);
                if self.wants(*s) {
                    self.add_grad(*s, &[g.iter().sum()]);
                }
            }
            Op::Scale(x, k) => {
                if self.wants(*x) {
                    let dx: Vec<f64> = g.iter().map(|gv| gv * k).collect();
                    self.add_grad(*x, &dx);
                }
            }
            Op::MulConst(x, mask) => {
                if self.wants(*x) {
                    let dx: Vec<f64> = g.iter().zip(mask).map(|(gv, m)| gv * m).collect();
                    self.add_grad(*x, &dx);
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    let y = self.nodes[idx].value.data();
                    let dx: Vec<f64> = g.iter().zip(y).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                    self.add_grad(*x, &dx);
                }
            }
            Op::Tanh(x) => {
                if self.wants(*x) {
                    let y = self.nodes[idx].value.data();
                    let dx: Vec<f64> = g.iter().zip(y).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                    self.add_grad(*x, &dx);
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let dx: Vec<f64> = g.iter().zip(xv).map(|(gv, &x)| gv * gelu_prime(x)).collect();
                    self.add_grad(*x, &dx);
                }
            }
            Op::SoftmaxMasked(x, mask) => {
                if self.wants(*x) {
                    let y = self.nodes[idx].value.data();
                    let cols = self.nodes[idx].value.cols();
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..y.len() / cols {
                        let ys = &y[r * cols..(r + 1) * cols];
                        let gs = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                        for j in 0..cols {
                            let keep = mask.as_ref().map_or(true, |m| m[r * cols + j]);
                            if keep {
                                dx[r * cols + j] = ys[j] * (gs[j] - dot);
                            }
                        }
                    }
                    self.add_grad(*x, &dx);
                }
            }
            Op::RowSum(x) => {
                if self.wants(*x) {
                    let cols = self.value(*x).cols();
                    let dx: Vec<f64> = (0..self.value(*x).numel())
                        .map(|i| g[i / cols])
                        .collect();
                    self.add_grad(*x, &dx);
                }
            }
            Op::SumAll(x) => {
                if self.wants(*x) {
                    let dx = vec![g[0]; self.value(*x).numel()];
                    self.add_grad(*x, &dx);
                }
            }
            Op::Transpose(x) => {
                if self.wants(*x) {
                    let (c, r) = {
                        let s = self.nodes[idx].value.shape();
                        (s[0], s[1])
                    };
                    // output is [c, r]; scatter back to [r, c]
                    let mut dx = vec![0.0; r * c];
                    for i in 0..c {
                        for j in 0..r {
                            dx[j * c + i] = g[i * r + j];
                        }
                    }
                    self.add_grad(*x, &dx);
                }
            }
            Op::ConcatCols(parts) => {
                let total_cols = self.nodes[idx].value.cols();
                let rows = self.nodes[idx].value.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.wants(p) {
                        let mut dp = vec![0.0; rows * c];
                        for r in 0..rows {
                            dp[r * c..(r + 1) * c].copy_from_slice(
                                &g[r * total_cols + offset..r * total_cols + offset + c],
                            );
                        }
                        self.add_grad(p, &dp);
                    }
                    offset += c;
                }
            }
            Op::SliceRows(x, start) => {
                if self.wants(*x) {
                    let cols = self.value(*x).cols();
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    dx[start * cols..start * cols + g.len()].copy_from_slice(g);
                    self.add_grad(*x, &dx);
                }
            }
            Op::SliceCols(x, start) => {
                if self.wants(*x) {
                    let cols = self.value(*x).cols();
                    let len = self.nodes[idx].value.cols();
                    let rows = self.value(*x).rows();
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    self.add_grad(*x, &dx);
                }
            }
            Op::Reshape(x) => {
                self.add_grad(*x, g);
            }
            Op::Embedding(table, ids) => {
                if self.wants(*table) {
                    let d = self.value(*table).cols();
                    let mut dt = vec![0.0; self.value(*table).numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                    self.add_grad(*table, &dt);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let cols = self.value(*x).cols();
                let rows = self.value(*x).rows();
                let xv = self.value(*x).data().to_vec();
                let gv = self.value(*gamma).data().to_vec();
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..rows {
                    let xs = &xv[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let mean = xs.iter().sum::<f64>() / cols as f64;
                    let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * rstd).collect();
                    let h: Vec<f64> = gs.iter().zip(&gv).map(|(g, gm)| g * gm).collect();
                    let mean_h = h.iter().sum::<f64>() / cols as f64;
                    let mean_hx = h.iter().zip(&xhat).map(|(h, x)| h * x).sum::<f64>() / cols as f64;
                    for j in 0..cols {
                        dx[r * cols + j] = rstd * (h[j] - mean_h - xhat[j] * mean_hx);
                        dgamma[j] += gs[j] * xhat[j];
                        dbeta[j] += gs[j];
                    }
                }
                self.add_grad(*x, &dx);
                self.add_grad(*gamma, &dgamma);
                self.add_grad(*beta, &dbeta);
            }
            Op::OuterSum(a, b) => {
                let n = self.value(*b).numel();
                let m = self.value(*a).numel();
                if self.wants(*a) {
                    let da: Vec<f64> = (0..m).map(|i| g[i * n..(i + 1) * n].iter().sum()).collect();
                    self.add_grad(*a, &da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                    self.add_grad(*b, &db);
                }
            }
            Op::BceSum {
                probs,
                targets,
                weights,
            } => {
                if self.wants(*probs) {
                    let pv = self.value(*probs).data();
                    let dp: Vec<f64> = pv
                        .iter()
                        .zip(targets)
                        .zip(weights)
                        .map(|((&p, &y), &w)| {
                            // Clamped entries sit on a flat region of the loss.
                            if w == 0.0 || p < PROB_CLAMP || p > 1.0 - PROB_CLAMP {
                                0.0
                            } else {
                                g[0] * w * (p - y) / (p * (1.0 - p))
                            }
                        })
                        .collect();
                    self.add_grad(*probs, &dp);
                }
            }
        }
        self.nodes[idx].op = op;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// C = A[m,k] * B[k,n]
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// C = A[m,k] * B^T where B is [n,k]
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
}

/// C = A^T * B where A is [m,k], B is [m,n], C is [k,n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.constant(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.matmul(i2, a).unwrap();
        assert_eq!(g.data(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_selector_row() {
        let mut g = Graph::new();
        let sel = g.constant(t(vec![1, 2], vec![1.0, 0.0]));
        let col = g.constant(t(vec![2, 1], vec![2.0, 5.0]));
        let y = g.matmul(sel, col).unwrap();
        assert_eq!(g.data(y), &[2.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_times_b_transposed() {
        let mut rng = Rng::new(5);
        let mut g = Graph::new();
        let a = g.leaf(rng.uniform_tensor(vec![3, 4], -1.0, 1.0), true);
        let b = g.constant(rng.uniform_tensor(vec![4, 2], -1.0, 1.0));
        let y = g.matmul(a, b).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        // d(sum)/dA = ones(3,2) * B^T: entry [i,p] = sum_j B[p,j]
        let bt = g.value(b).data();
        let grad = g.grad(a).unwrap();
        for i in 0..3 {
            for p in 0..4 {
                let expect: f64 = (0..2).map(|j| bt[p * 2 + j]).sum();
                assert!((grad[i * 4 + p] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![3], vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for v in g.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form_two_logits() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![2], vec![1.0, 0.0]));
        let y = g.softmax(x).unwrap();
        let e = std::f64::consts::E;
        assert!((g.data(y)[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((g.data(y)[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((g.data(y)[0] - 0.73106).abs() < 1e-5);
        assert!((g.data(y)[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn softmax_mask_zeroes_and_renormalizes() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![2], vec![5.0, 9.0]));
        let y = g.softmax_masked(x, Some(&[true, false])).unwrap();
        assert_eq!(g.data(y), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_slice_is_degenerate() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![2], vec![1.0, 2.0]));
        let err = g.softmax_masked(x, Some(&[false, false])).unwrap_err();
        assert!(matches!(err, Error::DegenerateSlice { slice: 0 }));
    }

    #[test]
    fn elementwise_basics() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![1], vec![0.0]));
        let s = g.sigmoid(x);
        assert_eq!(g.data(s), &[0.5]);
        let th = g.tanh(x);
        assert_eq!(g.data(th), &[0.0]);
        let m = g.constant(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let rs = g.row_sum(m);
        assert_eq!(g.data(rs), &[3.0, 7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![2], vec![1.0, 2.0]), true);
        let y = g.tanh(x);
        let err = g.backward(y).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn unused_parameter_gets_zero_grad() {
        let mut g = Graph::new();
        let used = g.leaf(t(vec![2], vec![1.0, 2.0]), true);
        let unused = g.leaf(t(vec![3], vec![1.0, 2.0, 3.0]), true);
        let loss = g.sum_all(used);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0, 0.0]);
    }

    /// Central finite differences against the analytic gradient for a
    /// composed graph covering most op kinds.
    #[test]
    fn finite_difference_composed_graph() {
        let build = |vals: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let w = g.leaf(vals[0].clone(), false);
            let x = g.leaf(vals[1].clone(), false);
            let bias = g.leaf(vals[2].clone(), false);
            let gamma = g.leaf(vals[3].clone(), false);
            let beta = g.leaf(vals[4].clone(), false);
            let h = g.matmul(x, w).unwrap();
            let h = g.add_row_broadcast(h, bias).unwrap();
            let h = g.tanh(h);
            let h = g.layer_norm(h, gamma, beta, 1e-5).unwrap();
            let h = g.gelu(h);
            let a = g.softmax(h).unwrap();
            let prod = g.mul(a, h).unwrap();
            let ssum = g.row_sum(prod);
            let sig = g.sigmoid(ssum);
            let l = g.sum_all(sig);
            g.data(l)[0]
        };
        let mut rng = Rng::new(11);
        let tensors = vec![
            rng.uniform_tensor(vec![3, 3], -1.0, 1.0),
            rng.uniform_tensor(vec![2, 3], -1.0, 1.0),
            rng.uniform_tensor(vec![3], -0.5, 0.5),
            rng.uniform_tensor(vec![3], 0.5, 1.5),
            rng.uniform_tensor(vec![3], -0.5, 0.5),
        ];

        // analytic
        let mut g = Graph::new();
        let leaves: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let h = g.matmul(leaves[1], leaves[0]).unwrap();
        let h = g.add_row_broadcast(h, leaves[2]).unwrap();
        let h = g.tanh(h);
        let h = g.layer_norm(h, leaves[3], leaves[4], 1e-5).unwrap();
        let h = g.gelu(h);
        let a = g.softmax(h).unwrap();
        let prod = g.mul(a, h).unwrap();
        let ssum = g.row_sum(prod);
        let sig = g.sigmoid(ssum);
        let l = g.sum_all(sig);
        g.backward(l).unwrap();

        let h_step = 1e-5;
        for (ti, tensor) in tensors.iter().enumerate() {
            let analytic = g.grad(leaves[ti]).unwrap();
            for i in 0..tensor.numel() {
                let mut plus = tensors.clone();
                plus[ti].data_mut()[i] += h_step;
                let mut minus = tensors.clone();
                minus[ti].data_mut()[i] -= h_step;
                let fd = (build(&plus) - build(&minus)) / (2.0 * h_step);
                let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
                assert!(
                    (analytic[i] - fd).abs() / denom < 1e-4,
                    "tensor {ti} entry {i}: analytic {} vs fd {fd}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn finite_difference_structural_ops() {
        let build = |vals: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let table = g.leaf(vals[0].clone(), false);
            let a = g.leaf(vals[1].clone(), false);
            let b = g.leaf(vals[2].clone(), false);
            let emb = g.embedding(table, &[0, 2, 1, 2]).unwrap();
            let left = g.slice_rows(emb, 0, 2).unwrap();
            let right = g.slice_rows(emb, 2, 2).unwrap();
            let cat = g.concat_cols(&[left, right]).unwrap();
            let catt = g.transpose(cat).unwrap();
            let flat = g.row_sum(catt);
            let sm = g.scale(flat, 0.25).unwrap();
            let av = g.reshape(a, vec![6]).unwrap();
            let os = g.outer_sum(av, b).unwrap();
            let sig = g.sigmoid(os);
            let part = g.sum_all(sig);
            let part2 = g.sum_all(sm);
            let tot = g.add(part, part2).unwrap();
            g.data(tot)[0]
        };
        let mut rng = Rng::new(21);
        let tensors = vec![
            rng.uniform_tensor(vec![3, 4], -1.0, 1.0),
            rng.uniform_tensor(vec![2, 3], -1.0, 1.0),
            rng.uniform_tensor(vec![3], -1.0, 1.0),
        ];
        let mut g = Graph::new();
        let leaves: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let emb = g.embedding(leaves[0], &[0, 2, 1, 2]).unwrap();
        let left = g.slice_rows(emb, 0, 2).unwrap();
        let right = g.slice_rows(emb, 2, 2).unwrap();
        let cat = g.concat_cols(&[left, right]).unwrap();
        let catt = g.transpose(cat).unwrap();
        let flat = g.row_sum(catt);
        let sm = g.scale(flat, 0.25).unwrap();
        let av = g.reshape(leaves[1], vec![6]).unwrap();
        let os = g.outer_sum(av, leaves[2]).unwrap();
        let sig = g.sigmoid(os);
        let part = g.sum_all(sig);
        let part2 = g.sum_all(sm);
        let tot = g.add(part, part2).unwrap();
        g.backward(tot).unwrap();

        let h_step = 1e-5;
        for (ti, tensor) in tensors.iter().enumerate() {
            let analytic = g.grad(leaves[ti]).unwrap();
            for i in 0..tensor.numel() {
                let mut plus = tensors.clone();
                plus[ti].data_mut()[i] += h_step;
                let mut minus = tensors.clone();
                minus[ti].data_mut()[i] -= h_step;
                let fd = (build(&plus) - build(&minus)) / (2.0 * h_step);
                let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
                assert!(
                    (analytic[i] - fd).abs() / denom < 1e-4,
                    "tensor {ti} entry {i}: analytic {} vs fd {fd}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn bce_closed_form_and_gradient() {
        let mut g = Graph::new();
        let p = g.leaf(t(vec![1], vec![0.5]), true);
        let loss = g.bce_sum(p, &[1.0], &[1.0]).unwrap();
        assert!((g.data(loss)[0] - 0.5_f64.ln().abs()).abs() < 1e-12);
        g.backward(loss).unwrap();
        // d/dp of -ln(p) at p=0.5 is -2
        assert!((g.grad(p).unwrap()[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_out_of_range_probability() {
        let mut g = Graph::new();
        let p = g.constant(t(vec![1], vec![1.5]));
        assert!(matches!(
            g.bce_sum(p, &[1.0], &[1.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn mac_counter_is_deterministic() {
        let count = |seed: u64| {
            let mut rng = Rng::new(seed);
            let mut g = Graph::new();
            let a = g.constant(rng.uniform_tensor(vec![4, 5], -1.0, 1.0));
            let b = g.constant(rng.uniform_tensor(vec![5, 6], -1.0, 1.0));
            let y = g.matmul(a, b).unwrap();
            let _ = g.sigmoid(y);
            g.macs()
        };
        assert_eq!(count(1), 4 * 5 * 6);
        assert_eq!(count(1), count(2));
    }
}
