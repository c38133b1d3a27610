//! Arena-backed reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node whose inputs are
//! earlier nodes, so the node order is already topological. A training step
//! builds a fresh graph, inserts parameters as tracked leaves, runs the forward
//! pass, calls [`Graph::backward`] once, and reads leaf gradients back out.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Transpose(Var),
    AddBias(Var, Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    Slice {
        x: Var,
        row: usize,
        col: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    MeanPoolRows {
        x: Var,
        group: usize,
    },
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    KlDivergence {
        student: Var,
        teacher: Var,
        temperature: f64,
        log_p: Tensor,
        log_q: Tensor,
        per_row: Vec<f64>,
    },
    MaskedMatMul {
        x: Var,
        weight: Var,
        gate: Option<Var>,
        keep: Option<Var>,
        mask: Tensor,
        effective: Tensor,
        block: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    tracked: bool,
    needs_grad: bool,
    op: Op,
}

/// Computation tape plus the values and leaf gradients it owns.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    stable_sigmoid(x)
}

fn log_softmax_row(row: &[f64], scale: f64, out: &mut [f64]) {
    let (arg, max) = row
        .iter()
        .map(|v| v * scale)
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    // ln(1 + Σ_{j≠arg} e^{v_j - max}) keeps precision when one entry dominates.
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != arg)
        .map(|(_, v)| (v * scale - max).exp())
        .sum();
    let log_norm = rest.ln_1p();
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v * scale - max) - log_norm;
    }
}

fn accumulate(adj: &mut [Option<Tensor>], var: Var, grad: Tensor) {
    match &mut adj[var.0] {
        Some(existing) => existing.add_assign(&grad),
        slot @ None => *slot = Some(grad),
    }
}

/// Reduce a gradient to the shape of an operand that may have been broadcast
/// from a scalar.
fn reduce_to(grad: Tensor, shape: (usize, usize)) -> Tensor {
    if grad.shape() == shape {
        grad
    } else {
        Tensor::scalar(grad.sum())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            tracked: false,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            tracked: true,
            needs_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            tracked: false,
            needs_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar_value(&self, var: Var) -> f64 {
        self.nodes[var.0].value.item()
    }

    /// Accumulated gradient of a tracked leaf, if backward has reached it.
    pub fn grad(&self, var: Var) -> Option<&Tensor> {
        self.nodes[var.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, var: Var) -> Option<Tensor> {
        self.nodes[var.0].grad.take()
    }

    /// Clear every accumulated leaf gradient.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() == y.shape() {
            Ok(x.zip_map(y, f))
        } else if y.is_scalar() {
            let s = y.item();
            Ok(x.map(|v| f(v, s)))
        } else if x.is_scalar() {
            let s = x.item();
            Ok(y.map(|v| f(s, v)))
        } else {
            Err(Error::Dimension(format!(
                "{name}: shapes {:?} and {:?} are not compatible",
                x.shape(),
                y.shape()
            )))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(stable_sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    /// Adds a `1 x cols` row vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Dimension(format!(
                "add_bias: bias {:?} against input {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut value = xv.clone();
        let cols = value.cols();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % cols];
        }
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.rows(), xv.cols());
        let cols = xv.cols();
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
            log_softmax_row(row, 1.0, dst);
            dst.iter_mut().for_each(|v| *v = v.exp());
        }
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    /// Row-wise layer normalisation with learnable `1 x cols` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        for p in [gamma, beta] {
            if self.value(p).shape() != (1, cols) {
                return Err(Error::Dimension(format!(
                    "layer_norm: parameter {:?} against input {:?}",
                    self.value(p).shape(),
                    xv.shape()
                )));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut normalized = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            inv_std.push(rstd);
            for c in 0..cols {
                let n = (row[c] - mean) * rstd;
                normalized.set(r, c, n);
                out.set(r, c, n * g[c] + b[c]);
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            normalized,
            inv_std,
        };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    /// Rectangular window `[row, row+rows) x [col, col+cols)` of `x`.
    pub fn slice(&mut self, x: Var, row: usize, rows: usize, col: usize, cols: usize) -> Result<Var> {
        let xv = self.value(x);
        if rows == 0 || cols == 0 || row + rows > xv.rows() || col + cols > xv.cols() {
            return Err(Error::Dimension(format!(
                "slice [{row}+{rows}, {col}+{cols}] out of {:?}",
                xv.shape()
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in row..row + rows {
            data.extend_from_slice(&xv.row(r)[col..col + cols]);
        }
        let value = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(value, Op::Slice { x, row, col }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|v| self.value(*v).rows())
            .ok_or_else(|| Error::Dimension("concat_cols of nothing".into()))?;
        if parts.iter().any(|v| self.value(*v).rows() != rows) {
            return Err(Error::Dimension("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|v| self.value(*v).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in parts {
                data.extend_from_slice(self.value(*v).row(r));
            }
        }
        let value = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|v| self.value(*v).cols())
            .ok_or_else(|| Error::Dimension("concat_rows of nothing".into()))?;
        if parts.iter().any(|v| self.value(*v).cols() != cols) {
            return Err(Error::Dimension("concat_rows: column counts differ".into()));
        }
        let mut data = Vec::new();
        for v in parts {
            data.extend_from_slice(self.value(*v).data());
        }
        let rows = data.len() / cols;
        let value = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Row lookup (embedding). Indices outside the table are an input error.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(bad) = indices.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::Input(format!(
                "index {bad} outside table of {} rows",
                tv.rows()
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * tv.cols());
        for &i in indices {
            data.extend_from_slice(tv.row(i));
        }
        let value = Tensor::from_vec(indices.len(), tv.cols(), data)?;
        let op = Op::GatherRows {
            table,
            indices: indices.to_vec(),
        };
        Ok(self.push(value, op, &[table]))
    }

    /// Averages each consecutive group of `group` rows into one row.
    pub fn mean_pool_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        if group == 0 || !xv.rows().is_multiple_of(group) {
            return Err(Error::Dimension(format!(
                "cannot pool {} rows in groups of {group}",
                xv.rows()
            )));
        }
        let (rows, cols) = (xv.rows() / group, xv.cols());
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..xv.rows() {
            let dst = r / group;
            for c in 0..cols {
                let v = out.get(dst, c) + xv.get(r, c) / group as f64;
                out.set(dst, c, v);
            }
        }
        Ok(self.push(out, Op::MeanPoolRows { x, group }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / xv.len() as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (batch, classes) = lv.shape();
        if labels.len() != batch {
            return Err(Error::Dimension(format!(
                "{} labels for {batch} logit rows",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        let mut probs = Tensor::zeros(batch, classes);
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let dst = &mut probs.data_mut()[r * classes..(r + 1) * classes];
            log_softmax_row(lv.row(r), 1.0, dst);
            loss -= dst[label];
            dst.iter_mut().for_each(|v| *v = v.exp());
        }
        let value = Tensor::scalar(loss / batch as f64);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(value, op, &[logits]))
    }

    /// `KL(teacher ‖ student)` between temperature-softened row distributions,
    /// averaged over rows.
    pub fn kl_divergence(&mut self, student: Var, teacher: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::config(
                "distill_temperature",
                format!("must be positive, got {temperature}"),
            ));
        }
        let (sv, tv) = (self.value(student), self.value(teacher));
        if sv.shape() != tv.shape() {
            return Err(Error::Dimension(format!(
                "kl_divergence: student {:?} vs teacher {:?}",
                sv.shape(),
                tv.shape()
            )));
        }
        let (batch, classes) = sv.shape();
        let mut log_p = Tensor::zeros(batch, classes);
        let mut log_q = Tensor::zeros(batch, classes);
        let mut per_row = Vec::with_capacity(batch);
        for r in 0..batch {
            let span = r * classes..(r + 1) * classes;
            log_softmax_row(tv.row(r), 1.0 / temperature, &mut log_p.data_mut()[span.clone()]);
            log_softmax_row(sv.row(r), 1.0 / temperature, &mut log_q.data_mut()[span.clone()]);
            let kl: f64 = log_p.data()[span.clone()]
                .iter()
                .zip(&log_q.data()[span])
                .map(|(lp, lq)| lp.exp() * (lp - lq))
                .sum();
            per_row.push(kl);
        }
        let value = Tensor::scalar(per_row.iter().sum::<f64>() / batch as f64);
        let op = Op::KlDivergence {
            student,
            teacher,
            temperature,
            log_p,
            log_q,
            per_row,
        };
        Ok(self.push(value, op, &[student, teacher]))
    }

    /// `x · (expand(mask) ⊙ weight)` with a straight-through backward rule.
    ///
    /// `mask` is the block mask already expanded to the weight's shape and
    /// `block` is the side of the square blocks. With `G = xᵀ · dY`:
    /// the weight receives `mask ⊙ G`; the optional `gate` (shape of the block
    /// grid) receives the block sums of `weight ⊙ G`; the optional scalar
    /// `keep` receives the total sum of `weight ⊙ G`.
    pub fn masked_matmul(
        &mut self,
        x: Var,
        weight: Var,
        mask: Tensor,
        block: usize,
        gate: Option<Var>,
        keep: Option<Var>,
    ) -> Result<Var> {
        let wv = self.value(weight);
        if mask.shape() != wv.shape() {
            return Err(Error::Dimension(format!(
                "mask {:?} against weight {:?}",
                mask.shape(),
                wv.shape()
            )));
        }
        if block == 0 || !wv.rows().is_multiple_of(block) || !wv.cols().is_multiple_of(block) {
            return Err(Error::Dimension(format!(
                "block {block} does not tile weight {:?}",
                wv.shape()
            )));
        }
        if let Some(g) = gate {
            let expect = (wv.rows() / block, wv.cols() / block);
            if self.value(g).shape() != expect {
                return Err(Error::Dimension(format!(
                    "gate {:?} against block grid {:?}",
                    self.value(g).shape(),
                    expect
                )));
            }
        }
        if let Some(k) = keep {
            if !self.value(k).is_scalar() {
                return Err(Error::Dimension("keep fraction must be a scalar".into()));
            }
        }
        let effective = wv.zip_map(&mask, |w, m| w * m);
        let value = self.value(x).matmul(&effective)?;
        let mut inputs = vec![x, weight];
        inputs.extend(gate);
        inputs.extend(keep);
        let op = Op::MaskedMatMul {
            x,
            weight,
            gate,
            keep,
            mask,
            effective,
            block,
        };
        Ok(self.push(value, op, &inputs))
    }

    /// Backpropagate from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite(format!("loss is {}", lv.item())));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let push = |adj: &mut Vec<Option<Tensor>>, v: Var, g: Tensor| {
                if self.nodes[v.0].needs_grad {
                    accumulate(adj, v, g);
                }
            };
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(dy);
                }
                Op::MatMul(a, b) => {
                    let da = dy.matmul_t(self.value(*b))?;
                    let db = self.value(*a).t_matmul(&dy)?;
                    push(&mut adj, *a, da);
                    push(&mut adj, *b, db);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let da = reduce_to(dy.clone(), self.value(*a).shape());
                    let db = reduce_to(dy.map(|v| sign * v), self.value(*b).shape());
                    push(&mut adj, *a, da);
                    push(&mut adj, *b, db);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mul_by = |other: &Tensor| {
                        if other.shape() == dy.shape() {
                            dy.zip_map(other, |g, o| g * o)
                        } else {
                            let s = other.item();
                            dy.map(|g| g * s)
                        }
                    };
                    let da = reduce_to(mul_by(bv), av.shape());
                    let db = reduce_to(mul_by(av), bv.shape());
                    push(&mut adj, *a, da);
                    push(&mut adj, *b, db);
                }
                Op::Scale(a, f) => push(&mut adj, *a, dy.map(|g| g * f)),
                Op::Sigmoid(a) => {
                    let d = dy.zip_map(&node.value, |g, y| g * y * (1.0 - y));
                    push(&mut adj, *a, d);
                }
                Op::Relu(a) => {
                    let d = dy.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    push(&mut adj, *a, d);
                }
                Op::Transpose(a) => push(&mut adj, *a, dy.transpose()),
                Op::AddBias(x, b) => {
                    let cols = dy.cols();
                    let mut db = Tensor::zeros(1, cols);
                    for (i, g) in dy.data().iter().enumerate() {
                        db.data_mut()[i % cols] += g;
                    }
                    push(&mut adj, *b, db);
                    push(&mut adj, *x, dy);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut dx = Tensor::zeros(y.rows(), cols);
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), dy.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            dx.set(r, c, yr[c] * (gr[c] - dot));
                        }
                    }
                    push(&mut adj, *a, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let (rows, cols) = normalized.shape();
                    let g = self.value(*gamma).data();
                    let mut dgamma = Tensor::zeros(1, cols);
                    let mut dbeta = Tensor::zeros(1, cols);
                    let mut dx = Tensor::zeros(rows, cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let (gr, nr) = (dy.row(r), normalized.row(r));
                        for c in 0..cols {
                            dgamma.data_mut()[c] += gr[c] * nr[c];
                            dbeta.data_mut()[c] += gr[c];
                            dxhat[c] = gr[c] * g[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dn =
                            dxhat.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            dx.set(r, c, inv_std[r] * (dxhat[c] - mean_d - nr[c] * mean_dn));
                        }
                    }
                    push(&mut adj, *x, dx);
                    push(&mut adj, *gamma, dgamma);
                    push(&mut adj, *beta, dbeta);
                }
                Op::Slice { x, row, col } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..dy.rows() {
                        for c in 0..dy.cols() {
                            dx.set(row + r, col + c, dy.get(r, c));
                        }
                    }
                    push(&mut adj, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for v in parts {
                        let (rows, cols) = self.value(*v).shape();
                        let mut d = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            d.extend_from_slice(&dy.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        push(&mut adj, *v, Tensor::from_vec(rows, cols, d)?);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for v in parts {
                        let (rows, cols) = self.value(*v).shape();
                        let d = dy.data()[offset * cols..(offset + rows) * cols].to_vec();
                        offset += rows;
                        push(&mut adj, *v, Tensor::from_vec(rows, cols, d)?);
                    }
                }
                Op::GatherRows { table, indices } => {
                    let (rows, cols) = self.value(*table).shape();
                    let mut dt = Tensor::zeros(rows, cols);
                    for (r, &idx) in indices.iter().enumerate() {
                        for c in 0..cols {
                            let v = dt.get(idx, c) + dy.get(r, c);
                            dt.set(idx, c, v);
                        }
                    }
                    push(&mut adj, *table, dt);
                }
                Op::MeanPoolRows { x, group } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dx.set(r, c, dy.get(r / group, c) / *group as f64);
                        }
                    }
                    push(&mut adj, *x, dx);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    push(&mut adj, *a, Tensor::full(rows, cols, dy.item()));
                }
                Op::Mean(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    let n = (rows * cols) as f64;
                    push(&mut adj, *a, Tensor::full(rows, cols, dy.item() / n));
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = dy.item() / labels.len() as f64;
                    let mut d = probs.clone();
                    for (r, &l) in labels.iter().enumerate() {
                        let v = d.get(r, l) - 1.0;
                        d.set(r, l, v);
                    }
                    push(&mut adj, *logits, d.map(|v| v * scale));
                }
                Op::KlDivergence {
                    student,
                    teacher,
                    temperature,
                    log_p,
                    log_q,
                    per_row,
                } => {
                    let (batch, classes) = log_p.shape();
                    let scale = dy.item() / (*temperature * batch as f64);
                    let mut ds = Tensor::zeros(batch, classes);
                    let mut dt = Tensor::zeros(batch, classes);
                    for r in 0..batch {
                        for c in 0..classes {
                            let (lp, lq) = (log_p.get(r, c), log_q.get(r, c));
                            let p = lp.exp();
                            ds.set(r, c, scale * (lq.exp() - p));
                            dt.set(r, c, scale * p * ((lp - lq) - per_row[r]));
                        }
                    }
                    push(&mut adj, *student, ds);
                    push(&mut adj, *teacher, dt);
                }
                Op::MaskedMatMul {
                    x,
                    weight,
                    gate,
                    keep,
                    mask,
                    effective,
                    block,
                } => {
                    let dx = dy.matmul_t(effective)?;
                    let g_eff = self.value(*x).t_matmul(&dy)?;
                    let wv = self.value(*weight);
                    let dw = g_eff.zip_map(mask, |g, m| g * m);
                    let wg = g_eff.zip_map(wv, |g, w| g * w);
                    if let Some(gate) = gate {
                        let grid = (wv.rows() / block, wv.cols() / block);
                        let mut dgate = Tensor::zeros(grid.0, grid.1);
                        for r in 0..wv.rows() {
                            for c in 0..wv.cols() {
                                let (br, bc) = (r / block, c / block);
                                let v = dgate.get(br, bc) + wg.get(r, c);
                                dgate.set(br, bc, v);
                            }
                        }
                        push(&mut adj, *gate, dgate);
                    }
                    if let Some(keep) = keep {
                        push(&mut adj, *keep, Tensor::scalar(wg.sum()));
                    }
                    push(&mut adj, *x, dx);
                    push(&mut adj, *weight, dw);
                }
            }
        }

        for (i, slot) in adj.into_iter().enumerate() {
            let Some(g) = slot else { continue };
            let node = &mut self.nodes[i];
            if !node.tracked {
                continue;
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of leaf {i}")));
            }
            match &mut node.grad {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}
