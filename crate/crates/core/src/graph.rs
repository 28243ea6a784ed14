//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! a topological order. [`Graph::backward`] walks that list once in reverse.
//! All values are matrices; vectors are `1×n` rows and scalars are `1×1`.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node of a [`Graph`].
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
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        denom: f64,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation tape. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` when no gradient flowed there.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite output of {:?}", op_name(&op));
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

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Leaf node. Gradients are tracked when `tensor.requires_grad()` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    /// Leaf node that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let t = tensor.with_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), needs))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul_nt {m}x{k} by ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_nt_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNT(a, b), needs))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(Error::Shape(format!("{what} {da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.same_shape(a, b, "sub")?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.same_shape(a, b, "mul")?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Mul(a, b), needs))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (r, c) = self.dims(row);
        if r != 1 || c != n {
            return Err(Error::Shape(format!("add_row {m}x{n} with {r}x{c}")));
        }
        let rv = self.value(row).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddRow(a, row), needs))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (m, n) = self.dims(a);
        let out = self.value(a).data().iter().map(|x| x * s).collect();
        let needs = self.needs(a);
        self.push(Tensor::matrix(m, n, out).expect("shape"), Op::Scale(a, s), needs)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (m, n) = self.dims(a);
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        let needs = self.needs(a);
        self.push(Tensor::matrix(m, n, out).expect("shape"), op, needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, tensor::gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, tensor::sigmoid, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if n == 0 {
            return Err(Error::Empty("softmax axis"));
        }
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            tensor::softmax_in_place(row);
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::SoftmaxRows(a), needs))
    }

    /// Row-wise layer norm with `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if n == 0 {
            return Err(Error::Empty("layer_norm input"));
        }
        if self.dims(gamma) != (1, n) || self.dims(beta) != (1, n) {
            return Err(Error::Shape(format!("layer_norm over {n} columns")));
        }
        let mut normed = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for row in self.value(x).data().chunks(n) {
            let (nr, is) = tensor::normalize(row, eps);
            normed.extend(nr);
            inv_std.push(is);
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out: Vec<f64> = normed
            .chunks(n)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((v, g), b)| g * v + b))
            .collect();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n {
            return Err(Error::Shape(format!("slice_cols {start}+{len} of {n}")));
        }
        let src = self.value(x).data();
        let out: Vec<f64> = (0..m)
            .flat_map(|r| src[r * n + start..r * n + start + len].iter().copied())
            .collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::matrix(m, len, out)?, Op::SliceCols { x, start }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts
            .first()
            .map(|&p| self.dims(p).0)
            .ok_or(Error::Empty("concat_cols"))?;
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            return Err(Error::Shape("concat_cols row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::matrix(m, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.dims(p).1)
            .ok_or(Error::Empty("concat_rows"))?;
        if parts.iter().any(|&p| self.dims(p).1 != n) {
            return Err(Error::Shape("concat_rows column counts differ".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let m = out.len() / n.max(1);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::ConcatRows(parts.to_vec()),
            needs,
        ))
    }

    /// Gathers rows by index (indices may repeat).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Shape(format!("select_rows index {bad} of {m}")));
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(self.value(x).row(r));
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::matrix(rows.len(), n, out)?,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// `Σ_i w_i · CE(logits_i, targets_i) / denom` as a scalar.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        denom: f64,
    ) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if targets.len() != m || weights.len() != m {
            return Err(Error::Shape(format!(
                "cross_entropy over {m} rows with {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::InvalidArgument(format!("target class {t} of {n}")));
        }
        if !(denom > 0.0) {
            return Err(Error::InvalidArgument("cross_entropy denom must be > 0".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (i, row) in self.value(logits).data().chunks(n).enumerate() {
            loss += weights[i] * (tensor::log_sum_exp(row) - row[targets[i]]);
            tensor::softmax_in_place(&mut probs[i * n..(i + 1) * n]);
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss / denom),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                denom,
                probs,
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (m, n) = (node.value.rows(), node.value.cols());
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (_, k) = self.dims(*a);
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    let buf = slot(grads, *a, m * k);
                    tensor::matmul_nt_acc(g, self.value(*b).data(), m, n, k, buf);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    let buf = slot(grads, *b, k * n);
                    tensor::matmul_tn_acc(self.value(*a).data(), g, m, k, n, buf);
                }
            }
            Op::MatMulNT(a, b) => {
                let (_, k) = self.dims(*a);
                if self.needs(*a) {
                    // dA = G · B
                    let buf = slot(grads, *a, m * k);
                    tensor::matmul_acc(g, self.value(*b).data(), m, n, k, buf);
                }
                if self.needs(*b) {
                    // dB = Gᵀ · A
                    let buf = slot(grads, *b, n * k);
                    tensor::matmul_tn_acc(g, self.value(*a).data(), m, n, k, buf);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(slot(grads, v, m * n), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(slot(grads, *a, m * n), g);
                }
                if self.needs(*b) {
                    let buf = slot(grads, *b, m * n);
                    for (o, x) in buf.iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    let buf = slot(grads, *a, m * n);
                    for ((o, x), y) in buf.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let buf = slot(grads, *b, m * n);
                    for ((o, x), y) in buf.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    add_into(slot(grads, *a, m * n), g);
                }
                if self.needs(*row) {
                    let buf = slot(grads, *row, n);
                    for chunk in g.chunks(n) {
                        add_into(buf, chunk);
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    let buf = slot(grads, *a, m * n);
                    for (o, x) in buf.iter_mut().zip(g) {
                        *o += x * s;
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                let buf = slot(grads, *a, m * n);
                for ((o, gx), &x) in buf.iter_mut().zip(g).zip(xv) {
                    *o += gx * tensor::gelu_grad(x);
                }
            }
            Op::Sigmoid(a) => {
                let yv = node.value.data();
                let buf = slot(grads, *a, m * n);
                for ((o, gx), &y) in buf.iter_mut().zip(g).zip(yv) {
                    *o += gx * y * (1.0 - y);
                }
            }
            Op::Abs(a) => {
                let xv = self.value(*a).data();
                let buf = slot(grads, *a, m * n);
                for ((o, gx), &x) in buf.iter_mut().zip(g).zip(xv) {
                    // subgradient 0 at the kink
                    let s = if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *o += gx * s;
                }
            }
            Op::SoftmaxRows(a) => {
                let yv = node.value.data();
                let buf = slot(grads, *a, m * n);
                for r in 0..m {
                    let y = &yv[r * n..(r + 1) * n];
                    let gy = &g[r * n..(r + 1) * n];
                    let s = tensor::dot(y, gy);
                    for c in 0..n {
                        buf[r * n + c] += y[c] * (gy[c] - s);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let gv = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let buf = slot(grads, *gamma, n);
                    for (gr, nr) in g.chunks(n).zip(normed.chunks(n)) {
                        for c in 0..n {
                            buf[c] += gr[c] * nr[c];
                        }
                    }
                }
                if self.needs(*beta) {
                    let buf = slot(grads, *beta, n);
                    for gr in g.chunks(n) {
                        add_into(buf, gr);
                    }
                }
                if self.needs(*x) {
                    let nf = n as f64;
                    let buf = slot(grads, *x, m * n);
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let nr = &normed[r * n..(r + 1) * n];
                        for c in 0..n {
                            dxhat[c] = gr[c] * gv[c];
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dn = tensor::dot(&dxhat, nr);
                        let k = inv_std[r] / nf;
                        for c in 0..n {
                            buf[r * n + c] += k * (nf * dxhat[c] - sum_d - nr[c] * sum_dn);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (_, src_n) = self.dims(*x);
                let buf = slot(grads, *x, m * src_n);
                for r in 0..m {
                    add_into(
                        &mut buf[r * src_n + start..r * src_n + start + n],
                        &g[r * n..(r + 1) * n],
                    );
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (_, pn) = self.dims(p);
                    if self.needs(p) {
                        let buf = slot(grads, p, m * pn);
                        for r in 0..m {
                            add_into(
                                &mut buf[r * pn..(r + 1) * pn],
                                &g[r * n + offset..r * n + offset + pn],
                            );
                        }
                    }
                    offset += pn;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.needs(p) {
                        add_into(slot(grads, p, len), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SelectRows { x, rows } => {
                let (src_m, _) = self.dims(*x);
                let buf = slot(grads, *x, src_m * n);
                for (i, &r) in rows.iter().enumerate() {
                    add_into(&mut buf[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                }
            }
            Op::Sum(x) => {
                let len = self.value(*x).numel();
                let buf = slot(grads, *x, len);
                for o in buf.iter_mut() {
                    *o += g[0];
                }
            }
            Op::Mean(x) => {
                let len = self.value(*x).numel();
                let buf = slot(grads, *x, len);
                let v = g[0] / len.max(1) as f64;
                for o in buf.iter_mut() {
                    *o += v;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                denom,
                probs,
            } => {
                let (lm, ln) = self.dims(*logits);
                let buf = slot(grads, *logits, lm * ln);
                for r in 0..lm {
                    let k = g[0] * weights[r] / denom;
                    for c in 0..ln {
                        let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                        buf[r * ln + c] += k * (probs[r * ln + c] - onehot);
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulNT(..) => "matmul_nt",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Gelu(..) => "gelu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Abs(..) => "abs",
        Op::SoftmaxRows(..) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(..) => "concat_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::SelectRows { .. } => "select_rows",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}
