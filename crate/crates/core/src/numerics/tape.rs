//! Reverse-mode differentiation over matrix-granularity operations.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and the backward sweep is a single reverse pass.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::ops::{gelu_grad_scalar, gelu_scalar, row_moments, softmax_row_inplace};
use crate::numerics::params::{Gradients, ParamId, ParamStore};
use crate::numerics::tensor::{dot, matmul_into, matmul_t_into, t_matmul_into};
use crate::numerics::Tensor;
use crate::optim::precision::round_half;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Arithmetic used for every recorded value and every propagated gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Arith {
    #[default]
    Full,
    /// Each primitive's output (and each gradient) is rounded to binary16.
    HalfEmulated,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Gelu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Rc<[usize]>),
    RelGather(Var, Rc<[usize]>),
    RelScatter(Var, Rc<[usize]>),
    Dropout(Var, Rc<[f64]>),
    CrossEntropy {
        logits: Var,
        labels: Rc<[usize]>,
        probs: Vec<f64>,
    },
    SumAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for one logical thread.
pub struct Tape {
    nodes: Vec<Node>,
    arith: Arith,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_arith(Arith::Full)
    }

    pub fn with_arith(arith: Arith) -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            arith,
        }
    }

    pub fn arith(&self) -> Arith {
        self.arith
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        if self.arith == Arith::HalfEmulated {
            value.map_inplace(round_half);
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId, store: &ParamStore) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    /// Adds a constant tensor (e.g. an additive attention mask).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let out = self.value(a).add(c)?;
        Ok(self.push(out, Op::AddConst(a)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).scale(factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_scalar);
        self.push(out, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let c = out.cols();
        out.data_mut().chunks_mut(c).for_each(softmax_row_inplace);
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let input = self.value(x);
        let c = input.cols();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != c || b.len() != c {
            return Err(Error::shape(
                "layer_norm",
                format!("gamma/beta of {}/{} for {c} columns", g.len(), b.len()),
            ));
        }
        let rows = input.rows();
        let mut xhat = vec![0.0; input.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; input.len()];
        for r in 0..rows {
            let row = input.row(r);
            let (mean, istd) = row_moments(row, eps);
            inv_std[r] = istd;
            for k in 0..c {
                let h = (row[k] - mean) * istd;
                xhat[r * c + k] = h;
                out[r * c + k] = h * g.data()[k] + b.data()[k];
            }
        }
        let out = Tensor::from_parts(input.shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let src = self.value(a);
        let c = src.cols();
        if start + width > c || width == 0 {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {c} columns", start + width),
            ));
        }
        let rows = src.rows();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&src.row(r)[start..start + width]);
        }
        let out = Tensor::from_parts(vec![rows, width], data);
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::from_parts(vec![rows, width], data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Selects rows `idx` of `a` (embedding lookup, position picking).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let limit = src.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= limit) {
            return Err(Error::OutOfRange {
                what: "row",
                index: bad,
                limit,
            });
        }
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index"));
        }
        let c = src.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        let out = Tensor::from_parts(vec![idx.len(), c], data);
        Ok(self.push(out, Op::GatherRows(a, idx.into())))
    }

    /// `out[i][j] = a[i][idx[i·n + j]]` for an `n×R` input and `n×n` index.
    pub fn rel_gather(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let src = self.value(a);
        let (n, r) = (src.rows(), src.cols());
        if idx.len() != n * n || idx.iter().any(|&k| k >= r) {
            return Err(Error::shape("rel_gather", format!("index for {n}x{r}")));
        }
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            let row = src.row(i);
            for j in 0..n {
                data[i * n + j] = row[idx[i * n + j]];
            }
        }
        let out = Tensor::from_parts(vec![n, n], data);
        Ok(self.push(out, Op::RelGather(a, idx)))
    }

    /// `out[i][r] = Σ_{j : idx[i·n + j] = r} a[i][j]`, an `n×R` result.
    pub fn rel_scatter(&mut self, a: Var, idx: Rc<[usize]>, width: usize) -> Result<Var> {
        let src = self.value(a);
        let n = src.rows();
        if src.cols() != n || idx.len() != n * n || idx.iter().any(|&k| k >= width) {
            return Err(Error::shape("rel_scatter", format!("index for {n}x{n} -> {width}")));
        }
        let mut data = vec![0.0; n * width];
        for i in 0..n {
            let row = src.row(i);
            for j in 0..n {
                data[i * width + idx[i * n + j]] += row[j];
            }
        }
        let out = Tensor::from_parts(vec![n, width], data);
        Ok(self.push(out, Op::RelScatter(a, idx)))
    }

    /// Multiplies by a fixed mask that already carries the `1/(1-p)` factor.
    pub fn dropout(&mut self, a: Var, mask: Rc<[f64]>) -> Result<Var> {
        let src = self.value(a);
        if mask.len() != src.len() {
            return Err(Error::shape("dropout", "mask length"));
        }
        let data = src.data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        let out = Tensor::from_parts(src.shape().to_vec(), data);
        Ok(self.push(out, Op::Dropout(a, mask)))
    }

    /// Mean cross-entropy of `logits` rows against `labels`; zero when there
    /// are no rows.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let src = self.value(logits);
        let (m, c) = (src.rows(), src.cols());
        if labels.len() != m {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {m} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::OutOfRange {
                what: "label",
                index: bad,
                limit: c,
            });
        }
        let mut probs = src.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[r]];
            softmax_row_inplace(row);
        }
        if m > 0 {
            loss /= m as f64;
        }
        let out = Tensor::scalar(loss);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.into(),
                probs,
            },
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    /// Propagates `seed · ∂root` back to every parameter reachable from `root`.
    pub fn backward(&self, root: Var, seed: f64) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        let root_len = self.nodes[root.0].value.len();
        grads[root.0] = Some(vec![seed; root_len]);
        let half = self.arith == Arith::HalfEmulated;
        let mut out = Gradients::new();

        for idx in (0..=root.0).rev() {
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            if half {
                g.iter_mut().for_each(|x| *x = round_half(*x));
            }
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads, &mut out);
        }
        out
    }

    fn propagate(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => out.accumulate(*id, g, node.value.shape(), 1.0),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                // da = g · bᵀ ; db = aᵀ · g
                matmul_t_into(g, bv.data(), slot(grads, *a, n * k), n, m, k);
                t_matmul_into(av.data(), g, slot(grads, *b, k * m), n, k, m);
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                // out = a·bᵀ: da = g · b ; db = gᵀ · a
                matmul_into(g, bv.data(), slot(grads, *a, n * k), n, m, k);
                t_matmul_into(g, av.data(), slot(grads, *b, m * k), n, m, k);
            }
            Op::Add(a, b) => {
                add_into(slot(grads, *a, g.len()), g);
                add_into(slot(grads, *b, g.len()), g);
            }
            Op::AddRow(a, bias) => {
                add_into(slot(grads, *a, g.len()), g);
                let c = self.value(*bias).len();
                let db = slot(grads, *bias, c);
                for row in g.chunks(c) {
                    add_into(db, row);
                }
            }
            Op::AddConst(a) => add_into(slot(grads, *a, g.len()), g),
            Op::Scale(a, f) => {
                let da = slot(grads, *a, g.len());
                da.iter_mut().zip(g).for_each(|(d, x)| *d += f * x);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = slot(grads, *a, g.len());
                for k in 0..g.len() {
                    da[k] += g[k] * bv[k];
                }
                let db = slot(grads, *b, g.len());
                for k in 0..g.len() {
                    db[k] += g[k] * av[k];
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let da = slot(grads, *a, g.len());
                for k in 0..g.len() {
                    da[k] += g[k] * gelu_grad_scalar(x[k]);
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let da = slot(grads, *a, g.len());
                for k in 0..g.len() {
                    da[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                let da = slot(grads, *a, g.len());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let inner = dot(gr, yr);
                    for k in 0..c {
                        da[r * c + k] += yr[k] * (gr[k] - inner);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data().to_vec();
                let c = gam.len();
                let rows = inv_std.len();
                {
                    let dg = slot(grads, *gamma, c);
                    for r in 0..rows {
                        for k in 0..c {
                            dg[k] += g[r * c + k] * xhat[r * c + k];
                        }
                    }
                }
                {
                    let db = slot(grads, *beta, c);
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                }
                let dx = slot(grads, *x, g.len());
                let mut dxhat = vec![0.0; c];
                for r in 0..rows {
                    let h = &xhat[r * c..(r + 1) * c];
                    for k in 0..c {
                        dxhat[k] = g[r * c + k] * gam[k];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dh = dot(&dxhat, h) / c as f64;
                    for k in 0..c {
                        dx[r * c + k] += inv_std[r] * (dxhat[k] - mean_d - h[k] * mean_dh);
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let c = self.value(*a).cols();
                let width = node.value.cols();
                let da = slot(grads, *a, self.value(*a).len());
                for (r, gr) in g.chunks(width).enumerate() {
                    add_into(&mut da[r * c + start..r * c + start + width], gr);
                }
            }
            Op::ConcatCols(parts) => {
                let width = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    let plen = self.value(p).len();
                    let dp = slot(grads, p, plen);
                    for (r, gr) in g.chunks(width).enumerate() {
                        add_into(&mut dp[r * pc..(r + 1) * pc], &gr[offset..offset + pc]);
                    }
                    offset += pc;
                }
            }
            Op::GatherRows(a, idx) => {
                let src = self.value(*a);
                let c = src.cols();
                let da = slot(grads, *a, src.len());
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut da[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
            Op::RelGather(a, idx) => {
                let src = self.value(*a);
                let (n, width) = (src.rows(), src.cols());
                let da = slot(grads, *a, src.len());
                for i in 0..n {
                    for j in 0..n {
                        da[i * width + idx[i * n + j]] += g[i * n + j];
                    }
                }
            }
            Op::RelScatter(a, idx) => {
                let n = self.value(*a).rows();
                let width = node.value.cols();
                let da = slot(grads, *a, n * n);
                for i in 0..n {
                    for j in 0..n {
                        da[i * n + j] += g[i * width + idx[i * n + j]];
                    }
                }
            }
            Op::Dropout(a, mask) => {
                let da = slot(grads, *a, g.len());
                for k in 0..g.len() {
                    da[k] += g[k] * mask[k];
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let m = labels.len();
                if m == 0 {
                    return;
                }
                let c = self.value(*logits).cols();
                let scale = g[0] / m as f64;
                let dl = slot(grads, *logits, m * c);
                for (r, &label) in labels.iter().enumerate() {
                    for k in 0..c {
                        let target = if k == label { 1.0 } else { 0.0 };
                        dl[r * c + k] += scale * (probs[r * c + k] - target);
                    }
                }
            }
            Op::SumAll(a) => {
                let len = self.value(*a).len();
                let da = slot(grads, *a, len);
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
