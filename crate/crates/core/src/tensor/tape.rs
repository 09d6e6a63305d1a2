use std::collections::HashMap;

use super::kernels;
use super::params::ParameterStore;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Nodes are appended in creation order, which is already a topological
/// order: every operation's inputs precede it. `backward` walks the arena from
/// the loss towards the leaves and visits each node once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    bindings: HashMap<String, Var>,
}

impl Tape {
    /// A tape that tracks gradients for trainable parameters.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            bindings: HashMap::new(),
        }
    }

    /// A tape that never tracks gradients; used for decoding and evaluation.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: requires_grad && self.grad_enabled,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// A leaf that receives a gradient when the tape tracks gradients.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Binds a stored parameter onto the tape. Frozen parameters become
    /// constants. Binding the same path twice returns the same node.
    pub fn param(&mut self, store: &ParameterStore, path: &str) -> Result<Var> {
        if let Some(&v) = self.bindings.get(path) {
            return Ok(v);
        }
        let value = store.value(path)?.clone();
        let trainable = store.is_trainable(path);
        let v = self.push(value, trainable, Op::Leaf);
        self.bindings.insert(path.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Scalar value of a `[1]`-shaped node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_vec(vec![m, n], data), rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.dims2(x);
        let data = kernels::transpose(self.value(x).data(), r, c);
        let rg = self.needs(&[x]);
        self.push(Tensor::from_vec(vec![c, r], data), rg, Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_vec(shape, data), rg, Op::Add(a, b)))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims2(x);
        if self.value(bias).len() != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let mut data = self.value(x).data().to_vec();
        kernels::add_row_bias(&mut data, self.value(bias).data());
        let shape = self.shape(x).to_vec();
        let rg = self.needs(&[x, bias]);
        Ok(self.push(Tensor::from_vec(shape, data), rg, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(&[x]);
        self.push(Tensor::from_vec(shape, data), rg, Op::Scale(x, s))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(&[x]);
        self.push(Tensor::from_vec(shape, data), rg, Op::Gelu(x))
    }

    /// Per-row normalization over the trailing dimension followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.dims2(x);
        if self.value(gain).len() != d || self.value(shift).len() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let mut out = vec![0.0; m * d];
        let mut mean = Vec::with_capacity(m);
        let mut rstd = Vec::with_capacity(m);
        {
            let xs = self.value(x).data();
            let g = self.value(gain).data();
            let s = self.value(shift).data();
            for r in 0..m {
                let (mu, rs) = kernels::layer_norm_row(&xs[r * d..(r + 1) * d], g, s, eps, &mut out[r * d..(r + 1) * d]);
                mean.push(mu);
                rstd.push(rs);
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.needs(&[x, gain, shift]);
        Ok(self.push(
            Tensor::from_vec(shape, out),
            rg,
            Op::LayerNorm {
                x,
                gain,
                shift,
                mean,
                rstd,
            },
        ))
    }

    /// Softmax over the trailing dimension with an optional additive bias.
    ///
    /// The bias is either the full shape of `x` or a single row broadcast over
    /// all rows. Masking is expressed as a bias of `-1e9`.
    pub fn softmax_masked(&mut self, x: Var, bias: Option<&Tensor>) -> Result<Var> {
        let n = self.value(x).cols();
        let mut data = self.value(x).data().to_vec();
        if let Some(bias) = bias {
            let b = bias.data();
            if b.len() == data.len() {
                data.iter_mut().zip(b).for_each(|(v, b)| *v += b);
            } else if b.len() == n {
                kernels::add_row_bias(&mut data, b);
            } else {
                return Err(Error::shape("softmax_masked", self.shape(x), bias.shape()));
            }
        }
        for row in data.chunks_mut(n) {
            kernels::softmax_row(row);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::from_vec(shape, data), rg, Op::Softmax(x)))
    }

    /// Mean negative log-likelihood over positions whose target is not `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let (t, v) = self.dims2(logits);
        if targets.len() != t {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let mut probs = vec![0.0; t * v];
        let mut masked = Vec::with_capacity(t);
        let mut total = 0.0;
        let mut count = 0;
        {
            let data = self.value(logits).data();
            for (r, &target) in targets.iter().enumerate() {
                if target == ignore_index {
                    masked.push(None);
                    continue;
                }
                if target >= v {
                    return Err(Error::TargetOutOfRange { id: target, vocab: v });
                }
                let row = &data[r * v..(r + 1) * v];
                let logp = kernels::log_softmax_row(row);
                total -= logp[target];
                for (p, lp) in probs[r * v..(r + 1) * v].iter_mut().zip(&logp) {
                    *p = lp.exp();
                }
                count += 1;
                masked.push(Some(target));
            }
        }
        if count == 0 {
            return Err(Error::UndefinedMean);
        }
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            rg,
            Op::CrossEntropy {
                logits,
                targets: masked,
                probs,
                count,
            },
        ))
    }

    /// Expected embedding under each probability row: `probs[T×V] · table[V×d]`.
    pub fn soft_embed(&mut self, probs: Var, table: Var) -> Result<Var> {
        let v = self.value(probs).cols();
        for (row, chunk) in self.value(probs).data().chunks(v).enumerate() {
            let sum: f64 = chunk.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Normalization { row, sum });
            }
        }
        self.matmul(probs, table)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::TargetOutOfRange { id, vocab: rows });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let rg = self.needs(&[table]);
        Ok(self.push(
            Tensor::from_vec(vec![ids.len(), d], data),
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if start + len > m || len == 0 {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, len]));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::from_vec(vec![len, n], data), rg, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if start + len > n || len == 0 {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::from_vec(vec![m, len], data), rg, Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p);
            if c != n {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.needs(parts);
        Ok(self.push(Tensor::from_vec(vec![rows, n], data), rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p);
            if r != m {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(Tensor::from_vec(vec![m, total], data), rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Column means, `[m×n] -> [1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims2(x);
        let mut data = vec![0.0; n];
        for row in self.value(x).data().chunks(n) {
            data.iter_mut().zip(row).for_each(|(d, v)| *d += v);
        }
        data.iter_mut().for_each(|d| *d /= m as f64);
        let rg = self.needs(&[x]);
        self.push(Tensor::from_vec(vec![1, n], data), rg, Op::MeanRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    /// Reverse sweep from a scalar node. Gradients accumulate into every
    /// contributing node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &grad);
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(g, c)| *g += c),
            None => node.grad = Some(contribution),
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let len = node.value.len();
        let g = node.grad.get_or_insert_with(|| vec![0.0; len]);
        f(g);
    }

    fn propagate(&mut self, idx: usize, grad: &[f64]) {
        // The op is moved out temporarily so input values can be read while
        // input gradients are written.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.value(*b).cols();
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_grad_lhs(grad, self.value(*b).data(), m, k, n, &mut ga);
                    self.accumulate(*a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_grad_rhs(self.value(*a).data(), grad, m, k, n, &mut gb);
                    self.accumulate(*b, gb);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.dims2(*x);
                // grad has shape [c×r]
                self.accumulate(*x, kernels::transpose(grad, c, r));
            }
            Op::Add(a, b) => {
                self.accumulate(*a, grad.to_vec());
                self.accumulate(*b, grad.to_vec());
            }
            Op::AddRow(x, bias) => {
                self.accumulate(*x, grad.to_vec());
                let n = self.value(*bias).len();
                self.accumulate_with(*bias, |g| {
                    for row in grad.chunks(n) {
                        g.iter_mut().zip(row).for_each(|(g, r)| *g += r);
                    }
                });
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(*x, grad.iter().map(|g| g * s).collect());
            }
            Op::Gelu(x) => {
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(grad)
                    .map(|(&v, g)| g * kernels::gelu_grad(v))
                    .collect();
                self.accumulate(*x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                mean,
                rstd,
            } => {
                let (m, d) = self.dims2(*x);
                let xs = self.value(*x).data();
                let gs = self.value(*gain).data();
                let mut gx = vec![0.0; m * d];
                let mut ggain = vec![0.0; d];
                let mut gshift = vec![0.0; d];
                for r in 0..m {
                    let row = &xs[r * d..(r + 1) * d];
                    let gr = &grad[r * d..(r + 1) * d];
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mu) * rs;
                        let dxhat = gr[j] * gs[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        ggain[j] += gr[j] * xhat;
                        gshift[j] += gr[j];
                    }
                    let inv_d = 1.0 / d as f64;
                    for j in 0..d {
                        let xhat = (row[j] - mu) * rs;
                        let dxhat = gr[j] * gs[j];
                        gx[r * d + j] = rs * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                    }
                }
                self.accumulate(*x, gx);
                self.accumulate(*gain, ggain);
                self.accumulate(*shift, gshift);
            }
            Op::Softmax(x) => {
                let y = self.nodes[idx].value.data();
                let n = self.nodes[idx].value.cols();
                let mut gx = vec![0.0; y.len()];
                for ((gx_row, y_row), g_row) in gx.chunks_mut(n).zip(y.chunks(n)).zip(grad.chunks(n)) {
                    let dot: f64 = y_row.iter().zip(g_row).map(|(y, g)| y * g).sum();
                    for ((o, &yv), &gv) in gx_row.iter_mut().zip(y_row).zip(g_row) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let scale = grad[0] / *count as f64;
                let mut gl = vec![0.0; probs.len()];
                for (r, target) in targets.iter().enumerate() {
                    if let Some(t) = target {
                        for j in 0..v {
                            gl[r * v + j] = probs[r * v + j] * scale;
                        }
                        gl[r * v + t] -= scale;
                    }
                }
                self.accumulate(*logits, gl);
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).cols();
                self.accumulate_with(*table, |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[id * d + j] += grad[r * d + j];
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let n = self.value(*x).cols();
                let start = *start;
                self.accumulate_with(*x, |g| {
                    g[start * n..start * n + grad.len()]
                        .iter_mut()
                        .zip(grad)
                        .for_each(|(g, v)| *g += v);
                });
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).cols();
                let len = self.nodes[idx].value.cols();
                let start = *start;
                self.accumulate_with(*x, |g| {
                    for (r, row) in grad.chunks(len).enumerate() {
                        g[r * n + start..r * n + start + len]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(g, v)| *g += v);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(p, grad[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[idx].value.cols();
                let mut col = 0;
                for &p in parts {
                    let (m, w) = self.dims2(p);
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&grad[r * total + col..r * total + col + w]);
                        }
                        self.accumulate(p, gp);
                    }
                    col += w;
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = self.dims2(*x);
                let inv = 1.0 / m as f64;
                let mut gx = Vec::with_capacity(m * n);
                for _ in 0..m {
                    gx.extend(grad.iter().map(|g| g * inv));
                }
                self.accumulate(*x, gx);
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                self.accumulate(*x, vec![grad[0]; len]);
            }
        }
        self.nodes[idx].op = op;
    }

    /// Gradients of every bound trainable parameter, keyed by path.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.bindings
            .iter()
            .filter_map(|(path, v)| self.grad(*v).map(|g| (path.as_str(), g)))
    }
}
