use std::collections::HashMap;

use super::ops::{gelu, gelu_grad, matmul_nn, matmul_nt, matmul_tn, softmax_in_place, LN_EPS};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
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
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Gather { table: Var, indices: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Sum(Var),
    WeightedPick { x: Var, picks: Vec<(usize, f64)> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Wengert-style tape. Every op appends a node; `backward` replays them in
/// reverse. Nodes that cannot reach a parameter are skipped.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a constant. Honors `requires_grad` so free-standing tensors can
    /// be differentiated without a parameter store.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let ng = t.requires_grad;
        self.push(t, Op::Leaf, ng)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Loads parameter `key`, reusing the node if it is already on the tape.
    pub fn param(&mut self, key: usize, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let mut value = t.clone();
        value.grad = None;
        let v = self.push(value, Op::Param, true);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), ng))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.value(a).dims2()?;
        if self.value(row).numel() != n {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(a, row), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(shape, out).unwrap(), Op::Scale(a, s), ng)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Invalid(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let mut out = self.value(x).data().to_vec();
        softmax_in_place(&mut out, &shape, axis);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, ng))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax(x), ng))
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xs.len() / n;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(Tensor::new(shape, out).unwrap(), Op::Gelu(x), ng)
    }

    /// Selects rows of a matrix.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(table).dims2()?;
        if indices.is_empty() {
            return Err(Error::Invalid("gather_rows with no indices".into()));
        }
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::Invalid(format!(
                    "row index {i} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(self.value(table).row(i));
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(vec![indices.len(), cols], out)?,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).dims2()?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start + len > n || len == 0 {
            return Err(Error::Invalid(format!(
                "column slice {start}..{} out of range for {n} columns",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// `Σ w · x[flat_index]` over `picks`, as a scalar.
    pub fn weighted_pick(&mut self, x: Var, picks: Vec<(usize, f64)>) -> Result<Var> {
        let data = self.value(x).data();
        let mut s = 0.0;
        for &(i, w) in &picks {
            let v = *data.get(i).ok_or_else(|| {
                Error::Invalid(format!("pick index {i} out of range for {} values", data.len()))
            })?;
            s += w * v;
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedPick { x, picks }, ng))
    }

    /// Reverse pass from a scalar. Gradients are kept on the tape until the
    /// next call; parameter gradients are read with [`Tape::param_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(parameter key, gradient)` for every parameter that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        let mut keyed: Vec<(usize, Var)> = self.params.iter().map(|(&k, &v)| (k, v)).collect();
        keyed.sort_unstable_by_key(|p| p.0);
        keyed
            .into_iter()
            .filter_map(move |(k, v)| self.grad(v).map(|g| (k, g)))
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let shape = node.value.shape();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = shape[1];
                if self.ng(*a) {
                    let da = matmul_nt(g, self.value(*b).data(), m, n, k);
                    acc(grads, *a, &da);
                }
                if self.ng(*b) {
                    let db = matmul_tn(self.value(*a).data(), g, m, k, n);
                    acc(grads, *b, &db);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = shape[1];
                if self.ng(*a) {
                    let da = matmul_nn(g, self.value(*b).data(), m, n, k);
                    acc(grads, *a, &da);
                }
                if self.ng(*b) {
                    let db = matmul_tn(g, self.value(*a).data(), m, n, k);
                    acc(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                acc(grads, *a, &da);
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g);
                }
                if self.ng(*b) {
                    acc(grads, *b, g);
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    acc(grads, *a, g);
                }
                if self.ng(*row) {
                    let n = self.value(*row).numel();
                    let mut dr = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    acc(grads, *row, &dr);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let d: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    acc(grads, *a, &d);
                }
                if self.ng(*b) {
                    let d: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    acc(grads, *b, &d);
                }
            }
            Op::Scale(a, s) => {
                let d: Vec<f64> = g.iter().map(|x| x * s).collect();
                acc(grads, *a, &d);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let n = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                acc(grads, *x, &dx);
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let n = *shape.last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let gs: f64 = gr.iter().sum();
                    for k in 0..n {
                        dr[k] = gr[k] - yr[k].exp() * gs;
                    }
                }
                acc(grads, *x, &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = *shape.last().unwrap();
                let gv = self.value(*gain).data();
                if self.ng(*gain) {
                    let mut dg = vec![0.0; n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            dg[c] += gr[c] * hr[c];
                        }
                    }
                    acc(grads, *gain, &dg);
                }
                if self.ng(*bias) {
                    let mut db = vec![0.0; n];
                    for gr in g.chunks(n) {
                        for c in 0..n {
                            db[c] += gr[c];
                        }
                    }
                    acc(grads, *bias, &db);
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, ((dr, gr), hr)) in dx
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            dr[c] = rstd[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    acc(grads, *x, &dx);
                }
            }
            Op::Gelu(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, &xv)| gv * gelu_grad(xv))
                    .collect();
                acc(grads, *x, &d);
            }
            Op::Gather { table, indices } => {
                let cols = shape[1];
                let mut dt = vec![0.0; self.value(*table).numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        dt[i * cols + c] += g[r * cols + c];
                    }
                }
                acc(grads, *table, &dt);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.ng(p) {
                        acc(grads, p, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let len = shape[1];
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(grads, *x, &dx);
            }
            Op::ConcatCols(parts) => {
                let rows = shape[0];
                let total = shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2().unwrap().1;
                    if self.ng(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(grads, p, &dp);
                    }
                    offset += w;
                }
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).numel()];
                acc(grads, *x, &d);
            }
            Op::WeightedPick { x, picks } => {
                let mut d = vec![0.0; self.value(*x).numel()];
                for &(i, w) in picks {
                    d[i] += w * g[0];
                }
                acc(grads, *x, &d);
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}
