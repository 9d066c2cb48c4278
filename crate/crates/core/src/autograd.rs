//! Reverse-mode differentiation over a per-forward-pass operation tape.
//!
//! A [`Graph`] owns every intermediate value produced during one forward pass.
//! Nothing is shared between graphs, so one graph per image can run on its own
//! thread while the [`ParamStore`] is read concurrently.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Strided, Tensor};

/// Variance floor used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
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
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Exp(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var, usize),
    Renorm {
        input: Var,
        axis: usize,
        sums: Vec<f64>,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    RepeatRows(Var, usize),
    TileRows(Var),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Concat(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::Affine(..) => "affine",
            Op::Exp(_) => "exp",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softmax(..) => "softmax",
            Op::Renorm { .. } => "renorm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reshape(_) => "reshape",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::RepeatRows(..) => "repeat_rows",
            Op::TileRows(..) => "tile_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::Concat(_) => "concat_cols",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    #[cfg(debug_assertions)]
    first_bad: Option<(usize, &'static str)>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        #[cfg(debug_assertions)]
        if self.first_bad.is_none() && !value.is_finite() {
            self.first_bad = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    /// A value that never receives a gradient (inputs, noise, fixed encodings).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf that does receive a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records (once per graph) the current value of a registered parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.params.insert(id, v);
        v
    }

    /// First node holding a NaN or infinity, with its op name.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        #[cfg(debug_assertions)]
        if let Some(bad) = self.first_bad {
            return Some(bad);
        }
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(|i| (i, self.nodes[i].op.name()))
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some((node, op)) => Err(Error::Numeric { op, node }),
            None => Ok(()),
        }
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.expect_rank(a, 2, "transpose")?;
        let value = self.value(a).transpose();
        Ok(self.unary(a, value, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.binary(a, b, value, Op::Mul(a, b)))
    }

    /// `a[i, j] + row[j]` for a rank-2 `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.row_operand(a, row, "add_row")?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(cols) {
            chunk.iter_mut().zip(&r).for_each(|(x, y)| *x += y);
        }
        Ok(self.binary(a, row, out, Op::AddRow(a, row)))
    }

    /// `a[i, j] * row[j]` for a rank-2 `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.row_operand(a, row, "mul_row")?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(cols) {
            chunk.iter_mut().zip(&r).for_each(|(x, y)| *x *= y);
        }
        Ok(self.binary(a, row, out, Op::MulRow(a, row)))
    }

    /// `a[i, j] * col[i]` for a rank-2 `a` and a column of `rows(a)` entries.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.expect_rank(a, 2, "mul_col")?;
        let (rows, cols) = (self.value(a).rows(), self.value(a).cols());
        if self.value(col).numel() != rows {
            return Err(Error::Shape {
                op: "mul_col",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(col).to_vec(),
            });
        }
        let c = self.value(col).data().to_vec();
        let mut out = self.value(a).clone();
        for (chunk, &s) in out.data_mut().chunks_mut(cols).zip(&c) {
            chunk.iter_mut().for_each(|x| *x *= s);
        }
        Ok(self.binary(a, col, out, Op::MulCol(a, col)))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        self.unary(a, value, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.unary(a, value, Op::Exp(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(a, value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.unary(a, value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.unary(a, value, Op::Relu(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.value(a).softmax(axis)?;
        Ok(self.unary(a, value, Op::Softmax(a, axis)))
    }

    /// `(a + eps) / Σ(a + eps)` along `axis`.
    pub fn renormalize(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = t.axis_split(axis)?;
        let mut out: Vec<f64> = t.data().iter().map(|x| x + eps).collect();
        let mut sums = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let s: f64 = (0..len).map(|l| out[base + l * inner]).sum();
                for l in 0..len {
                    out[base + l * inner] /= s;
                }
                sums.push(s);
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.unary(a, value, Op::Renorm { input: a, axis, sums }))
    }

    /// Per-row normalization over the last dimension followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| Error::contract("layer_norm on a scalar"))?;
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: t.shape().to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let mut normalized = Vec::with_capacity(t.numel());
        let mut inv_std = Vec::with_capacity(t.numel() / d.max(1));
        for row in t.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            normalized.extend(row.iter().map(|v| (v - mean) * s));
            inv_std.push(s);
        }
        let g = self.value(gain).data();
        let out: Vec<f64> = normalized
            .chunks(d)
            .flat_map(|row| row.iter().zip(g).map(|(v, g)| v * g))
            .collect();
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let needs = self.needs(x) || self.needs(gain);
        let op = Op::LayerNorm {
            input: x,
            gain,
            normalized,
            inv_std,
        };
        let scaled = self.push(value, op, needs);
        if self.value(scaled).rank() == 2 {
            self.add_row(scaled, bias)
        } else {
            let flat = self.reshape(scaled, &[self.value(scaled).numel() / d, d])?;
            let shifted = self.add_row(flat, bias)?;
            let shape = self.shape(scaled).to_vec();
            self.reshape(shifted, &shape)
        }
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.unary(a, value, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.unary(a, value, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.unary(a, value, Op::MeanAll(a))
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = t.axis_split(axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &t.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::from_parts(shape, out);
        Ok(self.unary(a, value, Op::SumAxis(a, axis)))
    }

    /// Each row repeated `n` times consecutively: row `i·n + r` is input row `i`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        self.expect_rank(a, 2, "repeat_rows")?;
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(rows * n * cols);
        for i in 0..rows {
            for _ in 0..n {
                out.extend_from_slice(t.row(i));
            }
        }
        let value = Tensor::from_parts(vec![rows * n, cols], out);
        Ok(self.unary(a, value, Op::RepeatRows(a, n)))
    }

    /// The whole matrix stacked `n` times: row `t·rows + i` is input row `i`.
    pub fn tile_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        self.expect_rank(a, 2, "tile_rows")?;
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(rows * n * cols);
        for _ in 0..n {
            out.extend_from_slice(t.data());
        }
        let value = Tensor::from_parts(vec![rows * n, cols], out);
        Ok(self.unary(a, value, Op::TileRows(a)))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.expect_rank(a, 2, "slice_cols")?;
        let t = self.value(a);
        let cols = t.cols();
        if start > end || end > cols {
            return Err(Error::contract(format!("column slice {start}..{end} of {cols}")));
        }
        let mut out = Vec::with_capacity(t.rows() * (end - start));
        for i in 0..t.rows() {
            out.extend_from_slice(&t.row(i)[start..end]);
        }
        let value = Tensor::from_parts(vec![t.rows(), end - start], out);
        Ok(self.unary(a, value, Op::SliceCols(a, start)))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.expect_rank(a, 2, "gather_rows")?;
        let value = self.value(a).gather_rows(indices)?;
        Ok(self.unary(a, value, Op::GatherRows(a, indices.to_vec())))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            self.expect_rank(p, 2, "concat_cols")?;
            if self.value(p).rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(self.value(p).cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::Concat(parts.to_vec()),
            needs,
        ))
    }

    fn expect_rank(&self, a: Var, rank: usize, op: &'static str) -> Result<()> {
        if self.value(a).rank() != rank {
            return Err(Error::contract(format!(
                "{op} expects rank {rank}, got shape {:?}",
                self.shape(a)
            )));
        }
        Ok(())
    }

    fn row_operand(&self, a: Var, row: Var, op: &'static str) -> Result<usize> {
        self.expect_rank(a, 2, op)?;
        let cols = self.value(a).cols();
        if self.value(row).numel() != cols {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        Ok(cols)
    }

    // ---- reverse pass -----------------------------------------------------

    /// Propagates d(loss)/d(node) for every node that needs a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].as_ref().map(|_| (id, v)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.needs(*a) {
                    let buf = slot(grads, *a, av.shape());
                    gemm(
                        m,
                        n,
                        k,
                        Strided::row_major(g.data(), n),
                        Strided::transposed(bv.data(), n),
                        buf.data_mut(),
                        true,
                    );
                }
                if self.needs(*b) {
                    let buf = slot(grads, *b, bv.shape());
                    gemm(
                        k,
                        m,
                        n,
                        Strided::transposed(av.data(), k),
                        Strided::row_major(g.data(), n),
                        buf.data_mut(),
                        true,
                    );
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, |buf| {
                let gt = g.transpose();
                add_into(buf, gt.data());
            }),
            Op::Add(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf, g.data()));
                self.acc(grads, *b, |buf| add_into(buf, g.data()));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf, g.data()));
                self.acc(grads, *b, |buf| buf.iter_mut().zip(g.data()).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |buf| {
                    for ((d, gi), bi) in buf.iter_mut().zip(g.data()).zip(bv) {
                        *d += gi * bi;
                    }
                });
                self.acc(grads, *b, |buf| {
                    for ((d, gi), ai) in buf.iter_mut().zip(g.data()).zip(av) {
                        *d += gi * ai;
                    }
                });
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, |buf| add_into(buf, g.data()));
                let cols = self.value(*row).numel();
                self.acc(grads, *row, |buf| {
                    for chunk in g.data().chunks(cols) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let cols = self.value(*row).numel();
                let (av, rv) = (self.value(*a).data(), self.value(*row).data());
                self.acc(grads, *a, |buf| {
                    for (bc, gc) in buf.chunks_mut(cols).zip(g.data().chunks(cols)) {
                        for ((d, gi), r) in bc.iter_mut().zip(gc).zip(rv) {
                            *d += gi * r;
                        }
                    }
                });
                self.acc(grads, *row, |buf| {
                    for (gc, ac) in g.data().chunks(cols).zip(av.chunks(cols)) {
                        for ((d, gi), ai) in buf.iter_mut().zip(gc).zip(ac) {
                            *d += gi * ai;
                        }
                    }
                });
            }
            Op::MulCol(a, col) => {
                let cols = self.value(*a).cols();
                let (av, cv) = (self.value(*a).data(), self.value(*col).data());
                self.acc(grads, *a, |buf| {
                    for ((bc, gc), c) in buf.chunks_mut(cols).zip(g.data().chunks(cols)).zip(cv) {
                        bc.iter_mut().zip(gc).for_each(|(d, gi)| *d += gi * c);
                    }
                });
                self.acc(grads, *col, |buf| {
                    for ((d, gc), ac) in buf.iter_mut().zip(g.data().chunks(cols)).zip(av.chunks(cols)) {
                        *d += gc.iter().zip(ac).map(|(gi, ai)| gi * ai).sum::<f64>();
                    }
                });
            }
            Op::Affine(a, s) => self.acc(grads, *a, |buf| {
                buf.iter_mut().zip(g.data()).for_each(|(d, gi)| *d += s * gi)
            }),
            Op::Exp(a) => self.acc(grads, *a, |buf| {
                for ((d, gi), yi) in buf.iter_mut().zip(g.data()).zip(y.data()) {
                    *d += gi * yi;
                }
            }),
            Op::Sigmoid(a) => self.acc(grads, *a, |buf| {
                for ((d, gi), yi) in buf.iter_mut().zip(g.data()).zip(y.data()) {
                    *d += gi * yi * (1.0 - yi);
                }
            }),
            Op::Tanh(a) => self.acc(grads, *a, |buf| {
                for ((d, gi), yi) in buf.iter_mut().zip(g.data()).zip(y.data()) {
                    *d += gi * (1.0 - yi * yi);
                }
            }),
            Op::Relu(a) => self.acc(grads, *a, |buf| {
                for ((d, gi), yi) in buf.iter_mut().zip(g.data()).zip(y.data()) {
                    if *yi > 0.0 {
                        *d += gi;
                    }
                }
            }),
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = y.axis_split(*axis).expect("axis checked on forward");
                self.acc(grads, *a, |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len)
                                .map(|l| g.data()[base + l * inner] * y.data()[base + l * inner])
                                .sum();
                            for l in 0..len {
                                let p = base + l * inner;
                                buf[p] += y.data()[p] * (g.data()[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::Renorm { input, axis, sums } => {
                let (outer, len, inner) = y.axis_split(*axis).expect("axis checked on forward");
                self.acc(grads, *input, |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let s = sums[o * inner + i];
                            let dot: f64 = (0..len)
                                .map(|l| g.data()[base + l * inner] * y.data()[base + l * inner])
                                .sum();
                            for l in 0..len {
                                let p = base + l * inner;
                                buf[p] += (g.data()[p] - dot) / s;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                input,
                gain,
                normalized,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                self.acc(grads, *gain, |buf| {
                    for (gc, nc) in g.data().chunks(d).zip(normalized.chunks(d)) {
                        for ((b, gi), ni) in buf.iter_mut().zip(gc).zip(nc) {
                            *b += gi * ni;
                        }
                    }
                });
                self.acc(grads, *input, |buf| {
                    for (((bc, gc), nc), s) in buf
                        .chunks_mut(d)
                        .zip(g.data().chunks(d))
                        .zip(normalized.chunks(d))
                        .zip(inv_std)
                    {
                        let dn: Vec<f64> = gc.iter().zip(gv).map(|(gi, w)| gi * w).collect();
                        let mean_dn = dn.iter().sum::<f64>() / d as f64;
                        let mean_dn_n = dn.iter().zip(nc).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((b, dni), ni) in bc.iter_mut().zip(&dn).zip(nc) {
                            *b += s * (dni - mean_dn - ni * mean_dn_n);
                        }
                    }
                });
            }
            Op::Reshape(a) => self.acc(grads, *a, |buf| add_into(buf, g.data())),
            Op::SumAll(a) => {
                let gi = g.item();
                self.acc(grads, *a, |buf| buf.iter_mut().for_each(|d| *d += gi));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel() as f64;
                let gi = g.item() / n;
                self.acc(grads, *a, |buf| buf.iter_mut().for_each(|d| *d += gi));
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = self.value(*a).axis_split(*axis).expect("checked");
                self.acc(grads, *a, |buf| {
                    for o in 0..outer {
                        let src = &g.data()[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let start = (o * len + l) * inner;
                            add_into(&mut buf[start..start + inner], src);
                        }
                    }
                });
            }
            Op::RepeatRows(a, n) => {
                let cols = self.value(*a).cols();
                self.acc(grads, *a, |buf| {
                    for (i, gc) in g.data().chunks(cols).enumerate() {
                        let r = i / n;
                        add_into(&mut buf[r * cols..(r + 1) * cols], gc);
                    }
                });
            }
            Op::TileRows(a) => {
                let len = self.value(*a).numel();
                self.acc(grads, *a, |buf| {
                    for chunk in g.data().chunks(len) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let cols = self.value(*a).cols();
                let width = y.cols();
                self.acc(grads, *a, |buf| {
                    for (bc, gc) in buf.chunks_mut(cols).zip(g.data().chunks(width)) {
                        add_into(&mut bc[*start..*start + width], gc);
                    }
                });
            }
            Op::GatherRows(a, indices) => {
                let cols = self.value(*a).cols();
                self.acc(grads, *a, |buf| {
                    for (gc, &r) in g.data().chunks(cols).zip(indices) {
                        add_into(&mut buf[r * cols..(r + 1) * cols], gc);
                    }
                });
            }
            Op::Concat(parts) => {
                let total = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).cols();
                    self.acc(grads, p, |buf| {
                        for (bc, gc) in buf.chunks_mut(width).zip(g.data().chunks(total)) {
                            add_into(bc, &gc[offset..offset + width]);
                        }
                    });
                    offset += width;
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let buf = slot(grads, v, self.value(v).shape());
        f(buf.data_mut());
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter that the loss actually depends on.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
    }
}
