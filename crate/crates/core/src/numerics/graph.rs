//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse, accumulating gradients with
//! the sum rule, and returns them as a [`Gradients`] table. Parameter leaves
//! are created lazily from a borrowed [`ParamStore`], at most once per graph,
//! so every use of a parameter contributes to the same gradient slot.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::scalar::{lit, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    L2NormalizeRows { x: Var, norms: Vec<T> },
    Pick { x: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward evaluation.
#[derive(Debug)]
pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::invalid(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Reads a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, kind: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node {
            value,
            op: kind,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient but is not owned by a parameter store.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("input", t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let store = self
            .params
            .expect("graph was created without a parameter store");
        let mut value = store.get(id).clone();
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm_acc(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.value(a))?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.ng(a);
        self.push("transpose", Tensor::from_parts(vec![c, r], out), Op::Transpose(a), ng)
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(self.shape(a).to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push("add", t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push("sub", t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push("mul", t, Op::Mul(a, b), ng)
    }

    /// `x + b` with `b` broadcast over every leading index of `x`'s last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(b) != [n] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias).map(|(&v, &c)| v + c))
            .collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        let ng = self.ng(x) || self.ng(b);
        self.push("add_bias", t, Op::AddBias(x, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * s).collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        let ng = self.ng(x);
        self.push("scale", t, Op::Scale(x, s), ng)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        let ng = self.ng(x);
        self.push("gelu", t, Op::Gelu(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.exp()).collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        let ng = self.ng(x);
        self.push("exp", t, Op::Exp(x), ng)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::NonFinite { op: "ln" });
        }
        let data = self.value(x).data().iter().map(|v| v.ln()).collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        let ng = self.ng(x);
        self.push("ln", t, Op::Ln(x), ng)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let ng = self.ng(x);
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax { x, axis }, ng)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.value(x).data().chunks(n) {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|&v| v - lse));
        }
        let ng = self.ng(x);
        self.push("log_softmax", Tensor::from_parts(shape, out), Op::LogSoftmax(x), ng)
    }

    /// Normalizes each row of the last axis to zero mean and unit variance,
    /// then applies `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let eps = lit::<T>(eps);
        let inv_n = lit::<T>(1.0 / n as f64);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let src = self.value(x).data();
        let rows = src.len() / n;
        let mut xhat = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(n) {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            ng,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2("slice_rows", self.value(x))?;
        if start >= end || end > r {
            return Err(Error::invalid("slice_rows", format!("range {start}..{end} for {r} rows")));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let ng = self.ng(x);
        self.push("slice_rows", Tensor::from_parts(vec![end - start, c], data), Op::SliceRows { x, start }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2("slice_cols", self.value(x))?;
        if start >= end || end > c {
            return Err(Error::invalid("slice_cols", format!("range {start}..{end} for {c} columns")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let ng = self.ng(x);
        self.push("slice_cols", Tensor::from_parts(vec![r, w], data), Op::SliceCols { x, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let (_, c) = dims2("concat_rows", self.value(first))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = dims2("concat_rows", self.value(p))?;
            if pc != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push("concat_rows", Tensor::from_parts(vec![rows, c], data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
        let (r, _) = dims2("concat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2("concat_cols", self.value(p))?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push("concat_cols", Tensor::from_parts(vec![r, total], data), Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Column means of a matrix, as a `1×n` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("mean_rows", self.value(x))?;
        let mut out = vec![T::zero(); c];
        for row in self.value(x).data().chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = lit::<T>(1.0 / r as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let ng = self.ng(x);
        self.push("mean_rows", Tensor::from_parts(vec![1, c], out), Op::MeanRows(x), ng)
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = dims2("gather_rows", self.value(table))?;
        if ids.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::invalid("gather_rows", format!("index {bad} out of range for {r} rows")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(table);
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![ids.len(), c], data),
            Op::GatherRows { table, ids: ids.to_vec() },
            ng,
        )
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.value(x).data().chunks(n) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm <= T::zero() {
                return Err(Error::invalid("l2_normalize_rows", "zero-norm row"));
            }
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let ng = self.ng(x);
        self.push("l2_normalize_rows", Tensor::from_parts(shape, out), Op::L2NormalizeRows { x, norms }, ng)
    }

    /// Selects elements by flat index into a rank-1 result.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if idx.is_empty() {
            return Err(Error::invalid("pick", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::invalid("pick", format!("index {bad} out of range for {n} elements")));
        }
        let src = self.value(x).data();
        let data = idx.iter().map(|&i| src[i]).collect();
        let ng = self.ng(x);
        self.push("pick", Tensor::from_parts(vec![idx.len()], data), Op::Pick { x, idx: idx.to_vec() }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.ng(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.value(x).data().iter().copied().sum::<T>() / lit(n as f64);
        let ng = self.ng(x);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        self.push("reshape", t, Op::Reshape(x), ng)
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients {
            grads,
            params: self.param_vars.iter().map(|(&p, &v)| (p, v)).collect(),
        })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &dyn Fn(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| self.nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2_unchecked(&self.nodes[a.0].value);
                let n = self.nodes[b.0].value.shape()[1];
                // dA = dC · Bᵀ
                acc(*a, &|da| {
                    T::gemm_acc(m, n, k, g, (n as isize, 1), val(*b), (1, n as isize), da);
                });
                // dB = Aᵀ · dC
                acc(*b, &|db| {
                    T::gemm_acc(k, m, n, val(*a), (1, k as isize), g, (n as isize, 1), db);
                });
            }
            Op::Transpose(a) => {
                let (r, c) = dims2_unchecked(&self.nodes[a.0].value);
                acc(*a, &|da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|d| add_into(d, g));
                acc(*b, &|d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|d| add_into(d, g));
                acc(*b, &|d| d.iter_mut().zip(g).for_each(|(o, &v)| *o -= v));
            }
            Op::Mul(a, b) => {
                acc(*a, &|d| {
                    for ((o, &gv), &bv) in d.iter_mut().zip(g).zip(val(*b)) {
                        *o += gv * bv;
                    }
                });
                acc(*b, &|d| {
                    for ((o, &gv), &av) in d.iter_mut().zip(g).zip(val(*a)) {
                        *o += gv * av;
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &|d| add_into(d, g));
                let n = self.nodes[b.0].value.numel();
                acc(*b, &|d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(x, s) => {
                acc(*x, &|d| d.iter_mut().zip(g).for_each(|(o, &v)| *o += v * *s));
            }
            Op::Gelu(x) => {
                acc(*x, &|d| {
                    for ((o, &gv), &xv) in d.iter_mut().zip(g).zip(val(*x)) {
                        *o += gv * gelu_grad(xv);
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, &|d| {
                    for ((o, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
                        *o += gv * yv;
                    }
                });
            }
            Op::Ln(x) => {
                acc(*x, &|d| {
                    for ((o, &gv), &xv) in d.iter_mut().zip(g).zip(val(*x)) {
                        *o += gv / xv;
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                acc(*x, &|d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot = (0..len).map(|j| g[at(j)] * y[at(j)]).sum::<T>();
                            for j in 0..len {
                                d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                acc(*x, &|d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let gs = grow.iter().copied().sum::<T>();
                        for j in 0..n {
                            drow[j] += grow[j] - yrow[j].exp() * gs;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.nodes[gamma.0].value.numel();
                let gam = val(*gamma);
                let inv_n = lit::<T>(1.0 / n as f64);
                acc(*x, &|d| {
                    for (r, (drow, grow)) in d.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        let hrow = &xhat[r * n..(r + 1) * n];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..n {
                            let dh = grow[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh *= inv_n;
                        mean_dh_h *= inv_n;
                        for j in 0..n {
                            let dh = grow[j] * gam[j];
                            drow[j] += rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
                acc(*gamma, &|d| {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            d[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*beta, &|d| {
                    for grow in g.chunks(n) {
                        add_into(d, grow);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = node.value.shape()[1];
                acc(*x, &|d| add_into(&mut d[start * c..start * c + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let (r, w) = dims2_unchecked(&node.value);
                let c = self.nodes[x.0].value.shape()[1];
                acc(*x, &|d| {
                    for i in 0..r {
                        add_into(&mut d[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.numel();
                    acc(*p, &|d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = dims2_unchecked(&node.value);
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    acc(*p, &|d| {
                        for i in 0..r {
                            add_into(&mut d[i * w..(i + 1) * w], &g[i * total + off..i * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::MeanRows(x) => {
                let (r, c) = dims2_unchecked(&self.nodes[x.0].value);
                let inv = lit::<T>(1.0 / r as f64);
                acc(*x, &|d| {
                    for row in d.chunks_mut(c) {
                        for (o, &gv) in row.iter_mut().zip(g) {
                            *o += gv * inv;
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let c = node.value.shape()[1];
                acc(*table, &|d| {
                    for (k, &i) in ids.iter().enumerate() {
                        add_into(&mut d[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                acc(*x, &|d| {
                    for (r, ((drow, grow), yrow)) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).enumerate() {
                        let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..n {
                            drow[j] += (grow[j] - yrow[j] * dot) / norms[r];
                        }
                    }
                });
            }
            Op::Pick { x, idx } => {
                acc(*x, &|d| {
                    for (k, &i) in idx.iter().enumerate() {
                        d[i] += g[k];
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &|d| d.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                let s = g[0] / lit(n as f64);
                acc(*x, &|d| d.iter_mut().for_each(|o| *o += s));
            }
            Op::Reshape(x) => {
                acc(*x, &|d| add_into(d, g));
            }
        }
    }
}

/// Gradients produced by one [`Graph::backward`] call.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if it lies on a path to the loss.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients, in parameter-id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        let mut ps: Vec<_> = self.params.iter().filter_map(|&(p, v)| self.wrt(v).map(|g| (p, g))).collect();
        ps.sort_by_key(|(p, _)| *p);
        ps.into_iter()
    }

    /// Adds every parameter gradient into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in self.params() {
            store.get_mut(id).accumulate_grad(g);
        }
    }
}

fn dims2_unchecked<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Scalar>(x: T) -> T {
    let c = lit::<T>(GELU_C);
    let a = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = lit::<T>(GELU_C);
    let a = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + lit::<T>(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}
