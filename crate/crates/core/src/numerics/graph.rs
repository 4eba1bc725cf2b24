//! Wengert-list graph: every primitive appends a node holding its output
//! value and enough bookkeeping to run its vector-Jacobian product.
//! Nodes are appended in evaluation order, so a reverse sweep visits each
//! node once, after all of its consumers.

use std::borrow::Cow;
use std::collections::HashMap;

use super::{sigmoid, softmax_in_place, Gradients, ParameterStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    OneMinus(Var),
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Embed(Var, Vec<usize>),
    SelectRows(Var, Var, Vec<bool>),
    Stack(Vec<Var>),
    TimeStep(Var, usize),
    Reshape(Var),
    AddRowBroadcast(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    WeightedSum(Var, Var),
    Nll(Var, Vec<usize>, Vec<T>),
    Sum(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Affine(..) => "affine",
            Op::Add(..) => "add",
            Op::Sub(..) => "subtract",
            Op::Mul(..) => "multiply",
            Op::OneMinus(_) => "subtract_from_one",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Concat(_) => "concat",
            Op::SliceCols(..) => "slice_cols",
            Op::Embed(..) => "embed",
            Op::SelectRows(..) => "select_rows",
            Op::Stack(_) => "stack",
            Op::TimeStep(..) => "time_step",
            Op::Reshape(_) => "reshape",
            Op::AddRowBroadcast(..) => "add_row_broadcast",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::WeightedSum(..) => "weighted_sum",
            Op::Nll(..) => "nll",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation. Confined to a single thread.
pub struct Graph<'a, T: Real> {
    params: Option<&'a ParameterStore<T>>,
    param_vars: HashMap<usize, Var>,
    nodes: Vec<Node<'a, T>>,
}

/// Per-node gradients produced by [`Graph::gradients`].
pub struct VarGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> VarGrads<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<'a, T: Real> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Graph<'a, T> {
    /// A graph without a parameter store; only constants and free leaves.
    pub fn new() -> Self {
        Graph {
            params: None,
            param_vars: HashMap::new(),
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'a ParameterStore<T>) -> Self {
        Graph {
            params: Some(params),
            param_vars: HashMap::new(),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(Cow::Owned(tensor), Op::Leaf, false)
            .expect("constant leaves are validated by the caller")
    }

    /// A borrowed constant input; receives no gradient.
    pub fn constant_ref(&mut self, tensor: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(tensor), Op::Leaf, false)
            .expect("constant leaves are validated by the caller")
    }

    /// A free leaf whose gradient is reported through [`Graph::gradients`].
    pub fn variable(&mut self, tensor: Tensor<T>) -> Result<Var> {
        self.push(Cow::Owned(tensor), Op::Leaf, true)
    }

    /// Leaf referencing a named tensor of the attached store. Repeated
    /// lookups of the same name return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let store = self
            .params
            .ok_or_else(|| Error::Contract("graph has no parameter store".into()))?;
        let index = store
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
        if let Some(&v) = self.param_vars.get(&index) {
            return Ok(v);
        }
        let (_, tensor) = store.get_index(index).expect("index from store");
        let v = self.push(Cow::Borrowed(tensor), Op::Param, true)?;
        self.param_vars.insert(index, v);
        Ok(v)
    }

    /// `x W` where `x` is `[.., k]` and `W` is `[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = self.matmul_value(x, w, None)?;
        self.derived(out, Op::MatMul(x, w), &[x, w])
    }

    /// `x W + b`, with `b` broadcast across rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = self.matmul_value(x, w, Some(b))?;
        self.derived(out, Op::Affine(x, w, b), &[x, w, b])
    }

    fn matmul_value(&self, x: Var, w: Var, b: Option<Var>) -> Result<Tensor<T>> {
        let xv = self.value(x);
        let wv = self.value(w);
        if wv.shape().len() != 2 || xv.cols() != wv.shape()[0] {
            return Err(Error::dim("affine", xv.shape(), wv.shape()));
        }
        let (m, k, n) = (xv.rows(), xv.cols(), wv.shape()[1]);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-empty") = n;
        let mut data = vec![T::zero(); m * n];
        let beta = if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != n {
                return Err(Error::dim("affine bias", wv.shape(), bv.shape()));
            }
            for row in data.chunks_mut(n) {
                row.copy_from_slice(bv.data());
            }
            T::one()
        } else {
            T::zero()
        };
        T::gemm(m, k, n, T::one(), xv.data(), false, wv.data(), false, beta, &mut data);
        Ok(Tensor::from_parts(shape, data))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op.name(), av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.derived(out, op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let av = self.value(a);
        let out = Tensor::from_parts(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect());
        self.derived(out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::OneMinus(a), |x| T::one() - x)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        self.map(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), T::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// Concatenation along the last axis of tensors sharing row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Domain("concat of zero tensors".into()))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let rows = self.value(first).rows();
        let mut lead = self.shape(first).to_vec();
        lead.pop();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows || v.shape().len() != lead.len() + 1 {
                return Err(Error::dim("concat", self.shape(first), v.shape()));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        lead.push(total);
        let out = Tensor::from_parts(lead, data);
        self.derived(out, Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if len == 0 || start + len > av.cols() {
            return Err(Error::dim("slice_cols", av.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("non-empty") = len;
        let out = Tensor::from_parts(shape, data);
        self.derived(out, Op::SliceCols(a, start), &[a])
    }

    /// Row lookup into a `[V, d]` table, giving `[indices.len(), d]`.
    pub fn embed(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 || indices.is_empty() {
            return Err(Error::dim("embed", tv.shape(), &[indices.len()]));
        }
        let vocab = tv.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::Vocabulary {
                index: bad,
                size: vocab,
            });
        }
        let out = tv.gather_rows(indices);
        self.derived(out, Op::Embed(table, indices.to_vec()), &[table])
    }

    /// Row `r` of the output is row `r` of `take` where `mask[r]`, else of `keep`.
    pub fn select_rows(&mut self, take: Var, keep: Var, mask: &[bool]) -> Result<Var> {
        let (tv, kv) = (self.value(take), self.value(keep));
        same_shape("select_rows", tv, kv)?;
        if mask.len() != tv.rows() {
            return Err(Error::dim("select_rows mask", tv.shape(), &[mask.len()]));
        }
        let mut data = Vec::with_capacity(tv.len());
        for (r, &m) in mask.iter().enumerate() {
            data.extend_from_slice(if m { tv.row(r) } else { kv.row(r) });
        }
        let out = Tensor::from_parts(tv.shape().to_vec(), data);
        self.derived(out, Op::SelectRows(take, keep, mask.to_vec()), &[take, keep])
    }

    /// Stacks `[B, D]` tensors into `[B, T, D]` (time as the middle axis).
    pub fn stack_time(&mut self, steps: &[Var]) -> Result<Var> {
        let first = *steps
            .first()
            .ok_or_else(|| Error::Domain("stack of zero tensors".into()))?;
        let fs = self.shape(first).to_vec();
        if fs.len() != 2 {
            return Err(Error::dim("stack_time", &fs, &[2]));
        }
        for &s in steps {
            if self.shape(s) != fs.as_slice() {
                return Err(Error::dim("stack_time", &fs, self.shape(s)));
            }
        }
        let (b, d, t) = (fs[0], fs[1], steps.len());
        let mut data = Vec::with_capacity(b * t * d);
        for r in 0..b {
            for &s in steps {
                data.extend_from_slice(self.value(s).row(r));
            }
        }
        let out = Tensor::from_parts(vec![b, t, d], data);
        self.derived(out, Op::Stack(steps.to_vec()), steps)
    }

    /// Slice `[B, D]` at time `t` of a `[B, T, D]` tensor.
    pub fn time_step(&mut self, a: Var, t: usize) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if s.len() != 3 || t >= s[1] {
            return Err(Error::dim("time_step", s, &[t]));
        }
        let (b, steps, d) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(b * d);
        for bi in 0..b {
            let at = (bi * steps + t) * d;
            data.extend_from_slice(&av.data()[at..at + d]);
        }
        let out = Tensor::from_parts(vec![b, d], data);
        self.derived(out, Op::TimeStep(a, t), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        self.derived(out, Op::Reshape(a), &[a])
    }

    /// `x[b, t, :] + q[b, :]` for `x` of shape `[B, T, A]` and `q` of `[B, A]`.
    pub fn add_row_broadcast(&mut self, x: Var, q: Var) -> Result<Var> {
        let (xv, qv) = (self.value(x), self.value(q));
        let xs = xv.shape();
        if xs.len() != 3 || qv.shape() != [xs[0], xs[2]] {
            return Err(Error::dim("add_row_broadcast", xs, qv.shape()));
        }
        let (t, a) = (xs[1], xs[2]);
        let mut data = xv.data().to_vec();
        for (i, chunk) in data.chunks_mut(a).enumerate() {
            add_into(chunk, qv.row(i / t));
        }
        let out = Tensor::from_parts(xs.to_vec(), data);
        self.derived(out, Op::AddRowBroadcast(x, q), &[x, q])
    }

    /// Softmax over the last axis. Positions where `mask` is false receive
    /// probability exactly zero; every row needs at least one open position.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        let mut data = av.data().to_vec();
        if let Some(mask) = mask {
            if mask.len() != av.len() {
                return Err(Error::dim("softmax mask", av.shape(), &[mask.len()]));
            }
            for (row, m) in data.chunks_mut(c).zip(mask.chunks(c)) {
                if !m.iter().any(|&x| x) {
                    return Err(Error::Domain("softmax row with every position masked".into()));
                }
                let max = row
                    .iter()
                    .zip(m)
                    .filter(|(_, &keep)| keep)
                    .map(|(&v, _)| v)
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for (v, &keep) in row.iter_mut().zip(m) {
                    *v = if keep { (*v - max).exp() } else { T::zero() };
                    total = total + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / total;
                }
            }
        } else {
            for row in data.chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.derived(out, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = super::log_sum_exp(row);
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.derived(out, Op::LogSoftmax(a), &[a])
    }

    /// `sum_t w[b, t] * v[b, t, :]` for weights `[B, T]` and values `[B, T, D]`.
    pub fn weighted_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (wv, vv) = (self.value(weights), self.value(values));
        let vs = vv.shape();
        if vs.len() != 3 || wv.shape() != [vs[0], vs[1]] {
            return Err(Error::dim("weighted_sum", wv.shape(), vs));
        }
        let (b, t, d) = (vs[0], vs[1], vs[2]);
        let mut data = vec![T::zero(); b * d];
        for (bi, out) in data.chunks_mut(d).enumerate() {
            for ti in 0..t {
                let w = wv.data()[bi * t + ti];
                let row = &vv.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for (o, &x) in out.iter_mut().zip(row) {
                    *o = *o + w * x;
                }
            }
        }
        let out = Tensor::from_parts(vec![b, d], data);
        self.derived(out, Op::WeightedSum(weights, values), &[weights, values])
    }

    /// `-sum_b weights[b] * logp[b, targets[b]]` as a one-element tensor.
    pub fn nll(&mut self, logp: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let lv = self.value(logp);
        if targets.len() != lv.rows() || weights.len() != lv.rows() {
            return Err(Error::dim("nll", lv.shape(), &[targets.len(), weights.len()]));
        }
        let c = lv.cols();
        let mut total = T::zero();
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if t >= c {
                return Err(Error::Vocabulary { index: t, size: c });
            }
            if w != T::zero() {
                total = total - w * lv.row(r)[t];
            }
        }
        let out = Tensor::scalar(total);
        self.derived(
            out,
            Op::Nll(logp, targets.to_vec(), weights.to_vec()),
            &[logp],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().copied().sum();
        self.derived(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// Reverse sweep from a scalar node; returns the gradient of every node
    /// that depends on a parameter or free leaf.
    pub fn gradients(&self, loss: Var) -> Result<VarGrads<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(VarGrads { grads })
    }

    /// Gradient with respect to every tensor of the attached store. Tensors
    /// the loss does not depend on map to zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let store = self
            .params
            .ok_or_else(|| Error::Contract("graph has no parameter store".into()))?;
        let node_grads = self.gradients(loss)?;
        let mut out = Gradients::zeros_for(store);
        for (&index, &var) in &self.param_vars {
            if let Some(g) = node_grads.get(var) {
                add_into(out.get_index_mut(index).data_mut(), g.data());
            }
        }
        Ok(out)
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(
            grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()))
                .data_mut(),
        )
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(x, w) | Op::Affine(x, w, _) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.shape()[1]);
                if let Some(gx) = self.grad_buf(grads, *x) {
                    T::gemm(m, n, k, T::one(), gd, false, wv.data(), true, T::one(), gx);
                }
                if let Some(gw) = self.grad_buf(grads, *w) {
                    T::gemm(k, m, n, T::one(), xv.data(), true, gd, false, T::one(), gw);
                }
                if let Op::Affine(_, _, b) = &node.op {
                    if let Some(gb) = self.grad_buf(grads, *b) {
                        for row in gd.chunks(n) {
                            add_into(gb, row);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    add_into(ga, gd);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    add_into(gb, gd);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    add_into(ga, gd);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for (d, &s) in gb.iter_mut().zip(gd) {
                        *d = *d - s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(gd).zip(bv.data()) {
                        *d = *d + s * y;
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for ((d, &s), &x) in gb.iter_mut().zip(gd).zip(av.data()) {
                        *d = *d + s * x;
                    }
                }
            }
            Op::OneMinus(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (d, &s) in ga.iter_mut().zip(gd) {
                        *d = *d - s;
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (d, &s) in ga.iter_mut().zip(gd) {
                        *d = *d + s * *k;
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(gd).zip(out.data()) {
                        *d = *d + s * (T::one() - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(gd).zip(out.data()) {
                        *d = *d + s * y * (T::one() - y);
                    }
                }
            }
            Op::Concat(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.grad_buf(grads, p) {
                        for (dst, src) in gp.chunks_mut(w).zip(gd.chunks(total)) {
                            add_into(dst, &src[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (w, len) = (self.value(*a).cols(), out.cols());
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (dst, src) in ga.chunks_mut(w).zip(gd.chunks(len)) {
                        add_into(&mut dst[*start..*start + len], src);
                    }
                }
            }
            Op::Embed(table, indices) => {
                let d = out.cols();
                if let Some(gt) = self.grad_buf(grads, *table) {
                    for (&ix, src) in indices.iter().zip(gd.chunks(d)) {
                        add_into(&mut gt[ix * d..(ix + 1) * d], src);
                    }
                }
            }
            Op::SelectRows(take, keep, mask) => {
                let c = out.cols();
                if let Some(gt) = self.grad_buf(grads, *take) {
                    for ((dst, src), &m) in gt.chunks_mut(c).zip(gd.chunks(c)).zip(mask) {
                        if m {
                            add_into(dst, src);
                        }
                    }
                }
                if let Some(gk) = self.grad_buf(grads, *keep) {
                    for ((dst, src), &m) in gk.chunks_mut(c).zip(gd.chunks(c)).zip(mask) {
                        if !m {
                            add_into(dst, src);
                        }
                    }
                }
            }
            Op::Stack(steps) => {
                let (t, d) = (steps.len(), out.cols());
                for (ti, &s) in steps.iter().enumerate() {
                    if let Some(gs) = self.grad_buf(grads, s) {
                        for (bi, dst) in gs.chunks_mut(d).enumerate() {
                            let at = (bi * t + ti) * d;
                            add_into(dst, &gd[at..at + d]);
                        }
                    }
                }
            }
            Op::TimeStep(a, t) => {
                let steps = self.shape(*a)[1];
                let d = out.cols();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (bi, src) in gd.chunks(d).enumerate() {
                        let at = (bi * steps + t) * d;
                        add_into(&mut ga[at..at + d], src);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    add_into(ga, gd);
                }
            }
            Op::AddRowBroadcast(x, q) => {
                let s = out.shape();
                let (t, a) = (s[1], s[2]);
                if let Some(gx) = self.grad_buf(grads, *x) {
                    add_into(gx, gd);
                }
                if let Some(gq) = self.grad_buf(grads, *q) {
                    for (i, src) in gd.chunks(a).enumerate() {
                        let bi = i / t;
                        add_into(&mut gq[bi * a..(bi + 1) * a], src);
                    }
                }
            }
            Op::Softmax(a) => {
                let c = out.cols();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((dst, gr), yr) in ga.chunks_mut(c).zip(gd.chunks(c)).zip(out.data().chunks(c)) {
                        let dot: T = gr.iter().zip(yr).map(|(&s, &y)| s * y).sum();
                        for ((d, &s), &y) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = *d + y * (s - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((dst, gr), yr) in ga.chunks_mut(c).zip(gd.chunks(c)).zip(out.data().chunks(c)) {
                        let total: T = gr.iter().copied().sum();
                        for ((d, &s), &y) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = *d + s - y.exp() * total;
                        }
                    }
                }
            }
            Op::WeightedSum(w, v) => {
                let (wv, vv) = (self.value(*w), self.value(*v));
                let vs = vv.shape();
                let (t, d) = (vs[1], vs[2]);
                if let Some(gw) = self.grad_buf(grads, *w) {
                    for (i, dst) in gw.iter_mut().enumerate() {
                        let bi = i / t;
                        let row = &vv.data()[i * d..(i + 1) * d];
                        let gr = &gd[bi * d..(bi + 1) * d];
                        *dst = *dst + row.iter().zip(gr).map(|(&x, &s)| x * s).sum();
                    }
                }
                if let Some(gv) = self.grad_buf(grads, *v) {
                    for (i, dst) in gv.chunks_mut(d).enumerate() {
                        let bi = i / t;
                        let weight = wv.data()[i];
                        for (o, &s) in dst.iter_mut().zip(&gd[bi * d..(bi + 1) * d]) {
                            *o = *o + weight * s;
                        }
                    }
                }
            }
            Op::Nll(logp, targets, weights) => {
                let c = self.value(*logp).cols();
                let s = gd[0];
                if let Some(gl) = self.grad_buf(grads, *logp) {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        gl[r * c + t] = gl[r * c + t] - w * s;
                    }
                }
            }
            Op::Sum(a) => {
                let s = gd[0];
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for d in ga.iter_mut() {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn affine_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let x = g.constant(t(&[2], &[1.0, 1.0]));
        let w = g.constant(t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]));
        let b = g.constant(t(&[2], &[1.0, 1.0]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[7.0, 9.0]);

        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let b = g.constant(t(&[2], &[-3.5, 0.25]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[-3.5, 0.25]);
    }

    #[test]
    fn affine_shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![3]));
        let w = g.constant(Tensor::zeros(vec![2, 2]));
        let b = g.constant(Tensor::zeros(vec![2]));
        match g.affine(x, w, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected dimension error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn pointwise_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&[1], &[0.0]));
        let s = g.sigmoid(z).unwrap();
        let th = g.tanh(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        assert_eq!(g.value(th).data(), &[0.0]);
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let m = g.mul(a, b).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 8.0]);
        let c = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(g.add(a, c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut store = ParameterStore::new();
        store.insert("x", t(&[2], &[1.0, 2.0])).unwrap();
        store.insert("unused", t(&[3], &[1.0, 1.0, 1.0])).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.param("x").unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0, 0.0, 0.0]);

        let mut g = Graph::with_params(&store);
        let x = g.param("x").unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.gradients(x), Err(Error::Contract(_))));
    }

    #[test]
    fn masked_softmax_zeroes_closed_positions() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 5.0]));
        let p = g.softmax(x, Some(&[true, true, false, true, true, true])).unwrap();
        let v = g.value(p);
        assert_eq!(v.data()[2], 0.0);
        assert!((v.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let e = 1.0f64.exp();
        assert!((v.data()[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!(matches!(
            g.softmax(x, Some(&[false, false, false, true, true, true])),
            Err(Error::Domain(_))
        ));
    }

    #[cfg(debug_assertions)]
    #[test]
    fn non_finite_outputs_are_hard_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(
            g.scale(x, 10.0),
            Err(Error::NonFinite { op: "scale" })
        ));
    }

    #[test]
    fn embed_rejects_out_of_range_index() {
        let mut g = Graph::<f32>::new();
        let table = g.constant(Tensor::zeros(vec![4, 2]));
        assert!(matches!(
            g.embed(table, &[1, 4]),
            Err(Error::Vocabulary { index: 4, size: 4 })
        ));
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.constant(Tensor::from_f64(vec![2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap());
            let w = g.constant(Tensor::from_f64(vec![3, 2], &[0.7, -0.8, 0.9, 1.0, -1.1, 1.2]).unwrap());
            let y = g.matmul(x, w).unwrap();
            let y = g.tanh(y).unwrap();
            let y = g.log_softmax(y).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(), run());
    }
}
