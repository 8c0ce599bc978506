//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! A [`Graph`] borrows a [`ParameterStore`] and records every primitive applied
//! to its parameters and constants. [`Graph::backward`] walks the tape once in
//! reverse and returns a gradient for every stored parameter; parameters that
//! never entered the computation get zeros. The tape is dropped with the graph.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, LayerNormCache};
use crate::numerics::store::Gradients;
use crate::numerics::{ParameterStore, Tensor};
use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'a, S> {
    Borrowed(&'a Tensor<S>),
    Owned(Tensor<S>),
}

impl<S> Value<'_, S> {
    fn get(&self) -> &Tensor<S> {
        match self {
            Value::Borrowed(t) => t,
            Value::Owned(t) => t,
        }
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Affine(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    MulConst(Var, Tensor<S>),
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, cache: LayerNormCache<S> },
    Softmax(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, indices: Vec<usize> },
    ConcatRows(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
    MaxAll { x: Var, argmax: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor<S> },
    BceWithLogits { logit: Var, target: S },
}

struct Node<'a, S> {
    value: Value<'a, S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<'a, S> {
    store: &'a ParameterStore<S>,
    nodes: Vec<Node<'a, S>>,
    params: HashMap<&'a str, Var>,
    degenerate_softmax_rows: usize,
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new(store: &'a ParameterStore<S>) -> Self {
        Graph { store, nodes: Vec::with_capacity(256), params: HashMap::new(), degenerate_softmax_rows: 0 }
    }

    pub fn store(&self) -> &'a ParameterStore<S> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Softmax rows so far that had no valid column and were set to zero.
    pub fn degenerate_softmax_rows(&self) -> usize {
        self.degenerate_softmax_rows
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        self.nodes[v.0].value.get()
    }

    pub fn scalar_value(&self, v: Var) -> Result<S> {
        self.value(v).item()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let store = self.store;
        let (key, p) = store
            .get_key_value(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))?;
        if let Some(&v) = self.params.get(key) {
            return Ok(v);
        }
        self.nodes.push(Node { value: Value::Borrowed(&p.value), op: Op::Leaf, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a @ b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_bt(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulBt(a, b), ng))
    }

    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = kernels::affine(self.value(x), self.value(weight), self.value(bias))?;
        let ng = self.needs(x) || self.needs(weight) || self.needs(bias);
        Ok(self.push(out, Op::Affine(x, weight, bias), ng))
    }

    /// Affine layer whose parameters are `{prefix}.weight` and `{prefix}.bias`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.affine(x, w, b)
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds a `[d]` row vector to every row of `x[n,d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.numel() != tx.cols() {
            return Err(Error::dim("add_row", tx.shape(), tr.shape()));
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(out, Op::AddRow(x, row), ng))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).map(|v| v + c);
        let ng = self.needs(x);
        self.push(out, Op::AddScalar(x), ng)
    }

    /// Elementwise product with a constant tensor (dropout masks, row zeroing).
    pub fn mul_const(&mut self, x: Var, c: Tensor<S>) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != c.shape() {
            return Err(Error::dim("mul_const", tx.shape(), c.shape()));
        }
        let data = tx.data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::MulConst(x, c), ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = kernels::gelu(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid_scalar);
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(S::zero()));
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, cache) = kernels::layer_norm_with_cache(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, cache }, ng))
    }

    /// Layer norm with parameters `{prefix}.gamma` and `{prefix}.beta`.
    pub fn layer_norm_named(&mut self, x: Var, prefix: &str, eps: f64) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        self.layer_norm(x, g, b, eps)
    }

    /// Row softmax; columns flagged invalid get zero weight.
    pub fn softmax_rows(&mut self, x: Var, valid: Option<&[bool]>) -> Result<Var> {
        let (out, degenerate) = kernels::masked_softmax_rows(self.value(x), valid)?;
        self.degenerate_softmax_rows += degenerate;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if len == 0 || start + len > c {
            return Err(Error::dim("slice_cols", tx.shape(), (start, len)));
        }
        let mut data = Vec::with_capacity(tx.rows() * len);
        for r in 0..tx.rows() {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![tx.rows(), len], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::EmptyInput("concat_cols".into()))?;
        let rows = self.value(*first).rows();
        let mut width = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::dim("concat_cols", self.value(*first).shape(), t.shape()));
            }
            width += t.cols();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, width], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Rows of `x` picked by index (repeats allowed): embedding lookup and position selection.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("gather_rows with no indices".into()));
        }
        let out = self.value(x).select_rows(indices)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::GatherRows { x, indices: indices.to_vec() }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::EmptyInput("concat_rows".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::dim("concat_rows", self.value(*first).shape(), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<S>();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<S>() / S::lit(t.numel() as f64);
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), ng)
    }

    /// Maximum element; ties resolve to the lowest index.
    pub fn max_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut argmax = 0;
        for (i, &v) in t.data().iter().enumerate() {
            if v > t.data()[argmax] {
                argmax = i;
            }
        }
        let out = Tensor::scalar(t.data()[argmax]);
        let ng = self.needs(x);
        self.push(out, Op::MaxAll { x, argmax }, ng)
    }

    /// Mean cross-entropy of `logits[n,K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy_with_probs(self.value(logits), targets)?;
        let ng = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, ng))
    }

    /// Binary cross-entropy `-(y log s + (1-y) log(1-s))` with `s = sigmoid(logit)`,
    /// evaluated as `softplus(z) - y z`.
    pub fn bce_with_logits(&mut self, logit: Var, target: S) -> Result<Var> {
        let z = self.value(logit).item()?;
        let loss = kernels::softplus_scalar(z) - target * z;
        let ng = self.needs(logit);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { logit, target }, ng))
    }

    /// Gradients of a scalar `loss` for every stored parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let node_grads = self.node_gradients(loss)?;
        let mut out = self.store.zero_gradients();
        for (name, v) in &self.params {
            if let Some(g) = &node_grads[v.0] {
                out.insert((*name).to_string(), g.clone());
            }
        }
        Ok(out)
    }

    /// Gradient of `loss` with respect to arbitrary nodes (zeros where unreachable).
    pub fn gradients_wrt(&self, loss: Var, vars: &[Var]) -> Result<Vec<Tensor<S>>> {
        let node_grads = self.node_gradients_all(loss, true)?;
        Ok(vars
            .iter()
            .map(|v| node_grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.value(*v).shape().to_vec())))
            .collect())
    }

    fn node_gradients(&self, loss: Var) -> Result<Vec<Option<Tensor<S>>>> {
        self.node_gradients_all(loss, false)
    }

    fn node_gradients_all(&self, loss: Var, everything: bool) -> Result<Vec<Option<Tensor<S>>>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::dim("backward (loss must be scalar)", lt.shape(), "[1]"));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape().to_vec(), S::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad || everything {
                self.propagate(&node.op, node.value.get(), &g, &mut grads, everything)?;
            }
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(
        &self,
        op: &Op<S>,
        out: &Tensor<S>,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        everything: bool,
    ) -> Result<()> {
        let want = |v: &Var| everything || self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, t: Tensor<S>| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_scaled(&t, S::one()),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(a) {
                    acc(*a, kernels::matmul_bt(g, self.value(*b))?)?;
                }
                if want(b) {
                    acc(*b, kernels::matmul_at(self.value(*a), g)?)?;
                }
            }
            Op::MatMulBt(a, b) => {
                if want(a) {
                    acc(*a, kernels::matmul(g, self.value(*b))?)?;
                }
                if want(b) {
                    acc(*b, kernels::matmul_at(g, self.value(*a))?)?;
                }
            }
            Op::Affine(x, w, b) => {
                if want(x) {
                    acc(*x, kernels::matmul_bt(g, self.value(*w))?)?;
                }
                if want(w) {
                    acc(*w, kernels::matmul_at(self.value(*x), g)?)?;
                }
                if want(b) {
                    acc(*b, column_sums(g, self.value(*b).shape())?)?;
                }
            }
            Op::AddRow(x, row) => {
                if want(x) {
                    acc(*x, g.clone())?;
                }
                if want(row) {
                    acc(*row, column_sums(g, self.value(*row).shape())?)?;
                }
            }
            Op::Add(a, b) => {
                if want(a) {
                    acc(*a, g.clone())?;
                }
                if want(b) {
                    acc(*b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    acc(*a, g.clone())?;
                }
                if want(b) {
                    acc(*b, g.map(|v| -v))?;
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if want(a) {
                    acc(*a, zip(g, tb, |x, y| x * y))?;
                }
                if want(b) {
                    acc(*b, zip(g, ta, |x, y| x * y))?;
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc(*x, g.map(|v| v * c))?;
            }
            Op::AddScalar(x) => acc(*x, g.clone())?,
            Op::MulConst(x, c) => acc(*x, zip(g, c, |a, b| a * b))?,
            Op::Gelu(x) => acc(*x, zip(g, self.value(*x), |gv, xv| gv * kernels::gelu_grad_scalar(xv)))?,
            Op::Sigmoid(x) => acc(*x, zip(g, out, |gv, y| gv * y * (S::one() - y)))?,
            Op::Relu(x) => {
                acc(*x, zip(g, self.value(*x), |gv, xv| if xv > S::zero() { gv } else { S::zero() }))?
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let gam = self.value(*gamma);
                let d = g.cols();
                let dn = S::lit(d as f64);
                if want(gamma) {
                    acc(*gamma, column_sums(&zip(g, &cache.normalized, |a, b| a * b), gam.shape())?)?;
                }
                if want(beta) {
                    acc(*beta, column_sums(g, self.value(*beta).shape())?)?;
                }
                if want(x) {
                    let mut gx = g.clone();
                    for r in 0..g.rows() {
                        let xhat = cache.normalized.row(r);
                        let gr = g.row(r);
                        let mut sum_gh = S::zero();
                        let mut sum_gh_xhat = S::zero();
                        for j in 0..d {
                            let gh = gr[j] * gam.data()[j];
                            sum_gh += gh;
                            sum_gh_xhat += gh * xhat[j];
                        }
                        let istd = cache.inv_std[r];
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            let gh = gr[j] * gam.data()[j];
                            *o = istd / dn * (dn * gh - sum_gh - xhat[j] * sum_gh_xhat);
                        }
                    }
                    acc(*x, gx)?;
                }
            }
            Op::Softmax(x) => {
                let mut gx = g.clone();
                for r in 0..g.rows() {
                    let y = out.row(r);
                    let inner = kernels::dot(g.row(r), y);
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = y[j] * (g.row(r)[j] - inner);
                    }
                }
                acc(*x, gx)?;
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let mut gx = Tensor::zeros(tx.shape().to_vec());
                let len = g.cols();
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                }
                acc(*x, gx)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let w = tp.cols();
                    if want(p) {
                        let mut gp = Tensor::zeros(tp.shape().to_vec());
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        acc(*p, gp)?;
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, indices } => {
                let mut gx = Tensor::zeros(self.value(*x).shape().to_vec());
                for (r, &i) in indices.iter().enumerate() {
                    for (o, &v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*x, gx)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let n = tp.numel();
                    if want(p) {
                        acc(*p, Tensor::new(tp.shape().to_vec(), g.data()[offset..offset + n].to_vec())?)?;
                    }
                    offset += n;
                }
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                acc(*x, Tensor::full(self.value(*x).shape().to_vec(), gv))?;
            }
            Op::MeanAll(x) => {
                let tx = self.value(*x);
                let gv = g.data()[0] / S::lit(tx.numel() as f64);
                acc(*x, Tensor::full(tx.shape().to_vec(), gv))?;
            }
            Op::MaxAll { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape().to_vec());
                gx.data_mut()[*argmax] = g.data()[0];
                acc(*x, gx)?;
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g.data()[0] / S::lit(targets.len() as f64);
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gl.row_mut(r)[t] -= S::one();
                }
                acc(*logits, gl.map(|v| v * scale))?;
            }
            Op::BceWithLogits { logit, target } => {
                let z = self.value(*logit);
                let s = kernels::sigmoid_scalar(z.data()[0]);
                let gv = (s - *target) * g.data()[0];
                acc(*logit, Tensor::full(z.shape().to_vec(), gv))?;
            }
        }
        Ok(())
    }
}

fn zip<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip keeps shape")
}

fn column_sums<S: Scalar>(g: &Tensor<S>, shape: &[usize]) -> Result<Tensor<S>> {
    let mut out = vec![S::zero(); g.cols()];
    for r in 0..g.rows() {
        for (o, &v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Tensor::new(shape.to_vec(), out)
}
