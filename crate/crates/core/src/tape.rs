//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records one forward pass. Trainable tensors live in a
//! [`ParamStore`] and are bound into the tape with [`Tape::param`]; after
//! [`Tape::backward`] their gradients are summed back per parameter.

use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }

    /// Zero-filled gradient buffers with the store's shapes.
    pub fn zero_grads(&self) -> Vec<Matrix> {
        self.values.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix },
    MeanRows(Var),
    SumAll(Var),
    MaskRows { x: Var, keep: Vec<bool> },
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    bound: BTreeMap<ParamId, Var>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient but is not backed by a parameter.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter; repeated calls return the same variable.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: Cow::Borrowed(store.get(id)), op: Op::Leaf, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        let mut value = self.value(a).clone();
        assert_eq!(value.cols(), r.cols(), "add_row width");
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *x += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1 x cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "mul_row expects a row vector");
        let mut value = self.value(a).clone();
        assert_eq!(value.cols(), r.cols(), "mul_row width");
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *x *= b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.needs(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(math::tanh);
        let ng = self.needs(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(math::sigmoid);
        let ng = self.needs(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` is masked out for `j > i`.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let value = softmax_rows(self.value(a), causal);
        let ng = self.needs(a);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Row-wise standardization (no gain or bias).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, m) = x.shape();
        let mut value = Matrix::zeros(n, m);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
            for (o, v) in value.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let ng = self.needs(a);
        self.push(value, Op::LayerNorm { x: a, inv_std }, ng)
    }

    /// Selects rows of `table` (an embedding lookup when `table` is a parameter).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).copy_from_slice(t.row(id));
        }
        let ng = self.needs(table);
        self.push(value, Op::Gather { table, ids: ids.to_vec() }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row count");
            for i in 0..rows {
                value.row_mut(i)[offset..offset + pv.cols()].copy_from_slice(pv.row(i));
            }
            offset += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let mut value = Matrix::zeros(x.rows(), len);
        for i in 0..x.rows() {
            value.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        let ng = self.needs(a);
        self.push(value, Op::SliceCols { x: a, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows width");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let value = Matrix::from_vec(rows, cols, data).expect("concat_rows size");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Summed negative log-likelihood of `targets[i]` under `softmax(logits[i])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows(), targets.len(), "cross_entropy target count");
        let mut probs = Matrix::zeros(l.rows(), l.cols());
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = l.row(i);
            let lse = math::log_sum_exp(row);
            loss -= row[t] - lse;
            for (p, x) in probs.row_mut(i).iter_mut().zip(row) {
                *p = math::exp(x - lse);
            }
        }
        let ng = self.needs(logits);
        self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            ng,
        )
    }

    /// Column means, `1 x cols`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = Matrix::zeros(1, x.cols());
        if x.rows() > 0 {
            for i in 0..x.rows() {
                for (o, v) in value.data_mut().iter_mut().zip(x.row(i)) {
                    *o += v;
                }
            }
            value.scale_assign(1.0 / x.rows() as f64);
        }
        let ng = self.needs(a);
        self.push(value, Op::MeanRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Matrix::filled(1, 1, s), Op::SumAll(a), ng)
    }

    /// Zeroes every row `i` with `keep[i] == false`.
    pub fn mask_rows(&mut self, a: Var, keep: &[bool]) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.rows(), keep.len(), "mask_rows length");
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                value.row_mut(i).iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let ng = self.needs(a);
        self.push(value, Op::MaskRows { x: a, keep: keep.to_vec() }, ng)
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<'a>, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let acc = |grads: &mut [Option<Matrix>], v: Var, delta: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.needs(*b) {
                    acc(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, g.matmul(self.value(*b)));
                }
                if self.needs(*b) {
                    acc(grads, *b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                if self.needs(*row) {
                    acc(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                if self.needs(*a) {
                    let mut d = g.clone();
                    for i in 0..d.rows() {
                        for (x, b) in d.row_mut(i).iter_mut().zip(r.data()) {
                            *x *= b;
                        }
                    }
                    acc(grads, *a, d);
                }
                if self.needs(*row) {
                    let prod = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(grads, *row, column_sums(&prod));
                }
            }
            Op::Scale(a, s) => acc(grads, *a, g.map(|x| x * s)),
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 });
                acc(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(&node.value, |x, y| x * (1.0 - y * y));
                acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |x, y| x * y * (1.0 - y));
                acc(grads, *a, d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot = math::dot(g.row(i), y.row(i));
                    for ((o, gy), yy) in d.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = yy * (gy - dot);
                    }
                }
                acc(grads, *a, d);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let m = y.cols() as f64;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let gr = g.row(i);
                    let yr = y.row(i);
                    let mean_g = gr.iter().sum::<f64>() / m;
                    let mean_gy = math::dot(gr, yr) / m;
                    for ((o, gv), yv) in d.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[i] * (gv - mean_g - yv * mean_gy);
                    }
                }
                acc(grads, *x, d);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut d = Matrix::zeros(t.rows(), t.cols());
                for (i, &id) in ids.iter().enumerate() {
                    for (o, v) in d.row_mut(id).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                acc(grads, *table, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.needs(p) {
                        let mut d = Matrix::zeros(g.rows(), cols);
                        for i in 0..g.rows() {
                            d.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + cols]);
                        }
                        acc(grads, p, d);
                    }
                    offset += cols;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..g.rows() {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(grads, *x, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    if self.needs(p) {
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        acc(grads, p, Matrix::from_vec(rows, cols, slice).expect("slice size"));
                    }
                    offset += rows;
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g.get(0, 0);
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    let v = d.get(i, t);
                    d.set(i, t, v - 1.0);
                }
                d.scale_assign(scale);
                acc(grads, *logits, d);
            }
            Op::MeanRows(a) => {
                let xv = self.value(*a);
                let n = xv.rows();
                let mut d = Matrix::zeros(n, xv.cols());
                if n > 0 {
                    let inv = 1.0 / n as f64;
                    for i in 0..n {
                        for (o, v) in d.row_mut(i).iter_mut().zip(g.data()) {
                            *o = v * inv;
                        }
                    }
                }
                acc(grads, *a, d);
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                acc(grads, *a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::MaskRows { x, keep } => {
                let mut d = g.clone();
                for (i, &k) in keep.iter().enumerate() {
                    if !k {
                        d.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                acc(grads, *x, d);
            }
        }
    }

    /// Adds this tape's parameter gradients into `into` (indexed by [`ParamId`]).
    pub fn accumulate_param_grads(&self, grads: &Gradients, into: &mut [Matrix]) {
        for (&id, &var) in &self.bound {
            if let Some(g) = grads.get(var) {
                into[id.0].add_assign(g);
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

/// Row-wise softmax of a plain matrix.
pub fn softmax_rows(x: &Matrix, causal: bool) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let limit = if causal { (i + 1).min(row.len()) } else { row.len() };
        let max = row[..limit].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let o = out.row_mut(i);
        for j in 0..limit {
            o[j] = math::exp(row[j] - max);
            sum += o[j];
        }
        for v in &mut o[..limit] {
            *v /= sum;
        }
    }
    out
}
