//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Trainable
//! parameters enter through [`Graph::param`]; while the graph is in frozen
//! mode the same call yields a constant leaf, which is how the stop-gradient
//! branches of the model are expressed.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Rc<Matrix>),
    LeftMulConst(Rc<Matrix>, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    L2NormRows {
        x: Var,
        norms: Vec<f64>,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    Transpose(Var),
    Sum(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    nodes: Vec<Option<Matrix>>,
    params: HashMap<ParamId, Var>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> + '_ {
        self.params
            .iter()
            .filter_map(|(id, v)| self.nodes[v.0].as_ref().map(|g| (*id, g)))
    }
}

pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node>,
    trainable: HashMap<ParamId, Var>,
    frozen_cache: HashMap<ParamId, Var>,
    frozen: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            trainable: HashMap::new(),
            frozen_cache: HashMap::new(),
            frozen: false,
        }
    }

    pub fn with_params(store: &'a ParamStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Switches frozen mode and returns the previous setting.
    pub fn set_frozen(&mut self, frozen: bool) -> bool {
        std::mem::replace(&mut self.frozen, frozen)
    }

    /// Runs `f` with every parameter lookup treated as a constant.
    pub fn frozen<T>(&mut self, f: impl FnOnce(&mut Self) -> T) -> T {
        let prev = self.set_frozen(true);
        let out = f(self);
        self.set_frozen(prev);
        out
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m[(0, 0)]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A differentiable leaf that is not a stored parameter.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.store.expect("graph has no parameter store");
        if self.frozen {
            if let Some(v) = self.frozen_cache.get(&id) {
                return *v;
            }
            let v = self.push(store.value(id).clone(), Op::Leaf, false);
            self.frozen_cache.insert(id, v);
            v
        } else {
            if let Some(v) = self.trainable.get(&id) {
                return *v;
            }
            let v = self.push(store.value(id).clone(), Op::Leaf, true);
            self.trainable.insert(id, v);
            v
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Adds the `1×c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bm = self.value(b);
        assert_eq!(bm.rows(), 1, "add_row expects a row vector");
        let mut value = self.value(a).clone();
        assert_eq!(value.cols(), bm.cols(), "add_row width mismatch");
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(bm.row(0)) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::AddRow(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn mul_const(&mut self, a: Var, m: Matrix) -> Var {
        let value = self.value(a).zip_map(&m, |x, y| x * y);
        let rg = self.rg(a);
        self.push(value, Op::MulConst(a, Rc::new(m)), rg)
    }

    /// `m · a` for a constant matrix `m`.
    pub fn left_mul_const(&mut self, m: Matrix, a: Var) -> Var {
        let value = m.matmul(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::LeftMulConst(Rc::new(m), a), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Multiplies `a` by the `1×1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let value = self.value(a).map(|x| x * sv);
        let rg = self.rg(a) || self.rg(s);
        self.push(value, Op::ScaleBy(a, s), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xm = self.value(x);
        let (n, c) = xm.shape();
        let mut xhat = Matrix::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gain).row(0);
        let b = self.value(bias).row(0);
        let mut value = xhat.clone();
        for r in 0..n {
            for ((o, gi), bi) in value.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Row-wise softmax. Masked-out entries (`mask[r * cols + c] == false`)
    /// receive exactly zero weight; a fully masked row is an error.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xm = self.value(x);
        let (n, c) = xm.shape();
        if let Some(m) = mask {
            assert_eq!(m.len(), n * c, "mask shape mismatch");
        }
        let mut value = Matrix::zeros(n, c);
        for r in 0..n {
            let keep = |j: usize| mask.is_none_or(|m| m[r * c + j]);
            let row = xm.row(r);
            let mx = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::DegenerateAttention { row: r });
            }
            let out = value.row_mut(r);
            let mut total = 0.0;
            for j in 0..c {
                if keep(j) {
                    let e = (row[j] - mx).exp();
                    out[j] = e;
                    total += e;
                }
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let (n, c) = xm.shape();
        let mut value = Matrix::zeros(n, c);
        for r in 0..n {
            let row = xm.row(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for (o, v) in value.row_mut(r).iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let (n, c) = xm.shape();
        let mut value = Matrix::zeros(n, c);
        let mut norms = Vec::with_capacity(n);
        for r in 0..n {
            let row = xm.row(r);
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(nr);
            for (o, v) in value.row_mut(r).iter_mut().zip(row) {
                *o = v / nr;
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::L2NormRows { x, norms }, rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice_rows(start, end);
        let rg = self.rg(x);
        self.push(value, Op::SliceRows(x, start), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice_cols(start, end);
        let rg = self.rg(x);
        self.push(value, Op::SliceCols(x, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols(), c, "concat_rows width mismatch");
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Matrix::from_vec(rows, c, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let n = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut value = Matrix::zeros(n, total);
        let mut off = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows(), n, "concat_cols height mismatch");
            for r in 0..n {
                value.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Row lookup: output row `i` is `table[idx[i]]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * t.cols());
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let value = Matrix::from_vec(idx.len(), t.cols(), data);
        let rg = self.rg(table);
        self.push(value, Op::Gather(table, idx.to_vec()), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(value, Op::Transpose(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Weighted sum of `1×1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let t = if w == 1.0 { v } else { self.scale(v, w) };
            acc = Some(match acc {
                None => t,
                Some(a) => self.add(a, t),
            });
        }
        acc.unwrap_or_else(|| self.constant(Matrix::scalar(0.0)))
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let (r, c) = self.value(root).shape();
        grads[root.0] = Some(Matrix::filled(r, c, 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        // Drop intermediates; only leaves are of interest to callers.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Grads {
            nodes: grads,
            params: self.trainable.clone(),
        }
    }

    fn propagate(&self, node: &Node, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, g: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, dy.matmul_t(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t_matmul(dy));
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    acc(*a, dy.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, dy.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, dy.clone());
                if self.rg(*b) {
                    acc(*b, column_sums(dy));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, dy.zip_map(self.value(*b), |g, y| g * y));
                }
                if self.rg(*b) {
                    acc(*b, dy.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::MulConst(a, m) => acc(*a, dy.zip_map(m, |g, y| g * y)),
            Op::LeftMulConst(m, a) => acc(*a, m.t_matmul(dy)),
            Op::Scale(a, s) => acc(*a, dy.map(|g| g * s)),
            Op::ScaleBy(a, s) => {
                let sv = self.scalar(*s);
                if self.rg(*a) {
                    acc(*a, dy.map(|g| g * sv));
                }
                if self.rg(*s) {
                    let d: f64 = dy
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| g * x)
                        .sum();
                    acc(*s, Matrix::scalar(d));
                }
            }
            Op::Exp(a) => acc(*a, dy.zip_map(&node.value, |g, y| g * y)),
            Op::Gelu(a) => acc(*a, dy.zip_map(self.value(*a), |g, x| g * gelu_grad(x))),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let g = self.value(*gain).row(0);
                let (n, c) = dy.shape();
                if self.rg(*x) {
                    let mut dx = Matrix::zeros(n, c);
                    for (r, &inv) in inv_std.iter().enumerate().take(n) {
                        let dyr = dy.row(r);
                        let xr = xhat.row(r);
                        let dxhat: Vec<f64> = dyr.iter().zip(g).map(|(d, gi)| d * gi).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xr).map(|(d, xh)| d * xh).sum();
                        let k = inv / c as f64;
                        for ((o, d), xh) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xr) {
                            *o = k * (c as f64 * d - s1 - xh * s2);
                        }
                    }
                    acc(*x, dx);
                }
                if self.rg(*gain) {
                    acc(*gain, column_sums(&dy.zip_map(xhat, |d, xh| d * xh)));
                }
                if self.rg(*bias) {
                    acc(*bias, column_sums(dy));
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (n, c) = y.shape();
                let mut dx = Matrix::zeros(n, c);
                for r in 0..n {
                    let yr = y.row(r);
                    let dyr = dy.row(r);
                    let dot: f64 = yr.iter().zip(dyr).map(|(p, g)| p * g).sum();
                    for ((o, p), g) in dx.row_mut(r).iter_mut().zip(yr).zip(dyr) {
                        *o = p * (g - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let (n, c) = y.shape();
                let mut dx = Matrix::zeros(n, c);
                for r in 0..n {
                    let dyr = dy.row(r);
                    let total: f64 = dyr.iter().sum();
                    for ((o, ly), g) in dx.row_mut(r).iter_mut().zip(y.row(r)).zip(dyr) {
                        *o = g - ly.exp() * total;
                    }
                }
                acc(*a, dx);
            }
            Op::L2NormRows { x, norms } => {
                let y = &node.value;
                let (n, c) = y.shape();
                let mut dx = Matrix::zeros(n, c);
                for (r, &norm) in norms.iter().enumerate().take(n) {
                    let yr = y.row(r);
                    let dyr = dy.row(r);
                    let dot: f64 = yr.iter().zip(dyr).map(|(p, g)| p * g).sum();
                    for ((o, p), g) in dx.row_mut(r).iter_mut().zip(yr).zip(dyr) {
                        *o = (g - p * dot) / norm;
                    }
                }
                acc(*x, dx);
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut g = Matrix::zeros(src.rows(), src.cols());
                let c = src.cols();
                g.data_mut()[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                acc(*a, g);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut g = Matrix::zeros(src.rows(), src.cols());
                for r in 0..dy.rows() {
                    g.row_mut(r)[*start..start + dy.cols()].copy_from_slice(dy.row(r));
                }
                acc(*a, g);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.rg(*p) {
                        acc(*p, dy.slice_rows(off, off + rows));
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    if self.rg(*p) {
                        acc(*p, dy.slice_cols(off, off + cols));
                    }
                    off += cols;
                }
            }
            Op::Gather(table, idx) => {
                let t = self.value(*table);
                let mut g = Matrix::zeros(t.rows(), t.cols());
                for (i, &row) in idx.iter().enumerate() {
                    for (o, d) in g.row_mut(row).iter_mut().zip(dy.row(i)) {
                        *o += d;
                    }
                }
                acc(*table, g);
            }
            Op::Transpose(a) => acc(*a, dy.transpose()),
            Op::Sum(a) => {
                let src = self.value(*a);
                acc(*a, Matrix::filled(src.rows(), src.cols(), dy[(0, 0)]));
            }
        }
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
}
