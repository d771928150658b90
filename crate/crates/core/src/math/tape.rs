//! Reverse-mode differentiation over small dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are appended
//! in evaluation order, so a single backward sweep in reverse index order is a
//! valid topological traversal. Parameters enter the tape once per pass through
//! [`Tape::param`]; after [`Tape::backward`] their gradients are added to the
//! owning [`ParamSet`] with [`Tape::accumulate`].

use std::collections::HashMap;

use super::matrix::{matmul_into, Matrix};
use super::params::ParamSet;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumCols(Var),
    SumRows(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Gather(Var, Vec<usize>),
    RepeatRows(Var, usize),
    TileRows(Var, usize),
    GroupSum(Var, usize),
    Transpose(Var),
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
    Min(Var, Var),
    Reshape(Var),
    SegmentSum(Var, Vec<usize>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_vars: HashMap<usize, Var>,
}

#[inline]
fn bidx(b: &Matrix, i: usize, j: usize) -> usize {
    let r = if b.rows == 1 { 0 } else { i };
    let c = if b.cols == 1 { 0 } else { j };
    r * b.cols + c
}

fn check_broadcast(a: &Matrix, b: &Matrix, what: &str) {
    assert!(
        (b.rows == a.rows || b.rows == 1) && (b.cols == a.cols || b.cols == 1),
        "{what}: cannot broadcast {}x{} onto {}x{}",
        b.rows,
        b.cols,
        a.rows,
        a.cols
    );
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn row(&mut self, data: &[f64]) -> Var {
        self.constant(Matrix::row_vector(data.to_vec()))
    }

    /// Loads a named parameter; repeated calls within one pass return the same node.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        let idx = params.index_of(name)?;
        if let Some(v) = self.param_vars.get(&idx) {
            return Ok(*v);
        }
        let v = self.push(params.value_at(idx).data.clone(), Op::Leaf, true);
        self.param_vars.insert(idx, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            av.cols, bv.rows,
            "matmul {}x{} by {}x{}",
            av.rows, av.cols, bv.rows, bv.cols
        );
        let mut out = Matrix::zeros(av.rows, bv.cols);
        matmul_into(av, bv, &mut out.data);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    fn zip_bcast(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        check_broadcast(av, bv, what);
        let mut out = av.clone();
        for i in 0..av.rows {
            for j in 0..av.cols {
                let k = i * av.cols + j;
                out.data[k] = f(av.data[k], bv.data[bidx(bv, i, j)]);
            }
        }
        out
    }

    /// `a + b`, with `b` broadcast over rows and/or columns when it has extent 1.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_bcast(a, b, "add", |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_bcast(a, b, "sub", |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_bcast(a, b, "mul", |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Element-wise minimum with broadcasting; the gradient follows the selected side.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_bcast(a, b, "min", f64::min);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Min(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        out.data.iter_mut().for_each(|x| *x *= c);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        out.data.iter_mut().for_each(|x| *x += c);
        let ng = self.ng(&[a]);
        self.push(out, Op::AddScalar(a), ng)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        out.data.iter_mut().for_each(|x| *x = f(*x));
        let ng = self.ng(&[a]);
        self.push(out, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Sum of every entry, as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        let ng = self.ng(&[a]);
        self.push(Matrix::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums, `rows × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let data = (0..av.rows).map(|i| av.row(i).iter().sum()).collect();
        let out = Matrix::from_vec(av.rows, 1, data);
        let ng = self.ng(&[a]);
        self.push(out, Op::SumCols(a), ng)
    }

    /// Per-column sums, `1 × cols`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let mut out = Matrix::zeros(1, av.cols);
        for i in 0..av.rows {
            for (o, x) in out.data.iter_mut().zip(av.row(i)) {
                *o += x;
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::SumRows(a), ng)
    }

    /// Column-wise concatenation of nodes sharing a row count.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.nodes[parts[0].0].value.rows;
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.rows, rows, "concat rows {} vs {}", pv.rows, rows);
            for i in 0..rows {
                out.data[i * cols + off..i * cols + off + pv.cols].copy_from_slice(pv.row(i));
            }
            off += pv.cols;
        }
        let ng = self.ng(parts);
        self.push(out, Op::Concat(parts.to_vec()), ng)
    }

    /// Columns `start .. start + len`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert!(
            start + len <= av.cols,
            "slice {}..{} of {} columns",
            start,
            start + len,
            av.cols
        );
        let mut out = Matrix::zeros(av.rows, len);
        for i in 0..av.rows {
            out.row_mut(i).copy_from_slice(&av.row(i)[start..start + len]);
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::Slice(a, start), ng)
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = &self.nodes[table.0].value;
        let mut out = Matrix::zeros(ids.len(), tv.cols);
        for (k, &id) in ids.iter().enumerate() {
            assert!(id < tv.rows, "gather id {id} out of {} rows", tv.rows);
            out.row_mut(k).copy_from_slice(tv.row(id));
        }
        let ng = self.ng(&[table]);
        self.push(out, Op::Gather(table, ids.to_vec()), ng)
    }

    /// Each row repeated `k` times consecutively: `[r0, r0, .., r1, r1, ..]`.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let mut out = Matrix::zeros(av.rows * k, av.cols);
        for i in 0..av.rows {
            for r in 0..k {
                out.row_mut(i * k + r).copy_from_slice(av.row(i));
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::RepeatRows(a, k), ng)
    }

    /// The whole block stacked `k` times: `[r0, r1, .., r0, r1, ..]`.
    pub fn tile_rows(&mut self, a: Var, k: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let mut out = Matrix::zeros(av.rows * k, av.cols);
        for r in 0..k {
            out.data[r * av.len()..(r + 1) * av.len()].copy_from_slice(&av.data);
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::TileRows(a, k), ng)
    }

    /// Sums each run of `k` consecutive rows.
    pub fn group_sum(&mut self, a: Var, k: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert!(k > 0 && av.rows % k == 0, "group_sum of {} rows by {k}", av.rows);
        let groups = av.rows / k;
        let mut out = Matrix::zeros(groups, av.cols);
        for g in 0..groups {
            for r in 0..k {
                let src = av.row(g * k + r);
                for (o, x) in out.row_mut(g).iter_mut().zip(src) {
                    *o += x;
                }
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::GroupSum(a, k), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.transpose();
        let ng = self.ng(&[a]);
        self.push(out, Op::Transpose(a), ng)
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let mut out = av.clone();
        for i in 0..av.rows {
            let row = out.row_mut(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// One entry per row, `rows × 1`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(idx.len(), av.rows, "pick needs one index per row");
        let data = idx.iter().enumerate().map(|(i, &j)| av.get(i, j)).collect();
        let out = Matrix::from_vec(av.rows, 1, data);
        let ng = self.ng(&[a]);
        self.push(out, Op::Pick(a, idx.to_vec()), ng)
    }

    /// Same data, new shape (row-major order is kept).
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(
            av.len(),
            rows * cols,
            "reshape {}x{} to {rows}x{cols}",
            av.rows,
            av.cols
        );
        let out = Matrix::from_vec(rows, cols, av.data.clone());
        let ng = self.ng(&[a]);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Row `i` of `a` is added into output row `segments[i]`.
    pub fn segment_sum(&mut self, a: Var, segments: &[usize], n_segments: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(segments.len(), av.rows, "segment_sum needs one segment per row");
        let mut out = Matrix::zeros(n_segments, av.cols);
        for (r, &s) in segments.iter().enumerate() {
            assert!(s < n_segments, "segment {s} out of {n_segments}");
            for (o, x) in out.row_mut(s).iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::SegmentSum(a, segments.to_vec()), ng)
    }

    fn grad_mut(&mut self, v: Var) -> &mut Vec<f64> {
        let n = self.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    /// Back-propagates from a `1 × 1` output node.
    pub fn backward(&mut self, out: Var) {
        assert_eq!(self.nodes[out.0].value.len(), 1, "backward needs a scalar output");
        self.grads = vec![None; self.nodes.len()];
        self.grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k, n) = {
                    let av = &self.nodes[a.0].value;
                    (av.rows, av.cols, self.nodes[b.0].value.cols)
                };
                if self.needs(a) {
                    let bv = self.nodes[b.0].value.data.clone();
                    let ga = self.grad_mut(a);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for c in 0..k {
                            let brow = &bv[c * n..(c + 1) * n];
                            ga[r * k + c] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if self.needs(b) {
                    let av = self.nodes[a.0].value.data.clone();
                    let gb = self.grad_mut(b);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for c in 0..k {
                            let x = av[r * k + c];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[c * n..(c + 1) * n].iter_mut().zip(grow) {
                                *o += x * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if self.needs(a) {
                    let ga = self.grad_mut(a);
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                if self.needs(b) {
                    let (rows, cols) = self.nodes[i].value.shape();
                    let bm = Matrix::zeros(self.nodes[b.0].value.rows, self.nodes[b.0].value.cols);
                    let gb = self.grad_mut(b);
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[bidx(&bm, r, c)] += sign * g[r * cols + c];
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (rows, cols) = self.nodes[i].value.shape();
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                if self.needs(a) {
                    let ga = self.grad_mut(a);
                    for r in 0..rows {
                        for c in 0..cols {
                            let k = r * cols + c;
                            ga[k] += g[k] * bv.data[bidx(&bv, r, c)];
                        }
                    }
                }
                if self.needs(b) {
                    let gb = self.grad_mut(b);
                    for r in 0..rows {
                        for c in 0..cols {
                            let k = r * cols + c;
                            gb[bidx(&bv, r, c)] += g[k] * av.data[k];
                        }
                    }
                }
            }
            Op::Min(a, b) => {
                let (rows, cols) = self.nodes[i].value.shape();
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                let take_a: Vec<bool> = (0..rows * cols)
                    .map(|k| av.data[k] <= bv.data[bidx(&bv, k / cols, k % cols)])
                    .collect();
                if self.needs(a) {
                    let ga = self.grad_mut(a);
                    for k in 0..rows * cols {
                        if take_a[k] {
                            ga[k] += g[k];
                        }
                    }
                }
                if self.needs(b) {
                    let gb = self.grad_mut(b);
                    for k in 0..rows * cols {
                        if !take_a[k] {
                            gb[bidx(&bv, k / cols, k % cols)] += g[k];
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = self.grad_mut(a);
                ga.iter_mut().zip(g).for_each(|(o, x)| *o += c * x);
            }
            Op::AddScalar(a) => {
                let ga = self.grad_mut(a);
                ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].value.data.clone();
                let ga = self.grad_mut(a);
                for ((o, x), yv) in ga.iter_mut().zip(g).zip(&y) {
                    *o += x * (1.0 - yv * yv);
                }
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data.clone();
                let ga = self.grad_mut(a);
                for ((o, x), yv) in ga.iter_mut().zip(g).zip(&y) {
                    *o += x * yv * (1.0 - yv);
                }
            }
            Op::Exp(a) => {
                let y = self.nodes[i].value.data.clone();
                let ga = self.grad_mut(a);
                for ((o, x), yv) in ga.iter_mut().zip(g).zip(&y) {
                    *o += x * yv;
                }
            }
            Op::Softplus(a) => {
                let xin = self.nodes[a.0].value.data.clone();
                let ga = self.grad_mut(a);
                for ((o, x), v) in ga.iter_mut().zip(g).zip(&xin) {
                    *o += x * sigmoid(*v);
                }
            }
            Op::Square(a) => {
                let xin = self.nodes[a.0].value.data.clone();
                let ga = self.grad_mut(a);
                for ((o, x), v) in ga.iter_mut().zip(g).zip(&xin) {
                    *o += 2.0 * v * x;
                }
            }
            Op::Clamp(a, lo, hi) => {
                let xin = self.nodes[a.0].value.data.clone();
                let ga = self.grad_mut(a);
                for ((o, x), v) in ga.iter_mut().zip(g).zip(&xin) {
                    if *v >= lo && *v <= hi {
                        *o += x;
                    }
                }
            }
            Op::Sum(a) => {
                let ga = self.grad_mut(a);
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::SumCols(a) => {
                let cols = self.nodes[a.0].value.cols;
                let ga = self.grad_mut(a);
                for (k, o) in ga.iter_mut().enumerate() {
                    *o += g[k / cols];
                }
            }
            Op::SumRows(a) => {
                let cols = self.nodes[a.0].value.cols;
                let ga = self.grad_mut(a);
                for (k, o) in ga.iter_mut().enumerate() {
                    *o += g[k % cols];
                }
            }
            Op::Concat(parts) => {
                let cols = self.nodes[i].value.cols;
                let rows = self.nodes[i].value.rows;
                let mut off = 0;
                for p in parts {
                    let pc = self.nodes[p.0].value.cols;
                    if self.needs(p) {
                        let gp = self.grad_mut(p);
                        for r in 0..rows {
                            for c in 0..pc {
                                gp[r * pc + c] += g[r * cols + off + c];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::Slice(a, start) => {
                let (rows, len) = self.nodes[i].value.shape();
                let acols = self.nodes[a.0].value.cols;
                let ga = self.grad_mut(a);
                for r in 0..rows {
                    for c in 0..len {
                        ga[r * acols + start + c] += g[r * len + c];
                    }
                }
            }
            Op::Gather(t, ids) => {
                let cols = self.nodes[t.0].value.cols;
                let gt = self.grad_mut(t);
                for (k, id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        gt[id * cols + c] += g[k * cols + c];
                    }
                }
            }
            Op::RepeatRows(a, k) => {
                let (rows, cols) = self.nodes[a.0].value.shape();
                let ga = self.grad_mut(a);
                for r in 0..rows {
                    for rep in 0..k {
                        let src = (r * k + rep) * cols;
                        for c in 0..cols {
                            ga[r * cols + c] += g[src + c];
                        }
                    }
                }
            }
            Op::TileRows(a, k) => {
                let n = self.nodes[a.0].value.len();
                let ga = self.grad_mut(a);
                for rep in 0..k {
                    for (o, x) in ga.iter_mut().zip(&g[rep * n..(rep + 1) * n]) {
                        *o += x;
                    }
                }
            }
            Op::GroupSum(a, k) => {
                let cols = self.nodes[a.0].value.cols;
                let ga = self.grad_mut(a);
                for (idx, o) in ga.iter_mut().enumerate() {
                    let r = idx / cols;
                    *o += g[(r / k) * cols + idx % cols];
                }
            }
            Op::Transpose(a) => {
                let (rows, cols) = self.nodes[a.0].value.shape();
                let ga = self.grad_mut(a);
                for r in 0..rows {
                    for c in 0..cols {
                        ga[r * cols + c] += g[c * rows + r];
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = self.nodes[i].value.clone();
                let ga = self.grad_mut(a);
                for r in 0..y.rows {
                    let grow = &g[r * y.cols..(r + 1) * y.cols];
                    let gsum: f64 = grow.iter().sum();
                    for c in 0..y.cols {
                        ga[r * y.cols + c] += grow[c] - y.get(r, c).exp() * gsum;
                    }
                }
            }
            Op::Pick(a, idx) => {
                let cols = self.nodes[a.0].value.cols;
                let ga = self.grad_mut(a);
                for (r, j) in idx.iter().enumerate() {
                    ga[r * cols + j] += g[r];
                }
            }
            Op::Reshape(a) => {
                let ga = self.grad_mut(a);
                ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
            }
            Op::SegmentSum(a, segments) => {
                let cols = self.nodes[a.0].value.cols;
                let ga = self.grad_mut(a);
                for (r, s) in segments.iter().enumerate() {
                    for c in 0..cols {
                        ga[r * cols + c] += g[s * cols + c];
                    }
                }
            }
        }
    }

    /// Gradient of the last backward output with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients from the last backward pass into `params`.
    pub fn accumulate(&self, params: &mut ParamSet) {
        for (&idx, &v) in &self.param_vars {
            if let Some(g) = self.grad(v) {
                params.add_grad(idx, g);
            }
        }
    }
}
