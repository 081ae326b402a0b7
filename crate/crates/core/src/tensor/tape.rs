//! Tape-recorded reverse-mode differentiation over [`Tensor`] values.
//!
//! The op vocabulary is closed: exactly what the dual VAE objective needs.
//! Every node keeps its own forward value; backward rules read the values of
//! their inputs (by node id) and, where cheaper, their own output
//! (sigmoid, tanh, exp, softmax, row normalization).
//!
//! Broadcasting is limited to the right-hand operand of `add`, `sub` and
//! `mul`, which may be a `1 × 1` scalar or a `1 × cols` row.

use super::dense::{Tensor, NORM_FLOOR};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    DotRows(Var, Var, Bcast),
    NormalizeRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Single-owner record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node of the tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn is_zero(&self, v: Var) -> bool {
        self.grads[v.0]
            .as_ref()
            .is_none_or(|g| g.data().iter().all(|&x| x == 0.0))
    }
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

    /// Trainable input; receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Frozen input; never receives a gradient and nothing downstream of it
    /// alone is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let tracked = self.tracked_any(&[x]);
        self.push(value, op, tracked)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let tracked = self.tracked_any(&[a, b]);
        self.push(value, op, tracked)
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(Bcast::Same)
        } else if sb == [1, 1] {
            Ok(Bcast::Scalar)
        } else if sb[0] == 1 && sb[1] == sa[1] {
            Ok(Bcast::Row)
        } else {
            Err(Error::Dimension {
                op,
                left: sa,
                right: sb,
            })
        }
    }

    fn broadcast_apply(&self, a: Var, b: Var, mode: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        match mode {
            Bcast::Same => av.zip_map(bv, f),
            Bcast::Scalar => {
                let k = bv.item();
                av.map(|x| f(x, k))
            }
            Bcast::Row => {
                let mut out = av.clone();
                let row = bv.data();
                for r in 0..out.rows() {
                    for (o, &k) in out.row_slice_mut(r).iter_mut().zip(row) {
                        *o = f(*o, k);
                    }
                }
                out
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.unary(x, value, Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = self.bcast("add", a, b)?;
        let value = self.broadcast_apply(a, b, mode, |x, y| x + y);
        Ok(self.binary(a, b, value, Op::Add(a, b, mode)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = self.bcast("sub", a, b)?;
        let value = self.broadcast_apply(a, b, mode, |x, y| x - y);
        Ok(self.binary(a, b, value, Op::Sub(a, b, mode)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = self.bcast("mul", a, b)?;
        let value = self.broadcast_apply(a, b, mode, |x, y| x * y);
        Ok(self.binary(a, b, value, Op::Mul(a, b, mode)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).scaled(k);
        self.unary(x, value, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).map(|v| v + k);
        self.unary(x, value, Op::AddScalar(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.unary(x, value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.unary(x, value, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.unary(x, value, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let value = self.value(x).map(f64::ln);
        Ok(self.unary(x, value, Op::Log(x)))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.unary(x, value, Op::Clamp(x, lo, hi))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).softmax_rows();
        self.unary(x, value, Op::SoftmaxRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.unary(x, value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len().max(1) as f64);
        self.unary(x, value, Op::Mean(x))
    }

    /// `rows × cols` → `rows × 1`
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let value = Tensor::from_vec(t.rows(), 1, data).expect("shape");
        self.unary(x, value, Op::SumRows(x))
    }

    /// Row-paired inner products; `b` may be a single broadcast row.
    pub fn dot_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = self.bcast("dot_rows", a, b)?;
        if mode == Bcast::Scalar && self.value(a).cols() != 1 {
            return Err(Error::Dimension {
                op: "dot_rows",
                left: self.value(a).shape(),
                right: [1, 1],
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let data = (0..av.rows())
            .map(|r| {
                let br = if mode == Bcast::Same { bv.row_slice(r) } else { bv.row_slice(0) };
                av.row_slice(r).iter().zip(br).map(|(x, y)| x * y).sum()
            })
            .collect();
        let value = Tensor::from_vec(av.rows(), 1, data).expect("shape");
        Ok(self.binary(a, b, value, Op::DotRows(a, b, mode)))
    }

    /// Rows scaled to unit norm. A row with norm below the floor maps to
    /// zero and passes no gradient.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).normalize_rows();
        self.unary(x, value, Op::NormalizeRows(x))
    }

    /// Row-paired cosine similarity (`rows × 1`); zero-norm rows give 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.normalize_rows(a);
        let nb = self.normalize_rows(b);
        self.dot_rows(na, nb)
    }

    /// All-pairs cosine similarity, `rows(a) × rows(b)`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.normalize_rows(a);
        let nb = self.normalize_rows(b);
        let nbt = self.transpose(nb);
        self.matmul(na, nbt)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start > end || end > t.cols() {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: t.shape(),
                right: [start, end],
            });
        }
        let value = t.slice_cols(start, end);
        Ok(self.unary(x, value, Op::SliceCols(x, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s[0] != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: [rows, cols],
                    right: s,
                });
            }
            cols += s[1];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let value = Tensor::from_vec(rows, cols, data)?;
        let tracked = self.tracked_any(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), tracked))
    }

    /// Reverse pass from a `1 × 1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_shape = self.value(root).shape();
        if root_shape != [1, 1] {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got {root_shape:?}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.is_tracked(*a) {
                    accumulate(grads, *a, g.matmul_t(bv).expect("shape"));
                }
                if self.is_tracked(*b) {
                    accumulate(grads, *b, av.t_matmul(g).expect("shape"));
                }
            }
            Op::Transpose(x) => accumulate(grads, *x, g.transpose()),
            Op::Add(a, b, mode) => {
                self.accumulate_tracked(grads, *a, g.clone());
                if self.is_tracked(*b) {
                    accumulate(grads, *b, reduce_bcast(g, *mode));
                }
            }
            Op::Sub(a, b, mode) => {
                self.accumulate_tracked(grads, *a, g.clone());
                if self.is_tracked(*b) {
                    accumulate(grads, *b, reduce_bcast(&g.scaled(-1.0), *mode));
                }
            }
            Op::Mul(a, b, mode) => {
                if self.is_tracked(*a) {
                    let ga = self.broadcast_apply_to(g, *b, *mode, |gv, bv| gv * bv);
                    accumulate(grads, *a, ga);
                }
                if self.is_tracked(*b) {
                    let prod = g.zip_map(self.value(*a), |gv, av| gv * av);
                    accumulate(grads, *b, reduce_bcast(&prod, *mode));
                }
            }
            Op::Scale(x, k) => accumulate(grads, *x, g.scaled(*k)),
            Op::AddScalar(x) => accumulate(grads, *x, g.clone()),
            Op::Sigmoid(x) => accumulate(grads, *x, g.zip_map(out, |gv, s| gv * s * (1.0 - s))),
            Op::Tanh(x) => accumulate(grads, *x, g.zip_map(out, |gv, t| gv * (1.0 - t * t))),
            Op::Exp(x) => accumulate(grads, *x, g.zip_map(out, |gv, e| gv * e)),
            Op::Log(x) => accumulate(grads, *x, g.zip_map(self.value(*x), |gv, v| gv / v)),
            Op::Clamp(x, lo, hi) => {
                let gx = g.zip_map(self.value(*x), |gv, v| if v < *lo || v > *hi { 0.0 } else { gv });
                accumulate(grads, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let mut gx = g.clone();
                for r in 0..out.rows() {
                    let s = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &sv), &gv) in gx.row_slice_mut(r).iter_mut().zip(s).zip(gr) {
                        *o = sv * (gv - dot);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let [r, c] = self.value(*x).shape();
                accumulate(grads, *x, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(x) => {
                let [r, c] = self.value(*x).shape();
                accumulate(grads, *x, Tensor::filled(r, c, g.item() / (r * c).max(1) as f64));
            }
            Op::SumRows(x) => {
                let [r, c] = self.value(*x).shape();
                accumulate(grads, *x, Tensor::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::DotRows(a, b, mode) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let gcol = g.data();
                if self.is_tracked(*a) {
                    let ga = if *mode == Bcast::Same {
                        bv.mul_col_broadcast(gcol)
                    } else {
                        let mut t = Tensor::zeros(av.rows(), av.cols());
                        for r in 0..av.rows() {
                            for (o, &bvv) in t.row_slice_mut(r).iter_mut().zip(bv.row_slice(0)) {
                                *o = gcol[r] * bvv;
                            }
                        }
                        t
                    };
                    accumulate(grads, *a, ga);
                }
                if self.is_tracked(*b) {
                    let prod = av.mul_col_broadcast(gcol);
                    accumulate(grads, *b, reduce_bcast(&prod, *mode));
                }
            }
            Op::NormalizeRows(x) => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let xr = xv.row_slice(r);
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm <= NORM_FLOOR {
                        continue;
                    }
                    let yr = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in gx.row_slice_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * dot) / norm;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    gx.row_slice_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row_slice(r));
                }
                accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let width = self.value(*p).cols();
                    if self.is_tracked(*p) {
                        accumulate(grads, *p, g.slice_cols(offset, offset + width));
                    }
                    offset += width;
                }
            }
        }
    }

    fn accumulate_tracked(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.is_tracked(v) {
            accumulate(grads, v, g);
        }
    }

    fn broadcast_apply_to(&self, g: &Tensor, b: Var, mode: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let bv = self.value(b);
        match mode {
            Bcast::Same => g.zip_map(bv, f),
            Bcast::Scalar => {
                let k = bv.item();
                g.map(|x| f(x, k))
            }
            Bcast::Row => {
                let mut out = g.clone();
                for r in 0..out.rows() {
                    for (o, &k) in out.row_slice_mut(r).iter_mut().zip(bv.data()) {
                        *o = f(*o, k);
                    }
                }
                out
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn reduce_bcast(g: &Tensor, mode: Bcast) -> Tensor {
    match mode {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Tensor::scalar(g.sum()),
        Bcast::Row => {
            let mut acc = vec![0.0; g.cols()];
            for r in 0..g.rows() {
                for (a, v) in acc.iter_mut().zip(g.row_slice(r)) {
                    *a += v;
                }
            }
            Tensor::row(&acc)
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
