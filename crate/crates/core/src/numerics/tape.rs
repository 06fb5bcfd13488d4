//! Tensor-level Wengert tape.
//!
//! Every op records its output value and input node ids. `backward` walks the
//! record in reverse and accumulates vector-Jacobian products. Nodes built only
//! from constants are marked as not needing gradients and are skipped.

use super::prob::log_softmax_rows;
use super::Tensor;
use crate::error::{invalid, Result};

/// Handle to a node on a [`Tape`].
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
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Div(usize, f64),
    Offset(usize),
    Tanh(usize),
    Exp(usize),
    MeanRows(usize),
    GatherRows(usize, Vec<usize>),
    LogSoftmax(usize),
    Pick(usize, Vec<(usize, usize)>),
    Sum(usize),
    Min(usize, usize),
    Clamp(usize, f64, f64),
    Guidance(usize, usize, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Classifier-free guidance on logits: `uncond + s * (cond - uncond)`.
///
/// `s = 1` and `s = 0` return the corresponding input unchanged.
pub(crate) fn guidance_values(cond: &Tensor, uncond: &Tensor, s: f64) -> Tensor {
    if s == 1.0 {
        return cond.clone();
    }
    if s == 0.0 {
        return uncond.clone();
    }
    let mut out = uncond.clone();
    for (o, &c) in out.data_mut().iter_mut().zip(cond.data()) {
        *o += s * (c - *o);
    }
    out
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a.0, b.0), ng))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Min(a.0, b.0), f64::min)
    }

    /// `[n, m] + [m]` (or `[1, m]`) broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.len() != av.cols() {
            return Err(invalid(format!(
                "add_row: row of {} values against {:?}",
                rv.len(),
                av.shape()
            )));
        }
        let mut value = av.clone();
        let bias = rv.data().to_vec();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::AddRow(a.0, row.0), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a.0, c), ng)
    }

    pub fn div_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x / c);
        let ng = self.ng(a);
        self.push(value, Op::Div(a.0, c), ng)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(value, Op::Offset(a.0), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a.0), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a.0), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(value, Op::Clamp(a.0, lo, hi), ng)
    }

    /// Mean over rows: `[n, m] -> [1, m]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, m) = (av.rows(), av.cols());
        let mut out = vec![0.0; m];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(av.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / n as f64;
        for o in &mut out {
            *o *= inv;
        }
        let value = Tensor::new(vec![1, m], out).expect("shape");
        let ng = self.ng(a);
        self.push(value, Op::MeanRows(a.0), ng)
    }

    /// Select rows of a `[r, m]` table: `[k, m]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let m = tv.cols();
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            if i >= tv.rows() {
                return Err(invalid(format!(
                    "gather_rows: index {i} out of range for {} rows",
                    tv.rows()
                )));
            }
            out.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(vec![idx.len(), m], out)?;
        let ng = self.ng(table);
        Ok(self.push(value, Op::GatherRows(table.0, idx.to_vec()), ng))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmax(a.0), ng)
    }

    /// Gather `(row, col)` elements into a vector.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let av = self.value(a);
        let mut out = Vec::with_capacity(at.len());
        for &(r, c) in at {
            if r >= av.rows() || c >= av.cols() {
                return Err(invalid(format!("pick: ({r}, {c}) outside {:?}", av.shape())));
            }
            out.push(av.get2(r, c));
        }
        let value = Tensor::vector(out);
        let ng = self.ng(a);
        Ok(self.push(value, Op::Pick(a.0, at.to_vec()), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a.0), ng)
    }

    /// Sum of scalar nodes, left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let first = *iter
            .next()
            .ok_or_else(|| invalid("add_all: no terms"))?;
        let mut acc = first;
        for &t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Classifier-free guidance combination of two logit nodes.
    pub fn guidance(&mut self, cond: Var, uncond: Var, s: f64) -> Result<Var> {
        let (cv, uv) = (self.value(cond), self.value(uncond));
        if !cv.same_shape(uv) {
            return Err(invalid("guidance: shape mismatch"));
        }
        let value = guidance_values(cv, uv, s);
        let ng = self.ng(cond) || self.ng(uncond);
        Ok(self.push(value, Op::Guidance(cond.0, uncond.0, s), ng))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |j: usize, delta: Tensor| {
            if !nodes[j].needs_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if nodes[*a].needs_grad {
                    let mut da = vec![0.0; n * k];
                    for r in 0..n {
                        let gr = &g.data()[r * m..(r + 1) * m];
                        for p in 0..k {
                            let br = &bv.data()[p * m..(p + 1) * m];
                            da[r * k + p] = gr.iter().zip(br).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(*a, Tensor::new(av.shape().to_vec(), da).expect("shape"));
                }
                if nodes[*b].needs_grad {
                    let mut db = vec![0.0; k * m];
                    for r in 0..n {
                        let gr = &g.data()[r * m..(r + 1) * m];
                        let ar = &av.data()[r * k..(r + 1) * k];
                        for (p, &a_rp) in ar.iter().enumerate() {
                            if a_rp == 0.0 {
                                continue;
                            }
                            for (d, &gv) in db[p * m..(p + 1) * m].iter_mut().zip(gr) {
                                *d += a_rp * gv;
                            }
                        }
                    }
                    acc(*b, Tensor::new(bv.shape().to_vec(), db).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                acc(*a, g.zip_map(bv, |x, y| x * y).expect("shape"));
                acc(*b, g.zip_map(av, |x, y| x * y).expect("shape"));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let rv = &nodes[*row].value;
                let mut dr = vec![0.0; rv.len()];
                for r in 0..g.rows() {
                    for (d, v) in dr.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                acc(*row, Tensor::new(rv.shape().to_vec(), dr).expect("shape"));
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::Div(a, c) => acc(*a, g.map(|x| x / c)),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::Tanh(a) => {
                acc(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y)).expect("shape"));
            }
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y).expect("shape")),
            Op::MeanRows(a) => {
                let av = &nodes[*a].value;
                let inv = 1.0 / av.rows() as f64;
                let mut d = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    for (o, v) in d.row_mut(r).iter_mut().zip(g.data()) {
                        *o = v * inv;
                    }
                }
                acc(*a, d);
            }
            Op::GatherRows(table, idx) => {
                let tv = &nodes[*table].value;
                let mut d = Tensor::zeros(tv.shape());
                for (k, &r) in idx.iter().enumerate() {
                    for (o, v) in d.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*table, d);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut d = g.clone();
                for r in 0..y.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (o, &yv) in d.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o -= yv.exp() * gsum;
                    }
                }
                acc(*a, d);
            }
            Op::Pick(a, at) => {
                let av = &nodes[*a].value;
                let mut d = Tensor::zeros(av.shape());
                let cols = av.cols();
                for (k, &(r, c)) in at.iter().enumerate() {
                    d.data_mut()[r * cols + c] += g.data()[k];
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let av = &nodes[*a].value;
                acc(*a, Tensor::full(av.shape(), g.item()));
            }
            Op::Min(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let mut da = g.clone();
                let mut db = g.clone();
                for k in 0..g.len() {
                    if av.data()[k] <= bv.data()[k] {
                        db.data_mut()[k] = 0.0;
                    } else {
                        da.data_mut()[k] = 0.0;
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Clamp(a, lo, hi) => {
                let av = &nodes[*a].value;
                acc(
                    *a,
                    g.zip_map(av, |x, v| if v >= *lo && v <= *hi { x } else { 0.0 })
                        .expect("shape"),
                );
            }
            Op::Guidance(c, u, s) => {
                if *s == 1.0 {
                    acc(*c, g.clone());
                } else if *s == 0.0 {
                    acc(*u, g.clone());
                } else {
                    acc(*c, g.map(|x| x * s));
                    acc(*u, g.map(|x| x * (1.0 - s)));
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}
