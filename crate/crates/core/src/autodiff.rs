//! Reverse-mode differentiation over a fixed set of dense matrix operations.
//!
//! A [`Tape`] records every operation as it is evaluated; [`Tape::backward`]
//! then walks the record in reverse and accumulates adjoints. Only nodes that
//! depend on a parameter leaf take part in the backward sweep.

use std::rc::Rc;

use crate::tensor::{gemm, Tensor};

/// A linear map that equals its own adjoint, applied column-wise to `N x F`
/// inputs.
pub trait SymmetricOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &Tensor) -> Tensor;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Tensor>),
    AddConst(Var),
    Silu(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Hcat(Vec<Var>),
    LayerNorm(Var, Vec<f64>),
    Operator(Var, Rc<dyn SymmetricOperator>),
    Embed { table: Var, null: Var, ids: Rc<Vec<Option<usize>>> },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub const LAYER_NORM_EPS: f64 = 1e-10;

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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.rows(), "matmul inner dimension");
        let mut out = Tensor::zeros(va.rows(), vb.cols());
        gemm(false, va, false, vb, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `a + b` with the `1 x F` row `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((1, va.cols()), vb.shape(), "row broadcast shape");
        let mut out = va.clone();
        for i in 0..out.rows() {
            for (o, &r) in out.row_mut(i).iter_mut().zip(vb.data()) {
                *o += r;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddRow(a, b), rg)
    }

    /// `a * b` with the `1 x F` row `b` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((1, va.cols()), vb.shape(), "row broadcast shape");
        let mut out = va.clone();
        for i in 0..out.rows() {
            for (o, &r) in out.row_mut(i).iter_mut().zip(vb.data()) {
                *o *= r;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MulRow(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        assert_eq!(self.value(a).shape(), c.shape(), "mul_const shape");
        let out = self.value(a).zip_map(&c, |x, y| x * y);
        let rg = self.rg(a);
        self.push(out, Op::MulConst(a, Rc::new(c)), rg)
    }

    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        assert_eq!(self.value(a).shape(), c.shape(), "add_const shape");
        let out = self.value(a).zip_map(c, |x, y| x + y);
        let rg = self.rg(a);
        self.push(out, Op::AddConst(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(silu);
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(out, Op::Clamp(a, lo, hi), rg)
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::hcat(&values).expect("hcat row counts");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Hcat(parts.to_vec()), rg)
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let f = va.cols() as f64;
        let mut out = va.clone();
        let mut inv_std = Vec::with_capacity(va.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / f;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / f;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm(a, inv_std), rg)
    }

    pub fn apply_operator(&mut self, a: Var, op: Rc<dyn SymmetricOperator>) -> Var {
        assert_eq!(self.value(a).rows(), op.dim(), "operator dimension");
        let out = op.apply(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::Operator(a, op), rg)
    }

    /// Row lookup into `table`; rows with `None` read the `1 x E` `null` row.
    pub fn embed(&mut self, table: Var, null: Var, ids: Vec<Option<usize>>) -> Var {
        let (vt, vn) = (self.value(table), self.value(null));
        assert_eq!(vt.cols(), vn.cols(), "embedding widths");
        let mut out = Tensor::zeros(ids.len(), vt.cols());
        for (i, id) in ids.iter().enumerate() {
            let src = match id {
                Some(k) => vt.row(*k),
                None => vn.row(0),
            };
            out.row_mut(i).copy_from_slice(src);
        }
        let rg = self.rg(table) || self.rg(null);
        self.push(out, Op::Embed { table, null, ids: Rc::new(ids) }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Adjoints of the scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let mut da = Tensor::zeros(va.rows(), va.cols());
                        gemm(false, &g, true, vb, &mut da, 0.0);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let mut db = Tensor::zeros(vb.rows(), vb.cols());
                        gemm(true, va, false, &g, &mut db, 0.0);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.scale(-1.0));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                    }
                }
                Op::AddRow(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, column_sums(&g));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::MulRow(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, column_sums(&g.zip_map(va, |x, y| x * y)));
                    }
                    if self.rg(*a) {
                        let mut da = g;
                        for i in 0..da.rows() {
                            for (d, &r) in da.row_mut(i).iter_mut().zip(vb.data()) {
                                *d *= r;
                            }
                        }
                        accumulate(&mut grads, *a, da);
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c)),
                Op::MulConst(a, c) => accumulate(&mut grads, *a, g.zip_map(c, |x, y| x * y)),
                Op::AddConst(a) => accumulate(&mut grads, *a, g),
                Op::Silu(a) => {
                    let da = g.zip_map(self.value(*a), |d, x| d * silu_grad(x));
                    accumulate(&mut grads, *a, da);
                }
                Op::Exp(a) => {
                    let da = g.zip_map(&node.value, |d, y| d * y);
                    accumulate(&mut grads, *a, da);
                }
                Op::Clamp(a, lo, hi) => {
                    let da = g.zip_map(self.value(*a), |d, x| if x >= *lo && x <= *hi { d } else { 0.0 });
                    accumulate(&mut grads, *a, da);
                }
                Op::Hcat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if self.rg(*p) {
                            let idx: Vec<usize> = (offset..offset + w).collect();
                            accumulate(&mut grads, *p, g.select_cols(&idx));
                        }
                        offset += w;
                    }
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let f = y.cols() as f64;
                    let mut da = g;
                    for i in 0..da.rows() {
                        let yr = y.row(i);
                        let dr = da.row_mut(i);
                        let mean_d = dr.iter().sum::<f64>() / f;
                        let mean_dy = dr.iter().zip(yr).map(|(d, y)| d * y).sum::<f64>() / f;
                        for (d, &yv) in dr.iter_mut().zip(yr) {
                            *d = inv_std[i] * (*d - mean_d - yv * mean_dy);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Operator(a, op) => accumulate(&mut grads, *a, op.apply(&g)),
                Op::Embed { table, null, ids } => {
                    let vt = self.value(*table);
                    let mut dt = Tensor::zeros(vt.rows(), vt.cols());
                    let mut dn = Tensor::zeros(1, vt.cols());
                    for (i, id) in ids.iter().enumerate() {
                        let dst = match id {
                            Some(k) => dt.row_mut(*k),
                            None => dn.row_mut(0),
                        };
                        for (d, s) in dst.iter_mut().zip(g.row(i)) {
                            *d += s;
                        }
                    }
                    if self.rg(*table) {
                        accumulate(&mut grads, *table, dt);
                    }
                    if self.rg(*null) {
                        accumulate(&mut grads, *null, dn);
                    }
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Tensor::full(r, c, g.item()));
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Tensor::full(r, c, g.item() / (r * c) as f64));
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}
