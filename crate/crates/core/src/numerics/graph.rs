//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! Nodes are appended in evaluation order, so the tape is topologically sorted
//! by construction and `backward` is a single reverse sweep.

use std::borrow::Cow;

use super::params::{Grads, ParamStore};
use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var, Var),
    MulCol(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Sigmoid(Var),
    Gelu(Var),
    Log { x: Var, floor: T },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Gather { x: Var, rows: Vec<usize> },
    SumRows { x: Var, rows: Vec<usize> },
    MaxRows { x: Var, argmax: Vec<usize> },
    SelectCols { x: Var, cols: Vec<usize> },
    Pick { x: Var, at: Vec<(usize, usize)> },
    SumAll(Var),
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    param: Option<usize>,
    needs_grad: bool,
}

/// Computation graph for one forward pass.
///
/// Parameters are borrowed from a [`ParamStore`]; `backward` writes their
/// gradients into a [`Grads`] buffer aligned with that store.
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    store: Option<&'a ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<'a, T: Real> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), store: None, param_vars: Vec::new() }
    }

    pub fn with_params(store: &'a ParamStore<T>) -> Self {
        Graph { nodes: Vec::new(), store: Some(store), param_vars: vec![None; store.len()] }
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

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).dims()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, param: None, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op: Op::Leaf, param: None, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Leaf, param: None, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for the named parameter. Repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let store = self.store.ok_or_else(|| Error::contract("graph has no parameter store"))?;
        let id = store.id(name)?;
        if let Some(v) = self.param_vars[id] {
            return Ok(v);
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(store.by_id(id)),
            op: Op::Leaf,
            param: Some(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        Ok(v)
    }

    /// Parameter that is read but never updated (e.g. a frozen encoder).
    pub fn frozen_param(&mut self, name: &str) -> Result<Var> {
        let store = self.store.ok_or_else(|| Error::contract("graph has no parameter store"))?;
        Ok(self.constant_ref(store.get(name)?))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_bt {:?} x {:?}ᵀ: inner dimensions {k} and {k2} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMulBt(a, b), &[a, b]))
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(name, x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(vec![x.rows(), x.cols()], data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `x[n×m] + row[1×m]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, m) = self.dims(x);
        if self.dims(row) != (1, m) {
            return Err(Error::Dimension(format!(
                "add_row: {:?} vs row {:?}",
                self.value(x).shape(),
                self.value(row).shape()
            )));
        }
        let r = self.value(row).data();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_mut(m) {
            for (o, &b) in chunk.iter_mut().zip(r) {
                *o = *o + b;
            }
        }
        let out = Tensor::new(vec![n, m], out)?;
        Ok(self.push(out, Op::AddRow(x, row), &[x, row]))
    }

    /// `x + s` for a `1 x 1` variable `s`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.dims(s) != (1, 1) {
            return Err(Error::Dimension(format!("add_scalar: {:?} is not 1x1", self.value(s).shape())));
        }
        let c = self.value(s).item();
        let out = self.value(x).map(|v| v + c);
        Ok(self.push(out, Op::AddScalar(x, s), &[x, s]))
    }

    /// Scales row `i` of `x[n×m]` by `col[i]` where `col` is `n x 1`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (n, m) = self.dims(x);
        if self.dims(col) != (n, 1) {
            return Err(Error::Dimension(format!(
                "mul_col: {:?} vs column {:?}",
                self.value(x).shape(),
                self.value(col).shape()
            )));
        }
        let c = self.value(col).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(m).enumerate() {
            chunk.iter_mut().for_each(|o| *o = *o * c[i]);
        }
        let out = Tensor::new(vec![n, m], out)?;
        Ok(self.push(out, Op::MulCol(x, col), &[x, col]))
    }

    /// Scales column `j` of `x[n×m]` by `row[j]` where `row` is `1 x m`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, m) = self.dims(x);
        if self.dims(row) != (1, m) {
            return Err(Error::Dimension(format!(
                "mul_row: {:?} vs row {:?}",
                self.value(x).shape(),
                self.value(row).shape()
            )));
        }
        let r = self.value(row).data();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_mut(m) {
            for (o, &b) in chunk.iter_mut().zip(r) {
                *o = *o * b;
            }
        }
        let out = Tensor::new(vec![n, m], out)?;
        Ok(self.push(out, Op::MulRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// `x + c` for a constant `c`.
    pub fn shift(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::Shift(x), &[x])
    }

    /// `c - x`
    pub fn rsub(&mut self, c: T, x: Var) -> Var {
        let neg = self.scale(x, -T::one());
        self.shift(neg, c)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu(v).0);
        self.push(out, Op::Gelu(x), &[x])
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log(&mut self, x: Var, floor: T) -> Var {
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.push(out, Op::Log { x, floor }, &[x])
    }

    /// Row-wise softmax. Columns with `mask[j] == false` get weight exactly 0.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = masked_softmax(self.value(x), mask)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Row-wise layer normalisation with gain `gamma[1×m]` and bias `beta[1×m]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (n, m) = self.dims(x);
        if self.dims(gamma) != (1, m) || self.dims(beta) != (1, m) {
            return Err(Error::Dimension(format!(
                "layer_norm: {:?} vs gain {:?}",
                self.value(x).shape(),
                self.value(gamma).shape()
            )));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mf = T::from_usize(m).unwrap();
        let mut xhat = vec![T::zero(); n * m];
        let mut inv_std = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let row = &xs[i * m..(i + 1) * m];
            let mean = row.iter().copied().sum::<T>() / mf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..m {
                let h = (row[j] - mean) * inv;
                xhat[i * m + j] = h;
                out[i * m + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::new(vec![n, m], out)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    /// Rows `x[rows[0]], x[rows[1]], …` stacked; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, m) = self.dims(x);
        if rows.is_empty() {
            return Err(Error::Dimension("gather_rows: empty index".into()));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            if r >= n {
                return Err(Error::Dimension(format!("gather_rows: row {r} out of range for {n} rows")));
            }
            out.extend_from_slice(&src[r * m..(r + 1) * m]);
        }
        let out = Tensor::new(vec![rows.len(), m], out)?;
        Ok(self.push(out, Op::Gather { x, rows: rows.to_vec() }, &[x]))
    }

    /// Sum of the listed rows as a `1 x m` row; an empty list gives zeros.
    pub fn sum_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, m) = self.dims(x);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); m];
        for &r in rows {
            if r >= n {
                return Err(Error::Dimension(format!("sum_rows: row {r} out of range for {n} rows")));
            }
            for (o, &v) in out.iter_mut().zip(&src[r * m..(r + 1) * m]) {
                *o = *o + v;
            }
        }
        let out = Tensor::new(vec![1, m], out)?;
        Ok(self.push(out, Op::SumRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Column-wise maximum over the listed rows. Ties resolve to the first row listed.
    pub fn max_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, m) = self.dims(x);
        if rows.is_empty() {
            return Err(Error::Dimension("max_rows: no rows selected".into()));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Dimension(format!("max_rows: row {r} out of range for {n} rows")));
        }
        let t = self.value(x);
        let mut out = vec![T::zero(); m];
        let mut argmax = vec![0; m];
        for j in 0..m {
            let mut best = rows[0];
            for &r in &rows[1..] {
                if t.at(r, j) > t.at(best, j) {
                    best = r;
                }
            }
            argmax[j] = best;
            out[j] = t.at(best, j);
        }
        let out = Tensor::new(vec![1, m], out)?;
        Ok(self.push(out, Op::MaxRows { x, argmax }, &[x]))
    }

    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (n, m) = self.dims(x);
        if cols.is_empty() || cols.iter().any(|&c| c >= m) {
            return Err(Error::Dimension(format!("select_cols: {cols:?} invalid for {m} columns")));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(n * cols.len());
        for i in 0..n {
            out.extend(cols.iter().map(|&c| t.at(i, c)));
        }
        let out = Tensor::new(vec![n, cols.len()], out)?;
        Ok(self.push(out, Op::SelectCols { x, cols: cols.to_vec() }, &[x]))
    }

    /// Entries `x[r][c]` for each `(r, c)` as a `1 x len` row.
    pub fn pick(&mut self, x: Var, at: &[(usize, usize)]) -> Result<Var> {
        let (n, m) = self.dims(x);
        if at.is_empty() || at.iter().any(|&(r, c)| r >= n || c >= m) {
            return Err(Error::Dimension(format!("pick: indices invalid for {n}x{m}")));
        }
        let t = self.value(x);
        let out = Tensor::row(at.iter().map(|&(r, c)| t.at(r, c)).collect());
        Ok(self.push(out, Op::Pick { x, at: at.to_vec() }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Gradients of the scalar `loss` with respect to every parameter of the store.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let store = self.store.ok_or_else(|| Error::contract("graph has no parameter store"))?;
        let mut grads = store.zero_grads();
        self.backward_into(loss, T::one(), &mut grads)?;
        Ok(grads)
    }

    /// Adds `weight * ∂loss/∂θ` into `grads` for every parameter on the graph.
    pub fn backward_into(&self, loss: Var, weight: T, grads: &mut Grads<T>) -> Result<()> {
        if self.dims(loss) != (1, 1) {
            return Err(Error::contract(format!("backward needs a scalar loss, got {:?}", self.value(loss).shape())));
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(weight));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Some(id) = node.param {
                grads.by_id_mut(id).add_assign(&g);
                continue;
            }
            self.propagate(&node.op, &node.value, g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, op: &Op<T>, y: &Tensor<T>, g: Tensor<T>, adj: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        macro_rules! acc {
            ($v:expr, |$d:ident| $body:block) => {{
                let v: Var = $v;
                if nodes[v.0].needs_grad {
                    let shape = nodes[v.0].value.shape();
                    let $d: &mut [T] = adj[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut();
                    $body
                }
            }};
        }
        let gd = g.data();
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).1;
                acc!(a, |d| { matmul_bt_acc(gd, self.value(b).data(), d, m, n, k) });
                acc!(b, |d| { matmul_at_acc(self.value(a).data(), gd, d, m, k, n) });
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).0;
                acc!(a, |d| { matmul_acc(gd, self.value(b).data(), d, m, n, k) });
                acc!(b, |d| { matmul_at_acc(gd, self.value(a).data(), d, m, n, k) });
            }
            Op::Add(a, b) => {
                acc!(a, |d| { add_into(d, gd) });
                acc!(b, |d| { add_into(d, gd) });
            }
            Op::Sub(a, b) => {
                acc!(a, |d| { add_into(d, gd) });
                acc!(b, |d| {
                    for (o, &x) in d.iter_mut().zip(gd) {
                        *o = *o - x;
                    }
                });
            }
            Op::Mul(a, b) => {
                acc!(a, |d| {
                    for ((o, &x), &w) in d.iter_mut().zip(gd).zip(self.value(b).data()) {
                        *o = *o + x * w;
                    }
                });
                acc!(b, |d| {
                    for ((o, &x), &w) in d.iter_mut().zip(gd).zip(self.value(a).data()) {
                        *o = *o + x * w;
                    }
                });
            }
            Op::AddRow(x, row) => {
                let m = g.cols();
                acc!(x, |d| { add_into(d, gd) });
                acc!(row, |d| {
                    for chunk in gd.chunks(m) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::AddScalar(x, s) => {
                acc!(x, |d| { add_into(d, gd) });
                acc!(s, |d| { d[0] = d[0] + gd.iter().copied().sum::<T>() });
            }
            Op::MulCol(x, col) => {
                let m = g.cols();
                let c = self.value(col).data();
                let xv = self.value(x).data();
                acc!(x, |d| {
                    for (i, (dc, gc)) in d.chunks_mut(m).zip(gd.chunks(m)).enumerate() {
                        for (o, &gv) in dc.iter_mut().zip(gc) {
                            *o = *o + gv * c[i];
                        }
                    }
                });
                acc!(col, |d| {
                    for (i, (gc, xc)) in gd.chunks(m).zip(xv.chunks(m)).enumerate() {
                        d[i] = d[i] + gc.iter().zip(xc).map(|(&p, &q)| p * q).sum::<T>();
                    }
                });
            }
            Op::MulRow(x, row) => {
                let m = g.cols();
                let r = self.value(row).data();
                let xv = self.value(x).data();
                acc!(x, |d| {
                    for (dc, gc) in d.chunks_mut(m).zip(gd.chunks(m)) {
                        for ((o, &gv), &w) in dc.iter_mut().zip(gc).zip(r) {
                            *o = *o + gv * w;
                        }
                    }
                });
                acc!(row, |d| {
                    for (gc, xc) in gd.chunks(m).zip(xv.chunks(m)) {
                        for ((o, &gv), &xx) in d.iter_mut().zip(gc).zip(xc) {
                            *o = *o + gv * xx;
                        }
                    }
                });
            }
            Op::Scale(x, c) => acc!(x, |d| {
                for (o, &gv) in d.iter_mut().zip(gd) {
                    *o = *o + gv * c;
                }
            }),
            Op::Shift(x) => acc!(x, |d| { add_into(d, gd) }),
            Op::Sigmoid(x) => acc!(x, |d| {
                for ((o, &gv), &s) in d.iter_mut().zip(gd).zip(y.data()) {
                    *o = *o + gv * s * (T::one() - s);
                }
            }),
            Op::Gelu(x) => acc!(x, |d| {
                for ((o, &gv), &xv) in d.iter_mut().zip(gd).zip(self.value(x).data()) {
                    *o = *o + gv * gelu(xv).1;
                }
            }),
            Op::Log { x, floor } => acc!(x, |d| {
                for ((o, &gv), &xv) in d.iter_mut().zip(gd).zip(self.value(x).data()) {
                    if xv > floor {
                        *o = *o + gv / xv;
                    }
                }
            }),
            Op::Softmax(x) => {
                let m = g.cols();
                acc!(x, |d| {
                    for ((dc, gc), yc) in d.chunks_mut(m).zip(gd.chunks(m)).zip(y.data().chunks(m)) {
                        let dot = gc.iter().zip(yc).map(|(&p, &q)| p * q).sum::<T>();
                        for ((o, &gv), &yv) in dc.iter_mut().zip(gc).zip(yc) {
                            *o = *o + yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, ref xhat, ref inv_std } => {
                let m = g.cols();
                let mf = T::from_usize(m).unwrap();
                let gam = self.value(gamma).data();
                acc!(gamma, |d| {
                    for (gc, hc) in gd.chunks(m).zip(xhat.chunks(m)) {
                        for ((o, &gv), &h) in d.iter_mut().zip(gc).zip(hc) {
                            *o = *o + gv * h;
                        }
                    }
                });
                acc!(beta, |d| {
                    for gc in gd.chunks(m) {
                        add_into(d, gc);
                    }
                });
                acc!(x, |d| {
                    for (i, ((dc, gc), hc)) in d.chunks_mut(m).zip(gd.chunks(m)).zip(xhat.chunks(m)).enumerate() {
                        let dh: Vec<T> = gc.iter().zip(gam).map(|(&p, &q)| p * q).collect();
                        let s1 = dh.iter().copied().sum::<T>();
                        let s2 = dh.iter().zip(hc).map(|(&p, &q)| p * q).sum::<T>();
                        let k = inv_std[i] / mf;
                        for ((o, &dv), &h) in dc.iter_mut().zip(&dh).zip(hc) {
                            *o = *o + k * (mf * dv - s1 - h * s2);
                        }
                    }
                });
            }
            Op::Gather { x, ref rows } => {
                let m = g.cols();
                acc!(x, |d| {
                    for (gc, &r) in gd.chunks(m).zip(rows) {
                        add_into(&mut d[r * m..(r + 1) * m], gc);
                    }
                });
            }
            Op::SumRows { x, ref rows } => {
                let m = g.cols();
                acc!(x, |d| {
                    for &r in rows {
                        add_into(&mut d[r * m..(r + 1) * m], gd);
                    }
                });
            }
            Op::MaxRows { x, ref argmax } => {
                let m = g.cols();
                acc!(x, |d| {
                    for (j, &r) in argmax.iter().enumerate() {
                        d[r * m + j] = d[r * m + j] + gd[j];
                    }
                });
            }
            Op::SelectCols { x, ref cols } => {
                let m = self.dims(x).1;
                let k = cols.len();
                acc!(x, |d| {
                    for (i, gc) in gd.chunks(k).enumerate() {
                        for (&c, &gv) in cols.iter().zip(gc) {
                            d[i * m + c] = d[i * m + c] + gv;
                        }
                    }
                });
            }
            Op::Pick { x, ref at } => {
                let m = self.dims(x).1;
                acc!(x, |d| {
                    for (&(r, c), &gv) in at.iter().zip(gd) {
                        d[r * m + c] = d[r * m + c] + gv;
                    }
                });
            }
            Op::SumAll(x) => {
                let s = gd[0];
                acc!(x, |d| { d.iter_mut().for_each(|o| *o = *o + s) });
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o = *o + v;
    }
}

/// Logistic function kept strictly inside `(0, 1)`: saturated inputs map to the
/// smallest positive value or the largest value below one.
pub fn sigmoid<T: Real>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    y.max(T::min_positive_value()).min(T::one() - T::epsilon() / T::lit(2.0))
}

/// GELU (tanh form) and its derivative.
fn gelu<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

/// Row-wise softmax with max subtraction. Masked columns are exactly zero and
/// a row with no unmasked column is an error.
pub fn masked_softmax<T: Real>(scores: &Tensor<T>, mask: Option<&[bool]>) -> Result<Tensor<T>> {
    let (n, m) = scores.dims();
    if let Some(mask) = mask {
        if mask.len() != m {
            return Err(Error::Dimension(format!("softmax mask has {} entries for {m} columns", mask.len())));
        }
        if !mask.iter().any(|&b| b) {
            return Err(Error::Numeric("softmax over a fully masked row".into()));
        }
    }
    let keep = |j: usize| mask.is_none_or(|mk| mk[j]);
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let row = scores.row_slice(i);
        let mx = (0..m).filter(|&j| keep(j)).map(|j| row[j]).fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for j in (0..m).filter(|&j| keep(j)) {
            let e = (row[j] - mx).exp();
            out[i * m + j] = e;
            z = z + e;
        }
        for v in &mut out[i * m..(i + 1) * m] {
            *v = *v / z;
        }
    }
    Tensor::new(vec![n, m], out)
}
