//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records one node per operation. Nodes whose inputs never
//! require a gradient are stored as plain values (no saved activations),
//! so the same code path serves inference and training.
//!
//! ```
//! use icvlab_core::autograd::Tape;
//! use icvlab_core::tensor::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::row_vector(vec![1.0, 2.0]), true);
//! let w = tape.constant(Tensor::from_vec(2, 1, vec![3.0, 4.0]).unwrap());
//! let y = x.matmul(w).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
//! ```

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::flops::{self, Component};
use crate::scalar::Scalar;
use crate::tensor::{log_sum_exp, softmax_in_place, Tensor, KL_FLOOR};

pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    ScaleBy(usize, usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Tensor<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SetRow {
        base: usize,
        row: usize,
        src: usize,
    },
    AddToRow {
        base: usize,
        row: usize,
        src: usize,
    },
    ShiftRenorm {
        x: usize,
        shift: usize,
        renormalize: bool,
    },
    SoftmaxRows(usize),
    SumAll(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        scale: T,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Tensor<T>,
    },
    KlFromLogits {
        logits: usize,
        rows: Vec<usize>,
        target: Tensor<T>,
        log_q: Tensor<T>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one forward pass. Confined to a single thread.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let [r, c] = v.shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf sharing storage with an existing tensor (no copy).
    pub fn leaf_shared(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.push_arc(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn req(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a `1 x 1` loss node.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let [r, c] = nodes[loss.id].value.shape();
        if r != 1 || c != 1 {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn slot<'a, T: Scalar>(
    grads: &'a mut [Option<Tensor<T>>],
    id: usize,
    shape: [usize; 2],
) -> &'a mut Tensor<T> {
    grads[id].get_or_insert_with(|| Tensor::zeros(shape[0], shape[1]))
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044_715);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dinner = c * (T::one() + three * a * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (y, dy)
}

fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let val = |id: usize| -> &Tensor<T> { &nodes[id].value };
    let req = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if req(*a) {
                let shape = val(*a).shape();
                let out = slot(grads, *a, shape);
                g.acc_matmul_nt(val(*b), out);
            }
            if req(*b) {
                let shape = val(*b).shape();
                let out = slot(grads, *b, shape);
                val(*a).acc_matmul_tn(g, out);
            }
        }
        Op::Add(a, b) => {
            if req(*a) {
                accumulate(grads, *a, g.clone());
            }
            if req(*b) {
                accumulate(grads, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if req(*a) {
                accumulate(grads, *a, g.clone());
            }
            if req(*b) {
                accumulate(grads, *b, g.map(|x| -x));
            }
        }
        Op::Mul(a, b) => {
            if req(*a) {
                accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y).unwrap());
            }
            if req(*b) {
                accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y).unwrap());
            }
        }
        Op::AddRow(a, b) => {
            if req(*a) {
                accumulate(grads, *a, g.clone());
            }
            if req(*b) {
                let mut col = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (acc, &x) in col.data_mut().iter_mut().zip(g.row(r)) {
                        *acc += x;
                    }
                }
                accumulate(grads, *b, col);
            }
        }
        Op::Scale(a, c) => {
            if req(*a) {
                accumulate(grads, *a, g.scale(*c));
            }
        }
        Op::ScaleBy(a, s) => {
            let sv = val(*s).item();
            if req(*a) {
                accumulate(grads, *a, g.scale(sv));
            }
            if req(*s) {
                let d: T = g.data().iter().zip(val(*a).data()).map(|(&x, &y)| x * y).sum();
                accumulate(grads, *s, Tensor::scalar(d));
            }
        }
        Op::Gelu(a) => {
            let x = val(*a);
            let dx = g.zip_map(x, |gi, xi| gi * gelu_parts(xi).1).unwrap();
            accumulate(grads, *a, dx);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let n = g.cols();
            let gv = val(*gain);
            let inv_n = T::one() / T::lit(n as f64);
            if req(*x) {
                let mut dx = Tensor::zeros(g.rows(), n);
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for c in 0..n {
                        let d = gr[c] * gv.data()[c];
                        mean_d += d;
                        mean_dx += d * xr[c];
                    }
                    mean_d *= inv_n;
                    mean_dx *= inv_n;
                    let out = dx.row_mut(r);
                    for c in 0..n {
                        let d = gr[c] * gv.data()[c];
                        out[c] = rstd[r] * (d - mean_d - xr[c] * mean_dx);
                    }
                }
                accumulate(grads, *x, dx);
            }
            if req(*gain) {
                let mut dg = Tensor::zeros(1, n);
                for r in 0..g.rows() {
                    for c in 0..n {
                        dg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                    }
                }
                accumulate(grads, *gain, dg);
            }
            if req(*bias) {
                let mut db = Tensor::zeros(1, n);
                for r in 0..g.rows() {
                    for c in 0..n {
                        db.data_mut()[c] += g.get(r, c);
                    }
                }
                accumulate(grads, *bias, db);
            }
        }
        Op::Embedding { table, ids } => {
            let shape = val(*table).shape();
            let out = slot(grads, *table, shape);
            for (r, &id) in ids.iter().enumerate() {
                for (acc, &x) in out.row_mut(id).iter_mut().zip(g.row(r)) {
                    *acc += x;
                }
            }
        }
        Op::SliceRows(a, start) => {
            let shape = val(*a).shape();
            let out = slot(grads, *a, shape);
            for r in 0..g.rows() {
                for (acc, &x) in out.row_mut(start + r).iter_mut().zip(g.row(r)) {
                    *acc += x;
                }
            }
        }
        Op::SliceCols(a, start) => {
            let shape = val(*a).shape();
            let out = slot(grads, *a, shape);
            for r in 0..g.rows() {
                let dst = &mut out.row_mut(r)[*start..start + g.cols()];
                for (acc, &x) in dst.iter_mut().zip(g.row(r)) {
                    *acc += x;
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let rows = val(p).rows();
                if req(p) {
                    let idx: Vec<usize> = (offset..offset + rows).collect();
                    accumulate(grads, p, g.select_rows(&idx).unwrap());
                }
                offset += rows;
            }
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let cols = val(p).cols();
                if req(p) {
                    let mut part = Tensor::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        part.row_mut(r)
                            .copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    accumulate(grads, p, part);
                }
                offset += cols;
            }
        }
        Op::SetRow { base, row, src } => {
            if req(*base) {
                let mut gb = g.clone();
                gb.row_mut(*row).iter_mut().for_each(|x| *x = T::zero());
                accumulate(grads, *base, gb);
            }
            if req(*src) {
                accumulate(grads, *src, Tensor::row_vector(g.row(*row).to_vec()));
            }
        }
        Op::AddToRow { base, row, src } => {
            if req(*base) {
                accumulate(grads, *base, g.clone());
            }
            if req(*src) {
                accumulate(grads, *src, Tensor::row_vector(g.row(*row).to_vec()));
            }
        }
        Op::ShiftRenorm {
            x,
            shift,
            renormalize,
        } => {
            let xv = val(*x);
            let sv = val(*shift);
            let n = xv.cols();
            let mut dx = Tensor::zeros(xv.rows(), n);
            let mut ds = Tensor::zeros(1, n);
            for r in 0..xv.rows() {
                let xr = xv.row(r);
                let gr = g.row(r);
                let y: Vec<T> = xr.iter().zip(sv.data()).map(|(&a, &b)| a + b).collect();
                let mut dy = gr.to_vec();
                let mut dxr = vec![T::zero(); n];
                if *renormalize {
                    let nx = crate::tensor::norm(xr);
                    let ny = crate::tensor::norm(&y);
                    if ny > T::zero() {
                        // out = y * nx / ny
                        let ratio = nx / ny;
                        let gy: T = crate::tensor::dot(gr, &y);
                        for c in 0..n {
                            dy[c] = gr[c] * ratio - gy * nx * y[c] / (ny * ny * ny);
                        }
                        if nx > T::zero() {
                            let coef = gy / (ny * nx);
                            for c in 0..n {
                                dxr[c] += coef * xr[c];
                            }
                        }
                    }
                }
                for c in 0..n {
                    dxr[c] += dy[c];
                    ds.data_mut()[c] += dy[c];
                }
                dx.row_mut(r).copy_from_slice(&dxr);
            }
            if req(*x) {
                accumulate(grads, *x, dx);
            }
            if req(*shift) {
                accumulate(grads, *shift, ds);
            }
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let mut dx = Tensor::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let yr = y.row(r);
                let gr = g.row(r);
                let s: T = yr.iter().zip(gr).map(|(&p, &d)| p * d).sum();
                for (o, (&p, &d)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                    *o = p * (d - s);
                }
            }
            accumulate(grads, *a, dx);
        }
        Op::SumAll(a) => {
            let [r, c] = val(*a).shape();
            accumulate(grads, *a, Tensor::filled(r, c, g.item()));
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            scale,
            probs,
        } => {
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let (t_len, d) = (qv.rows(), qv.cols());
            let dh = d / heads;
            let mut dq = Tensor::zeros(t_len, d);
            let mut dk = Tensor::zeros(t_len, d);
            let mut dv = Tensor::zeros(t_len, d);
            let mut dp = vec![T::zero(); t_len];
            for h in 0..*heads {
                let off = h * dh;
                for i in 0..t_len {
                    let p = &probs[(h * t_len + i) * t_len..(h * t_len + i) * t_len + i + 1];
                    let go = &g.row(i)[off..off + dh];
                    let mut s = T::zero();
                    for j in 0..=i {
                        let vj = &vv.row(j)[off..off + dh];
                        let d = crate::tensor::dot(go, vj);
                        dp[j] = d;
                        s += p[j] * d;
                        let dvj = &mut dv.row_mut(j)[off..off + dh];
                        for c in 0..dh {
                            dvj[c] += p[j] * go[c];
                        }
                    }
                    let qi = &qv.row(i)[off..off + dh];
                    let mut dqi = vec![T::zero(); dh];
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - s) * *scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kj = &kv.row(j)[off..off + dh];
                        for c in 0..dh {
                            dqi[c] += ds * kj[c];
                        }
                        let dkj = &mut dk.row_mut(j)[off..off + dh];
                        for c in 0..dh {
                            dkj[c] += ds * qi[c];
                        }
                    }
                    for (o, x) in dq.row_mut(i)[off..off + dh].iter_mut().zip(dqi) {
                        *o += x;
                    }
                }
            }
            if req(*q) {
                accumulate(grads, *q, dq);
            }
            if req(*k) {
                accumulate(grads, *k, dk);
            }
            if req(*v) {
                accumulate(grads, *v, dv);
            }
        }
        Op::CrossEntropy {
            logits,
            rows,
            targets,
            probs,
        } => {
            let shape = val(*logits).shape();
            let inv = g.item() / T::lit(rows.len() as f64);
            let out = slot(grads, *logits, shape);
            for (i, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                let dst = out.row_mut(r);
                for (c, o) in dst.iter_mut().enumerate() {
                    let onehot = if c == t { T::one() } else { T::zero() };
                    *o += (probs.get(i, c) - onehot) * inv;
                }
            }
        }
        Op::KlFromLogits {
            logits,
            rows,
            target,
            log_q,
        } => {
            let shape = val(*logits).shape();
            let inv = g.item() / T::lit(rows.len() as f64);
            let floor = T::lit(KL_FLOOR.ln());
            let out = slot(grads, *logits, shape);
            for (i, &r) in rows.iter().enumerate() {
                let lq = log_q.row(i);
                let p = target.row(i);
                let mut active_mass = T::zero();
                for c in 0..lq.len() {
                    if lq[c] > floor {
                        active_mass += p[c];
                    }
                }
                let dst = out.row_mut(r);
                for c in 0..lq.len() {
                    let q = lq[c].exp();
                    let own = if lq[c] > floor { p[c] } else { T::zero() };
                    dst[c] += (q * active_mass - own) * inv;
                }
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(self) -> Arc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(self) -> [usize; 2] {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn requires_grad(self) -> bool {
        self.tape.req(self.id)
    }

    fn check_tape(self, other: Var<'t, T>, op: &'static str) -> Result<()> {
        if !std::ptr::eq(self.tape, other.tape) {
            return Err(shape_err(op, "operands live on different tapes"));
        }
        Ok(())
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(other, "matmul")?;
        let out = self.value().matmul(&other.value())?;
        Ok(self.binary(other, out, Op::MatMul(self.id, other.id)))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(other, "add")?;
        let out = self.value().add(&other.value())?;
        Ok(self.binary(other, out, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(other, "sub")?;
        let out = self.value().sub(&other.value())?;
        Ok(self.binary(other, out, Op::Sub(self.id, other.id)))
    }

    /// Element-wise product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(other, "mul")?;
        let out = self.value().zip_map(&other.value(), |a, b| a * b)?;
        Ok(self.binary(other, out, Op::Mul(self.id, other.id)))
    }

    /// Adds a `1 x n` row to every row.
    pub fn add_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(row, "add_row")?;
        let a = self.value();
        let b = row.value();
        if b.rows() != 1 || b.cols() != a.cols() {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {:?}", a.shape(), b.shape()),
            ));
        }
        let mut out = (*a).clone();
        for r in 0..out.rows() {
            for (o, &x) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += x;
            }
        }
        Ok(self.binary(row, out, Op::AddRow(self.id, row.id)))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let out = self.value().scale(c);
        self.unary(out, Op::Scale(self.id, c))
    }

    /// Multiplies by a `1 x 1` variable.
    pub fn scale_by(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(s, "scale_by")?;
        if s.shape() != [1, 1] {
            return Err(shape_err("scale_by", format!("factor {:?}", s.shape())));
        }
        let out = self.value().scale(s.value().item());
        Ok(self.binary(s, out, Op::ScaleBy(self.id, s.id)))
    }

    pub fn gelu(self) -> Var<'t, T> {
        let out = self.value().map(|x| gelu_parts(x).0);
        self.unary(out, Op::Gelu(self.id))
    }

    /// Row-wise layer normalisation with learned `1 x n` gain and bias.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(gain, "layer_norm")?;
        self.check_tape(bias, "layer_norm")?;
        let x = self.value();
        let (gv, bv) = (gain.value(), bias.value());
        let n = x.cols();
        if gv.shape() != [1, n] || bv.shape() != [1, n] {
            return Err(shape_err("layer_norm", "gain/bias must be 1 x cols"));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let inv_n = T::one() / T::lit(n as f64);
        let mut xhat = Tensor::zeros(x.rows(), n);
        let mut out = Tensor::zeros(x.rows(), n);
        let mut rstd = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let xr = x.row(r);
            let mean = xr.iter().copied().sum::<T>() * inv_n;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..n {
                let h = (xr[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * gv.data()[c] + bv.data()[c]);
            }
        }
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of `self` (an embedding table) by token id.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'t, T>> {
        let table = self.value();
        let out = table.select_rows(ids)?;
        flops::tally(ids.len() * table.cols());
        Ok(self.unary(
            out,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        if start > end || end > a.rows() {
            return Err(shape_err("slice_rows", format!("{start}..{end} of {}", a.rows())));
        }
        let idx: Vec<usize> = (start..end).collect();
        let out = a.select_rows(&idx)?;
        Ok(self.unary(out, Op::SliceRows(self.id, start)))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        if start > end || end > a.cols() {
            return Err(shape_err("slice_cols", format!("{start}..{end} of {}", a.cols())));
        }
        let mut out = Tensor::zeros(a.rows(), end - start);
        for r in 0..a.rows() {
            out.row_mut(r).copy_from_slice(&a.row(r)[start..end]);
        }
        Ok(self.unary(out, Op::SliceCols(self.id, start)))
    }

    pub fn concat_rows(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat_rows", "no parts"))?;
        let cols = first.shape()[1];
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for p in parts {
            first.check_tape(*p, "concat_rows")?;
            let v = p.value();
            if v.cols() != cols {
                return Err(shape_err("concat_rows", "column counts differ"));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
            rg |= p.requires_grad();
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push(out, Op::ConcatRows(ids), rg))
    }

    pub fn concat_cols(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat_cols", "no parts"))?;
        let rows = first.shape()[0];
        let vals: Vec<Arc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        if vals.iter().any(|v| v.rows() != rows) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let cols: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for v in &vals {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
                off += v.cols();
            }
        }
        let mut rg = false;
        for p in parts {
            first.check_tape(*p, "concat_cols")?;
            rg |= p.requires_grad();
        }
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push(out, Op::ConcatCols(ids), rg))
    }

    /// Copy of `self` with row `row` replaced by the `1 x n` vector `src`.
    pub fn set_row(self, row: usize, src: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(src, "set_row")?;
        let mut out = (*self.value()).clone();
        let s = src.value();
        if row >= out.rows() || s.shape() != [1, out.cols()] {
            return Err(shape_err("set_row", format!("row {row}, src {:?}", s.shape())));
        }
        out.row_mut(row).copy_from_slice(s.data());
        Ok(self.binary(
            src,
            out,
            Op::SetRow {
                base: self.id,
                row,
                src: src.id,
            },
        ))
    }

    /// Copy of `self` with `src` added to row `row`; tallies `n` multiply-adds.
    pub fn add_to_row(self, row: usize, src: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(src, "add_to_row")?;
        let mut out = (*self.value()).clone();
        let s = src.value();
        if row >= out.rows() || s.shape() != [1, out.cols()] {
            return Err(shape_err("add_to_row", format!("row {row}, src {:?}", s.shape())));
        }
        for (o, &x) in out.row_mut(row).iter_mut().zip(s.data()) {
            *o += x;
        }
        flops::tally(s.cols());
        Ok(self.binary(
            src,
            out,
            Op::AddToRow {
                base: self.id,
                row,
                src: src.id,
            },
        ))
    }

    /// Adds the `1 x n` shift to every row, optionally rescaling each row back
    /// to its original Euclidean norm.
    ///
    /// Tallies `rows * n` multiply-adds for the add, plus `3 * rows * n` when
    /// renormalising (two norms and the rescale).
    pub fn shift_rows(self, shift: Var<'t, T>, renormalize: bool) -> Result<Var<'t, T>> {
        self.check_tape(shift, "shift_rows")?;
        let x = self.value();
        let s = shift.value();
        if s.shape() != [1, x.cols()] {
            return Err(shape_err(
                "shift_rows",
                format!("{:?} + {:?}", x.shape(), s.shape()),
            ));
        }
        let mut out = (*x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (o, &v) in row.iter_mut().zip(s.data()) {
                *o += v;
            }
            if renormalize {
                let nx = crate::tensor::norm(x.row(r));
                let ny = crate::tensor::norm(row);
                if ny > T::zero() {
                    let ratio = nx / ny;
                    row.iter_mut().for_each(|v| *v *= ratio);
                }
            }
        }
        let per_row = if renormalize { 4 } else { 1 };
        flops::tally(per_row * x.rows() * x.cols());
        Ok(self.binary(
            shift,
            out,
            Op::ShiftRenorm {
                x: self.id,
                shift: shift.id,
                renormalize,
            },
        ))
    }

    pub fn softmax_rows(self) -> Result<Var<'t, T>> {
        let out = crate::tensor::softmax_rows(&self.value())?;
        Ok(self.unary(out, Op::SoftmaxRows(self.id)))
    }

    pub fn sum(self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value().sum());
        self.unary(out, Op::SumAll(self.id))
    }

    /// Multi-head causal self-attention mix (before the output projection).
    ///
    /// `q`, `k`, `v` are `T x d`; head `h` owns columns `h*d/heads..(h+1)*d/heads`.
    /// Scores are only computed for visible keys, so the multiply-add tally is
    /// `T(T+1)/2 * d` for scores and again for the mix. When `slopes` is not
    /// empty, head `h` adds the constant `-slopes[h] * (i - j)` to each score.
    pub fn causal_attention(
        self,
        k: Var<'t, T>,
        v: Var<'t, T>,
        heads: usize,
        scale: T,
        slopes: &[T],
    ) -> Result<(Var<'t, T>, Vec<T>)> {
        self.check_tape(k, "causal_attention")?;
        self.check_tape(v, "causal_attention")?;
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        let (t_len, d) = (qv.rows(), qv.cols());
        if kv.shape() != [t_len, d] || vv.shape() != [t_len, d] || heads == 0 || d % heads != 0 {
            return Err(shape_err("causal_attention", "q/k/v shapes or head count"));
        }
        if !slopes.is_empty() && slopes.len() != heads {
            return Err(shape_err("causal_attention", "one slope per head"));
        }
        let dh = d / heads;
        let mut probs = vec![T::zero(); heads * t_len * t_len];
        let mut out = Tensor::zeros(t_len, d);
        for h in 0..heads {
            let off = h * dh;
            let slope = slopes.get(h).copied().unwrap_or(T::zero());
            for i in 0..t_len {
                let base = (h * t_len + i) * t_len;
                let p = &mut probs[base..base + i + 1];
                let qi = &qv.row(i)[off..off + dh];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = scale * crate::tensor::dot(qi, &kv.row(j)[off..off + dh])
                        - slope * T::lit((i - j) as f64);
                }
                softmax_in_place(p);
                let oi = &mut out.row_mut(i)[off..off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &vv.row(j)[off..off + dh];
                    for c in 0..dh {
                        oi[c] += pj * vj[c];
                    }
                }
            }
        }
        let visible = t_len * (t_len + 1) / 2;
        flops::tally_to(Component::AttentionScores, visible * d);
        flops::tally_to(Component::AttentionMix, visible * d);
        let rg = self.requires_grad() || k.requires_grad() || v.requires_grad();
        let saved = if rg { probs.clone() } else { Vec::new() };
        let var = self.tape.push(
            out,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                heads,
                scale,
                probs: saved,
            },
            rg,
        );
        Ok((var, probs))
    }

    /// Mean over `rows` of `-ln softmax(self[row])[target]`.
    pub fn cross_entropy(self, rows: &[usize], targets: &[usize]) -> Result<Var<'t, T>> {
        let logits = self.value();
        if rows.len() != targets.len() || rows.is_empty() {
            return Err(shape_err("cross_entropy", "rows/targets mismatch or empty"));
        }
        let n = logits.cols();
        let mut probs = Tensor::zeros(rows.len(), n);
        let mut total = T::zero();
        for (i, (&r, &t)) in rows.iter().zip(targets).enumerate() {
            if r >= logits.rows() {
                return Err(Error::OutOfRange {
                    what: "row",
                    index: r,
                    limit: logits.rows(),
                });
            }
            total += crate::tensor::cross_entropy(logits.row(r), t)?;
            let pr = probs.row_mut(i);
            pr.copy_from_slice(logits.row(r));
            softmax_in_place(pr);
        }
        let out = Tensor::scalar(total / T::lit(rows.len() as f64));
        Ok(self.unary(
            out,
            Op::CrossEntropy {
                logits: self.id,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over `rows` of `KL(target[i] || softmax(self[rows[i]]))` with the
    /// student probability floored at [`KL_FLOOR`].
    pub fn kl_from_logits(self, rows: &[usize], target: &Tensor<T>) -> Result<Var<'t, T>> {
        let logits = self.value();
        if target.rows() != rows.len() || target.cols() != logits.cols() || rows.is_empty() {
            return Err(shape_err("kl_from_logits", "target shape"));
        }
        let floor = T::lit(KL_FLOOR.ln());
        let mut log_q = Tensor::zeros(rows.len(), logits.cols());
        let mut total = T::zero();
        for (i, &r) in rows.iter().enumerate() {
            if r >= logits.rows() {
                return Err(Error::OutOfRange {
                    what: "row",
                    index: r,
                    limit: logits.rows(),
                });
            }
            let lr = logits.row(r);
            let lse = log_sum_exp(lr);
            let lq = log_q.row_mut(i);
            for c in 0..lr.len() {
                lq[c] = lr[c] - lse;
                let p = target.get(i, c);
                if p > T::zero() {
                    total += p * (p.ln() - lq[c].max(floor));
                }
            }
        }
        let out = Tensor::scalar(total / T::lit(rows.len() as f64));
        Ok(self.unary(
            out,
            Op::KlFromLogits {
                logits: self.id,
                rows: rows.to_vec(),
                target: target.clone(),
                log_q,
            },
        ))
    }
}

/// Largest relative discrepancy between reverse-mode gradients of `f` and
/// central finite differences with step `eps`.
///
/// Each component contributes `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], eps: T) -> Result<T>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_, T>> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |xs: &[Tensor<T>]| -> Result<T> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, T>> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };
    let two = T::lit(2.0);
    let mut worst = T::zero();
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (two * eps);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / T::one().max(a.abs());
            if err > worst || err.is_nan() {
                worst = err;
            }
        }
    }
    Ok(worst)
}
