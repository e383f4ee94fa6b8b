//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every operation appends one node holding its output value. [`backward`]
//! walks the nodes in exact reverse order, so a node's gradient is complete
//! before it is propagated to its inputs. Gradients from multiple consumers
//! of one value are summed.

use crate::error::{Error, Result};
use crate::numerics::ops::{self, ConvDims, NormCache};
use crate::numerics::tensor::Tensor;

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    MulLast(Var, Var),
    Scale(Var, f64),
    Softmax(Var, (usize, usize, usize)),
    Norm {
        x: Var,
        affine: Option<(Var, Var)>,
        split: (usize, usize, usize),
        cache: NormCache,
    },
    Gelu(Var),
    Relu(Var),
    Gap(Var),
    Conv2d(Var, Var, ConvDims),
    Resize {
        x: Var,
        dims: (usize, usize, usize),
        out_h: usize,
        out_w: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of differentiable operations. Confined to one thread of
/// execution; use one tape per concurrent forward/backward pass.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Gradients are tracked iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad;
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Record a trainable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient populated by [`backward`] for a `requires_grad` input.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.any_grad(inputs);
        self.push(value, op, needs_grad)
    }

    // ── operations ────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.record(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.record(out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!(
                "add shapes differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.record(out, Op::Add(a, b), &[a, b]))
    }

    /// Add a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = *tx.shape().last().unwrap_or(&0);
        if tb.len() != n {
            return Err(Error::dim(format!(
                "bias of length {} for last extent {n} of {:?}",
                tb.len(),
                tx.shape()
            )));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.record(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!(
                "mul shapes differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.record(out, Op::Mul(a, b), &[a, b]))
    }

    /// Multiply by a vector along the last axis of `x`.
    pub fn mul_last(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let n = *tx.shape().last().unwrap_or(&0);
        if tg.len() != n {
            return Err(Error::dim(format!(
                "gain of length {} for last extent {n} of {:?}",
                tg.len(),
                tx.shape()
            )));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, g) in row.iter_mut().zip(tg.data()) {
                *v *= g;
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.record(out, Op::MulLast(x, gain), &[x, gain]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.record(out, Op::Scale(x, s), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let split = ops::axis_split(self.shape(x), axis)?;
        let out = ops::softmax(self.value(x), axis)?;
        Ok(self.record(out, Op::Softmax(x, split), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::param(format!("eps must be positive, got {eps}")));
        }
        let split = ops::check_affine(self.shape(x), axis, self.value(gamma), self.value(beta))?;
        let cache = ops::standardize(self.value(x).data(), split, eps);
        let out = ops::apply_affine(
            &cache.xhat,
            self.value(gamma).data(),
            self.value(beta).data(),
            split,
        );
        let out = Tensor::from_parts(self.shape(x).to_vec(), out);
        let op = Op::Norm {
            x,
            affine: Some((gamma, beta)),
            split,
            cache,
        };
        Ok(self.record(out, op, &[x, gamma, beta]))
    }

    /// Zero-mean unit-variance normalization along `axis`, no affine term.
    pub fn normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::param(format!("eps must be positive, got {eps}")));
        }
        let split = ops::axis_split(self.shape(x), axis)?;
        let cache = ops::standardize(self.value(x).data(), split, eps);
        let out = Tensor::from_parts(self.shape(x).to_vec(), cache.xhat.clone());
        let op = Op::Norm {
            x,
            affine: None,
            split,
            cache,
        };
        Ok(self.record(out, op, &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        self.record(out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.record(out, Op::Relu(x), &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        Ok(self.record(out, Op::Gap(x), &[x]))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, padding: usize) -> Result<Var> {
        let d = ops::conv_dims(self.value(x), self.value(kernel), padding)?;
        let out = ops::conv2d_raw(self.value(x).data(), self.value(kernel).data(), &d);
        let out = Tensor::from_parts(vec![d.oh, d.ow, d.cout], out);
        Ok(self.record(out, Op::Conv2d(x, kernel, d), &[x, kernel]))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let dims = ops::check_resize(self.value(x), out_h, out_w)?;
        let out = ops::bilinear_resize(self.value(x), out_h, out_w)?;
        let op = Op::Resize {
            x,
            dims,
            out_h,
            out_w,
        };
        Ok(self.record(out, op, &[x]))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let [r, c] = *t.shape() else {
            return Err(Error::dim(format!("slice_cols on shape {:?}", t.shape())));
        };
        if len == 0 || start + len > c {
            return Err(Error::dim(format!("columns {start}..{} of {c}", start + len)));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in t.data().chunks_exact(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::from_parts(vec![r, len], data);
        Ok(self.record(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let r = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match *self.shape(p) {
                [pr, pc] if pr == r => widths.push(pc),
                ref s => return Err(Error::dim(format!("concat_cols part of shape {s:?} with {r} rows"))),
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::from_parts(vec![r, total], data);
        Ok(self.record(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if len == 0 || start + len > shape[0] {
            return Err(Error::dim(format!("rows {start}..{} of {:?}", start + len, shape)));
        }
        let row = t.len() / shape[0];
        let mut out_shape = shape.to_vec();
        out_shape[0] = len;
        let out = Tensor::from_parts(out_shape, t.data()[start * row..(start + len) * row].to_vec());
        Ok(self.record(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(Error::dim(format!(
                    "concat_rows part {:?} does not match trailing extents {tail:?}",
                    t.shape()
                )));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let out = Tensor::from_parts(shape, data);
        Ok(self.record(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(shape.to_vec(), t.data().to_vec())
            .map_err(|_| Error::dim(format!("cannot reshape {:?} into {shape:?}", t.shape())))?;
        Ok(self.record(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.record(out, Op::Sum(x), &[x])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. A rank-1 `logits` is treated as a single row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (r, c) = match *t.shape() {
            [c] => (1, c),
            [r, c] => (r, c),
            ref s => return Err(Error::dim(format!("cross_entropy logits of shape {s:?}"))),
        };
        if targets.len() != r {
            return Err(Error::dim(format!("{} targets for {r} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(Error::param(format!("target class {bad} not below {c}")));
        }
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for (i, row) in t.data().chunks_exact(c).enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let log_z = m + z.ln();
            for (p, v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
            loss += log_z - row[targets[i]];
        }
        let out = Tensor::scalar(loss / r as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.record(out, op, &[logits]))
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        backward(loss, self)
    }
}

/// Populate gradients of every `requires_grad` input reachable from `loss`.
pub fn backward(loss: Var, tape: &mut GradTape) -> Result<()> {
    if loss.0 >= tape.nodes.len() {
        return Err(Error::Contract("loss is not recorded on this tape".into()));
    }
    if tape.nodes[loss.0].value.len() != 1 {
        return Err(Error::Contract(format!(
            "backward needs a scalar loss, got shape {:?}",
            tape.nodes[loss.0].value.shape()
        )));
    }
    let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
    grads[loss.0] = Some(vec![1.0]);

    for i in (0..=loss.0).rev() {
        let Some(g) = grads[i].take() else { continue };
        let node = &tape.nodes[i];
        if !node.needs_grad {
            continue;
        }
        propagate(&tape.nodes, i, &g, &mut grads);
        let node = &mut tape.nodes[i];
        if node.value.requires_grad {
            match &mut node.value.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
    }
    Ok(())
}

/// Zero-initialized gradient slot for an input that participates in
/// differentiation, or `None` when it does not.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn add_into(dst: Option<&mut [f64]>, src: &[f64]) {
    if let Some(d) = dst {
        d.iter_mut().zip(src).for_each(|(a, b)| *a += b);
    }
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (r, k, c) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if let Some(da) = slot(nodes, grads, *a) {
                ops::gemm_nt_acc(g, tb.data(), da, r, c, k);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                ops::gemm_tn_acc(ta.data(), g, db, r, k, c);
            }
        }
        Op::MatMulNt(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (r, k, c) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
            if let Some(da) = slot(nodes, grads, *a) {
                ops::gemm_acc(g, tb.data(), da, r, c, k);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                ops::gemm_tn_acc(g, ta.data(), db, r, c, k);
            }
        }
        Op::Add(a, b) => {
            add_into(slot(nodes, grads, *a), g);
            add_into(slot(nodes, grads, *b), g);
        }
        Op::AddBias(x, b) => {
            add_into(slot(nodes, grads, *x), g);
            if let Some(db) = slot(nodes, grads, *b) {
                let n = db.len();
                for row in g.chunks_exact(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, gv), bv) in da.iter_mut().zip(g).zip(tb.data()) {
                    *d += gv * bv;
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for ((d, gv), av) in db.iter_mut().zip(g).zip(ta.data()) {
                    *d += gv * av;
                }
            }
        }
        Op::MulLast(x, gain) => {
            let (tx, tg) = (val(*x), val(*gain));
            let n = tg.len();
            if let Some(dx) = slot(nodes, grads, *x) {
                for (drow, grow) in dx.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                    for ((d, gv), k) in drow.iter_mut().zip(grow).zip(tg.data()) {
                        *d += gv * k;
                    }
                }
            }
            if let Some(dg) = slot(nodes, grads, *gain) {
                for (xrow, grow) in tx.data().chunks_exact(n).zip(g.chunks_exact(n)) {
                    for ((d, gv), xv) in dg.iter_mut().zip(grow).zip(xrow) {
                        *d += gv * xv;
                    }
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, v)| *d += s * v);
            }
        }
        Op::Softmax(x, split) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                ops::softmax_backward(nodes[i].value.data(), g, dx, *split);
            }
        }
        Op::Norm {
            x,
            affine,
            split,
            cache,
        } => {
            let (outer, n, inner) = *split;
            let dxhat: Vec<f64> = match affine {
                Some((gamma, beta)) => {
                    let gm = val(*gamma).data();
                    if let Some(dg) = slot(nodes, grads, *gamma) {
                        for (k, (gv, xh)) in g.iter().zip(&cache.xhat).enumerate() {
                            dg[(k / inner) % n] += gv * xh;
                        }
                    }
                    if let Some(db) = slot(nodes, grads, *beta) {
                        for (k, gv) in g.iter().enumerate() {
                            db[(k / inner) % n] += gv;
                        }
                    }
                    g.iter()
                        .enumerate()
                        .map(|(k, gv)| gv * gm[(k / inner) % n])
                        .collect()
                }
                None => g.to_vec(),
            };
            if let Some(dx) = slot(nodes, grads, *x) {
                ops::standardize_backward(cache, &dxhat, dx, (outer, n, inner));
            }
        }
        Op::Gelu(x) => {
            let tx = val(*x);
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, gv), &xv) in dx.iter_mut().zip(g).zip(tx.data()) {
                    *d += gv * ops::gelu_grad_scalar(xv);
                }
            }
        }
        Op::Relu(x) => {
            let tx = val(*x);
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, gv), &xv) in dx.iter_mut().zip(g).zip(tx.data()) {
                    if xv > 0.0 {
                        *d += gv;
                    }
                }
            }
        }
        Op::Gap(x) => {
            let shape = val(*x).shape();
            let c = shape[2];
            let n = (shape[0] * shape[1]) as f64;
            if let Some(dx) = slot(nodes, grads, *x) {
                for px in dx.chunks_exact_mut(c) {
                    px.iter_mut().zip(g).for_each(|(d, v)| *d += v / n);
                }
            }
        }
        Op::Conv2d(x, k, d) => {
            let (tx, tk) = (val(*x), val(*k));
            // two separate slots cannot be borrowed at once from `grads`
            let mut dk_buf = nodes[k.0].needs_grad.then(|| vec![0.0; tk.len()]);
            ops::conv2d_backward(
                tx.data(),
                tk.data(),
                g,
                d,
                slot(nodes, grads, *x),
                dk_buf.as_deref_mut(),
            );
            if let Some(buf) = dk_buf {
                add_into(slot(nodes, grads, *k), &buf);
            }
        }
        Op::Resize {
            x,
            dims,
            out_h,
            out_w,
        } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                ops::bilinear_resize_backward(*dims, *out_h, *out_w, g, dx);
            }
        }
        Op::SliceCols { x, start } => {
            let c = val(*x).shape()[1];
            let len = nodes[i].value.shape()[1];
            if let Some(dx) = slot(nodes, grads, *x) {
                for (row, grow) in dx.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                    row[*start..start + len]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(d, v)| *d += v);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = nodes[i].value.shape()[1];
            let mut offset = 0;
            for p in parts {
                let w = val(*p).shape()[1];
                if let Some(dp) = slot(nodes, grads, *p) {
                    for (row, grow) in dp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                        row.iter_mut()
                            .zip(&grow[offset..offset + w])
                            .for_each(|(d, v)| *d += v);
                    }
                }
                offset += w;
            }
        }
        Op::SliceRows { x, start } => {
            let tx = val(*x);
            let row = tx.len() / tx.shape()[0];
            if let Some(dx) = slot(nodes, grads, *x) {
                add_into(Some(&mut dx[start * row..start * row + g.len()]), g);
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = val(*p).len();
                add_into(slot(nodes, grads, *p), &g[offset..offset + n]);
                offset += n;
            }
        }
        Op::Reshape(x) => add_into(slot(nodes, grads, *x), g),
        Op::Sum(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let r = targets.len();
            let c = probs.len() / r;
            let s = g[0] / r as f64;
            if let Some(dx) = slot(nodes, grads, *logits) {
                for (k, (d, p)) in dx.iter_mut().zip(probs).enumerate() {
                    let hot = if targets[k / c] == k % c { 1.0 } else { 0.0 };
                    *d += s * (p - hot);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 4.0]).unwrap());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let a = tape.scale(x, 3.0);
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(backward(x, &mut tape), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::full(&[2, 2], 1.0));
        let c = tape.constant(Tensor::full(&[2, 2], 2.0));
        let m = tape.matmul(x, c).unwrap();
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn unreachable_param_left_empty() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::full(&[2], 1.0));
        let y = tape.param(Tensor::full(&[2], 1.0));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(y).is_none());
    }
}
