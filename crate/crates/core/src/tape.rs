//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node holding its output value and
//! the handles of its inputs. Nodes are appended in evaluation order, so the
//! node list is already a topological order; [`Tape::backward`] walks it once
//! in reverse and accumulates gradients additively into every input.
//!
//! Each primitive carries its own analytic gradient rule, so every rule can be
//! checked in isolation with [`grad_check`](crate::gradcheck::grad_check).
//!
//! ```
//! use cemoe_core::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap());
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add { a: Var, b: Var, broadcast: bool },
    Mul { a: Var, b: Var, broadcast: bool },
    Silu(Var),
    Scale(Var, T),
    Softmax(Var),
    CausalSoftmax(Var),
    RmsNorm(Var, T),
    RowNormalize(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    GatherElems(Var, Vec<usize>),
    ScaleRows(Var, Var),
    MixRows { bank: Var, weights: Var, idx: Vec<usize> },
    CausalMean(Var, usize),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-owner recording of a computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    /// `None` when `v` did not influence the loss or is a constant.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(value, op, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.record(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.record(out, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let broadcast =
            tensor::broadcast_kind(va, vb).ok_or_else(|| Error::shape("add", va.shape(), vb.shape()))?;
        let out = tensor::add(va, vb)?;
        Ok(self.record(out, Op::Add { a, b, broadcast }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let broadcast =
            tensor::broadcast_kind(va, vb).ok_or_else(|| Error::shape("mul", va.shape(), vb.shape()))?;
        let out = tensor::mul(va, vb)?;
        Ok(self.record(out, Op::Mul { a, b, broadcast }, &[a, b]))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = tensor::silu(self.value(a));
        self.record(out, Op::Silu(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.record(out, Op::Scale(a, c), &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = tensor::softmax_lastdim(self.value(a));
        self.record(out, Op::Softmax(a), &[a])
    }

    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let out = tensor::causal_softmax(self.value(a))?;
        Ok(self.record(out, Op::CausalSoftmax(a), &[a]))
    }

    pub fn rms_norm(&mut self, a: Var, eps: T) -> Var {
        let out = tensor::rms_norm(self.value(a), eps);
        self.record(out, Op::RmsNorm(a, eps), &[a])
    }

    /// Divides each trailing slice by its sum.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let out = tensor::row_normalize(self.value(a));
        self.record(out, Op::RowNormalize(a), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let out = tensor::gather_rows(self.value(a), &idx)?;
        Ok(self.record(out, Op::GatherRows(a, idx), &[a]))
    }

    /// Adds row `m` of `a` into row `idx[m]` of a zero `[rows × d]` tensor.
    pub fn scatter_rows(&mut self, a: Var, idx: Vec<usize>, rows: usize) -> Result<Var> {
        let va = self.value(a);
        let (m, d) = va.dims2("scatter_rows")?;
        if m != idx.len() {
            return Err(Error::shape("scatter_rows", va.shape(), &[idx.len()]));
        }
        let mut out = Tensor::zeros(&[rows, d]);
        {
            let buf = out.data_mut();
            for (src, &dst) in idx.iter().enumerate() {
                if dst >= rows {
                    return Err(Error::Index {
                        what: "scatter_rows",
                        index: dst,
                        bound: rows,
                    });
                }
                for (o, &x) in buf[dst * d..(dst + 1) * d].iter_mut().zip(va.row(src)) {
                    *o += x;
                }
            }
        }
        Ok(self.record(out, Op::ScatterRows(a, idx), &[a]))
    }

    /// Picks flat elements of `a` into a rank-1 tensor.
    pub fn gather_elems(&mut self, a: Var, positions: Vec<usize>) -> Result<Var> {
        let va = self.value(a);
        let mut data = Vec::with_capacity(positions.len());
        for &p in &positions {
            data.push(*va.data().get(p).ok_or(Error::Index {
                what: "gather_elems",
                index: p,
                bound: va.len(),
            })?);
        }
        let out = Tensor::from_vec(data)?;
        Ok(self.record(out, Op::GatherElems(a, positions), &[a]))
    }

    /// Row `i` of `x: [m×d]` times `w[i]` for `w: [m]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (m, d) = vx.dims2("scale_rows")?;
        if vw.len() != m {
            return Err(Error::shape("scale_rows", vx.shape(), vw.shape()));
        }
        let mut out = vx.clone();
        for (row, &s) in out.data_mut().chunks_mut(d).zip(vw.data()) {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        Ok(self.record(out, Op::ScaleRows(x, w), &[x, w]))
    }

    /// See [`tensor::mix_rows`].
    pub fn mix_rows(&mut self, bank: Var, weights: Var, idx: Vec<usize>) -> Result<Var> {
        let out = tensor::mix_rows(self.value(bank), self.value(weights), &idx)?;
        Ok(self.record(out, Op::MixRows { bank, weights, idx }, &[bank, weights]))
    }

    /// Causal running mean over consecutive segments of `segment` rows.
    pub fn causal_mean(&mut self, a: Var, segment: usize) -> Result<Var> {
        let va = self.value(a);
        let (m, d) = va.dims2("causal_mean")?;
        if segment == 0 || m % segment != 0 {
            return Err(Error::shape("causal_mean", va.shape(), &[segment]));
        }
        let mut out = Tensor::zeros(&[m, d]);
        {
            let buf = out.data_mut();
            let mut acc = vec![T::zero(); d];
            for r in 0..m {
                let pos = r % segment;
                if pos == 0 {
                    acc.iter_mut().for_each(|v| *v = T::zero());
                }
                let inv = T::one() / T::of((pos + 1) as f64);
                for ((o, a), &x) in buf[r * d..(r + 1) * d].iter_mut().zip(acc.iter_mut()).zip(va.row(r)) {
                    *a += x;
                    *o = *a * inv;
                }
            }
        }
        Ok(self.record(out, Op::CausalMean(a, segment), &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        let (m, d) = va.dims2("slice_rows")?;
        if start >= end || end > m {
            return Err(Error::shape("slice_rows", va.shape(), &[start, end]));
        }
        let out = Tensor::matrix(end - start, d, va.data()[start * d..end * d].to_vec())?;
        Ok(self.record(out, Op::SliceRows(a, start), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows needs at least one input".into()))?;
        let (_, d) = self.value(*first).dims2("concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            let (r, dp) = vp.dims2("concat_rows")?;
            if dp != d {
                return Err(Error::shape("concat_rows", self.value(*first).shape(), vp.shape()));
            }
            rows += r;
            data.extend_from_slice(vp.data());
        }
        let out = Tensor::matrix(rows, d, data)?;
        Ok(self.record(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.record(out, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.record(out, Op::Sum(a), &[a])
    }

    /// Mean cross-entropy of `logits: [b×V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let loss = tensor::cross_entropy(self.value(logits), &targets)?;
        Ok(self.record(Tensor::scalar(loss), Op::CrossEntropy(logits, targets), &[logits]))
    }

    /// Gradients of the scalar `loss` with respect to every node upstream of
    /// it. Each node is visited once, in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v));
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let da = tensor::matmul_nt(g, self.value(*b))?;
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = tensor::matmul_tn(self.value(*a), g)?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?),
            Op::Add { a, b, broadcast } => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    let db = if *broadcast { column_sums(g) } else { g.clone() };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul { a, b, broadcast } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.accumulate(grads, *a, tensor::mul(g, vb)?);
                }
                if self.needs(*b) {
                    let gb = tensor::mul(g, va)?;
                    let db = if *broadcast { column_sums(&gb) } else { gb };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Silu(a) => {
                let va = self.value(*a);
                let mut da = g.clone();
                for (d, &x) in da.data_mut().iter_mut().zip(va.data()) {
                    let s = tensor::sigmoid(x);
                    *d *= s * (T::one() + x * (T::one() - s));
                }
                self.accumulate(grads, *a, da);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * *c)),
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                // Masked entries have y = 0, so the unmasked rule covers both.
                let c = y.last_dim();
                let mut da = g.clone();
                for (drow, yrow) in da.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let s = tensor::dot(drow, yrow);
                    for (d, &yv) in drow.iter_mut().zip(yrow) {
                        *d = yv * (*d - s);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::RmsNorm(a, eps) => {
                let va = self.value(*a);
                let c = y.last_dim();
                let cf = T::of(c as f64);
                let mut da = g.clone();
                for ((drow, yrow), xrow) in da
                    .data_mut()
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(va.data().chunks(c))
                {
                    let ms = xrow.iter().map(|&v| v * v).sum::<T>() / cf;
                    let inv = T::one() / (ms + *eps).sqrt();
                    let s = tensor::dot(drow, yrow) / cf;
                    for (d, &yv) in drow.iter_mut().zip(yrow) {
                        *d = (*d - yv * s) * inv;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::RowNormalize(a) => {
                let va = self.value(*a);
                let c = y.last_dim();
                let mut da = g.clone();
                for ((drow, yrow), xrow) in da
                    .data_mut()
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(va.data().chunks(c))
                {
                    let sum: T = xrow.iter().copied().sum();
                    let s = tensor::dot(drow, yrow);
                    for d in drow.iter_mut() {
                        *d = (*d - s) / sum;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::GatherRows(a, idx) => {
                if self.needs(*a) {
                    let va = self.value(*a);
                    let d = va.last_dim();
                    let mut da = Tensor::zeros(va.shape());
                    let buf = da.data_mut();
                    for (src, &dst) in idx.iter().enumerate() {
                        for (o, &x) in buf[dst * d..(dst + 1) * d].iter_mut().zip(g.row(src)) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
            }
            Op::ScatterRows(a, idx) => {
                let da = tensor::gather_rows(g, idx)?;
                self.accumulate(grads, *a, da);
            }
            Op::GatherElems(a, positions) => {
                if self.needs(*a) {
                    let mut da = Tensor::zeros(self.shape(*a));
                    let buf = da.data_mut();
                    for (&p, &x) in positions.iter().zip(g.data()) {
                        buf[p] += x;
                    }
                    self.accumulate(grads, *a, da);
                }
            }
            Op::ScaleRows(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let d = vx.last_dim();
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for (row, &s) in dx.data_mut().chunks_mut(d).zip(vw.data()) {
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let dw: Vec<T> = g
                        .data()
                        .chunks(d)
                        .zip(vx.data().chunks(d))
                        .map(|(gr, xr)| tensor::dot(gr, xr))
                        .collect();
                    self.accumulate(grads, *w, Tensor::new(vw.shape().to_vec(), dw)?);
                }
            }
            Op::MixRows { bank, weights, idx } => {
                let (vb, vw) = (self.value(*bank), self.value(*weights));
                let d = vb.last_dim();
                let group = vw.last_dim();
                let mut dbank = self.needs(*bank).then(|| Tensor::zeros(vb.shape()));
                let mut dw = self.needs(*weights).then(|| Tensor::zeros(vw.shape()));
                for r in 0..vw.outer_len() {
                    let w = vw.row(r);
                    let s: T = w.iter().copied().sum();
                    let grow = g.row(r);
                    let yrow = y.row(r);
                    for (j, &wj) in w.iter().enumerate() {
                        let src = idx[r * group + j];
                        if let Some(db) = dbank.as_mut() {
                            let scale = wj / s;
                            for (o, &gv) in db.data_mut()[src * d..(src + 1) * d].iter_mut().zip(grow) {
                                *o += gv * scale;
                            }
                        }
                        if let Some(dwt) = dw.as_mut() {
                            let brow = vb.row(src);
                            let mut acc = T::zero();
                            for ((&gv, &bv), &yv) in grow.iter().zip(brow).zip(yrow) {
                                acc += gv * (bv - yv);
                            }
                            dwt.data_mut()[r * group + j] = acc / s;
                        }
                    }
                }
                if let Some(db) = dbank {
                    self.accumulate(grads, *bank, db);
                }
                if let Some(dwt) = dw {
                    self.accumulate(grads, *weights, dwt);
                }
            }
            Op::CausalMean(a, segment) => {
                let (m, d) = g.dims2("causal_mean")?;
                let mut da = Tensor::zeros(&[m, d]);
                let buf = da.data_mut();
                let mut acc = vec![T::zero(); d];
                for r in (0..m).rev() {
                    let pos = r % segment;
                    if pos == segment - 1 {
                        acc.iter_mut().for_each(|v| *v = T::zero());
                    }
                    let inv = T::one() / T::of((pos + 1) as f64);
                    for ((o, a), &gv) in buf[r * d..(r + 1) * d].iter_mut().zip(acc.iter_mut()).zip(g.row(r)) {
                        *a += gv * inv;
                        *o = *a;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::SliceRows(a, start) => {
                if self.needs(*a) {
                    let mut da = Tensor::zeros(self.shape(*a));
                    let n = g.len();
                    let off = start * g.last_dim();
                    da.data_mut()[off..off + n].copy_from_slice(g.data());
                    self.accumulate(grads, *a, da);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let n: usize = shape.iter().product();
                    if self.needs(p) {
                        let dp = Tensor::new(shape, g.data()[off..off + n].to_vec())?;
                        self.accumulate(grads, p, dp);
                    }
                    off += n;
                }
            }
            Op::Reshape(a) => {
                let da = g.clone().reshape(self.shape(*a))?;
                self.accumulate(grads, *a, da);
            }
            Op::Sum(a) => self.accumulate(grads, *a, Tensor::full(self.shape(*a), g.data()[0])),
            Op::CrossEntropy(logits, targets) => {
                let vl = self.value(*logits);
                let b = targets.len();
                let scale = g.data()[0] / T::of(b as f64);
                let mut dl = tensor::softmax_lastdim(vl);
                let v = vl.last_dim();
                for (r, &t) in targets.iter().enumerate() {
                    dl.data_mut()[r * v + t] -= T::one();
                }
                dl.data_mut().iter_mut().for_each(|x| *x *= scale);
                self.accumulate(grads, *logits, dl);
            }
        }
        Ok(())
    }
}

/// Sums a tensor over every leading index, leaving a trailing-dimension vector.
fn column_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let c = g.last_dim();
    let mut out = vec![T::zero(); c];
    for row in g.data().chunks(c) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    Tensor::from_vec(out).expect("trailing dimension is positive")
}
