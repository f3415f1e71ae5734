//! Dense row-major tensors and the numeric kernels behind every tape op.
//!
//! Tensors are immutable values: every kernel allocates its output. Binary
//! elementwise kernels accept either two tensors of equal shape or a rank-1
//! right operand whose length equals the trailing dimension of the left
//! operand, which is then repeated across every leading index. No other
//! broadcasting is supported.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, checking that `shape` is non-empty, has no zero
    /// dimension and matches the buffer length.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(alloc::format!(
                "tensor shape must be non-empty with positive dimensions, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn from_vec(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Independent draws from `U(-bound, bound)`.
    pub fn uniform<R: rand::Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Self {
        Self::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the trailing dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    /// Number of trailing-dimension slices (product of leading dims).
    pub fn outer_len(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, &self.shape, &[])),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, d) in index.iter().zip(&self.shape) {
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) || shape.is_empty() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

/// Activation applied elementwise, or a binary elementwise combinator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Silu,
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu_scalar<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// Pointwise `add`, `mul` (binary) or `silu` (unary).
pub fn elementwise<T: Real>(op: Elementwise, a: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    match (op, b) {
        (Elementwise::Silu, None) => Ok(a.map(silu_scalar)),
        (Elementwise::Silu, Some(_)) => Err(Error::Contract("silu takes a single operand".into())),
        (Elementwise::Add, Some(b)) => binary(a, b, "add", |x, y| x + y),
        (Elementwise::Mul, Some(b)) => binary(a, b, "mul", |x, y| x * y),
        (_, None) => Err(Error::Contract(alloc::format!("{op:?} takes two operands"))),
    }
}

/// Whether `b` is broadcast over `a` (trailing-dimension vector), or `None`
/// if the shapes are incompatible.
pub(crate) fn broadcast_kind<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Option<bool> {
    if a.shape == b.shape {
        Some(false)
    } else if b.rank() == 1 && b.len() == a.last_dim() {
        Some(true)
    } else {
        None
    }
}

fn binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    let broadcast = broadcast_kind(a, b).ok_or_else(|| Error::shape(op, &a.shape, &b.shape))?;
    let data = if broadcast {
        let c = b.len();
        a.data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data[i % c]))
            .collect()
    } else {
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    };
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(Elementwise::Add, a, Some(b))
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(Elementwise::Mul, a, Some(b))
}

pub fn silu<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    a.map(silu_scalar)
}

/// `a · b` for `a: [m×p]`, `b: [p×q]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, p) = a.dims2("matmul")?;
    let (p2, q) = b.dims2("matmul")?;
    if p != p2 {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![T::zero(); m * q];
    for i in 0..m {
        let arow = &a.data[i * p..(i + 1) * p];
        let orow = &mut out[i * q..(i + 1) * q];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data[k * q..(k + 1) * q];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, q],
        data: out,
    })
}

/// `a · bᵀ` for `a: [m×p]`, `b: [q×p]`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, p) = a.dims2("matmul_nt")?;
    let (q, p2) = b.dims2("matmul_nt")?;
    if p != p2 {
        return Err(Error::shape("matmul_nt", &a.shape, &b.shape));
    }
    let mut out = vec![T::zero(); m * q];
    for i in 0..m {
        let arow = &a.data[i * p..(i + 1) * p];
        for j in 0..q {
            let brow = &b.data[j * p..(j + 1) * p];
            out[i * q + j] = dot(arow, brow);
        }
    }
    Ok(Tensor {
        shape: vec![m, q],
        data: out,
    })
}

/// `aᵀ · b` for `a: [m×p]`, `b: [m×q]`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, p) = a.dims2("matmul_tn")?;
    let (m2, q) = b.dims2("matmul_tn")?;
    if m != m2 {
        return Err(Error::shape("matmul_tn", &a.shape, &b.shape));
    }
    let mut out = vec![T::zero(); p * q];
    for r in 0..m {
        let arow = &a.data[r * p..(r + 1) * p];
        let brow = &b.data[r * q..(r + 1) * q];
        for (i, &ari) in arow.iter().enumerate() {
            if ari == T::zero() {
                continue;
            }
            let orow = &mut out[i * q..(i + 1) * q];
            for (o, &brj) in orow.iter_mut().zip(brow) {
                *o += ari * brj;
            }
        }
    }
    Ok(Tensor {
        shape: vec![p, q],
        data: out,
    })
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Softmax over the trailing dimension, with max subtraction.
pub fn softmax_lastdim<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.last_dim();
    let mut out = x.data.clone();
    for row in out.chunks_mut(c) {
        softmax_in_place(row);
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Row-wise softmax of a square `[t×t]` score matrix restricted to the
/// lower triangle; entries above the diagonal are exactly zero.
pub fn causal_softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2("causal_softmax")?;
    if r != c {
        return Err(Error::shape("causal_softmax", &x.shape, &[r, r]));
    }
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        let row = &mut out[i * c..i * c + i + 1];
        row.copy_from_slice(&x.data[i * c..i * c + i + 1]);
        softmax_in_place(row);
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Each trailing slice divided by its root-mean-square (no learned gain).
pub fn rms_norm<T: Real>(x: &Tensor<T>, eps: T) -> Tensor<T> {
    let c = x.last_dim();
    let mut out = x.data.clone();
    for row in out.chunks_mut(c) {
        let ms = row.iter().map(|&v| v * v).sum::<T>() / T::of(c as f64);
        let inv = T::one() / (ms + eps).sqrt();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

/// Each trailing slice divided by its sum.
pub fn row_normalize<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.last_dim();
    let mut out = x.data.clone();
    for row in out.chunks_mut(c) {
        let s: T = row.iter().copied().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

/// Mean negative log-softmax of `logits: [b×V]` at the target indices.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    let (b, v) = logits.dims2("cross_entropy")?;
    if targets.len() != b {
        return Err(Error::shape("cross_entropy", &logits.shape, &[targets.len()]));
    }
    let mut total = T::zero();
    for (i, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: t,
                bound: v,
            });
        }
        let row = logits.row(i);
        total += log_sum_exp(row) - row[t];
    }
    Ok(total / T::of(b as f64))
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Rows of `x` at `idx`, in order.
pub fn gather_rows<T: Real>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let c = x.last_dim();
    let rows = x.outer_len();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        if i >= rows {
            return Err(Error::Index {
                what: "gather_rows",
                index: i,
                bound: rows,
            });
        }
        data.extend_from_slice(x.row(i));
    }
    if idx.is_empty() {
        return Err(Error::Contract("gather_rows with no indices".into()));
    }
    Ok(Tensor {
        shape: vec![idx.len(), c],
        data,
    })
}

/// For `weights: [m×g]` and `idx` of length `m·g`, row `r` of the output is
/// `Σ_j weights[r,j]·bank[idx[r·g+j]] / Σ_j weights[r,j]`.
///
/// Dividing by the weight sum (rather than trusting the weights to sum to
/// one) keeps a combination of identical rows exactly equal to that row in
/// floating point.
pub fn mix_rows<T: Real>(bank: &Tensor<T>, weights: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let (n, d) = bank.dims2("mix_rows")?;
    let (m, g) = weights.dims2("mix_rows")?;
    if idx.len() != m * g {
        return Err(Error::shape("mix_rows", &weights.shape, &[idx.len()]));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
        return Err(Error::Index {
            what: "mix_rows",
            index: bad,
            bound: n,
        });
    }
    let mut out = vec![T::zero(); m * d];
    for r in 0..m {
        let w = weights.row(r);
        let orow = &mut out[r * d..(r + 1) * d];
        let mut s = T::zero();
        for (j, &wj) in w.iter().enumerate() {
            s += wj;
            for (o, &x) in orow.iter_mut().zip(bank.row(idx[r * g + j])) {
                *o += wj * x;
            }
        }
        for o in orow.iter_mut() {
            *o /= s;
        }
    }
    Ok(Tensor {
        shape: vec![m, d],
        data: out,
    })
}
