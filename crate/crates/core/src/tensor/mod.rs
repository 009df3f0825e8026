//! Dense row-major tensors and the numeric kernels the rest of the crate uses.
//!
//! Every reduction sums in ascending index order so that sharded and dense
//! evaluations can be compared at tight tolerances.

mod io;

pub use io::TENSOR_MAGIC;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major n-dimensional array.
///
/// `data.len() == shape.iter().product()` always holds and every dimension is
/// at least 1. Values built from external input are checked for finiteness;
/// internal kernels may produce `-inf` only through [`Tensor::causal_mask_fill`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::shape(op, "rank must be at least 1"));
    }
    if shape.contains(&0) {
        return Err(Error::shape(op, format!("zero-sized dim in {shape:?}")));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from external data, rejecting NaN and infinities.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let t = Self::from_parts(shape, data)?;
        if let Some(index) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(t)
    }

    /// Builds a tensor without the finiteness check. Length is still checked.
    pub fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape("new", &shape)?;
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "new",
                format!("shape {shape:?} needs {} elements, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        check_shape("full", shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        Ok(t)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        check_shape("from_fn", shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Payload size in bytes.
    pub fn nbytes(&self) -> usize {
        self.data.len() * T::BYTES
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        check_shape("reshape", shape)?;
        if numel(shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    /// Adds `bias` (length = last dim) to every row.
    pub fn add_row_vector(&self, bias: &Self) -> Result<Self> {
        let n = self.last_dim();
        if bias.shape != [n] {
            return Err(Error::shape(
                "add_row_vector",
                format!("bias {:?} vs last dim {n}", bias.shape),
            ));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(&bias.data) {
                *v = *v + b;
            }
        }
        Ok(out)
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max),
        )
    }

    /// `[m,k] x [k,n] -> [m,n]`, summing over `k` in ascending order.
    pub fn matmul(&self, b: &Self) -> Result<Self> {
        if self.rank() != 2 || b.rank() != 2 || self.shape[1] != b.shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, b.shape),
            ));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], b.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let mut acc = T::zero();
                for (p, &a) in arow.iter().enumerate() {
                    acc = acc + a * b.data[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `x[..., in] · wᵀ` for `w: [out, in]`, giving `[..., out]`.
    pub fn linear(&self, w: &Self) -> Result<Self> {
        let din = self.last_dim();
        if w.rank() != 2 || w.shape[1] != din {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs weight {:?}", self.shape, w.shape),
            ));
        }
        let dout = w.shape[0];
        let rows = self.data.len() / din;
        let mut out = Vec::with_capacity(rows * dout);
        for x in self.data.chunks(din) {
            for wrow in w.data.chunks(din) {
                let mut acc = T::zero();
                for (&a, &b) in x.iter().zip(wrow) {
                    acc = acc + a * b;
                }
                out.push(acc);
            }
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().expect("rank >= 1") = dout;
        Ok(Self { shape, data: out })
    }

    pub fn transpose2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose2", format!("{:?}", self.shape)));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                data.push(self.data[i * n + j]);
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data,
        })
    }

    /// Softmax over the last dimension with max subtraction.
    ///
    /// A row whose entries are all `-inf` is rejected.
    pub fn softmax_rows(&self) -> Result<Self> {
        let n = self.last_dim();
        let mut out = self.data.clone();
        for (r, row) in out.chunks_mut(n).enumerate() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            if m == T::neg_infinity() {
                return Err(Error::FullyMaskedRow { row: r });
            }
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// `y = x / sqrt(mean(x²) + eps) ⊙ weight` over the last dimension.
    pub fn rmsnorm(&self, weight: &Self, eps: T) -> Result<Self> {
        let d = self.last_dim();
        if weight.shape != [d] {
            return Err(Error::shape(
                "rmsnorm",
                format!("weight {:?} vs last dim {d}", weight.shape),
            ));
        }
        if eps <= T::zero() {
            return Err(Error::shape("rmsnorm", "eps must be positive"));
        }
        let dn = T::of(d as f64);
        let mut out = self.data.clone();
        for row in out.chunks_mut(d) {
            let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / dn;
            let inv = T::one() / (ms + eps).sqrt();
            for (v, &w) in row.iter_mut().zip(&weight.data) {
                *v = *v * inv * w;
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Sets entries above the diagonal of the trailing two dims to `value`.
    pub fn causal_mask_fill(&self, value: T) -> Result<Self> {
        if self.rank() < 2 {
            return Err(Error::shape("causal_mask_fill", "rank must be >= 2"));
        }
        let r = self.rank();
        let (rows, cols) = (self.shape[r - 2], self.shape[r - 1]);
        let mut out = self.clone();
        for mat in out.data.chunks_mut(rows * cols) {
            for i in 0..rows {
                for j in (i + 1)..cols {
                    mat[i * cols + j] = value;
                }
            }
        }
        Ok(out)
    }

    /// Index of the largest entry in each last-dim row; ties go to the lowest index.
    pub fn argmax_last_dim(&self) -> Vec<usize> {
        let n = self.last_dim();
        self.data
            .chunks(n)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    fn outer_inner(&self, dim: usize) -> (usize, usize) {
        (
            numel(&self.shape[..dim]),
            numel(&self.shape[dim + 1..]),
        )
    }

    /// Concatenates along `dim`; all other dims must agree.
    pub fn concat(parts: &[Self], dim: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no parts"))?;
        if dim >= first.rank() {
            return Err(Error::shape(
                "concat",
                format!("dim {dim} out of range for {:?}", first.shape),
            ));
        }
        for p in parts {
            let same_rank = p.rank() == first.rank();
            let same_rest = same_rank
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == dim || a == b);
            if !same_rest {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along dim {dim}", p.shape, first.shape),
                ));
            }
        }
        let (outer, inner) = first.outer_inner(dim);
        let total: usize = parts.iter().map(|p| p.shape[dim]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape[dim] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first.shape.clone();
        shape[dim] = total;
        Ok(Self { shape, data })
    }

    /// Contiguous slice `[start, start+len)` along `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Self> {
        if dim >= self.rank() || len == 0 || start + len > self.shape[dim] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) on dim {dim} of {:?}", start + len, self.shape),
            ));
        }
        let (outer, inner) = self.outer_inner(dim);
        let d = self.shape[dim];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[dim] = len;
        Ok(Self { shape, data })
    }

    /// Splits into `parts` equal slices along `dim`.
    pub fn split(&self, dim: usize, parts: usize) -> Result<Vec<Self>> {
        if dim >= self.rank() || parts == 0 || self.shape[dim] % parts != 0 {
            return Err(Error::shape(
                "split",
                format!("{:?} dim {dim} into {parts} parts", self.shape),
            ));
        }
        let len = self.shape[dim] / parts;
        (0..parts).map(|i| self.narrow(dim, i * len, len)).collect()
    }

    /// Sum of all elements in flat order.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }
}

/// Position-wise `-log softmax(logits)[target]` for `logits: [S, V]`.
pub fn cross_entropy_per_token<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<Tensor<T>> {
    if logits.rank() != 2 || logits.dim(0) != targets.len() {
        return Err(Error::shape(
            "cross_entropy_per_token",
            format!("logits {:?} vs {} targets", logits.shape(), targets.len()),
        ));
    }
    let v = logits.dim(1);
    let mut out = Vec::with_capacity(targets.len());
    for (row, &t) in logits.data().chunks(v).zip(targets) {
        if t >= v {
            return Err(Error::index(
                "cross_entropy_per_token",
                format!("target {t} >= vocab {v}"),
            ));
        }
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let s = row.iter().fold(T::zero(), |acc, &x| acc + (x - m).exp());
        out.push(m + s.ln() - row[t]);
    }
    Tensor::from_parts(vec![targets.len()], out)
}

/// Mean row-wise KL divergence `Σ p·ln(p/q)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlDivergence {
    pub value: f64,
    /// Set when `q` has a zero where `p` is positive; `value` is then infinite.
    pub support_mismatch: bool,
}

const DIST_TOL: f64 = 1e-9;

fn check_distribution<T: Scalar>(t: &Tensor<T>, which: &'static str) -> Result<()> {
    let n = t.last_dim();
    for (row, chunk) in t.data().chunks(n).enumerate() {
        let s: f64 = chunk.iter().map(|v| v.as_f64()).sum();
        if chunk.iter().any(|v| !(v.as_f64() >= 0.0)) || (s - 1.0).abs() > DIST_TOL {
            return Err(Error::InvalidDistribution { which, row });
        }
    }
    Ok(())
}

pub fn kl_divergence<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> Result<KlDivergence> {
    if p.shape() != q.shape() {
        return Err(Error::shape(
            "kl_divergence",
            format!("{:?} vs {:?}", p.shape(), q.shape()),
        ));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let n = p.last_dim();
    let rows = p.len() / n;
    let mut total = 0.0;
    let mut support_mismatch = false;
    for (pr, qr) in p.data().chunks(n).zip(q.data().chunks(n)) {
        let mut acc = 0.0;
        for (&pi, &qi) in pr.iter().zip(qr) {
            let (pi, qi) = (pi.as_f64(), qi.as_f64());
            if pi == 0.0 {
                continue;
            }
            if qi == 0.0 {
                support_mismatch = true;
                acc = f64::INFINITY;
                break;
            }
            acc += pi * (pi / qi).ln();
        }
        total += acc;
    }
    Ok(KlDivergence {
        value: total / rows as f64,
        support_mismatch,
    })
}
