//! Dense row-major tensors and the primitive kernels built on them.
//!
//! These functions are pure: every kernel returns a fresh tensor. The
//! differentiable versions live in [`crate::tape`] and call into these for
//! their forward values.

use crate::error::{shape_err, Error, Result};
use crate::scalar::{lit, Scalar};

/// Largest sigmoid argument magnitude fed to `exp`; beyond it the function
/// is treated as saturated (value pinned, derivative zero).
pub const SIGMOID_CLAMP: f64 = 80.0;

/// Dense N-dimensional array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return shape_err("Tensor::new", &shape, &[data.len()]);
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        Self {
            shape,
            data: (0..len).map(f).collect(),
        }
    }

    /// Rank-1 tensor holding `data`.
    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-1 tensor with a single element.
    pub fn scalar(value: T) -> Self {
        Self::vector(vec![value])
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Size of the last dimension (1 for rank 0).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Interprets the tensor as a matrix `(rows, cols)`; rank must be 2.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => shape_err("dims2", &self.shape, &[0, 0]),
        }
    }

    fn dims2_unchecked(&self) -> (usize, usize) {
        self.dims2().expect("rank-2 tensor")
    }

    pub fn at2(&self, r: usize, c: usize) -> T {
        let (_, cols) = self.dims2_unchecked();
        self.data[r * cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let d = self.last_dim();
        &self.data[r * d..(r + 1) * d]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let d = self.last_dim();
        &mut self.data[r * d..(r + 1) * d]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err("reshape", &self.shape, &shape);
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from(*v).expect("finite cast"))
                .collect(),
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
            return shape_err(op, &self.shape, &other.shape);
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

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return shape_err("add_assign", &self.shape, &other.shape);
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / lit(self.data.len().max(1) as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `[m,k]·[k,n]`.
    pub fn matmul(&self, b: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return shape_err("matmul", &self.shape, &b.shape);
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &self.data, (k, 1), &b.data, (n, 1), &mut out, false);
        Self::new([m, n], out)
    }

    /// `[m,k]·[n,k]ᵀ`.
    pub fn matmul_nt(&self, b: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (n, k2) = b.dims2()?;
        if k != k2 {
            return shape_err("matmul_nt", &self.shape, &b.shape);
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &self.data, (k, 1), &b.data, (1, k), &mut out, false);
        Self::new([m, n], out)
    }

    /// `[k,m]ᵀ·[k,n]`.
    pub fn matmul_tn(&self, b: &Self) -> Result<Self> {
        let (k, m) = self.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return shape_err("matmul_tn", &self.shape, &b.shape);
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &self.data, (1, m), &b.data, (n, 1), &mut out, false);
        Self::new([m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        Ok(Self::from_fn([c, r], |i| self.data[(i % r) * c + i / r]))
    }

    /// Adds a length-`n` bias to every row of an `[.., n]` tensor.
    pub fn add_row_bias(&self, bias: &Self) -> Result<Self> {
        let n = self.last_dim();
        if bias.len() != n {
            return shape_err("add_row_bias", &self.shape, &bias.shape);
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(n) {
            row.iter_mut().zip(&bias.data).for_each(|(v, &b)| *v += b);
        }
        Ok(out)
    }

    /// `x·W + b` for `x: [m,k]`, `W: [k,n]`, `b: [n]`.
    pub fn linear(&self, w: &Self, b: &Self) -> Result<Self> {
        self.matmul(w)?.add_row_bias(b)
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax_lastdim(&self) -> Self {
        let n = self.last_dim();
        let mut out = self.clone();
        if n == 0 {
            return out;
        }
        for row in out.data.chunks_mut(n) {
            softmax_in_place(row);
        }
        out
    }

    /// Layer normalization over the last dimension.
    pub fn layernorm(&self, gamma: &Self, beta: &Self, eps: T) -> Result<Self> {
        let d = self.last_dim();
        if gamma.len() != d || beta.len() != d {
            return shape_err("layernorm", &self.shape, &gamma.shape);
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(d) {
            let (mean, rstd) = moments(row, eps);
            for ((v, &g), &b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
                *v = (*v - mean) * rstd * g + b;
            }
        }
        Ok(out)
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn gelu(&self) -> Self {
        self.map(gelu)
    }

    /// Euclidean norm over the last dimension; drops that dimension.
    pub fn l2norm_lastdim(&self) -> Self {
        let d = self.last_dim();
        let shape = self.shape[..self.shape.len().saturating_sub(1)].to_vec();
        let data = self
            .data
            .chunks(d.max(1))
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        Self { shape, data }
    }

    /// Rows `[start, end)` of a tensor whose leading dimension indexes rows.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let d: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self {
            shape,
            data: self.data[start * d..end * d].to_vec(),
        }
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start > end || end > c {
            return shape_err("slice_cols", &self.shape, &[start, end]);
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for row in self.data.chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        Self::new([r, w], data)
    }

    /// Gathers rows (leading-dimension entries) in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let d: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.data[i * d..(i + 1) * d]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self { shape, data }
    }

    /// Stacks tensors along the leading dimension; trailing shapes must agree.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return shape_err("concat_rows", &first.shape, &p.shape);
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Self::new(shape, data)
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (r, _) = first.dims2()?;
        let mut total = 0;
        for p in parts {
            let (pr, pc) = p.dims2()?;
            if pr != r {
                return shape_err("concat_cols", &first.shape, &p.shape);
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Self::new([r, total], data)
    }

    /// Index of the largest element (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

/// Mean and reciprocal standard deviation of a slice (biased variance).
pub(crate) fn moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n: T = lit(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Logistic function with the argument clamped to ±80.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let c: T = lit(SIGMOID_CLAMP);
    let x = x.max(-c).min(c);
    T::one() / (T::one() + (-x).exp())
}

/// Derivative of [`sigmoid`]; exactly zero in the clamped region.
#[inline]
pub fn sigmoid_grad<T: Scalar>(x: T) -> T {
    if x.abs() > lit(SIGMOID_CLAMP) {
        return T::zero();
    }
    let s = sigmoid(x);
    s * (T::one() - s)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = lit::<T>(GELU_C) * (x + lit::<T>(GELU_A) * x * x * x);
    lit::<T>(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c: T = lit(GELU_C);
    let a: T = lit(GELU_A);
    let half: T = lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + lit::<T>(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook triple loop, independent of the gemm backend.
    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = Tensor::zeros([m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at2(i, p) * b.at2(p, j);
                }
                out.data_mut()[i * n + j] = s;
            }
        }
        out
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn rand_tensor(shape: [usize; 2], seed: &mut u64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| lcg(seed))
    }

    #[test]
    fn matmul_identity() {
        let i = Tensor::<f32>::eye(2);
        assert_eq!(i.matmul(&i).unwrap(), i);
    }

    #[test]
    fn matmul_forced() {
        let a = Tensor::<f32>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::<f32>::from_rows(&[&[1.0], &[1.0]]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_random_against_triple_loop() {
        let mut seed = 7;
        let a = rand_tensor([5, 7], &mut seed);
        let b = rand_tensor([7, 3], &mut seed);
        let got = a.matmul(&b).unwrap();
        assert!(got.max_abs_diff(&naive_matmul(&a, &b)) < 1e-6);
    }

    #[test]
    fn matmul_variants_agree() {
        let mut seed = 11;
        let a = rand_tensor([4, 6], &mut seed);
        let b = rand_tensor([6, 5], &mut seed);
        let direct = a.matmul(&b).unwrap();
        let nt = a.matmul_nt(&b.transpose().unwrap()).unwrap();
        let tn = a.transpose().unwrap().matmul_tn(&b).unwrap();
        assert!(direct.max_abs_diff(&nt) < 1e-12);
        assert!(direct.max_abs_diff(&tn) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros([2, 3]);
        let b = Tensor::<f32>::zeros([2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let u = Tensor::<f64>::vector(vec![0.0, 0.0, 0.0]).softmax_lastdim();
        for &v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let big = Tensor::<f32>::vector(vec![1000.0, 0.0]).softmax_lastdim();
        assert!(big.all_finite());
        assert!((big.data()[0] - 1.0).abs() < 1e-6 && big.data()[1] < 1e-30);

        let x = Tensor::<f64>::vector(vec![1.0, 2.0, 3.0]).softmax_lastdim();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, &v) in x.data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-6);
        }
    }

    #[test]
    fn layernorm_cases() {
        let one = Tensor::<f64>::full([3], 1.0);
        let zero = Tensor::<f64>::zeros([3]);
        let c = Tensor::vector(vec![5.0, 5.0, 5.0]).layernorm(&one, &zero, 1e-5).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0, 0.0]);

        let one2 = Tensor::<f64>::full([2], 1.0);
        let zero2 = Tensor::<f64>::zeros([2]);
        let eps = 1e-5;
        let y = Tensor::vector(vec![1.0, 3.0]).layernorm(&one2, &zero2, eps).unwrap();
        // mean 2, variance 1
        let expect = 1.0 / (1.0f64 + eps).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12 && (y.data()[1] - expect).abs() < 1e-12);

        let beta = Tensor::vector(vec![0.5, -2.0]);
        let y = Tensor::vector(vec![1.0, 9.0]).layernorm(&zero2, &beta, eps).unwrap();
        assert_eq!(y, beta);
    }

    #[test]
    fn sigmoid_cases() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid(1e6f64), 1.0);
        assert_eq!(sigmoid(1e6f32), 1.0);
        assert!(sigmoid(-1e6f64) < 1e-34);
        assert!(sigmoid(-1e6f32) < 1e-34);
        assert!((sigmoid(1.0f64) - 0.731_058_578_6).abs() < 1e-9);
        assert_eq!(sigmoid_grad(81.0f64), 0.0);
    }

    #[test]
    fn l2norm_cases() {
        assert_eq!(Tensor::<f32>::vector(vec![3.0, 4.0]).l2norm_lastdim().data(), &[5.0]);
        assert_eq!(Tensor::<f32>::zeros([4]).l2norm_lastdim().data(), &[0.0]);
        let mut seed = 3;
        let x: Vec<f64> = (0..8).map(|_| lcg(&mut seed)).collect();
        let oracle = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let got = Tensor::vector(x).l2norm_lastdim();
        assert_eq!(got.shape(), &[] as &[usize]);
        assert!((got.data()[0] - oracle).abs() < 1e-6);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-7);
        }
    }

    #[test]
    fn gather_and_concat() {
        let t = Tensor::<f32>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(t.gather_rows(&[2, 0]).data(), &[5.0, 6.0, 1.0, 2.0]);
        let c = Tensor::concat_cols(&[&t.slice_cols(0, 1).unwrap(), &t.slice_cols(1, 2).unwrap()]).unwrap();
        assert_eq!(c, t);
        let r = Tensor::concat_rows(&[&t.slice_rows(0, 1), &t.slice_rows(1, 3)]).unwrap();
        assert_eq!(r, t);
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::<f32>::new([2, 2], vec![0.0; 3]).is_err());
    }
}
