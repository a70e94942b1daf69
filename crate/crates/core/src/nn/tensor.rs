//! Dense row-major `f64` tensors and the handful of kernels the models need.
//!
//! Every kernel here is shared between the recorded (tape) path and the plain
//! inference path so both produce bit-identical values.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("Tensor::new", numel, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim("Tensor::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a matrix; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Views a vector as a `1 × n` matrix.
    pub fn as_row_matrix(&self) -> Tensor {
        Tensor {
            shape: vec![1, self.len()],
            data: self.data.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn same_shape(&self, other: &Tensor, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                context,
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn expect_matrix(&self, context: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::dim(context, "rank-2 tensor", format!("{:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Dot product with four independent partial sums (fixed order, deterministic).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `a · bᵀ` for `a: n×k`, `b: m×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.expect_matrix("matmul_nt lhs")?;
    let (m, k2) = b.expect_matrix("matmul_nt rhs")?;
    if k != k2 {
        return Err(Error::dim("matmul_nt inner dimension", k, k2));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ai = &a.data[i * k..(i + 1) * k];
        let oi = &mut out[i * m..(i + 1) * m];
        for (j, o) in oi.iter_mut().enumerate() {
            *o = dot(ai, &b.data[j * k..(j + 1) * k]);
        }
    }
    Tensor::matrix(n, m, out)
}

/// `a · b` for `a: n×m`, `b: m×k`.
pub fn matmul_nn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, m) = a.expect_matrix("matmul_nn lhs")?;
    let (m2, k) = b.expect_matrix("matmul_nn rhs")?;
    if m != m2 {
        return Err(Error::dim("matmul_nn inner dimension", m, m2));
    }
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let oi = &mut out[i * k..(i + 1) * k];
        for j in 0..m {
            let aij = a.data[i * m + j];
            if aij != 0.0 {
                axpy(aij, &b.data[j * k..(j + 1) * k], oi);
            }
        }
    }
    Tensor::matrix(n, k, out)
}

/// `aᵀ · b` for `a: n×m`, `b: n×k`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, m) = a.expect_matrix("matmul_tn lhs")?;
    let (n2, k) = b.expect_matrix("matmul_tn rhs")?;
    if n != n2 {
        return Err(Error::dim("matmul_tn outer dimension", n, n2));
    }
    let mut out = vec![0.0; m * k];
    for i in 0..n {
        let bi = &b.data[i * k..(i + 1) * k];
        for j in 0..m {
            let aij = a.data[i * m + j];
            if aij != 0.0 {
                axpy(aij, bi, &mut out[j * k..(j + 1) * k]);
            }
        }
    }
    Tensor::matrix(m, k, out)
}

/// Adds a length-`m` vector to every row of an `n×m` matrix.
pub fn add_row(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, m) = a.expect_matrix("add_row")?;
    if bias.len() != m {
        return Err(Error::dim("add_row bias", m, bias.len()));
    }
    let mut out = a.clone();
    for row in out.data.chunks_exact_mut(m) {
        for (o, b) in row.iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(out)
}

/// ReLU with the subgradient at zero taken as zero.
pub fn relu(a: &Tensor) -> Tensor {
    a.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Softmax of a single slice, max-subtracted.
pub fn softmax_slice(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Log-softmax of a single slice via log-sum-exp.
pub fn log_softmax_slice(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

/// Row-wise softmax; a vector is treated as one row.
pub fn softmax_rows(a: &Tensor) -> Tensor {
    let c = a.cols();
    let mut out = Tensor::zeros(&a.shape);
    for (zi, oi) in a.data.chunks_exact(c).zip(out.data.chunks_exact_mut(c)) {
        softmax_slice(zi, oi);
    }
    out
}

pub fn log_softmax_rows(a: &Tensor) -> Tensor {
    let c = a.cols();
    let mut out = Tensor::zeros(&a.shape);
    for (zi, oi) in a.data.chunks_exact(c).zip(out.data.chunks_exact_mut(c)) {
        log_softmax_slice(zi, oi);
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                for l in 0..m {
                    out[i * k + j] += a[i * m + l] * b[l * k + j];
                }
            }
        }
        out
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a[i * c + j];
            }
        }
        out
    }

    #[test]
    fn matmul_variants_agree_with_naive_triple_loop() {
        let (n, m, k) = (3, 7, 5);
        let a: Vec<f64> = (0..n * m).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.11).cos()).collect();
        let expected = naive_matmul(&a, &b, n, m, k);

        let ta = Tensor::matrix(n, m, a.clone()).unwrap();
        let tb = Tensor::matrix(m, k, b.clone()).unwrap();
        let nn = matmul_nn(&ta, &tb).unwrap();
        let bt = Tensor::matrix(k, m, transpose(&b, m, k)).unwrap();
        let nt = matmul_nt(&ta, &bt).unwrap();
        let at = Tensor::matrix(m, n, transpose(&a, n, m)).unwrap();
        let tn = matmul_tn(&at, &tb).unwrap();
        for i in 0..n * k {
            assert!((nn.data()[i] - expected[i]).abs() < 1e-12);
            assert!((nt.data()[i] - expected[i]).abs() < 1e-12);
            assert!((tn.data()[i] - expected[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 4]);
        assert!(matches!(matmul_nt(&a, &b), Err(Error::Dimension { .. })));
        assert!(Tensor::new(vec![2, 2], vec![1.0]).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
