//! Dense row-major `f64` storage.

use std::fmt;

use crate::error::{Error, Result};

/// A dense n-dimensional array of `f64`, stored contiguously in row-major order.
///
/// Rank 0 (shape `[]`) is a scalar. Every extent is positive.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Panics on inconsistent input; for internal kernels whose shapes are already checked.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Row count of a rank-2 tensor (or length of a vector).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::dim("transpose", &self.shape, &[]));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// Rows `perm[0], perm[1], ...` of a rank-2 tensor.
    pub fn permute_rows(&self, perm: &[usize]) -> Tensor {
        let c = self.cols();
        let mut out = Vec::with_capacity(perm.len() * c);
        for &i in perm {
            out.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = perm.len();
        Self::from_parts(shape, out)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Raw slice kernels shared by the tensor methods and the autodiff backward rules.
pub(crate) mod kernels {
    /// `out += a[m×k] · b[k×n]`
    pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for t in 0..k {
                let av = a[i * k + t];
                if av == 0.0 {
                    continue;
                }
                let b_row = &b[t * n..(t + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }

    /// `out += a[m×n] · b[k×n]ᵀ`, giving m×k.
    pub fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
        for i in 0..m {
            let a_row = &a[i * n..(i + 1) * n];
            for j in 0..k {
                let b_row = &b[j * n..(j + 1) * n];
                let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                out[i * k + j] += dot;
            }
        }
    }

    /// `out += a[m×k]ᵀ · b[m×n]`, giving k×n.
    pub fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let b_row = &b[i * n..(i + 1) * n];
            for t in 0..k {
                let av = a[i * k + t];
                if av == 0.0 {
                    continue;
                }
                let out_row = &mut out[t * n..(t + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }

    /// Numerically stable softmax of one strided slice, in place into `out`.
    pub fn softmax_strided(x: &[f64], out: &mut [f64], base: usize, len: usize, stride: usize) {
        let mut max = f64::NEG_INFINITY;
        for i in 0..len {
            max = max.max(x[base + i * stride]);
        }
        let mut sum = 0.0;
        for i in 0..len {
            let e = (x[base + i * stride] - max).exp();
            out[base + i * stride] = e;
            sum += e;
        }
        for i in 0..len {
            out[base + i * stride] /= sum;
        }
    }
}

/// Softmax of a plain slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if !x.is_empty() {
        kernels::softmax_strided(x, &mut out, 0, x.len(), 1);
    }
    out
}
