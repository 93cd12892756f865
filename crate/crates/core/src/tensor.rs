//! Dense row-major tensors and the raw kernels the tape records.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{op}: index {index} out of range ({len} available)")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
}

/// Dense n-dimensional array of scalars, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Scalar> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::DataLength { len: data.len(), shape });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![E::zero(); numel] }
    }

    pub fn filled(shape: Vec<usize>, value: E) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: E) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// 1-D tensor from a slice.
    pub fn from_vec(data: Vec<E>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    /// 2-D tensor from nested rows; rows must have equal length.
    pub fn from_rows(rows: &[Vec<E>]) -> Result<Self, TensorError> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            if r.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    detail: format!("row length {} != {}", r.len(), n),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { shape: vec![m, n], data })
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

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Number of rows when viewed as a matrix (product of all but the last extent).
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Last extent (matrix column count).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn at2(&self, i: usize, j: usize) -> E {
        self.data[i * self.cols() + j]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn item(&self) -> E {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<F: Fn(E) -> E>(&self, f: F) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Convert element type (used to lift f32 data into f64 checks).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from(*v).expect("scalar cast")).collect(),
        }
    }
}

/// C[m,n] += A[m,k] @ B[k,n]. `out` must already be zeroed by the caller.
///
/// i-k-j loop order keeps the inner loop contiguous on both `b` and `out`,
/// which is what the autovectorizer needs.
pub fn matmul_accumulate<E: Scalar>(
    a: &[E],
    b: &[E],
    out: &mut [E],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + aip * b_row[j];
            }
        }
    }
}

pub fn transpose_2d<E: Scalar>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// GELU (tanh approximation) and its derivative.
pub fn gelu_value<E: Scalar>(x: E) -> E {
    let c = crate::scalar::fl::<E>((2.0 / std::f64::consts::PI).sqrt());
    let k = crate::scalar::fl::<E>(0.044715);
    let half = crate::scalar::fl::<E>(0.5);
    half * x * (E::one() + (c * (x + k * x.powi(3))).tanh())
}

pub fn gelu_derivative<E: Scalar>(x: E) -> E {
    let c = crate::scalar::fl::<E>((2.0 / std::f64::consts::PI).sqrt());
    let k = crate::scalar::fl::<E>(0.044715);
    let half = crate::scalar::fl::<E>(0.5);
    let three = crate::scalar::fl::<E>(3.0);
    let inner = c * (x + k * x.powi(3));
    let t = inner.tanh();
    let sech2 = E::one() - t * t;
    let d_inner = c * (E::one() + three * k * x * x);
    half * (E::one() + t) + half * x * sech2 * d_inner
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_contract() {
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let t = transpose_2d(&a, 2, 3);
        let back = transpose_2d(&t, 3, 2);
        assert_eq!(a, back);
        assert_eq!(t, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }
}
