//! Dense row-major tensors with a tape-based reverse-mode graph.
//!
//! The engine is deliberately small: rank-2 operands, row-vector broadcast
//! only, no fusion. Values are stored as `T` (`f32` for training, `f64` for
//! gradient checking); every reduction and matrix product accumulates in
//! `f64`.

mod check;
mod graph;

pub use check::{check_gradients, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};

use std::fmt::Debug;

use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("shape {shape:?} needs {expected} values, got {found}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("{op}: expected a rank-1 or rank-2 tensor, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

/// Element type of the engine.
pub trait Scalar: Float + Debug + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;

    /// `c (+)= a · b` for row-major `c` of shape `[m, n]`. `a` is `[m, k]`
    /// and `b` is `[k, n]`, each addressed through (row, column) strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_strides: (usize, usize), b: &[Self], b_strides: (usize, usize), c: &mut [Self], accumulate: bool);
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn gemm(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (usize, usize), b: &[f64], (rsb, csb): (usize, usize), c: &mut [f64], accumulate: bool) {
        debug_assert!(c.len() >= m * n);
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            if !accumulate {
                c[..m * n].fill(0.0);
            }
            return;
        }
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: strides describe in-bounds [m, k] / [k, n] views of `a` and
        // `b`, and `c` holds at least m·n elements in row-major order.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_strides: (usize, usize), b: &[f32], b_strides: (usize, usize), c: &mut [f32], accumulate: bool) {
        let a64: Vec<f64> = a.iter().map(|&x| x as f64).collect();
        let b64: Vec<f64> = b.iter().map(|&x| x as f64).collect();
        let mut c64 = vec![0.0f64; m * n];
        f64::gemm(m, k, n, &a64, a_strides, &b64, b_strides, &mut c64, false);
        if accumulate {
            for (dst, src) in c.iter_mut().zip(&c64) {
                *dst = (*dst as f64 + src) as f32;
            }
        } else {
            for (dst, src) in c.iter_mut().zip(&c64) {
                *dst = *src as f32;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                found: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)`, reading a rank-1 tensor as a single row.
    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [c] => Ok((1, *c)),
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::Rank {
                op: "dims2",
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map(|d| d.0).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map(|d| d.1).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    /// Element-type conversion through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.to_f64().expect("finite float")))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64().unwrap() - b.to_f64().unwrap()).abs())
            .fold(0.0, f64::max)
    }
}
