//! Dense tensors.
//!
//! A [`Tensor`] is an immutable, contiguous, row-major n-dimensional array.
//! The canonical image layout is `[batch, channels, height, width]`; single
//! images drop the batch axis. Cloning is cheap (the buffer is shared), and
//! mutation happens only by constructing new tensors, which keeps recorded
//! autodiff graphs sound.
//!
//! Training runs in `f32`; gradient checking runs the identical code in
//! `f64` via the [`Scalar`] abstraction.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Element type of a tensor: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;

    /// `C <- alpha * A(m x k) * B(k x n) + beta * C(m x n)` with explicit
    /// element strides per matrix (row stride, column stride).
    ///
    /// # Safety
    /// Pointers must be valid for the strided extents implied by
    /// `m`, `k`, `n` and the stride pairs.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn maximum(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            fn minimum(self, other: Self) -> Self {
                if self < other {
                    self
                } else {
                    other
                }
            }

            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Immutable dense array with shape metadata. Scalars have an empty shape.
#[derive(Clone)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![v]),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![S::ZERO; numel]),
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; numel]),
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<S> = (0..numel).map(f).collect();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut crate::rng::Rng) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = vec![S::ZERO; numel];
        rng.fill_normal(&mut data, std);
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> Result<S> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar(self.shape.clone()))
        }
    }

    /// Same buffer under a different shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// `(batch, channels, height, width)`, treating rank 3 as batch 1.
    pub fn dims_nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            [c, h, w] => Ok((1, *c, *h, *w)),
            [n, c, h, w] => Ok((*n, *c, *h, *w)),
            other => Err(Error::ShapeMismatch(format!(
                "expected rank 3 or 4 tensor, got {:?}",
                other
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data: Vec<S> = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> S {
        let mut acc = S::ZERO;
        for &v in self.data.iter() {
            acc += v;
        }
        acc
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| v.to_f64()).collect()),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| v.to_f64() as f32).collect()),
        }
    }

    /// Exact element-wise equality (same bits for same-value floats).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        if self.numel() == 0 {
            return 0.0;
        }
        let s: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .sum();
        s / self.numel() as f64
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(shape={:?}, numel={})", self.shape, self.numel())
    }
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_size(input: usize, ksize: usize, pad: usize, stride: usize) -> usize {
    (input + 2 * pad - ksize) / stride + 1
}
