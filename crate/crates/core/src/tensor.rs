//! Dense row-major tensors over `f32` (the default) or `f64` values.
//!
//! Most operations treat a tensor as a matrix of `rows() x cols()`, where
//! `cols()` is the last dimension and `rows()` the product of the others.
//! Reductions accumulate in `f64` whatever the value type.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Value type of tensors and graphs.
pub trait Real:
    Copy
    + Default
    + Debug
    + PartialEq
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
{
    const ZERO: Self;
    const ONE: Self;
    const NEG_INFINITY: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const NEG_INFINITY: Self = <$t>::NEG_INFINITY;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            #[inline]
            fn to_f32(self) -> f32 {
                self as f32
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::contract(alloc::format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// The same values converted to another value type.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Index of the largest entry of each row; ties go to the smaller index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows()).map(|i| self.argmax_row(i)).collect()
    }

    pub fn argmax_row(&self, i: usize) -> usize {
        let row = self.row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        best
    }
}

impl Tensor<f32> {
    /// Samples i.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0f32, std.max(f32::MIN_POSITIVE)).expect("positive std");
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }
}

/// `C = A · B` with `A: m x k`, `B: k x n`, accumulating each output row in f64.
pub(crate) fn matmul_kernel<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (t, &av) in a_row.iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            let av = av.to_f64();
            let b_row = &b[t * n..(t + 1) * n];
            for (o, &bv) in acc.iter_mut().zip(b_row) {
                *o += av * bv.to_f64();
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = T::from_f64(v);
        }
    }
    out
}

/// `C = A · Bᵀ` with `A: m x k`, `B: n x k`.
pub(crate) fn matmul_bt_kernel<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let bt = transpose_kernel(b, n, k);
    matmul_kernel(a, &bt, m, k, n)
}

/// `C = Aᵀ · B` with `A: k x m`, `B: k x n`.
pub(crate) fn matmul_at_kernel<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; m * n];
    for t in 0..k {
        let a_row = &a[t * m..(t + 1) * m];
        let b_row = &b[t * n..(t + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            let av = av.to_f64();
            for (o, &bv) in acc[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                *o += av * bv.to_f64();
            }
        }
    }
    acc.into_iter().map(T::from_f64).collect()
}

pub(crate) fn transpose_kernel<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn sigmoid_f32(x: f32) -> f32 {
    sigmoid_f64(x as f64) as f32
}
