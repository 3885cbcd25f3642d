//! Dense row-major matrices and the primitives every kernel is built from.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MhlaError, Result};

/// Floating point scalar usable by the kernels. Double precision is the
/// default everywhere; single precision exists for throughput measurements.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn from_f64_lossy(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn extend_le_bytes(self, out: &mut Vec<u8>);
}

impl Real for f64 {
    const NAME: &'static str = "double";

    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn extend_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Real for f32 {
    const NAME: &'static str = "single";

    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn extend_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// The double precision matrix used by every public operation.
pub type DenseMatrix = Matrix<f64>;

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "from_vec",
                format!("{} values cannot fill a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err(
                    "from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scaled(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// Elementwise `self + alpha * other`.
    pub fn axpy(&self, alpha: T, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "axpy",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + alpha * b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64_lossy(x.as_f64()))
                .collect(),
        }
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * std::mem::size_of::<T>());
        for &x in &self.data {
            x.extend_le_bytes(&mut out);
        }
        out
    }
}

impl DenseMatrix {
    /// Matrix with independent standard normal entries.
    pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Self { rows, cols, data }
    }
}

/// Error of `actual` against `reference`, relative to the reference's scale.
pub fn relative_max_error(actual: &DenseMatrix, reference: &DenseMatrix) -> Result<f64> {
    let diff = actual.max_abs_diff(reference)?;
    let scale = reference.max_abs().max(f64::MIN_POSITIVE);
    Ok(diff / scale)
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let rem_a = chunks_a.remainder();
    let rem_b = chunks_b.remainder();
    for (x, y) in chunks_a.zip(chunks_b) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = T::zero();
    for (&x, &y) in rem_a.iter().zip(rem_b) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy_slice<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const ROW_TILE: usize = 64;
const DEPTH_TILE: usize = 256;

/// Matrix product `op(a) * op(b)` where `op` optionally transposes.
pub fn gemm<T: Real>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    transpose_a: bool,
    transpose_b: bool,
) -> Result<Matrix<T>> {
    let (m, k_a) = if transpose_a {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (k_b, n) = if transpose_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    if k_a != k_b {
        return Err(shape_err(
            "gemm",
            format!(
                "op(a) is {m}x{k_a} and op(b) is {k_b}x{n} (a {:?}, b {:?}, transpose flags {transpose_a}/{transpose_b})",
                a.shape(),
                b.shape()
            ),
        ));
    }
    let k = k_a;
    let a_owned;
    let a = if transpose_a {
        a_owned = a.transpose();
        &a_owned
    } else {
        a
    };
    let mut c = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(c);
    }
    if transpose_b {
        // C[i, j] = <a_i, b_j>: both operands are read along contiguous rows.
        for j0 in (0..n).step_by(ROW_TILE) {
            let j1 = (j0 + ROW_TILE).min(n);
            for i in 0..m {
                let a_row = a.row(i);
                let c_row = &mut c.data[i * n..(i + 1) * n];
                for j in j0..j1 {
                    c_row[j] = dot(a_row, b.row(j));
                }
            }
        }
    } else {
        for p0 in (0..k).step_by(DEPTH_TILE) {
            let p1 = (p0 + DEPTH_TILE).min(k);
            for i in 0..m {
                let a_row = a.row(i);
                let c_row = &mut c.data[i * n..(i + 1) * n];
                for p in p0..p1 {
                    let aip = a_row[p];
                    if aip != T::zero() {
                        axpy_slice(aip, b.row(p), c_row);
                    }
                }
            }
        }
    }
    Ok(c)
}

/// Numerically stable softmax of `scale * m` along each row.
pub fn row_softmax<T: Real>(m: &Matrix<T>, scale: T) -> Matrix<T> {
    let mut out = m.clone();
    row_softmax_in_place(&mut out, scale);
    out
}

pub(crate) fn row_softmax_in_place<T: Real>(m: &mut Matrix<T>, scale: T) {
    let cols = m.cols;
    if cols == 0 {
        return;
    }
    for row in m.data.chunks_exact_mut(cols) {
        let max = row
            .iter()
            .fold(T::neg_infinity(), |acc, &x| acc.max(scale * x));
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (scale * *x - max).exp();
            sum += *x;
        }
        let inv = T::one() / sum;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

/// Elementwise feature map applied to queries and keys before the kernel
/// inner product.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMap {
    Identity,
    Relu,
    #[default]
    EluPlusOne,
}

impl FeatureMap {
    pub const ALL: [FeatureMap; 3] = [
        FeatureMap::Identity,
        FeatureMap::Relu,
        FeatureMap::EluPlusOne,
    ];

    /// Whether every output of the map is nonnegative.
    pub fn is_nonnegative(self) -> bool {
        !matches!(self, FeatureMap::Identity)
    }

    #[inline]
    pub fn eval<T: Real>(self, x: T) -> T {
        match self {
            FeatureMap::Identity => x,
            FeatureMap::Relu => x.max(T::zero()),
            FeatureMap::EluPlusOne => {
                if x > T::zero() {
                    x + T::one()
                } else {
                    x.exp()
                }
            }
        }
    }

    /// Derivative, with the relu subgradient at zero taken as zero.
    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            FeatureMap::Identity => T::one(),
            FeatureMap::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            FeatureMap::EluPlusOne => {
                if x > T::zero() {
                    T::one()
                } else {
                    x.exp()
                }
            }
        }
    }

    pub(crate) fn code(self) -> f64 {
        match self {
            FeatureMap::Identity => 0.0,
            FeatureMap::Relu => 1.0,
            FeatureMap::EluPlusOne => 2.0,
        }
    }

    pub(crate) fn from_code(code: f64) -> Option<Self> {
        match code as i64 {
            0 => Some(FeatureMap::Identity),
            1 => Some(FeatureMap::Relu),
            2 => Some(FeatureMap::EluPlusOne),
            _ => None,
        }
    }
}

impl fmt::Display for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureMap::Identity => "identity",
            FeatureMap::Relu => "relu",
            FeatureMap::EluPlusOne => "elu-plus-one",
        })
    }
}

impl FromStr for FeatureMap {
    type Err = MhlaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(FeatureMap::Identity),
            "relu" => Ok(FeatureMap::Relu),
            "elu-plus-one" | "elu1" => Ok(FeatureMap::EluPlusOne),
            other => Err(MhlaError::InvalidConfig(format!(
                "unknown feature map '{other}' (expected identity, relu or elu-plus-one)"
            ))),
        }
    }
}

pub fn apply_feature_map<T: Real>(m: &Matrix<T>, kind: FeatureMap) -> Matrix<T> {
    if kind == FeatureMap::Identity {
        return m.clone();
    }
    m.map(|x| kind.eval(x))
}
