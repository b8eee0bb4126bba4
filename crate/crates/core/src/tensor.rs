//! Dense row-major tensors and the small amount of BLAS-like machinery the
//! layers need.
//!
//! A [`Tensor`] is generic over its element type so the same network code runs
//! in `f32` for training and in `f64` for finite-difference gradient checks.
//! The least-squares solver always works in `f64` (the default parameter).

use std::fmt::{self, Debug, Display};

use crate::error::{Error, Result};

/// Floating-point element type usable inside a [`Tensor`].
pub trait Scalar:
    Copy
    + Default
    + Debug
    + Display
    + PartialOrd
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;

    /// `C = alpha * A * B + beta * C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Every pointer plus every index reachable through `(m, k, n)` and the
    /// strides must be in bounds. Callers in this crate go through [`gemm`].
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }

            unsafe fn gemm_raw(
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

/// Whether a gemm operand is read as stored or transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

/// Bounds-checked `C = alpha * op(A) * op(B) + beta * C` on row-major slices.
///
/// `a` is stored as `rows_a x cols_a` row-major, likewise `b`; `c` is
/// `m x n` row-major where `m`/`n` follow from the ops.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    op_a: Op,
    op_b: Op,
    a: &[T],
    a_dims: (usize, usize),
    b: &[T],
    b_dims: (usize, usize),
    alpha: T,
    beta: T,
    c: &mut [T],
) {
    let (ar, ac) = a_dims;
    let (br, bc) = b_dims;
    assert_eq!(a.len(), ar * ac, "gemm: lhs length");
    assert_eq!(b.len(), br * bc, "gemm: rhs length");
    let (m, k, rsa, csa) = match op_a {
        Op::N => (ar, ac, ac as isize, 1),
        Op::T => (ac, ar, 1, ac as isize),
    };
    let (k2, n, rsb, csb) = match op_b {
        Op::N => (br, bc, bc as isize, 1),
        Op::T => (bc, br, 1, bc as isize),
    };
    assert_eq!(k, k2, "gemm: inner dimensions");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: lengths were checked above against the dims and strides used.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense row-major array with an explicit shape.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

fn shape_len(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(
            "tensor shape",
            "non-empty shape of positive dimensions",
            format!("{shape:?}"),
        ));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let len = shape_len(&shape)?;
        if len != data.len() {
            return Err(Error::shape(
                "tensor data",
                format!("{len} values for shape {shape:?}"),
                data.len(),
            ));
        }
        Ok(Self { shape, data })
    }

    /// Like [`Tensor::new`] but also rejects non-finite values.
    pub fn from_finite(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        t.check_finite("tensor construction")?;
        Ok(t)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len = shape_len(&shape).expect("zeros: invalid shape");
        Self {
            shape,
            data: vec![T::ZERO; len],
        }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape("from_rows", "equal row lengths", "ragged rows"));
        }
        Self::new([n, k], rows.concat())
    }

    /// 1 x n column-vector style constructor: shape `[n]`.
    pub fn vector(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::new([n], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::ONE;
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

    /// Leading (batch / row) dimension.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of values per leading index.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    /// Element of a 2-D tensor.
    pub fn at(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        debug_assert_eq!(self.shape.len(), 2);
        let w = self.shape[1];
        self.data[i * w + j] = v;
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let len = shape_len(&shape)?;
        if len != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{} values", self.data.len()),
                format!("{shape:?}"),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    fn expect_matrix(&self, context: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(context, "2-D tensor", format!("{:?}", self.shape))),
        }
    }

    /// Matrix dimensions of a 2-D tensor.
    pub fn dims(&self) -> Result<(usize, usize)> {
        self.expect_matrix("dims")
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_op(Op::N, other, Op::N)
    }

    /// `op(self) * op(other)` for 2-D tensors.
    pub fn matmul_op(&self, op_a: Op, other: &Self, op_b: Op) -> Result<Self> {
        let a = self.expect_matrix("matmul lhs")?;
        let b = other.expect_matrix("matmul rhs")?;
        let (m, k) = if op_a == Op::N { a } else { (a.1, a.0) };
        let (k2, n) = if op_b == Op::N { b } else { (b.1, b.0) };
        if k != k2 {
            return Err(Error::shape("matmul inner dimension", k, k2));
        }
        let mut out = Self::zeros([m, n]);
        gemm(op_a, op_b, &self.data, a, &other.data, b, T::ONE, T::ZERO, &mut out.data);
        Ok(out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.expect_matrix("transpose")?;
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Self::new([c, r], out)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let w = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= self.rows() {
                return Err(Error::shape("select_rows", format!("index < {}", self.rows()), i));
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self::new(shape, data)
    }

    /// Drops column `col` of a 2-D tensor.
    pub fn drop_column(&self, col: usize) -> Result<Self> {
        let (r, c) = self.expect_matrix("drop_column")?;
        if col >= c || c == 1 {
            return Err(Error::shape("drop_column", format!("column < {c} of >1"), col));
        }
        let mut data = Vec::with_capacity(r * (c - 1));
        for i in 0..r {
            for j in 0..c {
                if j != col {
                    data.push(self.data[i * c + j]);
                }
            }
        }
        Self::new([r, c - 1], data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.to_f64().abs()))
    }

    /// Euclidean (Frobenius) norm, accumulated in `f64`.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64().powi(2)).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("sub", format!("{:?}", self.shape), format!("{:?}", other.shape)));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        })
    }
}
