//! Dense tensors and the scalar abstraction shared by the 32-bit training path
//! and the 64-bit gradient-check path.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{invalid, Error, Result};

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Checkpoint dtype code.
    const DTYPE: u8;
    const BYTES: usize;

    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Raw strided GEMM: `C = alpha * A B + beta * C`.
    ///
    /// # Safety
    /// Strides and dimensions must describe memory inside the given pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
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

impl Scalar for f32 {
    const DTYPE: u8 = 0;
    const BYTES: usize = 4;
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 1;
    const BYTES: usize = 8;
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix product `C (m×n) = op(A) · op(B)`, optionally accumulating into `C`.
///
/// `A` is stored as `m×k` (or `k×m` when `trans_a`), `B` as `k×n` (or `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the assertions above bound every access made through these strides.
    unsafe {
        T::raw_gemm(
            m,
            k,
            n,
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

/// Rank-4 activation tensor laid out `[N, C, H, W]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![T::zero(); n * c * h * w] }
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, value: T) -> Self {
        Self { n, c, h, w, data: vec![value; n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(invalid!("feature map dims must be >= 1, got [{n}, {c}, {h}, {w}]"));
        }
        if data.len() != n * c * h * w {
            return Err(invalid!(
                "feature map [{n}, {c}, {h}, {w}] needs {} values, got {}",
                n * c * h * w,
                data.len()
            ));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane_len();
        let start = (n * self.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.plane_len();
        let start = (n * self.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// All values of sample `n`, `C*H*W` long.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.c * self.plane_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self { n: self.n, c: self.c, h: self.h, w: self.w, data }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self { n: self.n, c: self.c, h: self.h, w: self.w, data }
    }

    pub fn same_shape_zeros(&self) -> Self {
        Self::zeros(self.n, self.c, self.h, self.w)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {what}")))
        }
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Concatenates along the batch axis.
    pub fn concat_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid!("nothing to concatenate"))?;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut n = 0;
        for p in parts {
            if (p.c, p.h, p.w) != (first.c, first.h, first.w) {
                return Err(invalid!("batch concat of mismatched feature maps"));
            }
            n += p.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Self { n, c: first.c, h: first.h, w: first.w, data })
    }

    /// Concatenates two maps along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        if (a.n, a.h, a.w) != (b.n, b.h, b.w) {
            return Err(invalid!(
                "channel concat needs equal N/H/W, got {:?} and {:?}",
                a.shape(),
                b.shape()
            ));
        }
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for n in 0..a.n {
            data.extend_from_slice(a.sample(n));
            data.extend_from_slice(b.sample(n));
        }
        Ok(Self { n: a.n, c: a.c + b.c, h: a.h, w: a.w, data })
    }

    /// Inverse of [`FeatureMap::concat_channels`].
    pub fn split_channels(&self, first: usize) -> (Self, Self) {
        assert!(first <= self.c);
        let rest = self.c - first;
        let p = self.plane_len();
        let mut a = Vec::with_capacity(self.n * first * p);
        let mut b = Vec::with_capacity(self.n * rest * p);
        for n in 0..self.n {
            let s = self.sample(n);
            a.extend_from_slice(&s[..first * p]);
            b.extend_from_slice(&s[first * p..]);
        }
        (
            Self { n: self.n, c: first, h: self.h, w: self.w, data: a },
            Self { n: self.n, c: rest, h: self.h, w: self.w, data: b },
        )
    }
}

/// Rank-2 row-major tensor `[rows, cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid!("matrix [{rows}, {cols}] needs {} values, got {}", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// A named-by-position tensor of model state.
///
/// Trainable parameters carry a gradient buffer of the same length; frozen
/// parameters and running statistics carry none.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn trainable(shape: Vec<usize>, value: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self { shape, value, grad, trainable: true }
    }

    /// Non-trainable state such as BN running statistics.
    pub fn buffer(shape: Vec<usize>, value: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        Self { shape, value, grad: Vec::new(), trainable: false }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::trainable(shape, vec![T::zero(); len])
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let len = shape.iter().product();
        Self::trainable(shape, vec![v; len])
    }

    pub fn freeze(&mut self) {
        self.trainable = false;
        self.grad = Vec::new();
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Adds into the gradient buffer; no-op for non-trainable tensors.
    pub fn accumulate(&mut self, g: &[T]) {
        if self.trainable {
            for (a, &b) in self.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
}

/// Anything owning [`Param`]s. Names are dotted paths rooted at `prefix`.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn trainable_count(&self) -> usize {
        let mut total = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                total += p.len();
            }
        });
        total
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
