//! Dense volumetric layers with hand-written forward and backward passes.
//!
//! Everything is generic over [`Real`] so training runs in `f32` while
//! gradient checks can replay the identical code path in `f64`.

mod unit;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast};
use serde::{Deserialize, Serialize};

pub use unit::{Op, Unit, UnitCache};

use crate::data::Shape3;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

pub trait Real:
    Float
    + FromPrimitive
    + NumCast
    + Default
    + Debug
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    /// `c = alpha * a * b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing matrices of the
    /// stated dimensions.
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

    #[inline]
    fn of(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Trans {
    No,
    Yes,
}

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is `k x n`,
/// all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: Trans,
    b: &[T],
    tb: Trans,
    c: &mut [T],
    beta: T,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Trans::No => (k as isize, 1),
        Trans::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n as isize, 1),
        Trans::Yes => (1, k as isize),
    };
    // SAFETY: lengths checked above; `c` is uniquely borrowed.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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
        )
    }
}

/// Strided variant of [`matmul`]: `lda`, `ldb`, `ldc` are the row pitches of
/// the stored (untransposed) matrices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_ld<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    lda: usize,
    ta: Trans,
    b: &[T],
    ldb: usize,
    tb: Trans,
    c: &mut [T],
    ldc: usize,
    beta: T,
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, ld: usize| (rows - 1) * ld + cols;
    let (rsa, csa, need_a) = match ta {
        Trans::No => (lda as isize, 1, extent(m, k, lda)),
        Trans::Yes => (1, lda as isize, extent(k, m, lda)),
    };
    let (rsb, csb, need_b) = match tb {
        Trans::No => (ldb as isize, 1, extent(k, n, ldb)),
        Trans::Yes => (1, ldb as isize, extent(n, k, ldb)),
    };
    assert!(k == 0 || (a.len() >= need_a && b.len() >= need_b));
    assert!(c.len() >= extent(m, n, ldc));
    // SAFETY: every addressed element lies inside the checked extents.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        )
    }
}

/// Boundary handling for the 3x3x3 convolutions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Zero,
    /// Circular wrap-around; makes the trunk exactly shift-equivariant.
    Periodic,
}

/// Channel-major feature grid `[c, d, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Feature<T> {
    pub channels: usize,
    pub shape: Shape3,
    pub data: Vec<T>,
}

impl<T: Real> Feature<T> {
    pub fn new(channels: usize, shape: Shape3, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * shape.len());
        Self {
            channels,
            shape,
            data,
        }
    }

    pub fn zeros(channels: usize, shape: Shape3) -> Self {
        Self::new(channels, shape, vec![T::zero(); channels * shape.len()])
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.shape.len();
        &self.data[c * n..(c + 1) * n]
    }

    /// Spatial mean of every channel.
    pub fn global_average(&self) -> Vec<T> {
        let n = self.shape.len();
        (0..self.channels)
            .map(|c| {
                let s: f64 = self.channel(c).iter().map(|v| v.f64()).sum();
                T::of(s / n as f64)
            })
            .collect()
    }

    pub fn add_assign(&mut self, other: &Feature<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

const LANES: usize = 8;

/// Inner product with independent lane accumulators so the loop vectorises.
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

pub(crate) fn sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let c = a.chunks_exact(LANES);
    let tail: T = c.remainder().iter().copied().sum();
    for x in c {
        for l in 0..LANES {
            acc[l] += x[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// `y += alpha * x`.
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    assert_eq!(x.len(), y.len());
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

#[inline]
pub(crate) fn leaky<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        v * T::of(LEAKY_SLOPE)
    }
}

#[inline]
pub(crate) fn leaky_grad<T: Real>(out: T) -> T {
    if out > T::zero() {
        T::one()
    } else {
        T::of(LEAKY_SLOPE)
    }
}
