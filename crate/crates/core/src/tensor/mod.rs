//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! The engine covers exactly what the pose network needs: grouped and
//! dilated convolutions, batch normalization, SiLU/sigmoid/softmax,
//! batched matmul, permutes/reshapes/concat, pooling and the handful of
//! elementwise ops used by the losses. Training runs in `f32`; `f64`
//! exists for finite-difference gradient checks.

mod conv;
mod gradcheck;
mod norm;
mod ops;
mod tape;

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

use thiserror::Error;

pub use conv::Conv2dSpec;
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport, ScalarFn};
pub use norm::{BatchNormState, NormMode};
pub use ops::smooth_l1_value;
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this tape")]
    Consumed,
}

impl TensorError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Invalid {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Cody-Waite reduction plus a degree-6 Taylor polynomial; relative
/// error below 3e-7 over the clamped range.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    const SHIFTER: f32 = 12_582_912.0;
    let x = x.clamp(-87.0, 88.0);
    let n = (x * std::f32::consts::LOG2_E + SHIFTER) - SHIFTER;
    let r = x - n * 0.693_145_75 - n * 1.428_606_8e-6;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    p * f32::from_bits(((n as i32 + 127) as u32) << 23)
}

/// Scalar element type. Implemented for `f32` (training) and `f64`
/// (gradient checking).
pub trait Float:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const BITS: u32;

    fn of(x: f64) -> Self;

    fn f64(self) -> f64;

    /// `e^x`, allowed to trade the last ulp or two for a branch-free body.
    fn exp_fast(self) -> Self {
        self.exp()
    }

    /// `c = alpha * a * b + beta * c` for strided matrices.
    ///
    /// # Safety
    /// Every index reachable through the given extents and strides must
    /// be in bounds of the corresponding pointer's allocation.
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

impl Float for f32 {
    const BITS: u32 = 32;

    fn of(x: f64) -> Self {
        x as f32
    }

    fn f64(self) -> f64 {
        self as f64
    }

    #[inline(always)]
    fn exp_fast(self) -> Self {
        exp_f32(self)
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Float for f64 {
    const BITS: u32 = 64;

    fn of(x: f64) -> Self {
        x
    }

    fn f64(self) -> f64 {
        self
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided view of a matrix stored in a slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Mat {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
pub(crate) fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [F::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = acc.iter().fold(F::zero(), |s, &v| s + v);
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

/// Dot product accumulated in f64.
pub(crate) fn dot_f64<F: Float>(a: &[F], b: &[F]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l].f64() * y[l].f64();
        }
    }
    acc.iter().sum::<f64>()
        + ra.iter()
            .zip(rb)
            .map(|(x, y)| x.f64() * y.f64())
            .sum::<f64>()
}

/// Sum and sum of squared deviations from `center`, accumulated in f64.
pub(crate) fn moments<F: Float>(v: &[F], center: f64) -> (f64, f64) {
    let mut s = [0f64; 4];
    let mut q = [0f64; 4];
    let c = v.chunks_exact(4);
    let rest = c.remainder();
    for x in c {
        for l in 0..4 {
            let d = x[l].f64() - center;
            s[l] += d;
            q[l] += d * d;
        }
    }
    let (mut ss, mut qq) = (s.iter().sum::<f64>(), q.iter().sum::<f64>());
    for x in rest {
        let d = x.f64() - center;
        ss += d;
        qq += d * d;
    }
    (ss + center * v.len() as f64, qq)
}

const SMALL_GEMM: usize = 16 * 1024;

/// Plain loops for products too small to amortize packing.
#[allow(clippy::too_many_arguments)]
fn small_gemm<F: Float>(
    alpha: F,
    a: &[F],
    am: Mat,
    b: &[F],
    bm: Mat,
    beta: F,
    c: &mut [F],
    cm: Mat,
) {
    if bm.cs == 1 && cm.cs == 1 {
        // row axpy form, unit stride on the inner loop
        for i in 0..cm.rows {
            let crow = &mut c[i * cm.rs..][..cm.cols];
            if beta == F::zero() {
                crow.fill(F::zero());
            } else {
                crow.iter_mut().for_each(|v| *v = beta * *v);
            }
            for p in 0..am.cols {
                let aip = alpha * a[i * am.rs + p * am.cs];
                let brow = &b[p * bm.rs..][..cm.cols];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv = *cv + aip * bv;
                }
            }
        }
        return;
    }
    for i in 0..cm.rows {
        for j in 0..cm.cols {
            let mut acc = F::zero();
            for p in 0..am.cols {
                acc = acc + a[i * am.rs + p * am.cs] * b[p * bm.rs + j * bm.cs];
            }
            let v = &mut c[i * cm.rs + j * cm.cs];
            *v = if beta == F::zero() {
                alpha * acc
            } else {
                alpha * acc + beta * *v
            };
        }
    }
}

/// Bounds-checked `c = alpha * a * b + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Float>(
    alpha: F,
    a: &[F],
    am: Mat,
    b: &[F],
    bm: Mat,
    beta: F,
    c: &mut [F],
    cm: Mat,
) {
    assert_eq!(am.cols, bm.rows, "gemm inner extent");
    assert_eq!((am.rows, bm.cols), (cm.rows, cm.cols), "gemm output extent");
    if cm.rows == 0 || cm.cols == 0 {
        return;
    }
    if am.cols == 0 {
        for i in 0..cm.rows {
            for j in 0..cm.cols {
                let v = &mut c[i * cm.rs + j * cm.cs];
                *v = beta * *v;
            }
        }
        return;
    }
    assert!(am.max_index() < a.len(), "gemm lhs out of bounds");
    assert!(bm.max_index() < b.len(), "gemm rhs out of bounds");
    assert!(cm.max_index() < c.len(), "gemm output out of bounds");
    if am.rows * am.cols * bm.cols <= SMALL_GEMM {
        small_gemm(alpha, a, am, b, bm, beta, c, cm);
        return;
    }
    // SAFETY: extents and strides were checked against the slice lengths.
    unsafe {
        F::gemm_raw(
            am.rows,
            am.cols,
            bm.cols,
            alpha,
            a.as_ptr(),
            am.rs as isize,
            am.cs as isize,
            b.as_ptr(),
            bm.rs as isize,
            bm.cs as isize,
            beta,
            c.as_mut_ptr(),
            cm.rs as isize,
            cm.cs as isize,
        )
    }
}

/// Dense row-major tensor. `shape.iter().product() == data.len()` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Float> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::invalid(
                "tensor",
                format!("shape {shape:?} holds {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| F::of(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of(x.f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub(crate) fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
