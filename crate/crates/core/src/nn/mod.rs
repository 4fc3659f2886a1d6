//! Minimal neural-network toolkit: flat parameter buffers, convolution and
//! dense layers with hand-written backward passes, and Adam.
//!
//! Activations of a single sample are stored channel-major (`C × H × W`).
//! Networks process samples one at a time and accumulate parameter gradients
//! in a fixed order, so training and inference are bit-reproducible.

mod layers;
mod optim;

pub use layers::*;
pub use optim::{Adam, Ema};

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Scalar type a network runs in.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + 'static
{
    /// `C ← α·A·B + β·C` on strided row/column layouts.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds `m×k`, `k×n`, `m×n` matrices.
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
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
    unsafe fn gemm_raw(
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

/// Matrix operand: a row-major `rows × cols` buffer, optionally read transposed.
#[derive(Clone, Copy)]
pub struct Mat<'a, R> {
    pub data: &'a [R],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, R> Mat<'a, R> {
    pub fn new(data: &'a [R], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self { data, rows, cols, transposed: false }
    }

    pub fn t(self) -> Self {
        Self { transposed: !self.transposed, ..self }
    }

    /// Logical shape after the optional transpose.
    fn shape(&self) -> (usize, usize) {
        if self.transposed { (self.cols, self.rows) } else { (self.rows, self.cols) }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed { (1, self.cols as isize) } else { (self.cols as isize, 1) }
    }
}

/// `out ← a·b + beta·out`, with `out` row-major `m × n`.
pub fn gemm<R: Real>(a: Mat<'_, R>, b: Mat<'_, R>, beta: R, out: &mut [R]) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "inner dimensions differ");
    assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above bound every access of the three operands.
    unsafe {
        R::gemm_raw(m, k, n, R::one(), a.data.as_ptr(), rsa, csa, b.data.as_ptr(), rsb, csb, beta, out.as_mut_ptr(), n as isize, 1)
    }
}

/// Slice of the flat parameter buffer owned by one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRef {
    pub offset: usize,
    pub len: usize,
}

impl ParamRef {
    pub fn of<'a, R>(&self, buf: &'a [R]) -> &'a [R] {
        &buf[self.offset..self.offset + self.len]
    }

    pub fn of_mut<'a, R>(&self, buf: &'a mut [R]) -> &'a mut [R] {
        &mut buf[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// `U(−1/√fan_in, 1/√fan_in)`.
    FanIn(usize),
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub slot: ParamRef,
    pub init: Init,
}

/// Named tensors packed into one flat buffer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamRef {
        let len = shape.iter().product();
        let slot = ParamRef { offset: self.total, len };
        self.entries.push(ParamEntry { name: name.into(), shape: shape.to_vec(), slot, init });
        self.total += len;
        slot
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn init<R: Real>(&self, rng: &mut impl Rng) -> Vec<R> {
        let mut buf = vec![R::zero(); self.total];
        for e in &self.entries {
            if let Init::FanIn(fan_in) = e.init {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                for v in e.slot.of_mut(&mut buf) {
                    *v = R::lit(rng.gen_range(-bound..bound));
                }
            }
        }
        buf
    }
}

pub fn to_f64<R: Real>(v: &[R]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
}

pub fn from_f64<R: Real>(v: &[f64]) -> Vec<R> {
    v.iter().map(|x| R::lit(*x)).collect()
}
