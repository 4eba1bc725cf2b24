//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Every model equation is expressed as primitives recorded on a [`Graph`].
//! Values are stored row-major; the last axis is the "column" axis and all
//! leading axes are flattened into rows for matrix-shaped primitives.

mod graph;
mod params;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use graph::{Graph, Var, VarGrads};
pub use params::{Gradients, ParameterStore};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Storage type of a tensor blob on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Config(format!("unknown dtype `{other}`"))),
        }
    }
}

/// Arithmetic precision of a run. Never mixed within one graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    /// Single precision, used for training and decoding.
    #[default]
    Narrow,
    /// Double precision, used for gradient checks.
    Wide,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::Narrow => DType::F32,
            Precision::Wide => DType::F64,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Narrow => "narrow",
            Precision::Wide => "wide",
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "narrow" | "f32" => Ok(Precision::Narrow),
            "wide" | "f64" => Ok(Precision::Wide),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

/// Scalar element type. Implemented for `f32` (narrow) and `f64` (wide).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const DTYPE: DType;

    /// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k`,
    /// `op(b)` is `k x n` and `c` is row-major `m x n`. A transposed operand
    /// is stored row-major in its transposed shape.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn write_le(self, out: &mut Vec<u8>);

    /// Decodes one value from exactly `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn gemm_strides(
    m: usize,
    k: usize,
    n: usize,
    a_len: usize,
    a_trans: bool,
    b_len: usize,
    b_trans: bool,
    c_len: usize,
) -> (isize, isize, isize, isize) {
    assert_eq!(a_len, m * k, "gemm: lhs length");
    assert_eq!(b_len, k * n, "gemm: rhs length");
    assert_eq!(c_len, m * n, "gemm: output length");
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    (rsa, csa, rsb, csb)
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        a_trans: bool,
        b: &[f32],
        b_trans: bool,
        beta: f32,
        c: &mut [f32],
    ) {
        let (rsa, csa, rsb, csb) =
            gemm_strides(m, k, n, a.len(), a_trans, b.len(), b_trans, c.len());
        // SAFETY: slice lengths were checked against the logical extents and
        // strides above, so every index the kernel touches is in bounds.
        unsafe {
            matrixmultiply::sgemm(
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

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        a_trans: bool,
        b: &[f64],
        b_trans: bool,
        beta: f64,
        c: &mut [f64],
    ) {
        let (rsa, csa, rsb, csb) =
            gemm_strides(m, k, n, a.len(), a_trans, b.len(), b_trans, c.len());
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
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

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Numerically stable logistic function. Saturates to exactly 0 or 1 for
/// arguments beyond the floating-point range of `exp`.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Softmax of a finite slice, computed with max-subtraction.
pub fn softmax<T: Real>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("softmax input is not finite".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// `log(sum(exp(xs)))` with max-subtraction.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let total: T = xs.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}
