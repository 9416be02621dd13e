//! Dense row-major matrices and the small set of neural primitives everything
//! else is built from.
//!
//! All arithmetic is generic over [`Scalar`] so the same code runs in single or
//! double precision. Kernels are plain loops; results are deterministic for a
//! fixed precision and host.

mod kernels;
mod matrix;
pub(crate) mod ops;

pub use kernels::{axpy, axpy4, axpy_rows, dot, dot4, dot_pairs4, vec_mat};
pub use matrix::Matrix;
pub use ops::{
    gelu, gelu_derivative, layer_norm, matmul, matmul_nt, matmul_tn, rope_angle, rope_in_place,
    rope_rotate, rope_rotate_heads, row_softmax, sigmoid, sigmoid_scalar, sinusoidal_pe,
    sinusoidal_pe_into, LAYER_NORM_EPS, ROPE_BASE,
};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::str::FromStr;

use num_traits::Float;

/// Floating-point precision of a computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::Single => "single",
            Precision::Double => "double",
        })
    }
}

impl FromStr for Precision {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(crate::Error::Parameter(format!(
                "unknown precision `{other}`"
            ))),
        }
    }
}

/// Real number type a [`Matrix`] can hold.
pub trait Scalar:
    Float
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
