use super::kernels::{axpy, dot};
use super::{Matrix, Scalar};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10_000.0;

fn check_matmul<F: Scalar>(
    op: &'static str,
    a: &Matrix<F>,
    b: &Matrix<F>,
    inner_a: usize,
    inner_b: usize,
) -> Result<()> {
    if inner_a != inner_b {
        return Err(Error::shape(
            op,
            format!(
                "lhs {}x{} incompatible with rhs {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            ),
        ));
    }
    Ok(())
}

/// `a · b`
pub fn matmul<F: Scalar>(a: &Matrix<F>, b: &Matrix<F>) -> Result<Matrix<F>> {
    check_matmul("matmul", a, b, a.cols(), b.rows())?;
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (k, &aik) in arow.iter().enumerate() {
            if aik != F::zero() {
                axpy(aik, b.row(k), orow);
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`
pub fn matmul_nt<F: Scalar>(a: &Matrix<F>, b: &Matrix<F>) -> Result<Matrix<F>> {
    check_matmul("matmul_nt", a, b, a.cols(), b.cols())?;
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let arow = a.row(i);
        for j in 0..b.rows() {
            out.set(i, j, dot(arow, b.row(j)));
        }
    }
    Ok(out)
}

/// `aᵀ · b`
pub fn matmul_tn<F: Scalar>(a: &Matrix<F>, b: &Matrix<F>) -> Result<Matrix<F>> {
    check_matmul("matmul_tn", a, b, a.rows(), b.rows())?;
    let mut out = Matrix::zeros(a.cols(), b.cols());
    for k in 0..a.rows() {
        let brow = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki != F::zero() {
                axpy(aki, brow, out.row_mut(i));
            }
        }
    }
    Ok(out)
}

/// Softmax along each row of `scores + mask`, with max subtraction.
///
/// Masked (`-inf`) positions come out as exact zeros. A row with no finite
/// entry is an error rather than a row of NaNs.
pub fn row_softmax<F: Scalar>(scores: &Matrix<F>, mask: Option<&Matrix<F>>) -> Result<Matrix<F>> {
    if let Some(m) = mask {
        scores.require_same_shape(m, "row_softmax mask")?;
    }
    let mut out = scores.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        if let Some(m) = mask {
            for (v, &mv) in row.iter_mut().zip(m.row(r)) {
                *v += mv;
            }
        }
        softmax_in_place(row).map_err(|_| Error::DegenerateRow { row: r })?;
    }
    Ok(out)
}

/// In-place softmax of a single row; `Err(())` when every entry is `-inf`.
pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) -> std::result::Result<(), ()> {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() || max.is_nan() {
        return Err(());
    }
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v *= inv;
    }
    Ok(())
}

/// Per-row standardization (biased variance), then `gain ⊙ x̂ + bias`.
pub fn layer_norm<F: Scalar>(x: &Matrix<F>, gain: &[F], bias: &[F], eps: F) -> Result<Matrix<F>> {
    if x.cols() == 0 {
        return Err(Error::shape("layer_norm", "zero columns"));
    }
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "gain/bias of length {}/{} for {} columns",
                gain.len(),
                bias.len(),
                x.cols()
            ),
        ));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        layer_norm_row(out.row_mut(r), gain, bias, eps);
    }
    Ok(out)
}

/// Normalizes `row` in place and returns `1 / sqrt(var + eps)`.
pub(crate) fn layer_norm_row<F: Scalar>(row: &mut [F], gain: &[F], bias: &[F], eps: F) -> F {
    let n = F::from_usize(row.len());
    let mean = row.iter().copied().sum::<F>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let inv_std = (var + eps).sqrt().recip();
    for ((v, &g), &b) in row.iter_mut().zip(gain).zip(bias) {
        *v = (*v - mean) * inv_std * g + b;
    }
    inv_std
}

/// Logistic function, clamped into the open interval `(0, 1)`.
#[inline]
pub fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    let y = if x >= F::zero() {
        (F::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (F::one() + e)
    };
    let below_one = F::one() - F::epsilon() / F::from_f64(2.0);
    y.max(F::min_positive_value()).min(below_one)
}

pub fn sigmoid<F: Scalar>(x: &Matrix<F>) -> Matrix<F> {
    x.map(sigmoid_scalar)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let k = F::from_f64(0.044_715);
    let half = F::from_f64(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub fn gelu_derivative<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let k = F::from_f64(0.044_715);
    let half = F::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + F::from_f64(3.0) * k * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

/// Sinusoidal embedding of a 1-based position with interleaved sin/cos pairs.
pub fn sinusoidal_pe<F: Scalar>(position: usize, dim: usize) -> Result<Vec<F>> {
    let mut out = vec![F::zero(); dim];
    sinusoidal_pe_into(position, &mut out)?;
    Ok(out)
}

pub fn sinusoidal_pe_into<F: Scalar>(position: usize, out: &mut [F]) -> Result<()> {
    let dim = out.len();
    if !dim.is_multiple_of(2) {
        return Err(Error::shape(
            "sinusoidal_pe",
            format!("odd dimension {dim}"),
        ));
    }
    if position == 0 {
        return Err(Error::Parameter("positions are 1-based".into()));
    }
    let phase = (position - 1) as f64;
    for k in 0..dim / 2 {
        let freq = ROPE_BASE.powf(-((2 * k) as f64) / dim as f64);
        let a = phase * freq;
        out[2 * k] = F::from_f64(a.sin());
        out[2 * k + 1] = F::from_f64(a.cos());
    }
    Ok(())
}

/// Rotation angle for pair `k` of a `dim`-wide vector at 1-based `position`.
#[inline]
pub fn rope_angle(position: usize, k: usize, dim: usize, base: f64) -> f64 {
    (position as f64 - 1.0) * base.powf(-((2 * k) as f64) / dim as f64)
}

/// Rotates adjacent pairs of `row` for `position`; `inverse` applies the
/// transpose rotation.
pub fn rope_in_place<F: Scalar>(row: &mut [F], position: usize, base: f64, inverse: bool) {
    let dim = row.len();
    for k in 0..dim / 2 {
        let a = rope_angle(position, k, dim, base);
        let (s, c) = a.sin_cos();
        let (s, c) = (F::from_f64(if inverse { -s } else { s }), F::from_f64(c));
        let (x0, x1) = (row[2 * k], row[2 * k + 1]);
        row[2 * k] = x0 * c - x1 * s;
        row[2 * k + 1] = x0 * s + x1 * c;
    }
}

/// Rotary embedding of each row at the matching 1-based position.
pub fn rope_rotate<F: Scalar>(x: &Matrix<F>, positions: &[usize], base: f64) -> Result<Matrix<F>> {
    rope_rotate_heads(x, positions, base, x.cols())
}

/// Applies [`rope_rotate`] independently to each `head_dim`-wide column block.
pub fn rope_rotate_heads<F: Scalar>(
    x: &Matrix<F>,
    positions: &[usize],
    base: f64,
    head_dim: usize,
) -> Result<Matrix<F>> {
    rope_apply(x, positions, base, head_dim, false)
}

pub(crate) fn rope_apply<F: Scalar>(
    x: &Matrix<F>,
    positions: &[usize],
    base: f64,
    head_dim: usize,
    inverse: bool,
) -> Result<Matrix<F>> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) || !x.cols().is_multiple_of(head_dim) {
        return Err(Error::shape(
            "rope_rotate",
            format!("{} columns with head width {head_dim}", x.cols()),
        ));
    }
    if positions.len() != x.rows() {
        return Err(Error::shape(
            "rope_rotate",
            format!("{} positions for {} rows", positions.len(), x.rows()),
        ));
    }
    if positions.contains(&0) {
        return Err(Error::Parameter("positions are 1-based".into()));
    }
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        for head in out.row_mut(r).chunks_exact_mut(head_dim) {
            rope_in_place(head, pos, base, inverse);
        }
    }
    Ok(out)
}
