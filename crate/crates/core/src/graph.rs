//! One forward-pass vocabulary with two interpreters.
//!
//! Model code is written once against [`Graph`]. [`Eager`] evaluates it
//! directly on matrices; [`Tape`](crate::autodiff::Tape) evaluates the same
//! kernels and records the graph for reverse-mode differentiation, so taped
//! and untaped outputs are bit-identical.

use crate::masks::AdditiveMask;
use crate::numerics::{self, Matrix, Scalar};
use crate::{Error, Result};

pub trait Graph<F: Scalar> {
    type Value: Clone;

    /// A non-differentiable input.
    fn constant(&mut self, m: Matrix<F>) -> Self::Value;
    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Matrix<F>;

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// `a · bᵀ`
    fn matmul_nt(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// Element-wise product.
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// Adds a `1 x cols` row to every row of `a`.
    fn add_row(&mut self, a: &Self::Value, row: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, a: &Self::Value, k: F) -> Self::Value;
    /// Zeroes the entries `mask` hides.
    fn masked_zero(&mut self, a: &Self::Value, mask: &AdditiveMask<F>) -> Result<Self::Value>;
    fn softmax(
        &mut self,
        scores: &Self::Value,
        mask: Option<&AdditiveMask<F>>,
    ) -> Result<Self::Value>;
    fn layer_norm(
        &mut self,
        x: &Self::Value,
        gain: &Self::Value,
        bias: &Self::Value,
        eps: F,
    ) -> Result<Self::Value>;
    fn sigmoid(&mut self, a: &Self::Value) -> Self::Value;
    fn gelu(&mut self, a: &Self::Value) -> Self::Value;
    /// Rotary embedding per `head_dim`-wide block, row `i` at `positions[i]`.
    fn rope(
        &mut self,
        a: &Self::Value,
        positions: &[usize],
        head_dim: usize,
    ) -> Result<Self::Value>;
    fn slice_cols(&mut self, a: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;
    fn slice_rows(&mut self, a: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;
    fn concat_cols(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn gather_rows(&mut self, table: &Self::Value, indices: &[usize]) -> Result<Self::Value>;
    /// Mean token cross-entropy over rows with a target; `1 x 1`.
    fn cross_entropy(
        &mut self,
        logits: &Self::Value,
        targets: &[Option<usize>],
    ) -> Result<Self::Value>;
    /// Sum of all entries; `1 x 1`.
    fn sum(&mut self, a: &Self::Value) -> Self::Value;
    /// Arbitrary element-wise map. Only interpreters that need no derivative
    /// support it.
    fn map(&mut self, a: &Self::Value, name: &str, f: fn(F) -> F) -> Result<Self::Value>;
}

/// Direct evaluation.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl<F: Scalar> Graph<F> for Eager {
    type Value = Matrix<F>;

    fn constant(&mut self, m: Matrix<F>) -> Matrix<F> {
        m
    }

    fn value<'a>(&'a self, v: &'a Matrix<F>) -> &'a Matrix<F> {
        v
    }

    fn matmul(&mut self, a: &Matrix<F>, b: &Matrix<F>) -> Result<Matrix<F>> {
        numerics::matmul(a, b)
    }

    fn matmul_nt(&mut self, a: &Matrix<F>, b: &Matrix<F>) -> Result<Matrix<F>> {
        numerics::matmul_nt(a, b)
    }

    fn add(&mut self, a: &Matrix<F>, b: &Matrix<F>) -> Result<Matrix<F>> {
        a.add(b)
    }

    fn mul(&mut self, a: &Matrix<F>, b: &Matrix<F>) -> Result<Matrix<F>> {
        a.hadamard(b)
    }

    fn add_row(&mut self, a: &Matrix<F>, row: &Matrix<F>) -> Result<Matrix<F>> {
        a.add_row_broadcast(row)
    }

    fn scale(&mut self, a: &Matrix<F>, k: F) -> Matrix<F> {
        a.scale(k)
    }

    fn masked_zero(&mut self, a: &Matrix<F>, mask: &AdditiveMask<F>) -> Result<Matrix<F>> {
        masked_zero_forward(a, mask)
    }

    fn softmax(&mut self, scores: &Matrix<F>, mask: Option<&AdditiveMask<F>>) -> Result<Matrix<F>> {
        numerics::row_softmax(scores, mask.map(AdditiveMask::matrix))
    }

    fn layer_norm(
        &mut self,
        x: &Matrix<F>,
        gain: &Matrix<F>,
        bias: &Matrix<F>,
        eps: F,
    ) -> Result<Matrix<F>> {
        numerics::layer_norm(x, gain.data(), bias.data(), eps)
    }

    fn sigmoid(&mut self, a: &Matrix<F>) -> Matrix<F> {
        numerics::sigmoid(a)
    }

    fn gelu(&mut self, a: &Matrix<F>) -> Matrix<F> {
        a.map(numerics::gelu)
    }

    fn rope(&mut self, a: &Matrix<F>, positions: &[usize], head_dim: usize) -> Result<Matrix<F>> {
        numerics::rope_rotate_heads(a, positions, numerics::ROPE_BASE, head_dim)
    }

    fn slice_cols(&mut self, a: &Matrix<F>, start: usize, len: usize) -> Result<Matrix<F>> {
        a.slice_cols(start, len)
    }

    fn slice_rows(&mut self, a: &Matrix<F>, start: usize, len: usize) -> Result<Matrix<F>> {
        a.slice_rows(start, len)
    }

    fn concat_cols(&mut self, parts: &[Matrix<F>]) -> Result<Matrix<F>> {
        let refs: Vec<&Matrix<F>> = parts.iter().collect();
        Matrix::concat_cols(&refs)
    }

    fn gather_rows(&mut self, table: &Matrix<F>, indices: &[usize]) -> Result<Matrix<F>> {
        table.gather_rows(indices)
    }

    fn cross_entropy(
        &mut self,
        logits: &Matrix<F>,
        targets: &[Option<usize>],
    ) -> Result<Matrix<F>> {
        let (loss, _) = cross_entropy_forward(logits, targets)?;
        Ok(Matrix::filled(1, 1, loss))
    }

    fn sum(&mut self, a: &Matrix<F>) -> Matrix<F> {
        Matrix::filled(1, 1, a.sum())
    }

    fn map(&mut self, a: &Matrix<F>, _name: &str, f: fn(F) -> F) -> Result<Matrix<F>> {
        Ok(a.map(f))
    }
}

pub(crate) fn masked_zero_forward<F: Scalar>(
    a: &Matrix<F>,
    mask: &AdditiveMask<F>,
) -> Result<Matrix<F>> {
    a.zip_map(mask.matrix(), "masked_zero", |v, m| {
        if m == F::zero() {
            v
        } else {
            F::zero()
        }
    })
}

/// Mean negative log-likelihood and the softmax probabilities.
pub(crate) fn cross_entropy_forward<F: Scalar>(
    logits: &Matrix<F>,
    targets: &[Option<usize>],
) -> Result<(F, Matrix<F>)> {
    if targets.len() != logits.rows() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} targets for {} rows", targets.len(), logits.rows()),
        ));
    }
    let probs = numerics::row_softmax(logits, None)?;
    let mut total = F::zero();
    let mut count = 0usize;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            if t >= logits.cols() {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("target {t} out of range for {} classes", logits.cols()),
                ));
            }
            let row = logits.row(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            total += lse - row[t];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Parameter(
            "cross_entropy needs at least one target".into(),
        ));
    }
    Ok((total / F::from_usize(count), probs))
}
