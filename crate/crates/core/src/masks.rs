//! Additive attention masks (entries `0` or `-inf`).
//!
//! Row and column indices in the visibility rules are 1-based; storage is
//! 0-based, so `(m, n)` in a rule is entry `(m - 1, n - 1)` of the matrix.

use crate::numerics::{Matrix, Scalar};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Causal,
    ChunkCausal,
    StrideAware,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveMask<F> {
    matrix: Matrix<F>,
    kind: MaskKind,
}

impl<F: Scalar> AdditiveMask<F> {
    fn build(t: usize, kind: MaskKind, allow: impl Fn(usize, usize) -> bool) -> Result<Self> {
        if t == 0 {
            return Err(Error::shape("mask", "sequence length must be at least 1"));
        }
        let matrix = Matrix::from_fn(t, t, |i, j| {
            if allow(i + 1, j + 1) {
                F::zero()
            } else {
                F::neg_infinity()
            }
        });
        Ok(Self { matrix, kind })
    }

    pub fn matrix(&self) -> &Matrix<F> {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix<F> {
        self.matrix
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    /// Whether 1-based row `m` may see 1-based column `n`.
    pub fn allows(&self, m: usize, n: usize) -> bool {
        self.matrix.get(m - 1, n - 1) == F::zero()
    }

    /// Number of visible columns in 1-based row `m`.
    pub fn allowed_in_row(&self, m: usize) -> usize {
        self.matrix
            .row(m - 1)
            .iter()
            .filter(|&&v| v == F::zero())
            .count()
    }

    /// The mask as a multiplicative 0/1 matrix.
    pub fn to_indicator(&self) -> Matrix<F> {
        self.matrix
            .map(|v| if v == F::zero() { F::one() } else { F::zero() })
    }
}

fn check_stride(s: usize) -> Result<()> {
    if s == 0 {
        return Err(Error::Parameter(
            "compression ratio s must be at least 1".into(),
        ));
    }
    Ok(())
}

/// `(m, n)` visible iff `n <= m`.
pub fn causal_mask<F: Scalar>(t: usize) -> Result<AdditiveMask<F>> {
    AdditiveMask::build(t, MaskKind::Causal, |m, n| n <= m)
}

/// Causal within chunks of width `s`, nothing across chunks.
pub fn chunk_causal_mask<F: Scalar>(t: usize, s: usize) -> Result<AdditiveMask<F>> {
    check_stride(s)?;
    AdditiveMask::build(t, MaskKind::ChunkCausal, move |m, n| {
        n <= m && m.div_ceil(s) == n.div_ceil(s)
    })
}

/// Row `m` sees itself and the last position of every completed chunk before it.
pub fn stride_aware_causal_mask<F: Scalar>(t: usize, s: usize) -> Result<AdditiveMask<F>> {
    check_stride(s)?;
    AdditiveMask::build(t, MaskKind::StrideAware, move |m, n| {
        n == m || (n < m && n % s == 0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn allowed(mask: &AdditiveMask<f64>) -> Vec<Vec<usize>> {
        (1..=mask.len())
            .map(|m| (1..=mask.len()).filter(|&n| mask.allows(m, n)).collect())
            .collect()
    }

    #[test]
    fn causal_small_cases() {
        assert_eq!(causal_mask::<f64>(1).unwrap().matrix().data(), &[0.0]);
        assert_eq!(
            allowed(&causal_mask(3).unwrap()),
            vec![vec![1], vec![1, 2], vec![1, 2, 3]]
        );
        assert!(causal_mask::<f64>(0).is_err());
    }

    #[test]
    fn chunk_mask_examples() {
        let m = chunk_causal_mask::<f64>(4, 2).unwrap();
        assert_eq!(allowed(&m), vec![vec![1], vec![1, 2], vec![3], vec![3, 4]]);
        for t in 1..7 {
            assert_eq!(
                chunk_causal_mask::<f64>(t, t + 2).unwrap().matrix(),
                causal_mask::<f64>(t).unwrap().matrix()
            );
            let diag = allowed(&chunk_causal_mask(t, 1).unwrap());
            assert!(diag
                .iter()
                .enumerate()
                .all(|(i, cols)| cols == &vec![i + 1]));
        }
        assert!(matches!(
            chunk_causal_mask::<f64>(3, 0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn stride_aware_examples() {
        let m = stride_aware_causal_mask::<f64>(4, 2).unwrap();
        assert_eq!(allowed(&m), vec![vec![1], vec![2], vec![2, 3], vec![2, 4]]);
        for s in 1..5 {
            assert_eq!(
                stride_aware_causal_mask::<f64>(1, s)
                    .unwrap()
                    .matrix()
                    .data(),
                &[0.0]
            );
        }
        assert!(matches!(
            stride_aware_causal_mask::<f64>(3, 0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn masked_entries_are_exact_negative_infinity() {
        let m = stride_aware_causal_mask::<f32>(5, 2).unwrap();
        assert!(m
            .matrix()
            .data()
            .iter()
            .all(|&v| v == 0.0 || v == f32::NEG_INFINITY));
        assert_eq!(m.kind(), MaskKind::StrideAware);
    }

    #[test]
    fn stride_aware_visible_count_is_cache_length() {
        for s in 1..6 {
            let mask = stride_aware_causal_mask::<f64>(40, s).unwrap();
            for m in 1..=40 {
                assert_eq!(mask.allowed_in_row(m), 1 + (m - 1) / s);
                assert_eq!(mask.allowed_in_row(m), m.div_ceil(s));
                for n in 1..m {
                    if mask.allows(m, n) {
                        assert_eq!(n % s, 0);
                    }
                }
            }
        }
    }
}
