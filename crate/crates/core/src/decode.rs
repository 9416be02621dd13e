//! Reusable buffers for single-token decoding steps.

use crate::config::AttentionConfig;
use crate::error::{Error, Result};
use crate::numerics::Scalar;

/// Cached rows are visited in blocks of this many; one block of scores per
/// head lives in scratch, so the buffer does not grow with the sequence.
pub(crate) const SCORE_BLOCK: usize = 32;

/// Working memory for one decoding stream, sized once from the config.
#[derive(Debug, Clone)]
pub struct DecodeScratch<F> {
    pub(crate) q: Vec<F>,
    pub(crate) k: Vec<F>,
    pub(crate) v: Vec<F>,
    pub(crate) qa: Vec<F>,
    pub(crate) qr: Vec<F>,
    pub(crate) u: Vec<F>,
    pub(crate) o: Vec<F>,
    pub(crate) c: Vec<F>,
    pub(crate) kr: Vec<F>,
    pub(crate) pe: Vec<F>,
    pub(crate) hp: Vec<F>,
    pub(crate) hc: Vec<F>,
    pub(crate) scores: Vec<F>,
    pub(crate) softmax: Vec<OnlineSoftmax<F>>,
}

impl<F: Scalar> DecodeScratch<F> {
    /// `capacity` is accepted for symmetry with the caches; scratch size
    /// depends only on the config.
    pub fn new(cfg: &AttentionConfig, _capacity: usize) -> Self {
        let heads = cfg.n_h * cfg.d_h;
        let z = |n: usize| vec![F::zero(); n];
        Self {
            q: z(heads),
            k: z(heads),
            v: z(heads),
            qa: z(cfg.n_h * cfg.r),
            qr: z(cfg.n_h * cfg.d_rope),
            u: z(cfg.n_h * cfg.r),
            o: z(heads),
            c: z(cfg.r),
            kr: z(cfg.d_rope),
            pe: z(cfg.r),
            hp: z(cfg.d_hyp),
            hc: z(cfg.d_hyp),
            scores: z(cfg.n_h * SCORE_BLOCK),
            softmax: vec![OnlineSoftmax::new(); cfg.n_h],
        }
    }
}

/// Streaming softmax over score blocks: keeps the running maximum and
/// normalizer, rescaling the weighted accumulator whenever the maximum rises.
#[derive(Debug, Clone, Copy)]
pub(crate) struct OnlineSoftmax<F> {
    max: F,
    sum: F,
}

impl<F: Scalar> OnlineSoftmax<F> {
    pub(crate) fn new() -> Self {
        Self {
            max: F::neg_infinity(),
            sum: F::zero(),
        }
    }

    /// Turns `block` into unnormalized weights relative to the running
    /// maximum and rescales `acc` to the same reference.
    pub(crate) fn absorb(&mut self, block: &mut [F], acc: &mut [F]) {
        let m = block.iter().copied().fold(self.max, F::max);
        if m > self.max {
            let shrink = (self.max - m).exp();
            for a in acc.iter_mut() {
                *a *= shrink;
            }
            self.sum *= shrink;
            self.max = m;
        }
        if self.max == F::neg_infinity() {
            block.fill(F::zero());
            return;
        }
        for v in block.iter_mut() {
            *v = (*v - self.max).exp();
            self.sum += *v;
        }
    }

    /// Divides `acc` by the normalizer; `head` labels the error.
    pub(crate) fn finish(&self, acc: &mut [F], head: usize) -> Result<()> {
        if self.max == F::neg_infinity()
            || self.max.is_nan()
            || self.sum.is_nan()
            || self.sum <= F::zero()
        {
            return Err(Error::DegenerateRow { row: head });
        }
        let inv = self.sum.recip();
        for a in acc.iter_mut() {
            *a *= inv;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::softmax_in_place;

    #[test]
    fn blocked_weights_match_full_softmax() {
        let s: Vec<f64> = (0..77)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.9 + (i as f64 * 0.05))
            .collect();
        let vals: Vec<f64> = (0..77).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut p = s.clone();
        softmax_in_place(&mut p).unwrap();
        let want: f64 = p.iter().zip(&vals).map(|(a, b)| a * b).sum();
        for block in [1usize, 5, 32, 100] {
            let mut st = OnlineSoftmax::new();
            let mut acc = [0.0];
            for (chunk, v) in s.chunks(block).zip(vals.chunks(block)) {
                let mut w = chunk.to_vec();
                st.absorb(&mut w, &mut acc);
                acc[0] += w.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            }
            st.finish(&mut acc, 0).unwrap();
            assert!((acc[0] - want).abs() < 1e-14, "block {block}");
        }
    }

    #[test]
    fn all_negative_infinity_is_degenerate() {
        let mut st = OnlineSoftmax::<f64>::new();
        let mut block = [f64::NEG_INFINITY; 3];
        let mut acc = [1.0];
        st.absorb(&mut block, &mut acc);
        assert_eq!(block, [0.0; 3]);
        assert!(matches!(
            st.finish(&mut acc, 2),
            Err(Error::DegenerateRow { row: 2 })
        ));
    }
}
