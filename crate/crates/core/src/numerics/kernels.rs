use super::{Matrix, Scalar};

const W: usize = 16;

#[inline(always)]
fn fma_chunk<F: Scalar>(acc: &mut [F; W], a: &[F], b: &[F]) {
    for l in 0..W {
        acc[l] = a[l].mul_add(b[l], acc[l]);
    }
}

#[inline(always)]
fn reduce<F: Scalar>(acc: &[F; W]) -> F {
    let mut s = [F::zero(); 4];
    for l in 0..4 {
        s[l] = (acc[l] + acc[l + 8]) + (acc[l + 4] + acc[l + 12]);
    }
    (s[0] + s[2]) + (s[1] + s[3])
}

/// Inner product of two equal-length slices.
///
/// The operands are split into four quarters reduced side by side, then the
/// partial sums are combined in a fixed order.
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let q = n / 4;
    let parts = dot_pairs4(
        std::array::from_fn(|i| &a[i * q..(i + 1) * q]),
        std::array::from_fn(|i| &b[i * q..(i + 1) * q]),
    );
    let mut tail = F::zero();
    for k in 4 * q..n {
        tail = a[k].mul_add(b[k], tail);
    }
    ((parts[0] + parts[1]) + (parts[2] + parts[3])) + tail
}

/// Four independent inner products `a[i] · b[i]` over equal lengths.
#[inline]
pub fn dot_pairs4<F: Scalar>(a: [&[F]; 4], b: [&[F]; 4]) -> [F; 4] {
    let n = b[0].len();
    let a = a.map(|x| &x[..n]);
    let b = b.map(|x| &x[..n]);
    let mut acc = [[F::zero(); W]; 4];
    let split = n / W * W;
    let mut k = 0;
    while k < split {
        for (h, acc) in acc.iter_mut().enumerate() {
            fma_chunk(acc, &a[h][k..k + W], &b[h][k..k + W]);
        }
        k += W;
    }
    let mut out = [F::zero(); 4];
    for h in 0..4 {
        let mut tail = F::zero();
        for j in split..n {
            tail = a[h][j].mul_add(b[h][j], tail);
        }
        out[h] = reduce(&acc[h]) + tail;
    }
    out
}

/// Four inner products against one shared vector `b`, reading `b` once.
#[inline]
pub fn dot4<F: Scalar>(a: [&[F]; 4], b: &[F]) -> [F; 4] {
    let n = b.len();
    let a = a.map(|x| &x[..n]);
    let mut acc = [[F::zero(); W]; 4];
    let split = n / W * W;
    let mut k = 0;
    while k < split {
        let bk = &b[k..k + W];
        for (h, acc) in acc.iter_mut().enumerate() {
            fma_chunk(acc, &a[h][k..k + W], bk);
        }
        k += W;
    }
    let mut out = [F::zero(); 4];
    for h in 0..4 {
        let mut tail = F::zero();
        for j in split..n {
            tail = a[h][j].mul_add(b[j], tail);
        }
        out[h] = reduce(&acc[h]) + tail;
    }
    out
}

/// `y += alpha * x`
#[inline]
pub fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = alpha.mul_add(xi, *yi);
    }
}

/// `y += Σ alpha[i] * x[i]`, touching `y` once for four rows.
#[inline]
pub fn axpy4<F: Scalar>(alpha: [F; 4], x: [&[F]; 4], y: &mut [F]) {
    let n = y.len();
    let [x0, x1, x2, x3] = x.map(|r| &r[..n]);
    for k in 0..n {
        let mut v = y[k];
        v = alpha[0].mul_add(x0[k], v);
        v = alpha[1].mul_add(x1[k], v);
        v = alpha[2].mul_add(x2[k], v);
        v = alpha[3].mul_add(x3[k], v);
        y[k] = v;
    }
}

/// `y += Σ_i alpha[i] * rows(i)` over `alpha.len()` rows, four at a time.
#[inline]
pub fn axpy_rows<'a, F: Scalar + 'a>(
    alpha: &[F],
    mut rows: impl FnMut(usize) -> &'a [F],
    y: &mut [F],
) {
    let n = alpha.len();
    let mut i = 0;
    while i + 4 <= n {
        let a = [alpha[i], alpha[i + 1], alpha[i + 2], alpha[i + 3]];
        axpy4(a, [rows(i), rows(i + 1), rows(i + 2), rows(i + 3)], y);
        i += 4;
    }
    while i < n {
        axpy(alpha[i], rows(i), y);
        i += 1;
    }
}

/// `out = x · w` for a row vector `x` of length `w.rows()`.
pub fn vec_mat<F: Scalar>(x: &[F], w: &Matrix<F>, out: &mut [F]) {
    debug_assert_eq!(x.len(), w.rows());
    debug_assert_eq!(out.len(), w.cols());
    out.fill(F::zero());
    axpy_rows(x, |k| w.row(k), out);
}
