//! MHA, MQA and GQA: full per-head keys and values, `kv_heads` of them.

use rand::Rng;

use crate::config::{AttentionConfig, Variant};
use crate::decode::{DecodeScratch, OnlineSoftmax, SCORE_BLOCK};
use crate::graph::{Eager, Graph};
use crate::masks::AdditiveMask;
use crate::numerics::{
    axpy_rows, dot, dot_pairs4, rope_in_place, vec_mat, Matrix, Scalar, ROPE_BASE,
};
use crate::params::{init_weight, param_set};
use crate::{Error, Result};

param_set! {
    /// Projections of a dense variant; `w_k`/`w_v` are `d x (kv_heads * d_h)`.
    DenseParams { w_q, w_k, w_v, w_o }
}

impl DenseParams<(usize, usize)> {
    pub fn shapes(cfg: &AttentionConfig, kv_heads: usize) -> Self {
        let qdim = cfg.n_h * cfg.d_h;
        let kvdim = kv_heads * cfg.d_h;
        Self {
            w_q: (cfg.d, qdim),
            w_k: (cfg.d, kvdim),
            w_v: (cfg.d, kvdim),
            w_o: (qdim, cfg.d),
        }
    }
}

impl<F: Scalar> DenseParams<Matrix<F>> {
    pub fn init(cfg: &AttentionConfig, kv_heads: usize, rng: &mut impl Rng) -> Self {
        DenseParams::shapes(cfg, kv_heads).map(|&(r, c)| init_weight(r, c, rng))
    }
}

/// Growing key/value rows; keys are stored already rotated.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseKVCache<F> {
    pub keys: Matrix<F>,
    pub values: Matrix<F>,
    pub step: usize,
}

impl<F: Scalar> DenseKVCache<F> {
    pub fn new(width: usize, capacity: usize) -> Self {
        Self {
            keys: Matrix::with_row_capacity(width, capacity),
            values: Matrix::with_row_capacity(width, capacity),
            step: 0,
        }
    }

    pub fn elements(&self) -> usize {
        self.keys.len() + self.values.len()
    }
}

/// Training-mode forward pass for any dense variant.
pub fn dense_forward_graph<F: Scalar, G: Graph<F>>(
    g: &mut G,
    cfg: &AttentionConfig,
    kv_heads: usize,
    p: &DenseParams<G::Value>,
    x: &G::Value,
    mask: &AdditiveMask<F>,
) -> Result<G::Value> {
    let t = g.value(x).rows();
    let positions: Vec<usize> = (1..=t).collect();
    let d_h = cfg.d_h;
    let q = g.matmul(x, &p.w_q)?;
    let q = g.rope(&q, &positions, d_h)?;
    let k = g.matmul(x, &p.w_k)?;
    let k = g.rope(&k, &positions, d_h)?;
    let v = g.matmul(x, &p.w_v)?;
    let mut ks = Vec::with_capacity(kv_heads);
    let mut vs = Vec::with_capacity(kv_heads);
    for j in 0..kv_heads {
        ks.push(g.slice_cols(&k, j * d_h, d_h)?);
        vs.push(g.slice_cols(&v, j * d_h, d_h)?);
    }
    let per_group = cfg.n_h / kv_heads;
    let scale = F::from_usize(d_h).sqrt().recip();
    let mut heads = Vec::with_capacity(cfg.n_h);
    for h in 0..cfg.n_h {
        let j = h / per_group;
        let qh = g.slice_cols(&q, h * d_h, d_h)?;
        let scores = g.matmul_nt(&qh, &ks[j])?;
        let scores = g.scale(&scores, scale);
        let probs = g.softmax(&scores, Some(mask))?;
        heads.push(g.matmul(&probs, &vs[j])?);
    }
    let o = g.concat_cols(&heads)?;
    g.matmul(&o, &p.w_o)
}

/// One decoding step over `cache`: appends this token's key/value row, then
/// attends over every cached row.
pub fn dense_step_into<F: Scalar>(
    cfg: &AttentionConfig,
    kv_heads: usize,
    p: &DenseParams<Matrix<F>>,
    x: &[F],
    cache: &mut DenseKVCache<F>,
    sc: &mut DecodeScratch<F>,
    out: &mut [F],
) -> Result<()> {
    if x.len() != cfg.d || out.len() != cfg.d {
        return Err(Error::shape(
            "dense step",
            format!(
                "input/output of length {}/{}, d = {}",
                x.len(),
                out.len(),
                cfg.d
            ),
        ));
    }
    let d_h = cfg.d_h;
    let kvdim = kv_heads * d_h;
    if cache.keys.cols() != kvdim {
        return Err(Error::shape(
            "dense step",
            format!("cache width {} but kv width {kvdim}", cache.keys.cols()),
        ));
    }
    let pos = cache.step + 1;
    let DecodeScratch {
        q,
        k,
        v,
        o,
        scores,
        softmax,
        ..
    } = sc;
    let (k, v) = (&mut k[..kvdim], &mut v[..kvdim]);
    vec_mat(x, &p.w_q, q);
    vec_mat(x, &p.w_k, k);
    vec_mat(x, &p.w_v, v);
    for head in q.chunks_exact_mut(d_h) {
        rope_in_place(head, pos, ROPE_BASE, false);
    }
    for head in k.chunks_exact_mut(d_h) {
        rope_in_place(head, pos, ROPE_BASE, false);
    }
    cache.keys.push_row(k)?;
    cache.values.push_row(v)?;
    cache.step = pos;

    let t = cache.step;
    let per_group = cfg.n_h / kv_heads;
    let scale = F::from_usize(d_h).sqrt().recip();
    let quads = cfg.n_h / 4 * 4;
    o.fill(F::zero());
    softmax.fill(OnlineSoftmax::new());
    for start in (0..t).step_by(SCORE_BLOCK) {
        let len = (start + SCORE_BLOCK).min(t) - start;
        for i in 0..len {
            let krow = cache.keys.row(start + i);
            let key = |h: usize| &krow[h / per_group * d_h..(h / per_group + 1) * d_h];
            for h in (0..quads).step_by(4) {
                let four = dot_pairs4(
                    std::array::from_fn(|j| &q[(h + j) * d_h..(h + j + 1) * d_h]),
                    std::array::from_fn(|j| key(h + j)),
                );
                for j in 0..4 {
                    scores[(h + j) * SCORE_BLOCK + i] = four[j] * scale;
                }
            }
            for h in quads..cfg.n_h {
                scores[h * SCORE_BLOCK + i] = dot(&q[h * d_h..(h + 1) * d_h], key(h)) * scale;
            }
        }
        for h in 0..cfg.n_h {
            let j = h / per_group;
            let values = &cache.values;
            let (p, acc) = (
                &mut scores[h * SCORE_BLOCK..h * SCORE_BLOCK + len],
                &mut o[h * d_h..(h + 1) * d_h],
            );
            softmax[h].absorb(p, acc);
            axpy_rows(p, |i| &values.row(start + i)[j * d_h..(j + 1) * d_h], acc);
        }
    }
    for h in 0..cfg.n_h {
        softmax[h].finish(&mut o[h * d_h..(h + 1) * d_h], h)?;
    }
    vec_mat(o, &p.w_o, out);
    Ok(())
}

/// A dense attention layer with concrete weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseAttention<F> {
    pub cfg: AttentionConfig,
    pub variant: Variant,
    pub params: DenseParams<Matrix<F>>,
}

impl<F: Scalar> DenseAttention<F> {
    pub fn new(cfg: AttentionConfig, variant: Variant, rng: &mut impl Rng) -> Result<Self> {
        check_dense(&cfg, variant)?;
        let params = DenseParams::init(&cfg, cfg.kv_heads(variant), rng);
        Ok(Self {
            cfg,
            variant,
            params,
        })
    }

    pub fn from_params(
        cfg: AttentionConfig,
        variant: Variant,
        params: DenseParams<Matrix<F>>,
    ) -> Result<Self> {
        check_dense(&cfg, variant)?;
        let shapes = DenseParams::shapes(&cfg, cfg.kv_heads(variant));
        for ((name, m), (_, &want)) in params.iter().zip(shapes.iter()) {
            if m.shape() != want {
                return Err(Error::shape(
                    "DenseAttention",
                    format!("{name} is {:?}, expected {want:?}", m.shape()),
                ));
            }
        }
        Ok(Self {
            cfg,
            variant,
            params,
        })
    }

    pub fn kv_heads(&self) -> usize {
        self.cfg.kv_heads(self.variant)
    }

    pub fn forward_train(&self, x: &Matrix<F>, mask: &AdditiveMask<F>) -> Result<Matrix<F>> {
        check_input(&self.cfg, x, mask)?;
        dense_forward_graph(
            &mut Eager,
            &self.cfg,
            self.kv_heads(),
            &self.params,
            x,
            mask,
        )
    }

    pub fn new_cache(&self, capacity: usize) -> DenseKVCache<F> {
        DenseKVCache::new(self.kv_heads() * self.cfg.d_h, capacity)
    }

    pub fn step(&self, x: &Matrix<F>, cache: &mut DenseKVCache<F>) -> Result<Matrix<F>> {
        if x.rows() != 1 {
            return Err(Error::shape(
                "dense step",
                format!("expected one row, got {}", x.rows()),
            ));
        }
        let mut sc = DecodeScratch::new(&self.cfg, cache.step + 1);
        let mut out = vec![F::zero(); self.cfg.d];
        self.step_into(x.data(), cache, &mut sc, &mut out)?;
        Ok(Matrix::row_vector(out))
    }

    pub fn step_into(
        &self,
        x: &[F],
        cache: &mut DenseKVCache<F>,
        sc: &mut DecodeScratch<F>,
        out: &mut [F],
    ) -> Result<()> {
        dense_step_into(&self.cfg, self.kv_heads(), &self.params, x, cache, sc, out)
    }
}

fn check_dense(cfg: &AttentionConfig, variant: Variant) -> Result<()> {
    cfg.validate()?;
    if !variant.is_dense() {
        return Err(Error::Config(format!("{variant} is not a dense variant")));
    }
    Ok(())
}

pub(crate) fn check_input<F: Scalar>(
    cfg: &AttentionConfig,
    x: &Matrix<F>,
    mask: &AdditiveMask<F>,
) -> Result<()> {
    if x.rows() == 0 || x.cols() != cfg.d {
        return Err(Error::shape(
            "attention input",
            format!("{}x{} for d = {}", x.rows(), x.cols(), cfg.d),
        ));
    }
    if mask.len() != x.rows() {
        return Err(Error::shape(
            "attention mask",
            format!("{0}x{0} mask for {1} rows", mask.len(), x.rows()),
        ));
    }
    Ok(())
}
