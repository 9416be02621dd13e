//! Shared machinery for latent-cache attention (MLA and MTLA): latent
//! projection, decoupled rotary path, and attention directly over cached
//! latent rows with the up-projections folded into the query/output sides.

use rand::Rng;

use crate::config::AttentionConfig;
use crate::decode::{DecodeScratch, OnlineSoftmax, SCORE_BLOCK};
use crate::graph::{Eager, Graph};
use crate::masks::{causal_mask, AdditiveMask};
use crate::numerics::{
    axpy_rows, dot, dot4, ops::layer_norm_row, rope_in_place, vec_mat, Matrix, Scalar,
    LAYER_NORM_EPS, ROPE_BASE,
};
use crate::params::{init_weight, ones_row, param_set, zeros_row};
use crate::{Error, Result};

/// How attention scores and outputs are formed from the latent rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionPath {
    /// Per-head `W_Q W_Kᵀ` and `W_V W_O` products applied to the latents.
    #[default]
    Absorbed,
    /// Materialize `K = Ĉ W_K`, `V = Ĉ W_V` and run ordinary attention.
    Explicit,
}

/// Borrowed view of the weights every latent variant shares.
#[derive(Debug, Clone, Copy)]
pub struct LatentWeights<'a, T> {
    pub w_q: &'a T,
    pub w_r: &'a T,
    pub ln_gain: &'a T,
    pub ln_bias: &'a T,
    pub w_k: &'a T,
    pub w_v: &'a T,
    pub w_o: &'a T,
    pub w_qr: &'a T,
    pub w_kr: &'a T,
}

param_set! {
    /// MLA weights: `w_r: d x r`, `w_k, w_v: r x (n_h d_h)`, `w_qr: d x (n_h d_rope)`, `w_kr: r x d_rope`.
    MlaParams { w_q, w_r, ln_gain, ln_bias, w_k, w_v, w_o, w_qr, w_kr }
}

impl MlaParams<(usize, usize)> {
    pub fn shapes(cfg: &AttentionConfig) -> Self {
        let heads = cfg.n_h * cfg.d_h;
        Self {
            w_q: (cfg.d, heads),
            w_r: (cfg.d, cfg.r),
            ln_gain: (1, cfg.r),
            ln_bias: (1, cfg.r),
            w_k: (cfg.r, heads),
            w_v: (cfg.r, heads),
            w_o: (heads, cfg.d),
            w_qr: (cfg.d, cfg.n_h * cfg.d_rope),
            w_kr: (cfg.r, cfg.d_rope),
        }
    }
}

impl<F: Scalar> MlaParams<Matrix<F>> {
    pub fn init(cfg: &AttentionConfig, rng: &mut impl Rng) -> Self {
        let s = MlaParams::shapes(cfg);
        Self {
            w_q: init_weight(s.w_q.0, s.w_q.1, rng),
            w_r: init_weight(s.w_r.0, s.w_r.1, rng),
            ln_gain: ones_row(cfg.r),
            ln_bias: zeros_row(cfg.r),
            w_k: init_weight(s.w_k.0, s.w_k.1, rng),
            w_v: init_weight(s.w_v.0, s.w_v.1, rng),
            w_o: init_weight(s.w_o.0, s.w_o.1, rng),
            w_qr: init_weight(s.w_qr.0, s.w_qr.1, rng),
            w_kr: init_weight(s.w_kr.0, s.w_kr.1, rng),
        }
    }
}

impl<T> MlaParams<T> {
    pub fn weights(&self) -> LatentWeights<'_, T> {
        LatentWeights {
            w_q: &self.w_q,
            w_r: &self.w_r,
            ln_gain: &self.ln_gain,
            ln_bias: &self.ln_bias,
            w_k: &self.w_k,
            w_v: &self.w_v,
            w_o: &self.w_o,
            w_qr: &self.w_qr,
            w_kr: &self.w_kr,
        }
    }
}

pub(crate) fn check_shapes<'a, F: Scalar + 'a>(
    op: &'static str,
    got: impl Iterator<Item = (&'static str, &'a Matrix<F>)>,
    want: impl Iterator<Item = (&'static str, &'a (usize, usize))>,
) -> Result<()> {
    for ((name, m), (_, &w)) in got.zip(want) {
        if m.shape() != w {
            return Err(Error::shape(
                op,
                format!("{name} is {:?}, expected {w:?}", m.shape()),
            ));
        }
    }
    Ok(())
}

fn positions(t: usize) -> Vec<usize> {
    (1..=t).collect()
}

/// `C = LayerNorm(X W_r)`
pub fn latent_graph<F: Scalar, G: Graph<F>>(
    g: &mut G,
    w: &LatentWeights<'_, G::Value>,
    x: &G::Value,
) -> Result<G::Value> {
    let c = g.matmul(x, w.w_r)?;
    g.layer_norm(&c, w.ln_gain, w.ln_bias, F::from_f64(LAYER_NORM_EPS))
}

/// Per-head rotary queries from `X W_QR`, positions `1..=T`.
pub fn rope_queries_graph<F: Scalar, G: Graph<F>>(
    g: &mut G,
    cfg: &AttentionConfig,
    w: &LatentWeights<'_, G::Value>,
    x: &G::Value,
) -> Result<G::Value> {
    let t = g.value(x).rows();
    let qr = g.matmul(x, w.w_qr)?;
    g.rope(&qr, &positions(t), cfg.d_rope)
}

/// Single-head rotary keys from `C W_KR`, positions `1..=T`.
pub fn rope_keys_graph<F: Scalar, G: Graph<F>>(
    g: &mut G,
    cfg: &AttentionConfig,
    w: &LatentWeights<'_, G::Value>,
    c: &G::Value,
) -> Result<G::Value> {
    let t = g.value(c).rows();
    let kr = g.matmul(c, w.w_kr)?;
    g.rope(&kr, &positions(t), cfg.d_rope)
}

/// Attention of queries `x` over latent rows `kv` (one per query position)
/// plus the decoupled rotary term, scaled by `1/sqrt(d_h)`.
#[allow(clippy::too_many_arguments)]
pub fn latent_attention_graph<F: Scalar, G: Graph<F>>(
    g: &mut G,
    cfg: &AttentionConfig,
    w: &LatentWeights<'_, G::Value>,
    x: &G::Value,
    kv: &G::Value,
    q_rope: &G::Value,
    k_rope: &G::Value,
    mask: &AdditiveMask<F>,
    path: AttentionPath,
) -> Result<G::Value> {
    let (d_h, dr) = (cfg.d_h, cfg.d_rope);
    let scale = F::from_usize(d_h).sqrt().recip();
    match path {
        AttentionPath::Absorbed => {
            let mut total: Option<G::Value> = None;
            for h in 0..cfg.n_h {
                let wq = g.slice_cols(w.w_q, h * d_h, d_h)?;
                let wk = g.slice_cols(w.w_k, h * d_h, d_h)?;
                let wv = g.slice_cols(w.w_v, h * d_h, d_h)?;
                let wo = g.slice_rows(w.w_o, h * d_h, d_h)?;
                let qk = g.matmul_nt(&wq, &wk)?;
                let vo = g.matmul(&wv, &wo)?;
                let a = g.matmul(x, &qk)?;
                let content = g.matmul_nt(&a, kv)?;
                let qr = g.slice_cols(q_rope, h * dr, dr)?;
                let pos = g.matmul_nt(&qr, k_rope)?;
                let scores = g.add(&content, &pos)?;
                let scores = g.scale(&scores, scale);
                let probs = g.softmax(&scores, Some(mask))?;
                let values = g.matmul(kv, &vo)?;
                let contrib = g.matmul(&probs, &values)?;
                total = Some(match total {
                    None => contrib,
                    Some(acc) => g.add(&acc, &contrib)?,
                });
            }
            total.ok_or_else(|| Error::Config("n_h must be positive".into()))
        }
        AttentionPath::Explicit => {
            let q = g.matmul(x, w.w_q)?;
            let k = g.matmul(kv, w.w_k)?;
            let v = g.matmul(kv, w.w_v)?;
            let mut heads = Vec::with_capacity(cfg.n_h);
            for h in 0..cfg.n_h {
                let qh = g.slice_cols(&q, h * d_h, d_h)?;
                let kh = g.slice_cols(&k, h * d_h, d_h)?;
                let vh = g.slice_cols(&v, h * d_h, d_h)?;
                let content = g.matmul_nt(&qh, &kh)?;
                let qr = g.slice_cols(q_rope, h * dr, dr)?;
                let pos = g.matmul_nt(&qr, k_rope)?;
                let scores = g.add(&content, &pos)?;
                let scores = g.scale(&scores, scale);
                let probs = g.softmax(&scores, Some(mask))?;
                heads.push(g.matmul(&probs, &vh)?);
            }
            let o = g.concat_cols(&heads)?;
            g.matmul(&o, w.w_o)
        }
    }
}

/// Latent row and rotary key of one token at `pos`, written to `sc.c` and `sc.kr`.
pub(crate) fn project_latent_row<F: Scalar>(
    w: &LatentWeights<'_, Matrix<F>>,
    x: &[F],
    pos: usize,
    sc: &mut DecodeScratch<F>,
) {
    vec_mat(x, w.w_r, &mut sc.c);
    layer_norm_row(
        &mut sc.c,
        w.ln_gain.data(),
        w.ln_bias.data(),
        F::from_f64(LAYER_NORM_EPS),
    );
    vec_mat(&sc.c, w.w_kr, &mut sc.kr);
    rope_in_place(&mut sc.kr, pos, ROPE_BASE, false);
}

/// Attends the token `x` at `pos` over cached latent rows `kv` and rotary keys
/// `k_rope`, without ever expanding the cache to per-head keys or values.
///
/// The query side is folded as `(x W_Q^h) W_K^hᵀ` and the output side as
/// `((p Ĉ) W_V^h) W_O`, so per-step weight traffic stays at the plain
/// projection sizes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_latent<F: Scalar>(
    cfg: &AttentionConfig,
    w: &LatentWeights<'_, Matrix<F>>,
    x: &[F],
    pos: usize,
    kv: &Matrix<F>,
    k_rope: &Matrix<F>,
    sc: &mut DecodeScratch<F>,
    out: &mut [F],
) -> Result<()> {
    let (n_h, d_h, r, dr) = (cfg.n_h, cfg.d_h, cfg.r, cfg.d_rope);
    let DecodeScratch {
        q,
        qa,
        qr,
        u,
        o,
        scores,
        softmax,
        ..
    } = sc;
    vec_mat(x, w.w_q, q);
    let rho_quads = r / 4 * 4;
    for h in 0..n_h {
        let span = h * d_h..(h + 1) * d_h;
        let qh = &q[span.clone()];
        for rho in (0..rho_quads).step_by(4) {
            let four = dot4(
                std::array::from_fn(|i| &w.w_k.row(rho + i)[span.clone()]),
                qh,
            );
            qa[h * r + rho..h * r + rho + 4].copy_from_slice(&four);
        }
        for rho in rho_quads..r {
            qa[h * r + rho] = dot(qh, &w.w_k.row(rho)[span.clone()]);
        }
    }
    vec_mat(x, w.w_qr, qr);
    for head in qr.chunks_exact_mut(dr) {
        rope_in_place(head, pos, ROPE_BASE, false);
    }

    let t = kv.rows();
    let scale = F::from_usize(d_h).sqrt().recip();
    let quads = n_h / 4 * 4;
    u.fill(F::zero());
    softmax.fill(OnlineSoftmax::new());
    for start in (0..t).step_by(SCORE_BLOCK) {
        let len = (start + SCORE_BLOCK).min(t) - start;
        for i in 0..len {
            let crow = kv.row(start + i);
            let krow = k_rope.row(start + i);
            for h in (0..quads).step_by(4) {
                let content = dot4(
                    std::array::from_fn(|j| &qa[(h + j) * r..(h + j + 1) * r]),
                    crow,
                );
                let rotary = dot4(
                    std::array::from_fn(|j| &qr[(h + j) * dr..(h + j + 1) * dr]),
                    krow,
                );
                for j in 0..4 {
                    scores[(h + j) * SCORE_BLOCK + i] = (content[j] + rotary[j]) * scale;
                }
            }
            for h in quads..n_h {
                let content = dot(&qa[h * r..(h + 1) * r], crow);
                let rotary = dot(&qr[h * dr..(h + 1) * dr], krow);
                scores[h * SCORE_BLOCK + i] = (content + rotary) * scale;
            }
        }
        for h in 0..n_h {
            let (p, acc) = (
                &mut scores[h * SCORE_BLOCK..h * SCORE_BLOCK + len],
                &mut u[h * r..(h + 1) * r],
            );
            softmax[h].absorb(p, acc);
            axpy_rows(p, |i| kv.row(start + i), acc);
        }
    }
    for h in 0..n_h {
        softmax[h].finish(&mut u[h * r..(h + 1) * r], h)?;
    }
    o.fill(F::zero());
    for h in 0..n_h {
        let wv = w.w_v;
        axpy_rows(
            &u[h * r..(h + 1) * r],
            |rho| &wv.row(rho)[h * d_h..(h + 1) * d_h],
            &mut o[h * d_h..(h + 1) * d_h],
        );
    }
    vec_mat(o, w.w_o, out);
    Ok(())
}

/// Uncompressed latent cache: one latent row and one rotary-key row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentKVCache<F> {
    pub latents: Matrix<F>,
    pub rope_keys: Matrix<F>,
    pub step: usize,
}

impl<F: Scalar> LatentKVCache<F> {
    pub fn new(cfg: &AttentionConfig, capacity: usize) -> Self {
        Self {
            latents: Matrix::with_row_capacity(cfg.r, capacity),
            rope_keys: Matrix::with_row_capacity(cfg.d_rope, capacity),
            step: 0,
        }
    }

    pub fn elements(&self) -> usize {
        self.latents.len() + self.rope_keys.len()
    }
}

/// Multi-head latent attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlaAttention<F> {
    pub cfg: AttentionConfig,
    pub params: MlaParams<Matrix<F>>,
}

/// Training-mode MLA forward on any graph.
pub fn mla_forward_graph<F: Scalar, G: Graph<F>>(
    g: &mut G,
    cfg: &AttentionConfig,
    p: &MlaParams<G::Value>,
    x: &G::Value,
    mask: &AdditiveMask<F>,
    path: AttentionPath,
) -> Result<G::Value> {
    let w = p.weights();
    let c = latent_graph(g, &w, x)?;
    let qr = rope_queries_graph(g, cfg, &w, x)?;
    let kr = rope_keys_graph(g, cfg, &w, &c)?;
    latent_attention_graph(g, cfg, &w, x, &c, &qr, &kr, mask, path)
}

impl<F: Scalar> MlaAttention<F> {
    pub fn new(cfg: AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            params: MlaParams::init(&cfg, rng),
            cfg,
        })
    }

    pub fn from_params(cfg: AttentionConfig, params: MlaParams<Matrix<F>>) -> Result<Self> {
        cfg.validate()?;
        check_shapes(
            "MlaAttention",
            params.iter(),
            MlaParams::shapes(&cfg).iter(),
        )?;
        Ok(Self { cfg, params })
    }

    pub fn forward_train(&self, x: &Matrix<F>, mask: &AdditiveMask<F>) -> Result<Matrix<F>> {
        self.forward_train_with(x, mask, AttentionPath::Absorbed)
    }

    pub fn forward_train_with(
        &self,
        x: &Matrix<F>,
        mask: &AdditiveMask<F>,
        path: AttentionPath,
    ) -> Result<Matrix<F>> {
        super::dense::check_input(&self.cfg, x, mask)?;
        mla_forward_graph(&mut Eager, &self.cfg, &self.params, x, mask, path)
    }

    /// Forward with the standard causal mask.
    pub fn forward_causal(&self, x: &Matrix<F>) -> Result<Matrix<F>> {
        self.forward_train(x, &causal_mask(x.rows())?)
    }

    pub fn new_cache(&self, capacity: usize) -> LatentKVCache<F> {
        LatentKVCache::new(&self.cfg, capacity)
    }

    pub fn step(&self, x: &Matrix<F>, cache: &mut LatentKVCache<F>) -> Result<Matrix<F>> {
        if x.rows() != 1 {
            return Err(Error::shape(
                "mla step",
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
        cache: &mut LatentKVCache<F>,
        sc: &mut DecodeScratch<F>,
        out: &mut [F],
    ) -> Result<()> {
        mla_step_into(&self.cfg, &self.params, x, cache, sc, out)
    }
}

/// One MLA decoding step: appends the token's latent and rotary key, then
/// attends over the whole cache.
pub fn mla_step_into<F: Scalar>(
    cfg: &AttentionConfig,
    params: &MlaParams<Matrix<F>>,
    x: &[F],
    cache: &mut LatentKVCache<F>,
    sc: &mut DecodeScratch<F>,
    out: &mut [F],
) -> Result<()> {
    if x.len() != cfg.d || out.len() != cfg.d {
        return Err(Error::shape(
            "mla step",
            format!(
                "input/output of length {}/{}, d = {}",
                x.len(),
                out.len(),
                cfg.d
            ),
        ));
    }
    let w = params.weights();
    let pos = cache.step + 1;
    project_latent_row(&w, x, pos, sc);
    cache.latents.push_row(&sc.c)?;
    cache.rope_keys.push_row(&sc.kr)?;
    cache.step = pos;
    attend_latent(cfg, &w, x, pos, &cache.latents, &cache.rope_keys, sc, out)
}
