//! Multi-head temporal latent attention.
//!
//! Latent rows `c_i` are merged `s` at a time into a shorter cache
//! `Ĉ = (ĉ_1, …, ĉ_⌈T/s⌉)` with input-dependent weights from a small
//! hyper-network. During decoding the last cache row is a running partial sum
//! until its chunk completes. Training reproduces that visibility in parallel:
//! a chunk-causal mask on the hyper-network's weight matrix builds every
//! partial sum `Ĉ′`, and a stride-aware causal mask lets row `m` see only its
//! own partial sum and the completed chunk ends before it.

use rand::Rng;

use crate::config::AttentionConfig;
use crate::decode::DecodeScratch;
use crate::graph::{Eager, Graph};
use crate::masks::{chunk_causal_mask, stride_aware_causal_mask, AdditiveMask};
use crate::numerics::{
    self, dot, sigmoid_scalar, sinusoidal_pe, sinusoidal_pe_into, vec_mat, Matrix, Scalar,
};
use crate::params::{init_weight, ones_row, param_set, zeros_row};
use crate::variants::dense::check_input;
use crate::variants::latent::{
    attend_latent, check_shapes, latent_attention_graph, latent_graph, project_latent_row,
    rope_keys_graph, rope_queries_graph, AttentionPath, LatentWeights,
};
use crate::{Error, Result};

pub use crate::config::Variant;

param_set! {
    /// MTLA weights; `h_c` and `h_p` are the `r x d_hyp` hyper-network linears.
    MtlaParams { w_q, w_r, ln_gain, ln_bias, w_k, w_v, w_o, w_qr, w_kr, h_c, h_p }
}

impl MtlaParams<(usize, usize)> {
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
            h_c: (cfg.r, cfg.d_hyp),
            h_p: (cfg.r, cfg.d_hyp),
        }
    }
}

impl<F: Scalar> MtlaParams<Matrix<F>> {
    pub fn init(cfg: &AttentionConfig, rng: &mut impl Rng) -> Self {
        let s = MtlaParams::shapes(cfg);
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
            h_c: init_weight(s.h_c.0, s.h_c.1, rng),
            h_p: init_weight(s.h_p.0, s.h_p.1, rng),
        }
    }
}

impl<T> MtlaParams<T> {
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

/// Positional rows for the hyper-network: row `m` is `pe_⌈m/s⌉` of width `r`.
pub fn replicated_pe<F: Scalar>(t: usize, s: usize, r: usize) -> Result<Matrix<F>> {
    if s == 0 {
        return Err(Error::Parameter("s must be at least 1".into()));
    }
    let mut pe = Matrix::with_row_capacity(r, t);
    for m in 1..=t {
        pe.push_row(&sinusoidal_pe::<F>(m.div_ceil(s), r)?)?;
    }
    Ok(pe)
}

/// `W = sigmoid((PE H_p)(C H_c)ᵀ)`, `T x T`.
pub fn hyper_weight_matrix_graph<F: Scalar, G: Graph<F>>(
    g: &mut G,
    p: &MtlaParams<G::Value>,
    c: &G::Value,
    s: usize,
) -> Result<G::Value> {
    let (t, r) = g.value(c).shape();
    let pe = g.constant(replicated_pe(t, s, r)?);
    let a = g.matmul(&pe, &p.h_p)?;
    let b = g.matmul(c, &p.h_c)?;
    let logits = g.matmul_nt(&a, &b)?;
    Ok(g.sigmoid(&logits))
}

/// `Ĉ′ = (W with chunk-causal masking) · C`; row `m` is the running merge of
/// its chunk up to `m`.
pub fn compress_train_graph<F: Scalar, G: Graph<F>>(
    g: &mut G,
    c: &G::Value,
    w: &G::Value,
    s: usize,
) -> Result<G::Value> {
    let (t, _) = g.value(c).shape();
    if g.value(w).shape() != (t, t) {
        let (wr, wc) = g.value(w).shape();
        return Err(Error::shape(
            "compress_train",
            format!("weights {wr}x{wc} for {t} latent rows"),
        ));
    }
    let mask = chunk_causal_mask(t, s)?;
    let masked = g.masked_zero(w, &mask)?;
    g.matmul(&masked, c)
}

/// Training-mode MTLA forward on any graph, with an explicit visibility mask.
pub fn mtla_forward_graph<F: Scalar, G: Graph<F>>(
    g: &mut G,
    cfg: &AttentionConfig,
    p: &MtlaParams<G::Value>,
    x: &G::Value,
    mask: &AdditiveMask<F>,
    path: AttentionPath,
) -> Result<G::Value> {
    let w = p.weights();
    let c = latent_graph(g, &w, x)?;
    let merge = hyper_weight_matrix_graph(g, p, &c, cfg.s)?;
    let c_partial = compress_train_graph(g, &c, &merge, cfg.s)?;
    let qr = rope_queries_graph(g, cfg, &w, x)?;
    let kr = rope_keys_graph(g, cfg, &w, &c)?;
    latent_attention_graph(g, cfg, &w, x, &c_partial, &qr, &kr, mask, path)
}

/// Per-head absorbed products: `qk[h] = W_Q^h (W_K^h)ᵀ` (`d x r`) and
/// `vo[h] = W_V^h W_O^h` (`r x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct AbsorbedWeights<F> {
    pub qk: Vec<Matrix<F>>,
    pub vo: Vec<Matrix<F>>,
}

pub fn absorb<F: Scalar>(
    cfg: &AttentionConfig,
    w: &LatentWeights<'_, Matrix<F>>,
) -> Result<AbsorbedWeights<F>> {
    let d_h = cfg.d_h;
    let mut qk = Vec::with_capacity(cfg.n_h);
    let mut vo = Vec::with_capacity(cfg.n_h);
    for h in 0..cfg.n_h {
        let wq = w.w_q.slice_cols(h * d_h, d_h)?;
        let wk = w.w_k.slice_cols(h * d_h, d_h)?;
        let wv = w.w_v.slice_cols(h * d_h, d_h)?;
        let wo = w.w_o.slice_rows(h * d_h, d_h)?;
        qk.push(numerics::matmul_nt(&wq, &wk)?);
        vo.push(numerics::matmul(&wv, &wo)?);
    }
    Ok(AbsorbedWeights { qk, vo })
}

/// Compressed temporal-latent cache.
///
/// `c_hat` and `rope_keys` hold `⌈step/s⌉` rows. While a chunk is in progress
/// (`step % s != 0`) the last `c_hat` row is a partial merge and the last
/// rotary key belongs to the most recent token.
#[derive(Debug, Clone, PartialEq)]
pub struct MtlaCache<F> {
    pub c_hat: Matrix<F>,
    pub rope_keys: Matrix<F>,
    pub step: usize,
    pub s: usize,
}

impl<F: Scalar> MtlaCache<F> {
    pub fn new(cfg: &AttentionConfig, capacity_tokens: usize) -> Self {
        let rows = capacity_tokens.div_ceil(cfg.s.max(1));
        Self {
            c_hat: Matrix::with_row_capacity(cfg.r, rows),
            rope_keys: Matrix::with_row_capacity(cfg.d_rope, rows),
            step: 0,
            s: cfg.s,
        }
    }

    pub fn in_progress(&self) -> bool {
        !self.step.is_multiple_of(self.s)
    }

    pub fn len(&self) -> usize {
        self.c_hat.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.c_hat.rows() == 0
    }

    pub fn elements(&self) -> usize {
        self.c_hat.len() + self.rope_keys.len()
    }
}

/// An MTLA layer with concrete weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MtlaAttention<F> {
    pub cfg: AttentionConfig,
    pub params: MtlaParams<Matrix<F>>,
}

impl<F: Scalar> MtlaAttention<F> {
    pub fn new(cfg: AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            params: MtlaParams::init(&cfg, rng),
            cfg,
        })
    }

    pub fn from_params(cfg: AttentionConfig, params: MtlaParams<Matrix<F>>) -> Result<Self> {
        cfg.validate()?;
        check_shapes(
            "MtlaAttention",
            params.iter(),
            MtlaParams::shapes(&cfg).iter(),
        )?;
        Ok(Self { cfg, params })
    }

    pub fn s(&self) -> usize {
        self.cfg.s
    }

    /// `C = LayerNorm(X W_r)`
    pub fn latent(&self, x: &Matrix<F>) -> Result<Matrix<F>> {
        if x.cols() != self.cfg.d {
            return Err(Error::shape(
                "latent",
                format!("{} columns for d = {}", x.cols(), self.cfg.d),
            ));
        }
        latent_graph(&mut Eager, &self.params.weights(), x)
    }

    /// Merge weight of latent `c` at chunk position `j`, via the scalar path.
    pub fn hyper_weight(&self, c: &[F], j: usize) -> Result<F> {
        if c.len() != self.cfg.r {
            return Err(Error::shape(
                "hyper_weight",
                format!("latent of length {} for r = {}", c.len(), self.cfg.r),
            ));
        }
        let pe = sinusoidal_pe::<F>(j, self.cfg.r)?;
        let mut hp = vec![F::zero(); self.cfg.d_hyp];
        let mut hc = vec![F::zero(); self.cfg.d_hyp];
        vec_mat(&pe, &self.params.h_p, &mut hp);
        vec_mat(c, &self.params.h_c, &mut hc);
        Ok(sigmoid_scalar(dot(&hp, &hc)))
    }

    pub fn hyper_weight_matrix(&self, c: &Matrix<F>) -> Result<Matrix<F>> {
        if c.cols() != self.cfg.r || c.rows() == 0 {
            return Err(Error::shape(
                "hyper_weight_matrix",
                format!("{}x{} latents for r = {}", c.rows(), c.cols(), self.cfg.r),
            ));
        }
        hyper_weight_matrix_graph(&mut Eager, &self.params, c, self.cfg.s)
    }

    pub fn rope_queries(&self, x: &Matrix<F>) -> Result<Matrix<F>> {
        rope_queries_graph(&mut Eager, &self.cfg, &self.params.weights(), x)
    }

    pub fn rope_keys(&self, c: &Matrix<F>) -> Result<Matrix<F>> {
        rope_keys_graph(&mut Eager, &self.cfg, &self.params.weights(), c)
    }

    pub fn absorb(&self) -> Result<AbsorbedWeights<F>> {
        absorb(&self.cfg, &self.params.weights())
    }

    /// Parallel forward with the stride-aware causal mask.
    pub fn train_forward(&self, x: &Matrix<F>) -> Result<Matrix<F>> {
        if x.rows() == 0 {
            return Err(Error::shape("train_forward", "empty input sequence"));
        }
        let mask = stride_aware_causal_mask(x.rows(), self.cfg.s)?;
        self.forward_train_with(x, &mask, AttentionPath::Absorbed)
    }

    /// Parallel forward with a caller-supplied visibility mask.
    pub fn forward_train_with(
        &self,
        x: &Matrix<F>,
        mask: &AdditiveMask<F>,
        path: AttentionPath,
    ) -> Result<Matrix<F>> {
        check_input(&self.cfg, x, mask)?;
        mtla_forward_graph(&mut Eager, &self.cfg, &self.params, x, mask, path)
    }

    pub fn new_cache(&self, capacity_tokens: usize) -> MtlaCache<F> {
        MtlaCache::new(&self.cfg, capacity_tokens)
    }

    /// One incremental decoding step.
    pub fn infer_step(&self, x: &Matrix<F>, cache: &mut MtlaCache<F>) -> Result<Matrix<F>> {
        if x.rows() != 1 {
            return Err(Error::shape(
                "infer_step",
                format!("expected one row, got {}", x.rows()),
            ));
        }
        let mut sc = DecodeScratch::new(&self.cfg, cache.len() + 1);
        let mut out = vec![F::zero(); self.cfg.d];
        self.step_into(x.data(), cache, &mut sc, &mut out)?;
        Ok(Matrix::row_vector(out))
    }

    /// Allocation-free decoding step (given enough cache and scratch capacity).
    pub fn step_into(
        &self,
        x: &[F],
        cache: &mut MtlaCache<F>,
        sc: &mut DecodeScratch<F>,
        out: &mut [F],
    ) -> Result<()> {
        mtla_step_into(&self.cfg, &self.params, x, cache, sc, out)
    }
}

/// One MTLA decoding step. A token that opens a chunk appends a new cache row;
/// any other token adds its weighted latent to the last row and replaces the
/// last rotary key.
pub fn mtla_step_into<F: Scalar>(
    cfg: &AttentionConfig,
    params: &MtlaParams<Matrix<F>>,
    x: &[F],
    cache: &mut MtlaCache<F>,
    sc: &mut DecodeScratch<F>,
    out: &mut [F],
) -> Result<()> {
    if x.len() != cfg.d || out.len() != cfg.d {
        return Err(Error::shape(
            "infer_step",
            format!(
                "input/output of length {}/{}, d = {}",
                x.len(),
                out.len(),
                cfg.d
            ),
        ));
    }
    if cache.s != cfg.s || cache.c_hat.cols() != cfg.r || cache.rope_keys.cols() != cfg.d_rope {
        return Err(Error::shape(
            "infer_step",
            "cache built for a different configuration",
        ));
    }
    let w = params.weights();
    let i = cache.step + 1;
    project_latent_row(&w, x, i, sc);

    let j = i.div_ceil(cfg.s);
    sinusoidal_pe_into(j, &mut sc.pe)?;
    vec_mat(&sc.pe, &params.h_p, &mut sc.hp);
    vec_mat(&sc.c, &params.h_c, &mut sc.hc);
    let weight = sigmoid_scalar(dot(&sc.hp, &sc.hc));

    if (i - 1).is_multiple_of(cfg.s) {
        for v in sc.c.iter_mut() {
            *v *= weight;
        }
        cache.c_hat.push_row(&sc.c)?;
        cache.rope_keys.push_row(&sc.kr)?;
    } else {
        let last = cache
            .c_hat
            .last_row_mut()
            .ok_or_else(|| Error::shape("infer_step", "mid-chunk step with an empty cache"))?;
        numerics::axpy(weight, &sc.c, last);
        let last_key = cache
            .rope_keys
            .last_row_mut()
            .expect("rope cache rows track latent rows");
        last_key.copy_from_slice(&sc.kr);
    }
    cache.step = i;
    attend_latent(cfg, &w, x, i, &cache.c_hat, &cache.rope_keys, sc, out)
}

/// Average KV-cache elements per token across `cfg.l` layers.
pub fn cache_elements_per_token(cfg: &AttentionConfig, variant: Variant) -> f64 {
    cfg.cache_elements_per_token(variant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::causal_mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(d: usize, n_h: usize, s: usize, seed: u64) -> (MtlaAttention<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AttentionConfig::new(d, n_h).unwrap().with_s(s);
        let cfg = AttentionConfig { d_hyp: 8, ..cfg };
        (MtlaAttention::new(cfg, &mut rng).unwrap(), rng)
    }

    #[test]
    fn latent_rows_are_standardized() {
        let (m, mut rng) = layer(16, 2, 2, 1);
        let x = Matrix::<f64>::random_uniform(5, 16, 1.0, &mut rng);
        let c = m.latent(&x).unwrap();
        for r in 0..5 {
            let row = c.row(r);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-3);
        }
        let oracle = numerics::layer_norm(
            &numerics::matmul(&x, &m.params.w_r).unwrap(),
            m.params.ln_gain.data(),
            m.params.ln_bias.data(),
            1e-5,
        )
        .unwrap();
        assert!(c.max_abs_diff(&oracle) < 1e-12);
        assert!(m
            .latent(&Matrix::zeros(3, 16))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn hyper_weight_examples() {
        let (m, mut rng) = layer(16, 2, 3, 2);
        assert_eq!(m.hyper_weight(&vec![0.0; m.cfg.r], 4).unwrap(), 0.5);
        let x = Matrix::<f64>::random_uniform(7, 16, 2.0, &mut rng);
        let c = m.latent(&x).unwrap();
        let w = m.hyper_weight_matrix(&c).unwrap();
        for mi in 1usize..=7 {
            for ni in 1..=7 {
                let scalar = m.hyper_weight(c.row(ni - 1), mi.div_ceil(3)).unwrap();
                assert!((w.get(mi - 1, ni - 1) - scalar).abs() < 1e-12);
                assert!(scalar > 0.0 && scalar < 1.0);
            }
        }
        // rows in one chunk share the positional input
        assert_eq!(w.row(3), w.row(4));
    }

    #[test]
    fn compress_train_rows_are_chunk_partial_sums() {
        let (m, mut rng) = layer(16, 2, 2, 3);
        let x = Matrix::<f64>::random_uniform(5, 16, 1.0, &mut rng);
        let c = m.latent(&x).unwrap();
        let w = m.hyper_weight_matrix(&c).unwrap();
        let cp = compress_train_graph(&mut Eager, &c, &w, 2).unwrap();
        assert_eq!(cp.rows(), 5);
        for k in 0..c.cols() {
            assert!((cp.get(0, k) - w.get(0, 0) * c.get(0, k)).abs() < 1e-14);
            let chunk = w.get(1, 0) * c.get(0, k) + w.get(1, 1) * c.get(1, k);
            assert!((cp.get(1, k) - chunk).abs() < 1e-12);
            assert!((cp.get(4, k) - w.get(4, 4) * c.get(4, k)).abs() < 1e-14);
        }
    }

    #[test]
    fn cache_rows_follow_the_chunk_rule() {
        let (m, mut rng) = layer(16, 2, 2, 4);
        let mut cache = m.new_cache(8);
        let xs = Matrix::<f64>::random_uniform(5, 16, 1.0, &mut rng);
        let c = m.latent(&xs).unwrap();
        let w = |i: usize| m.hyper_weight(c.row(i - 1), i.div_ceil(2)).unwrap();

        m.infer_step(&xs.slice_rows(0, 1).unwrap(), &mut cache)
            .unwrap();
        assert_eq!(cache.len(), 1);
        assert!(cache.in_progress());
        for k in 0..m.cfg.r {
            assert!((cache.c_hat.get(0, k) - w(1) * c.get(0, k)).abs() < 1e-12);
        }
        m.infer_step(&xs.slice_rows(1, 1).unwrap(), &mut cache)
            .unwrap();
        assert_eq!(cache.len(), 1);
        assert!(!cache.in_progress());
        for k in 0..m.cfg.r {
            let want = w(1) * c.get(0, k) + w(2) * c.get(1, k);
            assert!((cache.c_hat.get(0, k) - want).abs() < 1e-12);
        }
        for i in 2..5 {
            m.infer_step(&xs.slice_rows(i, 1).unwrap(), &mut cache)
                .unwrap();
        }
        assert_eq!(cache.len(), 3);
        assert_eq!(cache.rope_keys.rows(), 3);
        let keys = m.rope_keys(&c).unwrap();
        assert_eq!(cache.rope_keys.row(2), keys.row(4));
    }

    #[test]
    fn train_forward_matches_replay_small() {
        for s in 1..=4 {
            let (m, mut rng) = layer(16, 2, s, 10 + s as u64);
            let x = Matrix::<f64>::random_uniform(9, 16, 1.0, &mut rng);
            let y = m.train_forward(&x).unwrap();
            let mut cache = m.new_cache(9);
            for i in 0..9 {
                let yi = m
                    .infer_step(&x.slice_rows(i, 1).unwrap(), &mut cache)
                    .unwrap();
                assert!(
                    yi.max_abs_diff(&y.slice_rows(i, 1).unwrap()) < 1e-9,
                    "s={s} i={i}"
                );
                assert_eq!(cache.len(), (i + 1).div_ceil(s));
            }
        }
    }

    #[test]
    fn causal_mask_breaks_equivalence_for_s_above_one() {
        let (m, mut rng) = layer(16, 2, 2, 21);
        let x = Matrix::<f64>::random_uniform(6, 16, 1.0, &mut rng);
        let y = m
            .forward_train_with(&x, &causal_mask(6).unwrap(), AttentionPath::Absorbed)
            .unwrap();
        let mut cache = m.new_cache(6);
        let mut worst: f64 = 0.0;
        for i in 0..6 {
            let yi = m
                .infer_step(&x.slice_rows(i, 1).unwrap(), &mut cache)
                .unwrap();
            worst = worst.max(yi.max_abs_diff(&y.slice_rows(i, 1).unwrap()));
        }
        assert!(worst > 1e-6);
    }

    #[test]
    fn rejects_empty_sequence() {
        let (m, _) = layer(16, 2, 2, 5);
        assert!(matches!(
            m.train_forward(&Matrix::zeros(0, 16)),
            Err(Error::Shape { .. })
        ));
    }
}
