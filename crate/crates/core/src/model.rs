//! Small decoder-only model over any attention variant.
//!
//! Blocks are post-norm: attention, residual, layer norm, GELU feed-forward,
//! residual, layer norm. Token embeddings are summed with fixed sinusoidal
//! absolute positions; the output projection is untied.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AttentionConfig, Variant};
use crate::decode::DecodeScratch;
use crate::graph::{Eager, Graph};
use crate::masks::{causal_mask, stride_aware_causal_mask, AdditiveMask};
use crate::mtla::{mtla_forward_graph, mtla_step_into, MtlaCache, MtlaParams};
use crate::numerics::{
    axpy, gelu, ops::layer_norm_row, sinusoidal_pe, sinusoidal_pe_into, vec_mat, Matrix, Scalar,
    LAYER_NORM_EPS,
};
use crate::params::{init_weight, param_set};
use crate::variants::dense::{dense_forward_graph, dense_step_into, DenseKVCache, DenseParams};
use crate::variants::latent::{
    mla_forward_graph, mla_step_into, AttentionPath, LatentKVCache, MlaParams,
};
use crate::{Error, Result};

/// Hyper-parameters of the toy decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderConfig {
    pub vocab: usize,
    pub d: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub attention: AttentionConfig,
    pub variant: Variant,
    pub max_len: usize,
    pub seed: u64,
}

impl DecoderConfig {
    /// Desk-scale default: d = 64, 4 heads of 16, r = 64, d_rope = 8,
    /// ffn = 256, 2 layers, vocab 32, room for a length-16 copy sequence.
    pub fn desk(variant: Variant, s: usize) -> Self {
        let attention = AttentionConfig {
            d: 64,
            n_h: 4,
            d_h: 16,
            g: 2,
            r: 64,
            d_rope: 8,
            s: if variant == Variant::Mtla { s } else { 1 },
            l: 2,
            d_hyp: 64,
        };
        Self {
            vocab: 32,
            d: 64,
            n_layers: 2,
            ffn_dim: 256,
            attention,
            variant,
            max_len: 33,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 4 {
            return Err(Error::Config(format!(
                "vocab = {} must be at least 4",
                self.vocab
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config(format!(
                "max_len = {} must be at least 2",
                self.max_len
            )));
        }
        if self.n_layers == 0 || self.ffn_dim == 0 {
            return Err(Error::Config(
                "n_layers and ffn_dim must be positive".into(),
            ));
        }
        if self.attention.d != self.d {
            return Err(Error::Config(format!(
                "attention d = {} but model d = {}",
                self.attention.d, self.d
            )));
        }
        if self.attention.l != self.n_layers {
            return Err(Error::Config(format!(
                "attention l = {} but n_layers = {}",
                self.attention.l, self.n_layers
            )));
        }
        self.attention.validate()
    }
}

/// Attention weights of one layer, by variant.
#[derive(Debug, Clone, PartialEq)]
pub enum AttnParams<T> {
    Dense(DenseParams<T>),
    Mla(MlaParams<T>),
    Mtla(MtlaParams<T>),
}

impl<T> AttnParams<T> {
    pub fn try_map<U, E>(
        &self,
        f: &mut impl FnMut(&'static str, &T) -> Result<U, E>,
    ) -> Result<AttnParams<U>, E> {
        Ok(match self {
            AttnParams::Dense(p) => AttnParams::Dense(p.try_map(&mut *f)?),
            AttnParams::Mla(p) => AttnParams::Mla(p.try_map(&mut *f)?),
            AttnParams::Mtla(p) => AttnParams::Mtla(p.try_map(&mut *f)?),
        })
    }

    pub fn iter(&self) -> Vec<(&'static str, &T)> {
        match self {
            AttnParams::Dense(p) => p.iter().collect(),
            AttnParams::Mla(p) => p.iter().collect(),
            AttnParams::Mtla(p) => p.iter().collect(),
        }
    }

    pub fn iter_mut(&mut self) -> Vec<(&'static str, &mut T)> {
        match self {
            AttnParams::Dense(p) => p.iter_mut().collect(),
            AttnParams::Mla(p) => p.iter_mut().collect(),
            AttnParams::Mtla(p) => p.iter_mut().collect(),
        }
    }
}

param_set! {
    /// Everything in a block besides attention.
    BlockParams { ln1_gain, ln1_bias, w1, b1, w2, b2, ln2_gain, ln2_bias }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn: AttnParams<T>,
    pub block: BlockParams<T>,
}

/// All model weights. [`ModelParams::flat`] gives the canonical order:
/// embedding, then per layer the attention weights followed by the block
/// weights, then the output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub embedding: T,
    pub layers: Vec<LayerParams<T>>,
    pub w_out: T,
}

impl<T> ModelParams<T> {
    pub fn try_map<U, E>(
        &self,
        mut f: impl FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<ModelParams<U>, E> {
        let embedding = f("embedding", &self.embedding)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let attn = layer
                .attn
                .try_map(&mut |name, t| f(&format!("layers.{i}.attn.{name}"), t))?;
            let block = layer
                .block
                .try_map(|name, t| f(&format!("layers.{i}.{name}"), t))?;
            layers.push(LayerParams { attn, block });
        }
        let w_out = f("w_out", &self.w_out)?;
        Ok(ModelParams {
            embedding,
            layers,
            w_out,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        self.try_map(|_, t| Ok::<U, std::convert::Infallible>(f(t)))
            .unwrap_or_else(|e| match e {})
    }

    pub fn flat(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(
                layer
                    .attn
                    .iter()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.attn.{n}"), t)),
            );
            out.extend(
                layer
                    .block
                    .iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        out.push(("w_out".to_string(), &self.w_out));
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.embedding];
        for layer in self.layers.iter_mut() {
            out.extend(layer.attn.iter_mut().into_iter().map(|(_, t)| t));
            out.extend(layer.block.iter_mut().map(|(_, t)| t));
        }
        out.push(&mut self.w_out);
        out
    }
}

impl ModelParams<(usize, usize)> {
    pub fn shapes(cfg: &DecoderConfig) -> Self {
        let a = &cfg.attention;
        let layer = LayerParams {
            attn: match cfg.variant {
                Variant::Mha | Variant::Mqa | Variant::Gqa => {
                    AttnParams::Dense(DenseParams::shapes(a, a.kv_heads(cfg.variant)))
                }
                Variant::Mla => AttnParams::Mla(MlaParams::shapes(a)),
                Variant::Mtla => AttnParams::Mtla(MtlaParams::shapes(a)),
            },
            block: BlockParams {
                ln1_gain: (1, cfg.d),
                ln1_bias: (1, cfg.d),
                w1: (cfg.d, cfg.ffn_dim),
                b1: (1, cfg.ffn_dim),
                w2: (cfg.ffn_dim, cfg.d),
                b2: (1, cfg.d),
                ln2_gain: (1, cfg.d),
                ln2_bias: (1, cfg.d),
            },
        };
        ModelParams {
            embedding: (cfg.vocab, cfg.d),
            layers: vec![layer; cfg.n_layers],
            w_out: (cfg.d, cfg.vocab),
        }
    }

    pub fn count(&self) -> usize {
        self.flat().iter().map(|(r, c)| r * c).sum()
    }
}

/// Number of trainable scalars for `cfg`.
pub fn parameter_count(cfg: &DecoderConfig) -> usize {
    ModelParams::shapes(cfg).count()
}

/// A decoder with concrete weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel<F> {
    pub config: DecoderConfig,
    pub params: ModelParams<Matrix<F>>,
}

/// Builds a model with weights drawn deterministically from `cfg.seed`.
pub fn build_model<F: Scalar>(cfg: DecoderConfig) -> Result<DecoderModel<F>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::shapes(&cfg).try_map(|name, &(r, c)| {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        Ok::<_, Error>(if name == "embedding" {
            Matrix::random_uniform(r, c, 1.0, &mut rng)
        } else if leaf.ends_with("_gain") {
            Matrix::filled(r, c, F::one())
        } else if leaf.ends_with("_bias") || leaf == "b1" || leaf == "b2" {
            Matrix::zeros(r, c)
        } else {
            init_weight(r, c, &mut rng)
        })
    })?;
    Ok(DecoderModel {
        config: cfg,
        params,
    })
}

impl<F: Scalar> AttnParams<Matrix<F>> {
    /// One decoding step of this layer's attention against `cache`.
    pub fn step_into(
        &self,
        cfg: &AttentionConfig,
        variant: Variant,
        x: &[F],
        cache: &mut LayerCache<F>,
        sc: &mut DecodeScratch<F>,
        out: &mut [F],
    ) -> Result<()> {
        match (self, cache) {
            (AttnParams::Dense(p), LayerCache::Dense(c)) => {
                dense_step_into(cfg, cfg.kv_heads(variant), p, x, c, sc, out)
            }
            (AttnParams::Mla(p), LayerCache::Latent(c)) => mla_step_into(cfg, p, x, c, sc, out),
            (AttnParams::Mtla(p), LayerCache::Mtla(c)) => mtla_step_into(cfg, p, x, c, sc, out),
            _ => Err(Error::Config(
                "decode state does not match the model variant".into(),
            )),
        }
    }
}

/// Per-layer decoding cache.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerCache<F> {
    Dense(DenseKVCache<F>),
    Latent(LatentKVCache<F>),
    Mtla(MtlaCache<F>),
}

impl<F: Scalar> LayerCache<F> {
    /// Empty cache for one `variant` layer with room for `capacity` tokens.
    pub fn new(cfg: &AttentionConfig, variant: Variant, capacity: usize) -> Self {
        match variant {
            Variant::Mha | Variant::Mqa | Variant::Gqa => {
                LayerCache::Dense(DenseKVCache::new(cfg.kv_heads(variant) * cfg.d_h, capacity))
            }
            Variant::Mla => LayerCache::Latent(LatentKVCache::new(cfg, capacity)),
            Variant::Mtla => LayerCache::Mtla(MtlaCache::new(cfg, capacity)),
        }
    }

    pub fn elements(&self) -> usize {
        match self {
            LayerCache::Dense(c) => c.elements(),
            LayerCache::Latent(c) => c.elements(),
            LayerCache::Mtla(c) => c.elements(),
        }
    }
}

/// Incremental decoding state for one sequence.
#[derive(Debug, Clone)]
pub struct DecodeState<F> {
    pub caches: Vec<LayerCache<F>>,
    pub position: usize,
    scratch: DecodeScratch<F>,
    x: Vec<F>,
    a: Vec<F>,
    hidden: Vec<F>,
    logits: Vec<F>,
}

impl<F: Scalar> DecodeState<F> {
    pub fn cache_elements(&self) -> usize {
        self.caches.iter().map(LayerCache::elements).sum()
    }
}

fn model_mask<F: Scalar>(cfg: &DecoderConfig, t: usize) -> Result<AdditiveMask<F>> {
    match cfg.variant {
        Variant::Mtla => stride_aware_causal_mask(t, cfg.attention.s),
        _ => causal_mask(t),
    }
}

/// Logits (`T x vocab`) for `tokens` on any graph.
pub fn forward_graph<F: Scalar, G: Graph<F>>(
    g: &mut G,
    cfg: &DecoderConfig,
    p: &ModelParams<G::Value>,
    tokens: &[usize],
    path: AttentionPath,
) -> Result<G::Value> {
    let t = tokens.len();
    if t == 0 || t > cfg.max_len {
        return Err(Error::shape(
            "decoder forward",
            format!("{t} tokens for max_len = {}", cfg.max_len),
        ));
    }
    if let Some(&bad) = tokens.iter().find(|&&tok| tok >= cfg.vocab) {
        return Err(Error::Parameter(format!(
            "token {bad} outside vocab of {}",
            cfg.vocab
        )));
    }
    let a = &cfg.attention;
    let mask = model_mask(cfg, t)?;
    let mut pe = Matrix::with_row_capacity(cfg.d, t);
    for pos in 1..=t {
        pe.push_row(&sinusoidal_pe::<F>(pos, cfg.d)?)?;
    }
    let pe = g.constant(pe);
    let emb = g.gather_rows(&p.embedding, tokens)?;
    let mut x = g.add(&emb, &pe)?;
    let eps = F::from_f64(LAYER_NORM_EPS);
    for layer in &p.layers {
        let att = match &layer.attn {
            AttnParams::Dense(dp) => {
                dense_forward_graph(g, a, a.kv_heads(cfg.variant), dp, &x, &mask)?
            }
            AttnParams::Mla(mp) => mla_forward_graph(g, a, mp, &x, &mask, path)?,
            AttnParams::Mtla(mp) => mtla_forward_graph(g, a, mp, &x, &mask, path)?,
        };
        let b = &layer.block;
        let h = g.add(&x, &att)?;
        let h = g.layer_norm(&h, &b.ln1_gain, &b.ln1_bias, eps)?;
        let f = g.matmul(&h, &b.w1)?;
        let f = g.add_row(&f, &b.b1)?;
        let f = g.gelu(&f);
        let f = g.matmul(&f, &b.w2)?;
        let f = g.add_row(&f, &b.b2)?;
        let y = g.add(&h, &f)?;
        x = g.layer_norm(&y, &b.ln2_gain, &b.ln2_bias, eps)?;
    }
    g.matmul(&x, &p.w_out)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

impl<F: Scalar> DecoderModel<F> {
    pub fn parameter_count(&self) -> usize {
        self.params.flat().iter().map(|m| m.len()).sum()
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<Matrix<F>> {
        forward_graph(
            &mut Eager,
            &self.config,
            &self.params,
            tokens,
            AttentionPath::Absorbed,
        )
    }

    pub fn new_decode_state(&self) -> DecodeState<F> {
        let cfg = &self.config;
        let a = &cfg.attention;
        let cap = cfg.max_len;
        let caches = (0..cfg.n_layers)
            .map(|_| LayerCache::new(a, cfg.variant, cap))
            .collect();
        DecodeState {
            caches,
            position: 0,
            scratch: DecodeScratch::new(a, cap),
            x: vec![F::zero(); cfg.d],
            a: vec![F::zero(); cfg.d],
            hidden: vec![F::zero(); cfg.ffn_dim],
            logits: vec![F::zero(); cfg.vocab],
        }
    }

    /// Feeds one token through every layer's cache and returns its logits.
    pub fn step<'s>(&self, state: &'s mut DecodeState<F>, token: usize) -> Result<&'s [F]> {
        let cfg = &self.config;
        if token >= cfg.vocab {
            return Err(Error::Parameter(format!(
                "token {token} outside vocab of {}",
                cfg.vocab
            )));
        }
        if state.position >= cfg.max_len {
            return Err(Error::shape(
                "decoder step",
                format!("position {} exceeds max_len", state.position + 1),
            ));
        }
        let a = &cfg.attention;
        let eps = F::from_f64(LAYER_NORM_EPS);
        let DecodeState {
            caches,
            position,
            scratch,
            x,
            a: att,
            hidden,
            logits,
        } = state;
        *position += 1;
        sinusoidal_pe_into(*position, x)?;
        axpy(F::one(), self.params.embedding.row(token), x);
        for (layer, cache) in self.params.layers.iter().zip(caches.iter_mut()) {
            layer
                .attn
                .step_into(a, cfg.variant, x, cache, scratch, att)?;
            let b = &layer.block;
            axpy(F::one(), att, x);
            layer_norm_row(x, b.ln1_gain.data(), b.ln1_bias.data(), eps);
            vec_mat(x, &b.w1, hidden);
            for (h, &bias) in hidden.iter_mut().zip(b.b1.data()) {
                *h = gelu(*h + bias);
            }
            vec_mat(hidden, &b.w2, att);
            axpy(F::one(), b.b2.data(), att);
            axpy(F::one(), att, x);
            layer_norm_row(x, b.ln2_gain.data(), b.ln2_bias.data(), eps);
        }
        vec_mat(x, &self.params.w_out, logits);
        Ok(logits)
    }

    fn check_decode(&self, prompt: &[usize], max_new: usize) -> Result<()> {
        if prompt.is_empty() {
            return Err(Error::Parameter(
                "greedy decoding needs a non-empty prompt".into(),
            ));
        }
        if prompt.len() + max_new > self.config.max_len {
            return Err(Error::shape(
                "greedy_decode",
                format!(
                    "{} prompt + {max_new} new tokens exceed max_len = {}",
                    prompt.len(),
                    self.config.max_len
                ),
            ));
        }
        Ok(())
    }

    /// Argmax continuation of `prompt` through the incremental caches.
    pub fn greedy_decode(&self, prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
        self.check_decode(prompt, max_new)?;
        let mut out = Vec::with_capacity(max_new);
        if max_new == 0 {
            return Ok(out);
        }
        let mut state = self.new_decode_state();
        let mut next = 0;
        for &tok in prompt {
            next = argmax(self.step(&mut state, tok)?);
        }
        out.push(next);
        while out.len() < max_new {
            next = argmax(self.step(&mut state, next)?);
            out.push(next);
        }
        Ok(out)
    }

    /// Argmax continuation recomputing the full forward pass for every token.
    pub fn greedy_decode_recompute(&self, prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
        self.check_decode(prompt, max_new)?;
        let mut seq = prompt.to_vec();
        for _ in 0..max_new {
            let logits = self.forward(&seq)?;
            seq.push(argmax(logits.row(logits.rows() - 1)));
        }
        Ok(seq.split_off(prompt.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_matches_built_model() {
        for v in Variant::ALL {
            let cfg = DecoderConfig::desk(v, 2);
            let m = build_model::<f64>(cfg).unwrap();
            assert_eq!(m.parameter_count(), parameter_count(&cfg));
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = DecoderConfig::desk(Variant::Mtla, 2).with_seed(9);
        let a = build_model::<f64>(cfg).unwrap();
        let b = build_model::<f64>(cfg).unwrap();
        assert_eq!(a, b);
        let c = build_model::<f64>(cfg.with_seed(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mtla_logits_are_finite() {
        let m = build_model::<f64>(DecoderConfig::desk(Variant::Mtla, 2)).unwrap();
        let logits = m.forward(&[1, 5, 7, 2, 9, 3, 3, 8]).unwrap();
        assert_eq!(logits.shape(), (8, 32));
        assert!(logits.is_finite());
    }

    #[test]
    fn cached_decode_matches_recompute() {
        for (k, v) in Variant::ALL.into_iter().enumerate() {
            let mut cfg = DecoderConfig::desk(v, 3).with_seed(k as u64);
            cfg.max_len = 12;
            let m = build_model::<f64>(cfg).unwrap();
            let prompt = [4, 9, 1, 20, 3];
            let cached = m.greedy_decode(&prompt, 7).unwrap();
            assert_eq!(
                cached,
                m.greedy_decode_recompute(&prompt, 7).unwrap(),
                "{v}"
            );
            assert!(m.greedy_decode(&prompt, 0).unwrap().is_empty());
        }
    }

    #[test]
    fn step_logits_match_forward_rows() {
        let m = build_model::<f64>(DecoderConfig::desk(Variant::Mtla, 2)).unwrap();
        let tokens = [3, 1, 4, 1, 5, 9, 2];
        let full = m.forward(&tokens).unwrap();
        let mut state = m.new_decode_state();
        for (i, &tok) in tokens.iter().enumerate() {
            let row = m.step(&mut state, tok).unwrap().to_vec();
            let diff = row
                .iter()
                .zip(full.row(i))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-9, "row {i}: {diff}");
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f32]), 0);
    }

    #[test]
    fn rejects_overlong_decoding() {
        let m = build_model::<f64>(DecoderConfig::desk(Variant::Mha, 1)).unwrap();
        assert!(m.greedy_decode(&[1; 30], 4).is_err());
    }
}
