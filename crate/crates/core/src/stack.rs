//! Attention-only layer stacks, the unit timed by the decode benchmarks.

use rand::Rng;

use crate::config::{AttentionConfig, Variant};
use crate::decode::DecodeScratch;
use crate::model::{AttnParams, LayerCache};
use crate::mtla::MtlaParams;
use crate::numerics::{axpy, Matrix, Scalar};
use crate::variants::{DenseParams, MlaParams};
use crate::{Error, Result};

/// `cfg.l` attention layers of one variant joined by residual connections.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack<F> {
    pub cfg: AttentionConfig,
    pub variant: Variant,
    layers: Vec<AttnParams<Matrix<F>>>,
}

/// Caches and buffers for decoding one stream through an [`AttentionStack`].
#[derive(Debug, Clone)]
pub struct StackState<F> {
    caches: Vec<LayerCache<F>>,
    scratch: DecodeScratch<F>,
    hidden: Vec<F>,
    out: Vec<F>,
    steps: usize,
}

impl<F: Scalar> StackState<F> {
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Cached elements summed over layers.
    pub fn cache_elements(&self) -> usize {
        self.caches.iter().map(LayerCache::elements).sum()
    }

    /// Residual stream after the latest step.
    pub fn output(&self) -> &[F] {
        &self.hidden
    }
}

impl<F: Scalar> AttentionStack<F> {
    pub fn new(cfg: AttentionConfig, variant: Variant, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.l)
            .map(|_| match variant {
                Variant::Mha | Variant::Mqa | Variant::Gqa => {
                    AttnParams::Dense(DenseParams::init(&cfg, cfg.kv_heads(variant), rng))
                }
                Variant::Mla => AttnParams::Mla(MlaParams::init(&cfg, rng)),
                Variant::Mtla => AttnParams::Mtla(MtlaParams::init(&cfg, rng)),
            })
            .collect();
        Ok(Self {
            cfg,
            variant,
            layers,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers.len()
    }

    /// Fresh state whose caches hold `capacity` tokens without reallocating.
    pub fn new_state(&self, capacity: usize) -> StackState<F> {
        StackState {
            caches: (0..self.layers.len())
                .map(|_| LayerCache::new(&self.cfg, self.variant, capacity))
                .collect(),
            scratch: DecodeScratch::new(&self.cfg, capacity),
            hidden: vec![F::zero(); self.cfg.d],
            out: vec![F::zero(); self.cfg.d],
            steps: 0,
        }
    }

    /// Feeds `x` through every layer, appending to each layer's cache.
    pub fn step(&self, state: &mut StackState<F>, x: &[F]) -> Result<()> {
        if x.len() != self.cfg.d {
            return Err(Error::shape(
                "stack step",
                format!("input of length {}, d = {}", x.len(), self.cfg.d),
            ));
        }
        let StackState {
            caches,
            scratch,
            hidden,
            out,
            steps,
        } = state;
        hidden.copy_from_slice(x);
        for (layer, cache) in self.layers.iter().zip(caches.iter_mut()) {
            layer.step_into(&self.cfg, self.variant, hidden, cache, scratch, out)?;
            axpy(F::one(), out, hidden);
        }
        *steps += 1;
        Ok(())
    }
}
