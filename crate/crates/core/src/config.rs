//! Attention hyper-parameters, variant tags and exact KV-cache accounting.

use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

/// Dimensional hyper-parameters shared by every attention variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttentionConfig {
    /// Model dimension.
    pub d: usize,
    /// Query heads.
    pub n_h: usize,
    /// Per-head dimension.
    pub d_h: usize,
    /// Key/value groups for GQA.
    pub g: usize,
    /// Latent dimension (MLA, MTLA).
    pub r: usize,
    /// Per-head width of the decoupled rotary path.
    pub d_rope: usize,
    /// Temporal compression ratio (MTLA).
    pub s: usize,
    /// Layer count, used for accounting.
    pub l: usize,
    /// Hidden width of the merge-weight hyper-network.
    pub d_hyp: usize,
}

impl AttentionConfig {
    /// Config with the usual latent defaults: `r = 4 d_h` (capped at `d`),
    /// `d_rope = d_h / 2`, `g = n_h / 2`, `s = 2`, `d_hyp = 64`.
    pub fn new(d: usize, n_h: usize) -> Result<Self> {
        if n_h == 0 || !d.is_multiple_of(n_h) {
            return Err(Error::Config(format!(
                "d = {d} is not divisible by n_h = {n_h}"
            )));
        }
        let d_h = d / n_h;
        let cfg = Self {
            d,
            n_h,
            d_h,
            g: (n_h / 2).max(1),
            r: (4 * d_h).min(d),
            d_rope: d_h / 2,
            s: 2,
            l: 1,
            d_hyp: 64,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The full-size decoder setting: d = 512, 8 heads, r = 256, d_rope = 32.
    pub fn full_size() -> Self {
        Self {
            d: 512,
            n_h: 8,
            d_h: 64,
            g: 4,
            r: 256,
            d_rope: 32,
            s: 2,
            l: 9,
            d_hyp: 64,
        }
    }

    pub fn with_s(mut self, s: usize) -> Self {
        self.s = s;
        self
    }

    pub fn with_groups(mut self, g: usize) -> Self {
        self.g = g;
        self
    }

    pub fn with_layers(mut self, l: usize) -> Self {
        self.l = l;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d != self.n_h * self.d_h {
            return fail(format!(
                "d = {} but n_h * d_h = {}",
                self.d,
                self.n_h * self.d_h
            ));
        }
        if self.d_h == 0 || !self.d_h.is_multiple_of(2) {
            return fail(format!("d_h = {} must be positive and even", self.d_h));
        }
        if self.g == 0 || self.g > self.n_h || !self.n_h.is_multiple_of(self.g) {
            return fail(format!("g = {} must divide n_h = {}", self.g, self.n_h));
        }
        if self.r == 0 || self.r > self.d || !self.r.is_multiple_of(2) {
            return fail(format!("r = {} must be even and in 1..={}", self.r, self.d));
        }
        if self.d_rope == 0 || !self.d_rope.is_multiple_of(2) {
            return fail(format!(
                "d_rope = {} must be positive and even",
                self.d_rope
            ));
        }
        if self.s == 0 {
            return fail("s must be at least 1".into());
        }
        if self.l == 0 {
            return fail("l must be at least 1".into());
        }
        if self.d_hyp == 0 {
            return fail("d_hyp must be positive".into());
        }
        Ok(())
    }

    /// Key/value heads a dense variant keeps.
    pub fn kv_heads(&self, variant: Variant) -> usize {
        match variant {
            Variant::Mha => self.n_h,
            Variant::Mqa => 1,
            Variant::Gqa => self.g,
            Variant::Mla | Variant::Mtla => 0,
        }
    }

    /// Average cached elements per token across `l` layers.
    pub fn cache_elements_per_token(&self, variant: Variant) -> f64 {
        let l = self.l as f64;
        match variant {
            Variant::Mha | Variant::Mqa | Variant::Gqa => {
                (2 * self.kv_heads(variant) * self.d_h) as f64 * l
            }
            Variant::Mla => (self.r + self.d_rope) as f64 * l,
            Variant::Mtla => (self.r + self.d_rope) as f64 * l / self.s as f64,
        }
    }

    /// Exact cached element count across `l` layers after `steps` tokens.
    pub fn cache_elements_after(&self, variant: Variant, steps: usize) -> u64 {
        let rows = match variant {
            Variant::Mtla => steps.div_ceil(self.s),
            _ => steps,
        } as u64;
        let width = match variant {
            Variant::Mha | Variant::Mqa | Variant::Gqa => 2 * self.kv_heads(variant) * self.d_h,
            Variant::Mla | Variant::Mtla => self.r + self.d_rope,
        } as u64;
        rows * width * self.l as u64
    }
}

/// Attention variant tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Mha,
    Mqa,
    Gqa,
    Mla,
    Mtla,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Mha,
        Variant::Mqa,
        Variant::Gqa,
        Variant::Mla,
        Variant::Mtla,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mha => "mha",
            Variant::Mqa => "mqa",
            Variant::Gqa => "gqa",
            Variant::Mla => "mla",
            Variant::Mtla => "mtla",
        }
    }

    /// Stable integer code used by checkpoints.
    pub fn code(self) -> u64 {
        match self {
            Variant::Mha => 0,
            Variant::Mqa => 1,
            Variant::Gqa => 2,
            Variant::Mla => 3,
            Variant::Mtla => 4,
        }
    }

    pub fn from_code(code: u64) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.code() == code)
            .ok_or_else(|| Error::Config(format!("unknown variant code {code}")))
    }

    pub fn is_dense(self) -> bool {
        matches!(self, Variant::Mha | Variant::Mqa | Variant::Gqa)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mha" => Ok(Variant::Mha),
            "mqa" => Ok(Variant::Mqa),
            "gqa" => Ok(Variant::Gqa),
            "mla" => Ok(Variant::Mla),
            "mtla" => Ok(Variant::Mtla),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}
