//! Checkpoints and config text.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! "MTLA"  u16 version
//! u16 record count, then per record: u8 name length, name, u64 value
//! u32 block count, then per block:   u64 rows, u64 cols, rows*cols f64
//! ```
//!
//! Blocks follow [`ModelParams::flat`] order. Weights are always stored as
//! `f64`, whatever precision the model runs in.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::config::{AttentionConfig, Variant};
use crate::model::{DecoderConfig, DecoderModel, ModelParams};
use crate::numerics::{Matrix, Scalar};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MTLA";
pub const VERSION: u16 = 1;

/// Config fields in record order.
pub const CONFIG_KEYS: [&str; 15] = [
    "vocab", "d", "n_layers", "ffn_dim", "max_len", "seed", "variant", "n_h", "d_h", "g", "r",
    "d_rope", "s", "l", "d_hyp",
];

fn config_records(cfg: &DecoderConfig) -> [(&'static str, u64); 15] {
    let a = &cfg.attention;
    let vals = [
        cfg.vocab as u64,
        cfg.d as u64,
        cfg.n_layers as u64,
        cfg.ffn_dim as u64,
        cfg.max_len as u64,
        cfg.seed,
        cfg.variant.code(),
        a.n_h as u64,
        a.d_h as u64,
        a.g as u64,
        a.r as u64,
        a.d_rope as u64,
        a.s as u64,
        a.l as u64,
        a.d_hyp as u64,
    ];
    let mut out = [("", 0); 15];
    for (slot, (k, v)) in out.iter_mut().zip(CONFIG_KEYS.into_iter().zip(vals)) {
        *slot = (k, v);
    }
    out
}

fn config_from_records(records: &BTreeMap<String, u64>) -> Result<DecoderConfig> {
    let get = |k: &str| {
        records
            .get(k)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing config key `{k}`")))
    };
    let us = |k: &str| -> Result<usize> {
        usize::try_from(get(k)?).map_err(|_| Error::Config(format!("`{k}` does not fit in usize")))
    };
    let attention = AttentionConfig {
        d: us("d")?,
        n_h: us("n_h")?,
        d_h: us("d_h")?,
        g: us("g")?,
        r: us("r")?,
        d_rope: us("d_rope")?,
        s: us("s")?,
        l: us("l")?,
        d_hyp: us("d_hyp")?,
    };
    let cfg = DecoderConfig {
        vocab: us("vocab")?,
        d: us("d")?,
        n_layers: us("n_layers")?,
        ffn_dim: us("ffn_dim")?,
        attention,
        variant: Variant::from_code(get("variant")?)?,
        max_len: us("max_len")?,
        seed: get("seed")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Serialized size of a checkpoint for `cfg`, in bytes.
pub fn checkpoint_size(cfg: &DecoderConfig) -> usize {
    let header = MAGIC.len() + 2 + 2 + 4;
    let records: usize = CONFIG_KEYS.iter().map(|k| 1 + k.len() + 8).sum();
    let blocks: usize = ModelParams::shapes(cfg)
        .flat()
        .iter()
        .map(|(r, c)| 16 + 8 * r * c)
        .sum();
    header + records + blocks
}

pub fn to_bytes<F: Scalar>(model: &DecoderModel<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(checkpoint_size(&model.config));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let records = config_records(&model.config);
    out.extend_from_slice(&(records.len() as u16).to_le_bytes());
    for (k, v) in records {
        out.push(k.len() as u8);
        out.extend_from_slice(k.as_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    let blocks = model.params.flat();
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for m in blocks {
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for &v in m.data() {
            out.extend_from_slice(&v.to_f64().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &dyn Fn() -> String) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.at..end];
                self.at = end;
                Ok(out)
            }
            None => Err(Error::CorruptCheckpoint(format!(
                "truncated while reading {}",
                what()
            ))),
        }
    }

    fn u64(&mut self, what: &dyn Fn() -> String) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn from_bytes<F: Scalar>(bytes: &[u8]) -> Result<DecoderModel<F>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4, &|| "magic".into())? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(
        r.take(2, &|| "version".into())?
            .try_into()
            .expect("2 bytes"),
    );
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = u16::from_le_bytes(
        r.take(2, &|| "config record count".into())?
            .try_into()
            .expect("2 bytes"),
    );
    let mut records = BTreeMap::new();
    for i in 0..n {
        let what = || format!("config record {i}");
        let len = r.take(1, &what)?[0] as usize;
        let name = std::str::from_utf8(r.take(len, &what)?)
            .map_err(|_| {
                Error::CorruptCheckpoint(format!("config record {i} has a non-UTF-8 name"))
            })?
            .to_string();
        if !CONFIG_KEYS.contains(&name.as_str()) {
            return Err(Error::CorruptCheckpoint(format!(
                "unknown config record `{name}`"
            )));
        }
        let value = r.u64(&what)?;
        records.insert(name, value);
    }
    let config =
        config_from_records(&records).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let shapes = ModelParams::shapes(&config);
    let named = shapes.named();
    let count = u32::from_le_bytes(
        r.take(4, &|| "block count".into())?
            .try_into()
            .expect("4 bytes"),
    ) as usize;
    if count != named.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{count} parameter blocks, config implies {}",
            named.len()
        )));
    }
    let params = shapes.try_map(|name, &(rows, cols)| {
        let what = || format!("parameter block `{name}`");
        let got = (r.u64(&what)?, r.u64(&what)?);
        if got != (rows as u64, cols as u64) {
            return Err(Error::CorruptCheckpoint(format!(
                "block `{name}` is {}x{}, config implies {rows}x{cols}",
                got.0, got.1
            )));
        }
        let raw = r.take(8 * rows * cols, &what)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| F::from_f64(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect();
        Matrix::new(rows, cols, data)
    })?;
    if r.at != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.at
        )));
    }
    Ok(DecoderModel { config, params })
}

pub fn save<F: Scalar>(model: &DecoderModel<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(&to_bytes(model)).map_err(io)?;
    w.flush().map_err(io)
}

pub fn load<F: Scalar>(path: impl AsRef<Path>) -> Result<DecoderModel<F>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}

/// `key = value` lines, one per config field.
pub fn config_to_text(cfg: &DecoderConfig) -> String {
    let mut out = String::new();
    for (k, v) in config_records(cfg) {
        if k == "variant" {
            out.push_str(&format!("variant = {}\n", cfg.variant));
        } else {
            out.push_str(&format!("{k} = {v}\n"));
        }
    }
    out
}

/// Parses `key = value` lines over `base`. Blank lines and `#` comments are
/// skipped; unknown or repeated keys are errors.
pub fn config_from_text(text: &str, base: DecoderConfig) -> Result<DecoderConfig> {
    let mut records: BTreeMap<String, u64> = config_records(&base)
        .iter()
        .map(|&(k, v)| (k.to_string(), v))
        .collect();
    let mut seen = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        if !CONFIG_KEYS.contains(&key) {
            return Err(Error::Config(format!(
                "line {}: unknown key `{key}`",
                n + 1
            )));
        }
        if seen.contains(&key) {
            return Err(Error::Config(format!(
                "line {}: `{key}` given twice",
                n + 1
            )));
        }
        seen.push(key);
        let v = if key == "variant" {
            value.parse::<Variant>()?.code()
        } else {
            value.parse::<u64>().map_err(|_| {
                Error::Config(format!("line {}: `{value}` is not an integer", n + 1))
            })?
        };
        records.insert(key.to_string(), v);
    }
    config_from_records(&records)
}
