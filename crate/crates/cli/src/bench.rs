//! Per-step decode latency and cache accounting at a set of probe lengths.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use mtla_core::{AttentionConfig, AttentionStack, Precision, Scalar, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{BenchArgs, CliError, CliResult};

pub const CSV_HEADER: &str =
    "variant,s,T,median_step_ns,cache_elems_measured,cache_elems_analytic,cache_bytes";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub t: usize,
    /// Wall-clock nanoseconds of each timed step ending at `t`.
    pub samples_ns: Vec<u64>,
    pub median_step_ns: u64,
    pub cache_elems_measured: u64,
    pub cache_elems_analytic: u64,
    pub cache_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub variant: Variant,
    pub config: AttentionConfig,
    pub precision: Precision,
    pub seed: u64,
    /// Seconds since the Unix epoch when the run started.
    pub timestamp: u64,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn summary(&self) -> String {
        let c = &self.config;
        format!(
            "{} d={} n_h={} d_h={} g={} r={} d_rope={} s={} l={} precision={} seed={} timestamp={}",
            self.variant,
            c.d,
            c.n_h,
            c.d_h,
            c.g,
            c.r,
            c.d_rope,
            c.s,
            c.l,
            self.precision,
            self.seed,
            self.timestamp
        )
    }

    pub fn csv_rows(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{},{}",
                    self.variant,
                    self.config.s,
                    r.t,
                    r.median_step_ns,
                    r.cache_elems_measured,
                    r.cache_elems_analytic,
                    r.cache_bytes
                )
            })
            .collect()
    }
}

pub fn median(samples: &[u64]) -> u64 {
    let mut v = samples.to_vec();
    v.sort_unstable();
    let n = v.len();
    match n {
        0 => 0,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2,
    }
}

#[cfg(debug_assertions)]
fn allocations() -> u64 {
    crate::alloc_count::allocations()
}

#[cfg(not(debug_assertions))]
fn allocations() -> u64 {
    0
}

/// Decodes one stream up to the longest probe length, timing the `reps`
/// steps that end at each probe length.
pub fn run_bench<F: Scalar>(
    variant: Variant,
    cfg: AttentionConfig,
    probe_lengths: &[usize],
    reps: usize,
    seed: u64,
) -> CliResult<BenchReport> {
    let mut probes = probe_lengths.to_vec();
    probes.sort_unstable();
    probes.dedup();
    let (Some(&first), Some(&last)) = (probes.first(), probes.last()) else {
        return Err(CliError::Usage("no probe lengths given".into()));
    };
    if reps < 3 {
        return Err(CliError::Usage(format!(
            "need at least 3 repetitions, got {reps}"
        )));
    }
    if first < reps {
        return Err(CliError::Usage(format!(
            "probe length {first} is shorter than {reps} repetitions"
        )));
    }
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stack = AttentionStack::<F>::new(cfg, variant, &mut rng)?;
    let mut state = stack.new_state(last);
    let mut x = vec![F::zero(); cfg.d];
    let mut samples = Vec::with_capacity(reps);
    let mut rows = Vec::with_capacity(probes.len());
    let mut next = probes.iter().copied().peekable();
    for step in 1..=last {
        for v in x.iter_mut() {
            *v = F::from_f64(rng.gen_range(-1.0..1.0));
        }
        let before = allocations();
        let start = Instant::now();
        stack.step(&mut state, &x)?;
        let ns = start.elapsed().as_nanos() as u64;
        if allocations() != before {
            return Err(CliError::Failure(format!(
                "{variant} decode step {step} allocated memory"
            )));
        }
        let target = *next.peek().expect("probes remain until the last step");
        if step + reps > target {
            samples.push(ns);
        }
        if step == target {
            let measured = state.cache_elements() as u64;
            rows.push(BenchRow {
                t: step,
                median_step_ns: median(&samples),
                samples_ns: std::mem::take(&mut samples),
                cache_elems_measured: measured,
                cache_elems_analytic: cfg.cache_elements_after(variant, step),
                cache_bytes: measured * std::mem::size_of::<F>() as u64,
            });
            samples = Vec::with_capacity(reps);
            next.next();
        }
    }
    Ok(BenchReport {
        variant,
        config: cfg,
        precision: if std::mem::size_of::<F>() == 4 {
            Precision::Single
        } else {
            Precision::Double
        },
        seed,
        timestamp,
        rows,
    })
}

/// Config for one benchmark row group; `s` only applies to MTLA.
pub fn bench_config(
    d: usize,
    heads: usize,
    layers: usize,
    variant: Variant,
    s: usize,
) -> CliResult<AttentionConfig> {
    let cfg = AttentionConfig::new(d, heads)?
        .with_layers(layers)
        .with_s(if variant == Variant::Mtla { s } else { 1 });
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_bench_any(
    precision: Precision,
    variant: Variant,
    cfg: AttentionConfig,
    probe_lengths: &[usize],
    reps: usize,
    seed: u64,
) -> CliResult<BenchReport> {
    match precision {
        Precision::Single => run_bench::<f32>(variant, cfg, probe_lengths, reps, seed),
        Precision::Double => run_bench::<f64>(variant, cfg, probe_lengths, reps, seed),
    }
}

pub fn cmd_bench(a: &BenchArgs, precision: Precision, seed: u64, out: &mut dyn Write) -> CliResult {
    let to_stdout = a.out.as_os_str() == "-";
    let file = if to_stdout {
        None
    } else {
        let f =
            File::create(&a.out).map_err(|e| CliError::Io(format!("{}: {e}", a.out.display())))?;
        Some(BufWriter::new(f))
    };
    let mut reports = Vec::new();
    for &variant in &a.variant {
        let ratios: &[usize] = if variant == Variant::Mtla { &a.s } else { &[1] };
        for &s in ratios {
            let cfg = bench_config(a.d, a.heads, a.layers, variant, s)?;
            reports.push(run_bench_any(
                precision,
                variant,
                cfg,
                &a.probe_lengths,
                a.reps,
                seed,
            )?);
        }
    }
    let mut sink: Box<dyn Write + '_> = match file {
        Some(f) => Box::new(f),
        None => Box::new(&mut *out),
    };
    writeln!(sink, "{CSV_HEADER}")?;
    for r in &reports {
        for line in r.csv_rows() {
            writeln!(sink, "{line}")?;
        }
    }
    sink.flush()?;
    drop(sink);
    if !to_stdout {
        for r in &reports {
            writeln!(out, "# {}", r.summary())?;
        }
        writeln!(out, "wrote {}", a.out.display())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[5, 1, 3]), 3);
        assert_eq!(median(&[4, 1, 3, 2]), 2);
        assert_eq!(median(&[]), 0);
    }

    #[test]
    fn rows_match_closed_form() {
        let cfg = bench_config(32, 4, 2, Variant::Mtla, 3).unwrap();
        let r = run_bench::<f64>(Variant::Mtla, cfg, &[8, 5, 17], 3, 1).unwrap();
        assert_eq!(
            r.rows.iter().map(|r| r.t).collect::<Vec<_>>(),
            vec![5, 8, 17]
        );
        for row in &r.rows {
            assert_eq!(row.samples_ns.len(), 3);
            assert_eq!(row.cache_elems_measured, row.cache_elems_analytic);
            assert_eq!(row.cache_bytes, row.cache_elems_measured * 8);
        }
        assert_eq!(
            r.rows[2].cache_elems_measured,
            (17u64.div_ceil(3)) * (32 + 4) * 2
        );
    }

    #[test]
    fn rejects_too_few_reps() {
        let cfg = bench_config(16, 2, 1, Variant::Mha, 1).unwrap();
        assert!(matches!(
            run_bench::<f32>(Variant::Mha, cfg, &[8], 2, 0),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            run_bench::<f32>(Variant::Mha, cfg, &[2], 3, 0),
            Err(CliError::Usage(_))
        ));
    }
}
