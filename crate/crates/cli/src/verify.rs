//! The property suite behind `mtla verify`. Hermetic: every input is drawn
//! from the seed and nothing touches the file system.

use std::io::Write;

use mtla_core::{
    batch_loss, build_model, causal_mask, chunk_causal_mask, finite_difference_gradient,
    loss_and_gradients, max_relative_error, stride_aware_causal_mask, AttentionConfig,
    AttentionPath, AttentionStack, CopyBatch, DecoderConfig, DenseAttention, Matrix, MlaAttention,
    MtlaAttention, Precision, Scalar, Variant,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{CliError, CliResult, VerifyArgs};

/// Relative-error denominators never drop below this, so gradients that are
/// zero up to rounding compare in absolute terms.
pub const GRADIENT_FLOOR: f64 = 1e-6;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyOutcome {
    pub name: &'static str,
    pub max_err: f64,
    pub tolerance: f64,
}

impl PropertyOutcome {
    pub fn passed(&self) -> bool {
        self.max_err <= self.tolerance
    }

    pub fn line(&self) -> String {
        let tag = if self.passed() { "PASS" } else { "FAIL" };
        format!("{tag} {} max_err={:e}", self.name, self.max_err)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteOptions {
    pub trials: usize,
    pub seed: u64,
    pub corrupt_mask: bool,
}

fn tolerance<F: Scalar>() -> f64 {
    if Scalar::to_f64(F::epsilon()) < 1e-10 {
        1e-9
    } else {
        1e-4
    }
}

fn max_diff<F: Scalar>(a: &[F], b: &[F]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (Scalar::to_f64(*x) - Scalar::to_f64(*y)).abs())
        .fold(0.0, f64::max)
}

fn random_config(rng: &mut ChaCha8Rng) -> CliResult<AttentionConfig> {
    let d = [16, 32, 64][rng.gen_range(0..3)];
    let n_h = [2, 4][rng.gen_range(0..2)];
    Ok(AttentionConfig::new(d, n_h)?)
}

fn replay_error<F: Scalar>(
    full: &Matrix<F>,
    mut step: impl FnMut(&Matrix<F>) -> mtla_core::Result<Matrix<F>>,
    x: &Matrix<F>,
) -> CliResult<f64> {
    let mut worst = 0.0f64;
    for t in 0..x.rows() {
        let y = step(&Matrix::row_vector(x.row(t).to_vec()))?;
        worst = worst.max(max_diff(y.row(0), full.row(t)));
    }
    Ok(worst)
}

/// Parallel forward rows against sequential cached steps, every variant.
/// With `corrupt_mask`, MTLA trains under a plain causal mask and `s >= 2`.
pub fn train_infer_equivalence<F: Scalar>(
    trials: usize,
    seed: u64,
    corrupt_mask: bool,
) -> CliResult<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let base = random_config(&mut rng)?;
        let t = rng.gen_range(if corrupt_mask { 3 } else { 1 }..=33);
        let x = Matrix::<F>::random_uniform(t, base.d, 1.0, &mut rng);
        let causal = causal_mask::<F>(t)?;
        for variant in [Variant::Mha, Variant::Mqa, Variant::Gqa] {
            let layer = DenseAttention::<F>::new(base, variant, &mut rng)?;
            let full = layer.forward_train(&x, &causal)?;
            let mut cache = layer.new_cache(t);
            worst = worst.max(replay_error(&full, |r| layer.step(r, &mut cache), &x)?);
        }
        let mla = MlaAttention::<F>::new(base, &mut rng)?;
        let full = mla.forward_train(&x, &causal)?;
        let mut cache = mla.new_cache(t);
        worst = worst.max(replay_error(&full, |r| mla.step(r, &mut cache), &x)?);

        let s = if corrupt_mask {
            2 + trial % 3
        } else {
            1 + trial % 4
        };
        let mtla = MtlaAttention::<F>::new(base.with_s(s), &mut rng)?;
        let full = if corrupt_mask {
            mtla.forward_train_with(&x, &causal, AttentionPath::Absorbed)?
        } else {
            mtla.train_forward(&x)?
        };
        let mut cache = mtla.new_cache(t);
        worst = worst.max(replay_error(&full, |r| mtla.infer_step(r, &mut cache), &x)?);
    }
    Ok(worst)
}

/// Folded query/output projections against explicit per-head keys and values.
pub fn absorption_identity<F: Scalar>(trials: usize, seed: u64) -> CliResult<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let base = random_config(&mut rng)?;
        let t = rng.gen_range(1..=33);
        let x = Matrix::<F>::random_uniform(t, base.d, 1.0, &mut rng);
        let mla = MlaAttention::<F>::new(base, &mut rng)?;
        let causal = causal_mask::<F>(t)?;
        let a = mla.forward_train_with(&x, &causal, AttentionPath::Absorbed)?;
        let b = mla.forward_train_with(&x, &causal, AttentionPath::Explicit)?;
        worst = worst.max(max_diff(a.data(), b.data()));

        let s = 1 + trial % 4;
        let mtla = MtlaAttention::<F>::new(base.with_s(s), &mut rng)?;
        let mask = stride_aware_causal_mask::<F>(t, s)?;
        let a = mtla.forward_train_with(&x, &mask, AttentionPath::Absorbed)?;
        let b = mtla.forward_train_with(&x, &mask, AttentionPath::Explicit)?;
        worst = worst.max(max_diff(a.data(), b.data()));
    }
    Ok(worst)
}

/// Count of mask entries breaking the visibility rules, for `T <= max_t`.
pub fn mask_violations(max_t: usize) -> CliResult<usize> {
    let mut bad = 0;
    for t in 1..=max_t {
        if stride_aware_causal_mask::<f64>(t, 1)?.matrix() != causal_mask::<f64>(t)?.matrix() {
            bad += 1;
        }
        for s in 1..=5 {
            let stride = stride_aware_causal_mask::<f64>(t, s)?;
            let chunk = chunk_causal_mask::<f64>(t, s)?;
            for m in 1..=t {
                bad += usize::from(stride.allowed_in_row(m) != m.div_ceil(s));
                for n in 1..=t {
                    let leaks = n > m || m.div_ceil(s) != n.div_ceil(s);
                    bad += usize::from(chunk.allows(m, n) && leaks);
                }
            }
        }
    }
    Ok(bad)
}

/// Scalar merge weights against the batched weight matrix.
pub fn hyper_weight_consistency<F: Scalar>(trials: usize, seed: u64) -> CliResult<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let s = 1 + trial % 4;
        let layer = MtlaAttention::<F>::new(random_config(&mut rng)?.with_s(s), &mut rng)?;
        let t = rng.gen_range(1..=12);
        let x = Matrix::<F>::random_uniform(t, layer.cfg.d, 1.0, &mut rng);
        let c = layer.latent(&x)?;
        let w = layer.hyper_weight_matrix(&c)?;
        for m in 0..t {
            for n in 0..t {
                let scalar = layer.hyper_weight(c.row(n), (m + 1).div_ceil(s))?;
                worst = worst.max((Scalar::to_f64(scalar) - Scalar::to_f64(w.get(m, n))).abs());
            }
        }
    }
    Ok(worst)
}

/// Largest gap between measured cache elements and the closed form.
pub fn cache_accounting(steps: usize, seed: u64) -> CliResult<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for s in 1..=4 {
        let cfg = AttentionConfig::new(32, 4)?.with_s(s).with_layers(2);
        for variant in Variant::ALL {
            let stack = AttentionStack::<f64>::new(cfg, variant, &mut rng)?;
            let mut state = stack.new_state(steps);
            let x: Vec<f64> = (0..cfg.d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for t in 1..=steps {
                stack.step(&mut state, &x)?;
                let gap =
                    state.cache_elements() as f64 - cfg.cache_elements_after(variant, t) as f64;
                worst = worst.max(gap.abs());
            }
        }
    }
    Ok(worst)
}

/// The gradient-check model: one MTLA block with d = 16, two heads, s = 2.
pub fn gradient_model_config(seed: u64) -> CliResult<DecoderConfig> {
    let mut attention = AttentionConfig::new(16, 2)?.with_s(2).with_layers(1);
    attention.d_hyp = 16;
    let cfg = DecoderConfig {
        vocab: 8,
        d: 16,
        n_layers: 1,
        ffn_dim: 32,
        attention,
        variant: Variant::Mtla,
        max_len: 8,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Worst relative error between taped gradients and central differences
/// over every parameter entry of [`gradient_model_config`] on `T = 8`.
pub fn gradient_check(seed: u64) -> CliResult<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = build_model::<f64>(gradient_model_config(seed)?)?;
    for m in model.params.flat_mut() {
        if m.rows() == 1 {
            for v in m.data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
    }
    let vocab = model.config.vocab;
    let batch = CopyBatch {
        inputs: vec![(0..8).map(|_| rng.gen_range(0..vocab)).collect()],
        targets: vec![(0..8).map(|_| Some(rng.gen_range(0..vocab))).collect()],
        len: 8,
    };
    let path = AttentionPath::Explicit;
    let (_, grads) = loss_and_gradients(&model, &batch, path)?;
    let mut worst = 0.0f64;
    for (i, g) in grads.iter().enumerate() {
        let original = model.params.flat()[i].clone();
        let fd = finite_difference_gradient(
            |p| {
                *model.params.flat_mut()[i] = p.clone();
                batch_loss(&model, &batch, path)
            },
            &original,
            FD_STEP,
        )?;
        *model.params.flat_mut()[i] = original;
        worst = worst.max(max_relative_error(g, &fd, GRADIENT_FLOOR));
    }
    Ok(worst)
}

fn suite<F: Scalar>(o: SuiteOptions) -> CliResult<Vec<PropertyOutcome>> {
    let tol = tolerance::<F>();
    let seed = o.seed;
    Ok(vec![
        PropertyOutcome {
            name: "train_infer_equivalence",
            max_err: train_infer_equivalence::<F>(o.trials, seed, o.corrupt_mask)?,
            tolerance: tol,
        },
        PropertyOutcome {
            name: "absorption_identity",
            max_err: absorption_identity::<F>(o.trials, seed.wrapping_add(1))?,
            tolerance: tol,
        },
        PropertyOutcome {
            name: "mask_identities",
            max_err: mask_violations(64)? as f64,
            tolerance: 0.0,
        },
        PropertyOutcome {
            name: "hyper_weight_consistency",
            max_err: hyper_weight_consistency::<F>(o.trials, seed.wrapping_add(2))?,
            tolerance: tol,
        },
        PropertyOutcome {
            name: "cache_accounting",
            max_err: cache_accounting(40, seed.wrapping_add(3))?,
            tolerance: 0.0,
        },
        PropertyOutcome {
            name: "gradient_check",
            max_err: gradient_check(seed.wrapping_add(4))?,
            tolerance: GRADIENT_TOLERANCE,
        },
    ])
}

/// Runs every property. Gradients are always checked in double precision.
pub fn run_suite(precision: Precision, options: SuiteOptions) -> CliResult<Vec<PropertyOutcome>> {
    match precision {
        Precision::Single => suite::<f32>(options),
        Precision::Double => suite::<f64>(options),
    }
}

pub fn cmd_verify(
    a: &VerifyArgs,
    precision: Precision,
    seed: u64,
    out: &mut dyn Write,
) -> CliResult {
    if a.trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let options = SuiteOptions {
        trials: a.trials,
        seed,
        corrupt_mask: a.corrupt_mask,
    };
    let results = run_suite(precision, options)?;
    for r in &results {
        writeln!(out, "{}", r.line())?;
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(CliError::Failure(format!(
            "{failed} of {} properties failed",
            results.len()
        )));
    }
    Ok(())
}
