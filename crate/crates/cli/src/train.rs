//! Copy-task training of the toy decoder.

use std::io::Write;

use mtla_core::checkpoint::config_from_text;
use mtla_core::{
    build_model, save, train_copy, DecoderConfig, Error, Precision, Scalar, TrainConfig,
    TrainOutcome,
};

use crate::{CliError, CliResult, TrainArgs};

pub const LOG_EVERY: usize = 50;

/// Model config from the flags, with `--config` overrides applied last.
pub fn model_config(a: &TrainArgs, seed: u64) -> CliResult<DecoderConfig> {
    let mut cfg = DecoderConfig::desk(a.variant, a.s).with_seed(seed);
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        cfg = config_from_text(&text, cfg)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train<F: Scalar>(
    cfg: DecoderConfig,
    a: &TrainArgs,
    seed: u64,
    out: &mut dyn Write,
) -> CliResult<TrainOutcome> {
    let mut model = build_model::<F>(cfg)?;
    let target = (a.target_accuracy <= 1.0).then_some(a.target_accuracy);
    writeln!(out, "step,loss")?;
    let mut write_err = None;
    let outcome = train_copy(
        &mut model,
        TrainConfig::default(),
        a.steps,
        seed,
        target,
        a.eval_size,
        LOG_EVERY,
        |step, loss| {
            if write_err.is_none() {
                write_err = writeln!(out, "{step},{loss:.6}").err();
            }
        },
    );
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let outcome = outcome.map_err(|e| match e {
        Error::Divergence { step, loss } => {
            CliError::Failure(format!("training diverged at step {step} (loss = {loss})"))
        }
        other => other.into(),
    })?;
    save(&model, &a.checkpoint)?;
    Ok(outcome)
}

pub fn cmd_train_toy(
    a: &TrainArgs,
    precision: Precision,
    seed: u64,
    out: &mut dyn Write,
) -> CliResult {
    let cfg = model_config(a, seed)?;
    let outcome = match precision {
        Precision::Single => train::<f32>(cfg, a, seed, out)?,
        Precision::Double => train::<f64>(cfg, a, seed, out)?,
    };
    writeln!(out, "steps={}", outcome.steps)?;
    writeln!(out, "accuracy={:.4}", outcome.accuracy)?;
    writeln!(out, "checkpoint={}", a.checkpoint.display())?;
    Ok(())
}
