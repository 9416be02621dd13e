//! Copy-task data and an Adam training loop for the toy decoder.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::graph::{Eager, Graph};
use crate::model::{argmax, forward_graph, DecoderModel};
use crate::numerics::{Matrix, Scalar};
use crate::variants::latent::AttentionPath;
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const SEP: usize = 1;

/// Teacher-forced copy sequences `[t_1..t_len, SEP, t_1..t_len]`, shifted by
/// one: `targets[b][k]` is the token after `inputs[b][k]`, present only where
/// that token follows the separator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CopyBatch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<Option<usize>>>,
    pub len: usize,
}

impl CopyBatch {
    pub fn size(&self) -> usize {
        self.inputs.len()
    }

    /// The full sequence `b`, separator included.
    pub fn sequence(&self, b: usize) -> Vec<usize> {
        let mut seq = self.inputs[b].clone();
        seq.extend(self.targets[b].last().copied().flatten());
        seq
    }
}

pub fn copy_task_batch(
    rng: &mut impl Rng,
    batch: usize,
    len: usize,
    vocab: usize,
    max_len: usize,
) -> Result<CopyBatch> {
    if 2 * len + 1 > max_len {
        return Err(Error::shape(
            "copy_task_batch",
            format!("sequence of {} exceeds max_len = {max_len}", 2 * len + 1),
        ));
    }
    if vocab < 4 || len == 0 {
        return Err(Error::Parameter(format!(
            "copy task needs vocab >= 4 and len >= 1 (got {vocab}, {len})"
        )));
    }
    let mut inputs = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);
    for _ in 0..batch {
        let body: Vec<usize> = (0..len).map(|_| rng.gen_range(SEP + 1..vocab)).collect();
        let mut seq = body.clone();
        seq.push(SEP);
        seq.extend_from_slice(&body);
        let tgt = (0..2 * len)
            .map(|k| (k >= len).then(|| seq[k + 1]))
            .collect();
        seq.pop();
        inputs.push(seq);
        targets.push(tgt);
    }
    Ok(CopyBatch {
        inputs,
        targets,
        len,
    })
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    pub batch: usize,
    pub len: usize,
    pub path: AttentionPath,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            warmup: 100,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip: 1.0,
            batch: 16,
            len: 16,
            path: AttentionPath::Explicit,
        }
    }
}

/// Optimizer state and history of one training run.
#[derive(Debug, Clone)]
pub struct TrainRun<F> {
    pub config: TrainConfig,
    pub step: usize,
    pub losses: Vec<f64>,
    pub rng: ChaCha8Rng,
    m: Vec<Matrix<F>>,
    v: Vec<Matrix<F>>,
}

impl<F: Scalar> TrainRun<F> {
    pub fn new(model: &DecoderModel<F>, config: TrainConfig, seed: u64) -> Self {
        let zeros = |m: &&Matrix<F>| Matrix::zeros(m.rows(), m.cols());
        let flat = model.params.flat();
        Self {
            config,
            step: 0,
            losses: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            m: flat.iter().map(zeros).collect(),
            v: flat.iter().map(zeros).collect(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        let warm = self.config.warmup.max(1) as f64;
        self.config.lr * ((self.step + 1) as f64 / warm).min(1.0)
    }

    pub fn next_batch(&mut self, model: &DecoderModel<F>) -> Result<CopyBatch> {
        let c = &model.config;
        copy_task_batch(
            &mut self.rng,
            self.config.batch,
            self.config.len,
            c.vocab,
            c.max_len,
        )
    }
}

/// Mean post-separator cross-entropy of `batch` and its gradients in
/// [`ModelParams::flat`](crate::model::ModelParams::flat) order.
pub fn loss_and_gradients<F: Scalar>(
    model: &DecoderModel<F>,
    batch: &CopyBatch,
    path: AttentionPath,
) -> Result<(F, Vec<Matrix<F>>)> {
    let mut tape = Tape::new();
    let leaves = model.params.map(|m| tape.leaf(m.clone()));
    let mut total = None;
    for (inputs, targets) in batch.inputs.iter().zip(&batch.targets) {
        let logits = forward_graph(&mut tape, &model.config, &leaves, inputs, path)?;
        let loss = tape.cross_entropy(&logits, targets)?;
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(&acc, &loss)?,
        });
    }
    let total = total.ok_or_else(|| Error::Parameter("empty batch".into()))?;
    let loss = tape.scale(&total, F::one() / F::from_usize(batch.size()));
    let value = tape.value(&loss).get(0, 0);
    let mut grads = tape.backward(loss, &Matrix::filled(1, 1, F::one()))?;
    let out = leaves
        .flat()
        .into_iter()
        .zip(model.params.flat())
        .map(|(&var, m)| {
            grads
                .take(var)
                .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))
        })
        .collect();
    Ok((value, out))
}

/// Mean post-separator cross-entropy of `batch`, without recording a tape.
pub fn batch_loss<F: Scalar>(
    model: &DecoderModel<F>,
    batch: &CopyBatch,
    path: AttentionPath,
) -> Result<F> {
    if batch.size() == 0 {
        return Err(Error::Parameter("empty batch".into()));
    }
    let mut total = F::zero();
    for (inputs, targets) in batch.inputs.iter().zip(&batch.targets) {
        let logits = forward_graph(&mut Eager, &model.config, &model.params, inputs, path)?;
        total += Eager.cross_entropy(&logits, targets)?.get(0, 0);
    }
    Ok(total / F::from_usize(batch.size()))
}

/// One Adam step on `batch` with global-norm clipping. Returns the loss before
/// the update.
pub fn train_step<F: Scalar>(
    model: &mut DecoderModel<F>,
    batch: &CopyBatch,
    run: &mut TrainRun<F>,
) -> Result<f64> {
    let (loss, mut grads) = loss_and_gradients(model, batch, run.config.path)?;
    let loss = Scalar::to_f64(loss);
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: run.step,
            loss,
        });
    }
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| Scalar::to_f64(v).powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > run.config.clip {
        let k = F::from_f64(run.config.clip / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }

    let c = run.config;
    let lr = run.learning_rate();
    let t = (run.step + 1) as i32;
    let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
    let bias1 = F::from_f64(1.0 - c.beta1.powi(t));
    let bias2 = F::from_f64(1.0 - c.beta2.powi(t));
    let (lr, eps) = (F::from_f64(lr), F::from_f64(c.eps));
    for (((p, g), m), v) in model
        .params
        .flat_mut()
        .into_iter()
        .zip(&grads)
        .zip(&mut run.m)
        .zip(&mut run.v)
    {
        for (((pk, &gk), mk), vk) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mk = b1 * *mk + (F::one() - b1) * gk;
            *vk = b2 * *vk + (F::one() - b2) * gk * gk;
            let m_hat = *mk / bias1;
            let v_hat = *vk / bias2;
            *pk -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    run.step += 1;
    run.losses.push(loss);
    Ok(loss)
}

/// Teacher-forced argmax accuracy over the post-separator positions.
pub fn accuracy<F: Scalar>(model: &DecoderModel<F>, batch: &CopyBatch) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (inputs, targets) in batch.inputs.iter().zip(&batch.targets) {
        let logits = forward_graph(
            &mut Eager,
            &model.config,
            &model.params,
            inputs,
            AttentionPath::Explicit,
        )?;
        for (k, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                total += 1;
                hit += usize::from(argmax(logits.row(k)) == t);
            }
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    })
}

/// Summary of [`train_copy`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps: usize,
    pub accuracy: f64,
    pub losses: Vec<f64>,
}

/// Trains on fresh copy batches for up to `max_steps`, stopping early once a
/// held-out batch of `eval_size` sequences reaches `target` accuracy.
/// `log(step, loss)` runs every `log_every` steps.
#[allow(clippy::too_many_arguments)]
pub fn train_copy<F: Scalar>(
    model: &mut DecoderModel<F>,
    config: TrainConfig,
    max_steps: usize,
    seed: u64,
    target: Option<f64>,
    eval_size: usize,
    log_every: usize,
    mut log: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let mut run = TrainRun::new(model, config, seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1);
    let c = model.config;
    let eval = copy_task_batch(&mut eval_rng, eval_size, config.len, c.vocab, c.max_len)?;
    let mut acc = None;
    while run.step < max_steps {
        let batch = run.next_batch(model)?;
        let loss = train_step(model, &batch, &mut run)?;
        if log_every > 0 && run.step.is_multiple_of(log_every) {
            log(run.step, loss);
            if let Some(target) = target {
                let a = accuracy(model, &eval)?;
                acc = Some(a);
                if a >= target {
                    break;
                }
            }
        }
    }
    let accuracy = match acc {
        Some(a) if run.step.is_multiple_of(log_every.max(1)) => a,
        _ => accuracy(model, &eval)?,
    };
    Ok(TrainOutcome {
        steps: run.step,
        accuracy,
        losses: run.losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::model::{build_model, DecoderConfig};

    #[test]
    fn copy_batch_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = copy_task_batch(&mut rng, 3, 5, 12, 11).unwrap();
        for i in 0..3 {
            let seq = b.sequence(i);
            assert_eq!(seq.len(), 11);
            assert_eq!(seq[5], SEP);
            assert_eq!(seq[..5], seq[6..]);
            assert!(seq.iter().all(|&t| t != PAD));
            let post: Vec<usize> = b.targets[i].iter().flatten().copied().collect();
            assert_eq!(post, seq[..5]);
            assert!(b.targets[i][..5].iter().all(Option::is_none));
        }
        let again = copy_task_batch(&mut ChaCha8Rng::seed_from_u64(1), 3, 5, 12, 11).unwrap();
        assert_eq!(b, again);
        assert!(copy_task_batch(&mut rng, 1, 6, 12, 12).is_err());
    }

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = copy_task_batch(&mut rng, 4, 16, 32, 33).unwrap();
        let logits = Matrix::<f64>::zeros(32, 32);
        let loss = Eager
            .cross_entropy(&logits, &b.targets[0])
            .unwrap()
            .get(0, 0);
        assert!((loss - 32f64.ln()).abs() < 0.02 * 32f64.ln());
    }

    fn small(variant: Variant) -> DecoderModel<f64> {
        let mut cfg = DecoderConfig::desk(variant, 2);
        cfg.max_len = 9;
        build_model(cfg).unwrap()
    }

    #[test]
    fn initial_loss_is_near_log_vocab() {
        let m = small(Variant::Mtla);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = copy_task_batch(&mut rng, 8, 4, 32, 9).unwrap();
        let (loss, _) = loss_and_gradients(&m, &b, AttentionPath::Explicit).unwrap();
        assert!((loss - 32f64.ln()).abs() < 0.25 * 32f64.ln(), "{loss}");
    }

    #[test]
    fn tape_free_loss_matches_recorded_loss() {
        let m = small(Variant::Gqa);
        let b = copy_task_batch(&mut ChaCha8Rng::seed_from_u64(8), 3, 4, 32, 9).unwrap();
        for path in [AttentionPath::Explicit, AttentionPath::Absorbed] {
            let (taped, _) = loss_and_gradients(&m, &b, path).unwrap();
            assert!((batch_loss(&m, &b, path).unwrap() - taped).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut m = small(Variant::Mtla);
        let before = m.clone();
        let mut run = TrainRun::new(
            &m,
            TrainConfig {
                lr: 0.0,
                batch: 2,
                len: 4,
                ..Default::default()
            },
            4,
        );
        let b = run.next_batch(&m).unwrap();
        train_step(&mut m, &b, &mut run).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn overfits_a_repeated_batch() {
        let mut m = small(Variant::Mtla);
        let cfg = TrainConfig {
            lr: 3e-3,
            warmup: 1,
            batch: 4,
            len: 4,
            ..Default::default()
        };
        let mut run = TrainRun::new(&m, cfg, 5);
        let b = run.next_batch(&m).unwrap();
        let first = train_step(&mut m, &b, &mut run).unwrap();
        let mut last = first;
        for _ in 0..49 {
            last = train_step(&mut m, &b, &mut run).unwrap();
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn explicit_and_absorbed_gradients_agree() {
        let m = small(Variant::Mla);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = copy_task_batch(&mut rng, 2, 4, 32, 9).unwrap();
        let (la, ga) = loss_and_gradients(&m, &b, AttentionPath::Absorbed).unwrap();
        let (le, ge) = loss_and_gradients(&m, &b, AttentionPath::Explicit).unwrap();
        assert!((la - le).abs() < 1e-12);
        for (a, e) in ga.iter().zip(&ge) {
            assert!(a.max_abs_diff(e) < 1e-10);
        }
    }
}
