//! Baseline attention variants.

pub mod dense;
pub mod latent;

pub use dense::{DenseAttention, DenseKVCache, DenseParams};
pub use latent::{AttentionPath, LatentKVCache, LatentWeights, MlaAttention, MlaParams};

use crate::config::{AttentionConfig, Variant};
use crate::decode::DecodeScratch;
use crate::graph::Eager;
use crate::masks::AdditiveMask;
use crate::numerics::{Matrix, Scalar};
use crate::{Error, Result};

fn dense_train<F: Scalar>(
    cfg: &AttentionConfig,
    variant: Variant,
    params: &DenseParams<Matrix<F>>,
    x: &Matrix<F>,
    mask: &AdditiveMask<F>,
) -> Result<Matrix<F>> {
    cfg.validate()?;
    dense::check_input(cfg, x, mask)?;
    let kv = cfg.kv_heads(variant);
    latent::check_shapes(
        "dense forward",
        params.iter(),
        DenseParams::shapes(cfg, kv).iter(),
    )?;
    dense::dense_forward_graph(&mut Eager, cfg, kv, params, x, mask)
}

fn dense_step<F: Scalar>(
    cfg: &AttentionConfig,
    variant: Variant,
    params: &DenseParams<Matrix<F>>,
    x: &Matrix<F>,
    cache: &mut DenseKVCache<F>,
) -> Result<Matrix<F>> {
    cfg.validate()?;
    if x.rows() != 1 {
        return Err(Error::shape(
            "dense step",
            format!("expected one row, got {}", x.rows()),
        ));
    }
    let kv = cfg.kv_heads(variant);
    latent::check_shapes(
        "dense step",
        params.iter(),
        DenseParams::shapes(cfg, kv).iter(),
    )?;
    let mut sc = DecodeScratch::new(cfg, cache.step + 1);
    let mut out = vec![F::zero(); cfg.d];
    dense::dense_step_into(cfg, kv, params, x.data(), cache, &mut sc, &mut out)?;
    Ok(Matrix::row_vector(out))
}

pub fn mha_forward_train<F: Scalar>(
    cfg: &AttentionConfig,
    params: &DenseParams<Matrix<F>>,
    x: &Matrix<F>,
    mask: &AdditiveMask<F>,
) -> Result<Matrix<F>> {
    dense_train(cfg, Variant::Mha, params, x, mask)
}

pub fn mha_step<F: Scalar>(
    cfg: &AttentionConfig,
    params: &DenseParams<Matrix<F>>,
    x: &Matrix<F>,
    cache: &mut DenseKVCache<F>,
) -> Result<Matrix<F>> {
    dense_step(cfg, Variant::Mha, params, x, cache)
}

pub fn mqa_forward_train<F: Scalar>(
    cfg: &AttentionConfig,
    params: &DenseParams<Matrix<F>>,
    x: &Matrix<F>,
    mask: &AdditiveMask<F>,
) -> Result<Matrix<F>> {
    dense_train(cfg, Variant::Mqa, params, x, mask)
}

pub fn mqa_step<F: Scalar>(
    cfg: &AttentionConfig,
    params: &DenseParams<Matrix<F>>,
    x: &Matrix<F>,
    cache: &mut DenseKVCache<F>,
) -> Result<Matrix<F>> {
    dense_step(cfg, Variant::Mqa, params, x, cache)
}

pub fn gqa_forward_train<F: Scalar>(
    cfg: &AttentionConfig,
    params: &DenseParams<Matrix<F>>,
    x: &Matrix<F>,
    mask: &AdditiveMask<F>,
) -> Result<Matrix<F>> {
    dense_train(cfg, Variant::Gqa, params, x, mask)
}

pub fn gqa_step<F: Scalar>(
    cfg: &AttentionConfig,
    params: &DenseParams<Matrix<F>>,
    x: &Matrix<F>,
    cache: &mut DenseKVCache<F>,
) -> Result<Matrix<F>> {
    dense_step(cfg, Variant::Gqa, params, x, cache)
}

pub fn mla_forward_train<F: Scalar>(
    cfg: &AttentionConfig,
    params: &MlaParams<Matrix<F>>,
    x: &Matrix<F>,
    mask: &AdditiveMask<F>,
) -> Result<Matrix<F>> {
    dense::check_input(cfg, x, mask)?;
    latent::check_shapes("mla forward", params.iter(), MlaParams::shapes(cfg).iter())?;
    latent::mla_forward_graph(&mut Eager, cfg, params, x, mask, AttentionPath::Absorbed)
}

pub fn mla_step<F: Scalar>(
    cfg: &AttentionConfig,
    params: &MlaParams<Matrix<F>>,
    x: &Matrix<F>,
    cache: &mut LatentKVCache<F>,
) -> Result<Matrix<F>> {
    let layer = MlaAttention::from_params(*cfg, params.clone())?;
    layer.step(x, cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::causal_mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> AttentionConfig {
        AttentionConfig::new(16, 4).unwrap().with_groups(2)
    }

    fn replay_dense(variant: Variant, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = DenseAttention::<f64>::new(cfg(), variant, &mut rng).unwrap();
        let t = 11;
        let x = Matrix::random_uniform(t, 16, 1.0, &mut rng);
        let y = layer.forward_train(&x, &causal_mask(t).unwrap()).unwrap();
        let mut cache = layer.new_cache(t);
        let mut worst: f64 = 0.0;
        for i in 0..t {
            let yi = layer
                .step(&x.slice_rows(i, 1).unwrap(), &mut cache)
                .unwrap();
            worst = worst.max(yi.max_abs_diff(&y.slice_rows(i, 1).unwrap()));
            assert_eq!(cache.keys.rows(), i + 1);
        }
        worst
    }

    #[test]
    fn dense_replay_matches_training() {
        for (k, v) in [Variant::Mha, Variant::Mqa, Variant::Gqa]
            .into_iter()
            .enumerate()
        {
            assert!(replay_dense(v, k as u64) < 1e-10, "{v}");
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cfg();
        let p = DenseParams::<Matrix<f64>>::init(&c, c.n_h, &mut rng);
        let x = Matrix::random_uniform(1, 16, 1.0, &mut rng);
        let y = mha_forward_train(&c, &p, &x, &causal_mask(1).unwrap()).unwrap();
        let v = crate::numerics::matmul(&x, &p.w_v).unwrap();
        let want = crate::numerics::matmul(&v, &p.w_o).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-12);

        let zeroed = DenseParams {
            w_v: Matrix::zeros(16, 16),
            ..p
        };
        let x = Matrix::random_uniform(5, 16, 1.0, &mut rng);
        let y = mha_forward_train(&c, &zeroed, &x, &causal_mask(5).unwrap()).unwrap();
        assert_eq!(y.frobenius_norm(), 0.0);
    }

    #[test]
    fn gqa_degenerate_groupings() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::<f64>::random_uniform(7, 16, 1.0, &mut rng);
        let mask = causal_mask(7).unwrap();

        let one = cfg().with_groups(1);
        let p = DenseParams::init(&one, 1, &mut rng);
        let a = gqa_forward_train(&one, &p, &x, &mask).unwrap();
        let b = mqa_forward_train(&one, &p, &x, &mask).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);

        let full = cfg().with_groups(4);
        let p = DenseParams::init(&full, 4, &mut rng);
        let a = gqa_forward_train(&full, &p, &x, &mask).unwrap();
        let b = mha_forward_train(&full, &p, &x, &mask).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);

        let mut cache = DenseKVCache::new(2 * 4, 4);
        let p = DenseParams::init(&cfg(), 2, &mut rng);
        gqa_step(&cfg(), &p, &x.slice_rows(0, 1).unwrap(), &mut cache).unwrap();
        assert_eq!(cache.keys.cols(), 2 * cfg().d_h);
    }

    #[test]
    fn mla_paths_and_replay_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = AttentionConfig::new(32, 4).unwrap().with_s(1);
        let layer = MlaAttention::<f64>::new(c, &mut rng).unwrap();
        let x = Matrix::random_uniform(9, 32, 1.0, &mut rng);
        let mask = causal_mask(9).unwrap();
        let absorbed = layer
            .forward_train_with(&x, &mask, AttentionPath::Absorbed)
            .unwrap();
        let explicit = layer
            .forward_train_with(&x, &mask, AttentionPath::Explicit)
            .unwrap();
        assert!(absorbed.max_abs_diff(&explicit) < 1e-9);
        let mut cache = layer.new_cache(9);
        for i in 0..9 {
            let yi = mla_step(&c, &layer.params, &x.slice_rows(i, 1).unwrap(), &mut cache).unwrap();
            assert!(yi.max_abs_diff(&absorbed.slice_rows(i, 1).unwrap()) < 1e-10);
            assert_eq!(cache.latents.cols(), c.r);
            assert_eq!(cache.step, i + 1);
        }
    }

    #[test]
    fn rejects_mismatched_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = DenseParams::<Matrix<f64>>::init(&cfg(), 1, &mut rng);
        let x = Matrix::random_uniform(3, 16, 1.0, &mut rng);
        assert!(mha_forward_train(&cfg(), &p, &x, &causal_mask(3).unwrap()).is_err());
    }
}
