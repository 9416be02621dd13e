//! Naive token-by-token MTLA, written with plain loops against the layer's
//! public weights, compared with both the parallel and the cached paths.

use mtla_core::{AttentionConfig, Matrix, MtlaAttention, MtlaParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BASE: f64 = 10_000.0;

fn vec_mat(x: &[f64], w: &Matrix<f64>) -> Vec<f64> {
    (0..w.cols())
        .map(|j| (0..w.rows()).map(|k| x[k] * w.get(k, j)).sum())
        .collect()
}

fn rotate(v: &mut [f64], pos: usize) {
    let n = v.len();
    for k in 0..n / 2 {
        let a = (pos as f64 - 1.0) * BASE.powf(-(2.0 * k as f64) / n as f64);
        let (x, y) = (v[2 * k], v[2 * k + 1]);
        v[2 * k] = x * a.cos() - y * a.sin();
        v[2 * k + 1] = x * a.sin() + y * a.cos();
    }
}

fn position_code(j: usize, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let a = (j as f64 - 1.0) * BASE.powf(-(2.0 * (i / 2) as f64) / n as f64);
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

fn normalize(v: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    v.iter()
        .enumerate()
        .map(|(i, x)| (x - mean) / (var + 1e-5).sqrt() * gain[i] + bias[i])
        .collect()
}

fn naive(cfg: &AttentionConfig, p: &MtlaParams<Matrix<f64>>, x: &Matrix<f64>) -> Matrix<f64> {
    let (s, r, dh, dr) = (cfg.s, cfg.r, cfg.d_h, cfg.d_rope);
    let mut slots: Vec<Vec<f64>> = Vec::new();
    let mut keys: Vec<Vec<f64>> = Vec::new();
    let mut out = Matrix::zeros(x.rows(), cfg.d);
    for t in 0..x.rows() {
        let i = t + 1;
        let xi = x.row(t);
        let c = normalize(&vec_mat(xi, &p.w_r), p.ln_gain.data(), p.ln_bias.data());
        let j = i.div_ceil(s);
        let hp = vec_mat(&position_code(j, r), &p.h_p);
        let hc = vec_mat(&c, &p.h_c);
        let z: f64 = hp.iter().zip(&hc).map(|(a, b)| a * b).sum();
        let w = 1.0 / (1.0 + (-z).exp());
        let mut kr = vec_mat(&c, &p.w_kr);
        rotate(&mut kr, i);
        if (i - 1) % s == 0 {
            slots.push(c.iter().map(|v| w * v).collect());
            keys.push(kr);
        } else {
            let last = slots.last_mut().unwrap();
            for (a, b) in last.iter_mut().zip(&c) {
                *a += w * b;
            }
            *keys.last_mut().unwrap() = kr;
        }
        let q = vec_mat(xi, &p.w_q);
        let qr = vec_mat(xi, &p.w_qr);
        let mut concat = vec![0.0; cfg.n_h * dh];
        for h in 0..cfg.n_h {
            let mut qrh = qr[h * dr..(h + 1) * dr].to_vec();
            rotate(&mut qrh, i);
            let mut scores = Vec::new();
            let mut values = Vec::new();
            for (slot, key) in slots.iter().zip(&keys) {
                let k = vec_mat(slot, &p.w_k);
                let v = vec_mat(slot, &p.w_v);
                let content: f64 = (0..dh).map(|e| q[h * dh + e] * k[h * dh + e]).sum();
                let rotary: f64 = (0..dr).map(|e| qrh[e] * key[e]).sum();
                scores.push((content + rotary) / (dh as f64).sqrt());
                values.push(v[h * dh..(h + 1) * dh].to_vec());
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (pj, v) in e.iter().zip(&values) {
                for k in 0..dh {
                    concat[h * dh + k] += pj / z * v[k];
                }
            }
        }
        let o = vec_mat(&concat, &p.w_o);
        out.row_mut(t).copy_from_slice(&o);
    }
    out
}

fn layer(d: usize, n_h: usize, s: usize, rng: &mut ChaCha8Rng) -> MtlaAttention<f64> {
    let cfg = AttentionConfig::new(d, n_h).unwrap().with_s(s);
    let mut layer = MtlaAttention::<f64>::new(cfg, rng).unwrap();
    for v in layer.params.ln_gain.data_mut() {
        *v = rng.gen_range(0.5..1.5);
    }
    for v in layer.params.ln_bias.data_mut() {
        *v = rng.gen_range(-0.3..0.3);
    }
    layer
}

#[test]
fn parallel_forward_matches_naive_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (d, n_h, s, t) in [
        (16, 2, 1, 5),
        (16, 2, 2, 7),
        (32, 4, 3, 10),
        (32, 2, 4, 9),
        (64, 4, 2, 12),
    ] {
        let layer = layer(d, n_h, s, &mut rng);
        let x = Matrix::<f64>::random_uniform(t, d, 1.0, &mut rng);
        let want = naive(&layer.cfg, &layer.params, &x);
        let got = layer.train_forward(&x).unwrap();
        let err = got.max_abs_diff(&want);
        assert!(err < 1e-10, "d={d} n_h={n_h} s={s}: {err:e}");
    }
}

#[test]
fn cached_steps_match_naive_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for s in 1..=4 {
        let layer = layer(32, 4, s, &mut rng);
        let x = Matrix::<f64>::random_uniform(11, 32, 1.0, &mut rng);
        let want = naive(&layer.cfg, &layer.params, &x);
        let mut cache = layer.new_cache(11);
        for t in 0..11 {
            let row = Matrix::row_vector(x.row(t).to_vec());
            let got = layer.infer_step(&row, &mut cache).unwrap();
            let err = got
                .row(0)
                .iter()
                .zip(want.row(t))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "s={s} t={t}: {err:e}");
        }
        assert_eq!(cache.len(), 11usize.div_ceil(s));
    }
}
