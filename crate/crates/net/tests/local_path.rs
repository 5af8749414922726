use fuseloc_core::Pose;
use fuseloc_net::{corr, spatial_pool, FrameInput, Model, NetworkConfig, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Brute-force cost volume, written independently of the library kernel.
fn corr_oracle(f1: &Tensor<f64>, f2: &Tensor<f64>, d: i64) -> Vec<f64> {
    let [c, h, w] = [f1.shape()[0], f1.shape()[1], f1.shape()[2]];
    let at = |t: &Tensor<f64>, ch: usize, i: i64, j: i64| t.data()[ch * h * w + i as usize * w + j as usize];
    let side = (2 * d + 1) as usize;
    let mut out = vec![0.0; side * side * h * w];
    for dy in -d..=d {
        for dx in -d..=d {
            for i in 0..h as i64 {
                for j in 0..w as i64 {
                    let (i2, j2) = (i + dy, j + dx);
                    if i2 < 0 || j2 < 0 || i2 >= h as i64 || j2 >= w as i64 {
                        continue;
                    }
                    let s: f64 = (0..c).map(|ch| at(f1, ch, i, j) * at(f2, ch, i2, j2)).sum();
                    let k = ((dy + d) as usize * side + (dx + d) as usize) * h * w + i as usize * w + j as usize;
                    out[k] = s / c as f64;
                }
            }
        }
    }
    out
}

#[test]
fn corr_matches_brute_force() {
    for (seed, (c, h, w, d)) in [(5usize, 6, 7, 4), (3, 4, 4, 2), (8, 5, 9, 1)].into_iter().enumerate() {
        let f1 = random(&[c, h, w], seed as u64, -1.0, 1.0);
        let f2 = random(&[c, h, w], 100 + seed as u64, -1.0, 1.0);
        let got = corr(&f1, &f2, d);
        assert_eq!(got.shape(), &[(2 * d + 1).pow(2), h, w]);
        let want = corr_oracle(&f1, &f2, d as i64);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn corr_zero_displacement_is_squared_norm() {
    let f = random(&[4, 5, 6], 1, -2.0, 2.0);
    let out = corr(&f, &f, 4);
    assert_eq!(out.shape()[0], 81);
    let center = 40 * 30;
    for p in 0..30 {
        let n2: f64 = (0..4).map(|c| f.data()[c * 30 + p].powi(2)).sum();
        assert!((out.data()[center + p] - n2 / 4.0).abs() < 1e-12);
    }
}

#[test]
fn constant_cost_features_pool_to_the_constant() {
    let (l, h, w) = (6, 4, 5);
    let ks: Vec<f64> = (0..l).map(|c| c as f64 * 1.7 - 3.0).collect();
    let f_c = Tensor::new(&[l, h, w], ks.iter().flat_map(|k| vec![*k; h * w]).collect());
    let f_d2 = random(&[l, h, w], 4, -5.0, 5.0);
    let (weights, _, f_local) = spatial_pool(&f_c, &f_d2);
    for c in 0..l {
        let s: f64 = weights.data()[c * h * w..(c + 1) * h * w].iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
        assert!((f_local.data()[c] - ks[c]).abs() < 1e-5);
    }
}

#[test]
fn model_pooling_matches_explicit_double_loop() {
    let (h, w) = (64, 80);
    let m = Model::<f32>::new(NetworkConfig::reduced(h, w), 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut t = |c: usize| Tensor::new(&[c, h, w], (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect());
    let input = FrameInput { color: t(3), depth: t(1) };
    let f = m.forward(&input, &Pose::identity()).unwrap().features;
    let (l, hh, ww) = (64, h / 16, w / 16);
    for c in 0..l {
        let at = |t: &Tensor<f32>, i: usize, j: usize| t.data()[c * hh * ww + i * ww + j] as f64;
        let mut mx = f64::NEG_INFINITY;
        for i in 0..hh {
            for j in 0..ww {
                mx = mx.max(at(&f.f_depth2, i, j));
            }
        }
        let mut z = 0.0;
        let mut acc = 0.0;
        for i in 0..hh {
            for j in 0..ww {
                let e = (at(&f.f_depth2, i, j) - mx).exp();
                z += e;
                acc += e * at(&f.f_c, i, j);
            }
        }
        let wsum: f64 = f.spatial_weights.data()[c * hh * ww..(c + 1) * hh * ww].iter().map(|v| *v as f64).sum();
        assert!((wsum - 1.0).abs() < 1e-5);
        assert!((acc / z - f.f_local.data()[c] as f64).abs() < 1e-5, "channel {c}");
    }
}

proptest! {
    #[test]
    fn pooled_value_lies_within_channel_range(seed in any::<u64>(), spread in 0.1f64..30.0) {
        let f_c = random(&[3, 3, 4], seed, -10.0, 10.0);
        let f_d2 = random(&[3, 3, 4], seed ^ 0x5555, -spread, spread);
        let (_, _, f_local) = spatial_pool(&f_c, &f_d2);
        for c in 0..3 {
            let ch = &f_c.data()[c * 12..(c + 1) * 12];
            let lo = ch.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(f_local.data()[c] >= lo - 1e-9 && f_local.data()[c] <= hi + 1e-9);
        }
    }
}
