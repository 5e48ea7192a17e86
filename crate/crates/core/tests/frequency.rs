use std::f64::consts::PI;
use std::time::Instant;

use freqmix::frequency::{
    apply_high_operator, apply_low_operator, band_energies, band_frame_weights, dct, dct_slice, idct, map_partition,
    spectral_pool, spectral_pool_unfused, Band, FrequencyAxis, FrequencyConfig,
};
use freqmix::rng::Rng;
use freqmix::Tensor;
use proptest::prelude::*;

// Textbook orthonormal DCT-II, summed term by term.
fn direct_dct(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    (0..x.len())
        .map(|k| {
            let c = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            c * x.iter().enumerate().map(|(i, v)| v * (PI / n * (i as f64 + 0.5) * k as f64).cos()).sum::<f64>()
        })
        .collect()
}

fn random(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

#[test]
fn dct_matches_direct_sum() {
    let mut rng = Rng::new(11);
    for n in [1, 2, 3, 6, 25, 64] {
        let x = random(&mut rng, n);
        let got = dct_slice(&x).unwrap();
        for (a, b) in got.iter().zip(direct_dct(&x)) {
            assert!((a - b).abs() < 1e-12, "n = {n}: {a} vs {b}");
        }
    }
}

#[test]
fn round_trip_on_full_size_tensor() {
    let mut rng = Rng::new(3);
    let x = Tensor::new(&[25, 3, 64], random(&mut rng, 25 * 3 * 64)).unwrap();
    let start = Instant::now();
    for axis in [2, 0] {
        let back = idct(&dct(&x, axis).unwrap()).unwrap();
        let err = back.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "axis {axis}: {err}");
    }
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn energy_is_preserved() {
    let mut rng = Rng::new(5);
    for i in 0..100 {
        let n = 1 + i % 70;
        let x = random(&mut rng, n);
        let e_x: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let e_s: f64 = dct_slice(&x).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((e_x - e_s).abs() < 1e-9);
    }
}

#[test]
fn band_operators_on_four_coefficients() {
    let cfg = FrequencyConfig::new(2, 0.2, 1.2, FrequencyAxis::Temporal);
    assert_eq!(cfg.band_scales(Band::High, 4), vec![1.0, 1.0, 1.2, 1.2]);
    assert_eq!(cfg.band_scales(Band::Low, 4), vec![0.2, 0.2, 1.0, 1.0]);

    let s = dct(&Tensor::new(&[1, 1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap(), 2).unwrap();
    let c = s.tensor.data().to_vec();
    let hi = apply_high_operator(&s, &cfg).unwrap();
    let lo = apply_low_operator(&s, &cfg).unwrap();
    assert_eq!(hi.tensor.data(), &[c[0], c[1], 1.2 * c[2], 1.2 * c[3]]);
    assert_eq!(lo.tensor.data(), &[0.2 * c[0], 0.2 * c[1], c[2], c[3]]);
}

#[test]
fn operator_bounds_are_enforced() {
    let ok = |p, l, h| FrequencyConfig::new(p, l, h, FrequencyAxis::Temporal).validate(64).is_ok();
    assert!(ok(33, 0.2, 1.2));
    assert!(ok(1, 0.5, 1.5));
    assert!(!ok(0, 0.2, 1.2));
    assert!(!ok(64, 0.2, 1.2));
    assert!(!ok(33, 1.0, 1.2));
    assert!(!ok(33, 0.0, 1.0));
    assert!(!ok(33, 0.2, 1.0));
    assert!(!ok(33, 0.2, 1.3));
    assert!(!FrequencyConfig::new(33, 1.0, 1.0, FrequencyAxis::Temporal).validate(64).is_ok());
    assert!(FrequencyConfig::identity(33, FrequencyAxis::Temporal).validate(64).is_ok());
}

#[test]
fn partition_scales_with_axis_length() {
    assert_eq!(map_partition(13, 25).unwrap(), 13);
    assert_eq!(map_partition(13, 64).unwrap(), 33);
    assert_eq!(map_partition(1, 4).unwrap(), 1);
    assert_eq!(map_partition(25, 4).unwrap(), 3);
    assert!(map_partition(0, 64).is_err());
    assert!(map_partition(26, 64).is_err());
}

#[test]
fn fused_pooling_matches_explicit_transform() {
    let mut rng = Rng::new(8);
    let x = Tensor::new(&[6, 3, 10], random(&mut rng, 180)).unwrap();
    for axis in [FrequencyAxis::Temporal, FrequencyAxis::Joint] {
        let cfg = FrequencyConfig::new(3, 0.3, 1.25, axis);
        for band in [Band::High, Band::Low, Band::Uniform] {
            let a = spectral_pool(&x, &cfg, band).unwrap();
            let b = spectral_pool_unfused(&x, &cfg, band).unwrap();
            assert_eq!(a.shape(), &[6, 3]);
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-12, "{axis:?} {band:?}");
            }
        }
    }
}

#[test]
fn uniform_frame_weights_pick_out_the_dc_term() {
    // Mean of the unscaled spectrum is D^T 1 / F, which for F = 1 is 1.
    let cfg = FrequencyConfig::new(1, 0.2, 1.2, FrequencyAxis::Temporal);
    assert_eq!(band_frame_weights(&cfg, Band::Uniform, 1), vec![1.0]);
    let w = band_frame_weights(&cfg, Band::Uniform, 8);
    let dc = direct_dct(&[1.0; 8]);
    assert!((dc[0] - 8f64.sqrt()).abs() < 1e-12);
    let x: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
    let via_w: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
    let via_dct: f64 = direct_dct(&x).iter().sum::<f64>() / 8.0;
    assert!((via_w - via_dct).abs() < 1e-12);
}

#[test]
fn band_energy_splits_a_pure_cosine() {
    let f = 16;
    let k = 11;
    let row: Vec<f64> = (0..f).map(|t| (PI * k as f64 * (t as f64 + 0.5) / f as f64).cos()).collect();
    let mut coords = vec![0.0; 2 * f];
    coords[f..].copy_from_slice(&row);
    let e = band_energies(&coords, 2, 1, f, 8).unwrap();
    assert_eq!((e[0].low, e[0].high, e[0].ratio()), (0.0, 0.0, 0.0));
    assert!(e[1].low < 1e-20);
    assert!((e[1].high - f as f64 / 2.0).abs() < 1e-9);
    assert!((e[1].ratio() - 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn dct_is_linear(n in 1usize..40, a in -3.0f64..3.0, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = random(&mut rng, n);
        let y = random(&mut rng, n);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + v).collect();
        let (dx, dy, dc) = (dct_slice(&x).unwrap(), dct_slice(&y).unwrap(), dct_slice(&combo).unwrap());
        for i in 0..n {
            prop_assert!((dc[i] - (a * dx[i] + dy[i])).abs() < 1e-10);
        }
    }
}
