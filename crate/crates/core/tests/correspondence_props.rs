mod common;

use common::{brute_correspondence, random_map, random_map_f32, rng};
use corrseg_core::correspondence::{correlation_loss, cosine_correspondence, spatial_center, CorrTensor};
use corrseg_core::FeatureMap;
use proptest::prelude::*;
use rand::Rng;

fn map_pair() -> impl Strategy<Value = (FeatureMap, FeatureMap)> {
    (1usize..5, 1usize..5, 1usize..5, 1usize..5, 1usize..7, any::<u64>()).prop_map(
        |(hp, wp, hq, wq, c, seed)| {
            let mut r = rng(seed);
            (random_map_f32(&mut r, hp, wp, c), random_map_f32(&mut r, hq, wq, c))
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn self_correspondence_diagonal_is_one((f, _) in map_pair()) {
        let t = cosine_correspondence(&f, &f).unwrap();
        for a in 0..f.cells() {
            let v = t.as_matrix()[[a, a]];
            prop_assert!((v - 1.0).abs() <= 1e-5, "diagonal {v}");
        }
    }

    #[test]
    fn transpose_symmetry_is_exact((f, g) in map_pair()) {
        let fg = cosine_correspondence(&f, &g).unwrap();
        let gf = cosine_correspondence(&g, &f).unwrap();
        for a in 0..f.cells() {
            for b in 0..g.cells() {
                prop_assert_eq!(fg.as_matrix()[[a, b]].to_bits(), gf.as_matrix()[[b, a]].to_bits());
            }
        }
    }

    #[test]
    fn positive_rescaling_is_invariant((f, g) in map_pair(), s in 0.01f32..100.0) {
        let scaled = FeatureMap::new(f.hp(), f.wp(), f.channels(), f.data().iter().map(|v| v * s).collect()).unwrap();
        let a = cosine_correspondence(&f, &g).unwrap();
        let b = cosine_correspondence(&scaled, &g).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-5);
        }
    }

    #[test]
    fn matches_brute_force_cosines((f, g) in map_pair()) {
        let t = cosine_correspondence(&f, &g).unwrap();
        let oracle = brute_correspondence(&f, &g);
        for (a, row) in oracle.iter().enumerate() {
            for (b, &want) in row.iter().enumerate() {
                prop_assert!((t.as_matrix()[[a, b]] as f64 - want).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn centred_slices_have_zero_mean((f, g) in map_pair()) {
        let t = spatial_center(&cosine_correspondence(&f, &g).unwrap());
        for a in 0..f.cells() {
            let row = t.as_matrix().row(a).to_owned();
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / row.len() as f64;
            prop_assert!(mean.abs() <= 1e-6, "slice mean {mean}");
        }
    }
}

#[test]
fn loss_equals_elementwise_sum() {
    let mut r = rng(17);
    for _ in 0..100 {
        let f: Vec<f64> = (0..16).map(|_| r.random_range(-1.0..1.0)).collect();
        let s: Vec<f64> = (0..16).map(|_| r.random_range(-1.0..1.0)).collect();
        let b: f64 = r.random_range(-0.5..0.5);
        let ft = CorrTensor::new([2, 2, 2, 2], f.clone()).unwrap();
        let st = CorrTensor::new([2, 2, 2, 2], s.clone()).unwrap();
        let (loss, grad) = correlation_loss(&ft, &st, b).unwrap();

        let mut want = 0.0;
        for h in 0..2 {
            for w in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        let idx = ((h * 2 + w) * 2 + i) * 2 + j;
                        want += (f[idx] - b) * s[idx].max(0.0);
                    }
                }
            }
        }
        want /= -16.0;
        assert!((loss - want).abs() <= 1e-6, "{loss} vs {want}");
        for idx in 0..16 {
            let g = if s[idx] > 0.0 { -(f[idx] - b) / 16.0 } else { 0.0 };
            assert!((grad.data()[idx] - g).abs() <= 1e-12);
        }
    }
}

#[test]
fn centring_removes_constant_offsets() {
    let mut r = rng(5);
    let f = random_map(&mut r, 3, 2, 4);
    let g = random_map(&mut r, 2, 3, 4);
    let t = cosine_correspondence(&f, &g).unwrap();
    let mut shifted = t.clone();
    for (a, row) in shifted.data_mut().chunks_mut(6).enumerate() {
        row.iter_mut().for_each(|v| *v += a as f64 * 0.3);
    }
    let (x, y) = (spatial_center(&t), spatial_center(&shifted));
    for (p, q) in x.data().iter().zip(y.data()) {
        assert!((p - q).abs() < 1e-12);
    }
}
