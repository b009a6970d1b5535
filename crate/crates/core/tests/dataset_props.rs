mod common;

use common::rng;
use corrseg_core::dataset::{
    mask_from_palette, render_mask, resize_bilinear, write_indexed_png, load_mask, Palette, RgbTile,
};
use corrseg_core::feature_io::{generate_synthetic_scene, orthonormal_prototypes, SceneSpec};
use corrseg_core::LabelMask;
use proptest::prelude::*;
use rand::Rng;

fn tile() -> impl Strategy<Value = RgbTile> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<u8>(), 3 * h * w).prop_map(move |px| RgbTile::new(h, w, px).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn bilinear_output_stays_within_channel_range(t in tile(), oh in 1usize..20, ow in 1usize..20) {
        let out = resize_bilinear(&t, oh, ow).unwrap();
        prop_assert_eq!(out.pixels.len(), 3 * oh * ow);
        for ch in 0..3 {
            let src = t.pixels.iter().skip(ch).step_by(3);
            let (lo, hi) = (*src.clone().min().unwrap(), *src.max().unwrap());
            prop_assert!(out.pixels.iter().skip(ch).step_by(3).all(|&v| v >= lo && v <= hi));
        }
    }

    #[test]
    fn nearest_mask_resize_keeps_label_set(h in 1usize..10, w in 1usize..10, oh in 1usize..30, ow in 1usize..30, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mask = LabelMask::new(h, w, (0..h * w).map(|_| r.random_range(0..6u8)).collect()).unwrap();
        let out = mask.resize_nearest(oh, ow).unwrap();
        prop_assert!(out.labels().iter().all(|l| mask.labels().contains(l)));
        if oh % h == 0 && ow % w == 0 {
            let (sy, sx) = (oh / h, ow / w);
            for y in 0..oh {
                for x in 0..ow {
                    prop_assert_eq!(out.get(y, x), mask.get(y / sy, x / sx));
                }
            }
        }
    }

    #[test]
    fn palette_render_then_decode_is_identity(h in 1usize..10, w in 1usize..10, k in 1usize..12, seed in any::<u64>()) {
        let palette = Palette::generated(k).unwrap();
        let mut r = rng(seed);
        let mask = LabelMask::new(h, w, (0..h * w).map(|_| r.random_range(0..k as u8)).collect()).unwrap();
        let back = mask_from_palette(&render_mask(&mask, &palette).unwrap(), &palette).unwrap();
        prop_assert_eq!(back.labels(), mask.labels());
    }
}

#[test]
fn indexed_png_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let palette = Palette::generated(5).unwrap();
    let mut r = rng(8);
    let mask = LabelMask::new(13, 9, (0..117).map(|_| r.random_range(0..5u8)).collect()).unwrap();
    let path = dir.path().join("pred.png");
    write_indexed_png(&mask, &palette, &path, &[("seed", "8".to_string())]).unwrap();
    assert_eq!(load_mask(&path, &palette).unwrap().labels(), mask.labels());
}

#[test]
fn noisy_cells_sit_closest_to_their_own_prototype() {
    let (k, c) = (5, 16);
    let mut total = 0usize;
    let mut closest = 0usize;
    for seed in 0..20u64 {
        let spec = SceneSpec::with_random_layout(32, 32, k, c, 0.1, seed).unwrap();
        let (fm, labels) = generate_synthetic_scene(&spec).unwrap();
        let protos = orthonormal_prototypes(k, c, seed).unwrap();
        let hist = labels.histogram(k);
        assert!(hist.iter().all(|&n| n > 0), "class missing: {hist:?}");
        for cell in 0..fm.cells() {
            let v = fm.cell_at(cell);
            let sims: Vec<f64> = protos
                .iter()
                .map(|p| p.iter().zip(v).map(|(a, &b)| a * b as f64).sum())
                .collect();
            let best = (0..k).max_by(|&a, &b| sims[a].total_cmp(&sims[b])).unwrap();
            total += 1;
            closest += (best == labels.labels()[cell] as usize) as usize;
        }
    }
    assert!(closest as f64 >= 0.99 * total as f64, "{closest}/{total}");
}
