use std::fmt::Write as _;

use corrseg_core::dataset::{write_indexed_png, ManifestEntry, Palette, SplitManifest};
use corrseg_core::feature_io::{generate_synthetic_scene, write_feature_map, SceneSpec};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{create_dir, write_stamped_json, RunStamp};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Serialize)]
struct SceneRecord {
    stem: String,
    split: &'static str,
    scene_seed: u64,
    class_histogram: Vec<u64>,
}

#[derive(Debug, Serialize)]
struct SynthSummary<'a> {
    hp: usize,
    wp: usize,
    c: usize,
    k: usize,
    noise_sigma: f64,
    scenes: &'a [SceneRecord],
}

/// Per-scene seeds drawn from a dedicated stream of the run seed.
fn scene_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5eed);
    (0..n).map(|_| rng.random()).collect()
}

/// Writes synthetic scenes, their ground-truth masks, a palette and a manifest.
/// Returns the human-readable summary printed on stdout.
pub fn run(cfg: &RunConfig) -> Result<String, CliError> {
    let s = &cfg.synth;
    if s.n_train + s.n_test == 0 {
        return Err(CliError::config("synth needs at least one scene"));
    }
    let out = cfg.output_dir();
    let stamp = RunStamp::of(cfg);
    let (feature_dir, mask_dir) = (out.join("features"), out.join("masks"));
    create_dir(&feature_dir)?;
    create_dir(&mask_dir)?;

    let palette = Palette::generated(s.k)?;
    let seeds = scene_seeds(cfg.seed, s.n_train + s.n_test);
    let mut splits: IndexMap<String, Vec<ManifestEntry>> = IndexMap::new();
    let mut records = Vec::with_capacity(seeds.len());
    for (i, &scene_seed) in seeds.iter().enumerate() {
        let (split, index) = if i < s.n_train { ("train", i) } else { ("test", i - s.n_train) };
        let mut spec = SceneSpec::with_random_layout(s.hp, s.wp, s.k, s.c, s.noise_sigma, scene_seed)
            .map_err(|e| CliError::config(e.to_string()))?;
        spec.prototype_seed = Some(cfg.seed);
        let (fm, labels) = generate_synthetic_scene(&spec)?;

        let stem = format!("{split}_{index:04}");
        let fmap_path = feature_dir.join(format!("{stem}.fmap"));
        let mask_path = mask_dir.join(format!("{stem}.png"));
        write_feature_map(&fm, &fmap_path)?;
        let mask = labels.resize_nearest(s.hp * s.mask_scale, s.wp * s.mask_scale)?;
        write_indexed_png(&mask, &palette, &mask_path, &stamp.png_text())?;

        log::debug!("wrote {stem} (scene seed {scene_seed})");
        splits.entry(split.to_string()).or_default().push(ManifestEntry {
            image: fmap_path,
            mask: Some(mask_path),
            meters_per_pixel: None,
        });
        records.push(SceneRecord {
            stem,
            split,
            scene_seed,
            class_histogram: labels.histogram(s.k),
        });
    }

    let manifest = SplitManifest {
        pseudo_train: Vec::new(),
        pseudo_train_from: splits.contains_key("train").then(|| "train".to_string()).into_iter().collect(),
        splits,
    };
    let manifest_json: serde_json::Value =
        serde_json::from_str(&manifest.to_json(&out)).expect("manifest json parses");
    write_stamped_json(&cfg.manifest_path(), &stamp, &manifest_json)?;
    write_stamped_json(&cfg.palette_path(), &stamp, &palette)?;
    write_stamped_json(
        &out.join("synth_summary.json"),
        &stamp,
        &SynthSummary {
            hp: s.hp,
            wp: s.wp,
            c: s.c,
            k: s.k,
            noise_sigma: s.noise_sigma,
            scenes: &records,
        },
    )?;

    let mut totals = vec![0u64; s.k];
    for r in &records {
        totals.iter_mut().zip(&r.class_histogram).for_each(|(t, h)| *t += h);
    }
    let mut summary = format!(
        "synth: {} train + {} test scenes, {}x{} cells, c={}, k={}, noise_sigma={} -> {}\n",
        s.n_train,
        s.n_test,
        s.hp,
        s.wp,
        s.c,
        s.k,
        s.noise_sigma,
        out.display()
    );
    let _ = writeln!(summary, "class cell counts: {totals:?}");
    Ok(summary)
}
