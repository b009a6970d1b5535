use std::fs;
use std::path::Path;

use corrseg_core::cluster_probe::{assign_clusters, kmeans_cosine_restarts, upsample_mask, Centroids};
use corrseg_core::dataset::{raster_dims, write_indexed_png, Palette};
use corrseg_core::seg_head::{head_forward, read_checkpoint};
use corrseg_core::CodeMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{create_dir, load_features, load_manifest, split_entries, write_stamped_json, RunStamp};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Serialize, Deserialize)]
struct CentroidsFile {
    k: usize,
    d: usize,
    vectors: Vec<Vec<f32>>,
}

pub(crate) fn load_palette(cfg: &RunConfig) -> Result<Palette, CliError> {
    let path = cfg.palette_path();
    if !path.exists() {
        return Err(CliError::config(format!("palette {} does not exist", path.display())));
    }
    Ok(Palette::load(&path)?)
}

/// Cluster count: explicit `cluster.k`, else the palette size.
pub(crate) fn cluster_count(cfg: &RunConfig, palette: &Palette) -> Result<usize, CliError> {
    let k = cfg.cluster.k.unwrap_or(palette.len());
    if k > palette.len() && !cfg.cluster.over_cluster {
        return Err(CliError::config(format!(
            "cluster.k = {k} exceeds the {} palette classes; set cluster.over_cluster to allow it",
            palette.len()
        )));
    }
    if k > 256 {
        return Err(CliError::config("cluster.k must be at most 256"));
    }
    Ok(k)
}

fn load_centroids(path: &Path) -> Result<Centroids, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let file: CentroidsFile =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let cent = Centroids::new(file.vectors)?;
    if cent.k != file.k || cent.d != file.d {
        return Err(CliError::config(format!("{}: k/d fields disagree with vectors", path.display())));
    }
    Ok(cent)
}

fn fit_centroids(cfg: &RunConfig, codes: &[CodeMap], k: usize) -> Result<Centroids, CliError> {
    let d = codes[0].channels();
    let rows: usize = codes.iter().map(|c| c.cells()).sum();
    let data: Vec<f32> = codes.iter().flat_map(|c| c.data().iter().copied()).collect();
    let points = Array2::from_shape_vec((rows, d), data).expect("codes stack into rows");
    let fit = kmeans_cosine_restarts(
        points.view(),
        k,
        cfg.cluster.max_iters,
        cfg.seed,
        cfg.cluster.restarts,
    )?;
    log::info!(
        "k-means over {rows} codes: k={k}, objective {:.4} after {} steps",
        fit.objective(),
        fit.objective_history.len()
    );
    Ok(fit.centroids)
}

/// Runs the head over the inference split, clusters the codes and writes
/// one indexed-colour PNG per input plus the centroids used.
pub fn run(cfg: &RunConfig) -> Result<String, CliError> {
    let palette = load_palette(cfg)?;
    let k = cluster_count(cfg, &palette)?;
    let manifest = load_manifest(cfg)?;
    let split = cfg.splits.infer.as_str();
    let entries = split_entries(&manifest, split)?;
    if entries.is_empty() {
        return Err(CliError::empty(format!("split {split:?} has no images")));
    }
    let checkpoint = cfg.checkpoint_path();
    if !checkpoint.exists() {
        return Err(CliError::config(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let params = read_checkpoint(&checkpoint)?;
    let features = load_features(cfg, entries)?;
    if features[0].channels() != params.c() {
        return Err(CliError::shape(format!(
            "checkpoint expects c={} but features have c={}",
            params.c(),
            features[0].channels()
        )));
    }
    let codes = features
        .iter()
        .map(|f| head_forward(f, &params))
        .collect::<Result<Vec<_>, _>>()?;

    let centroids = match &cfg.paths.centroids {
        Some(path) => {
            let cent = load_centroids(path)?;
            if cent.d != params.d() {
                return Err(CliError::shape(format!(
                    "centroids have d={} but the head emits d={}",
                    cent.d,
                    params.d()
                )));
            }
            if cent.k > palette.len() && !cfg.cluster.over_cluster {
                return Err(CliError::config("loaded centroids outnumber palette classes"));
            }
            cent
        }
        None => fit_centroids(cfg, &codes, k)?,
    };

    let stamp = RunStamp::of(cfg);
    let colors = palette.extended(centroids.k)?;
    let pred_dir = cfg.pred_dir();
    create_dir(&pred_dir)?;
    for (entry, code) in entries.iter().zip(&codes) {
        let grid = assign_clusters(code, &centroids)?;
        let (out_h, out_w) = match &entry.mask {
            Some(mask) => raster_dims(mask)?,
            None => (code.hp() * cfg.infer.patch_size, code.wp() * cfg.infer.patch_size),
        };
        let mask = upsample_mask(&grid, out_h, out_w)?;
        write_indexed_png(&mask, &colors, &pred_dir.join(format!("{}.png", entry.stem())), &stamp.png_text())?;
    }
    let out = cfg.output_dir();
    create_dir(&out)?;
    write_stamped_json(
        &out.join("centroids.json"),
        &stamp,
        &CentroidsFile {
            k: centroids.k,
            d: centroids.d,
            vectors: centroids.vectors.clone(),
        },
    )?;
    Ok(format!(
        "infer: {} masks from split {split:?} with k={} -> {}\n",
        entries.len(),
        centroids.k,
        pred_dir.display()
    ))
}
