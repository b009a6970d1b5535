use corrseg_core::cluster_probe::{evaluate, greedy_match, hungarian_match, ConfusionMatrix, EvalReport};
use corrseg_core::dataset::load_mask;
use corrseg_core::LabelMask;
use serde::Serialize;

use super::infer::load_palette;
use super::{create_dir, load_manifest, split_entries, write_stamped_json, RunStamp};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Serialize)]
struct SampleScore {
    stem: String,
    /// `None` when every ground-truth pixel is ignored.
    pixel_accuracy: Option<f64>,
    n_pixels: u64,
}

#[derive(Debug, Serialize)]
struct EvalOutput<'a> {
    split: &'a str,
    n_samples: usize,
    ignore_id: Option<u8>,
    matching_method: &'static str,
    class_names: Vec<String>,
    #[serde(flatten)]
    report: &'a EvalReport,
    per_sample: Vec<SampleScore>,
    per_sample_mean_accuracy: Option<f64>,
}

/// Scores predicted masks against ground truth under one global matching.
pub fn run(cfg: &RunConfig) -> Result<String, CliError> {
    let palette = load_palette(cfg)?;
    let manifest = load_manifest(cfg)?;
    let split = cfg.splits.eval.as_str();
    let entries = split_entries(&manifest, split)?;
    let ignore_id = if cfg.eval.no_ignore { None } else { cfg.eval.ignore_id.or(palette.ignore_id) };
    let pred_palette = palette.extended(256)?;
    let pred_dir = cfg.pred_dir();

    let mut pairs: Vec<(String, LabelMask, LabelMask)> = Vec::new();
    for entry in entries {
        let (Some(mask_path), stem) = (&entry.mask, entry.stem()) else {
            continue;
        };
        let pred_path = pred_dir.join(format!("{stem}.png"));
        if !pred_path.exists() {
            log::warn!("no prediction for {stem}");
            continue;
        }
        let gt = load_mask(mask_path, &palette)?;
        let pred = load_mask(&pred_path, &pred_palette)?;
        if gt.dims() != pred.dims() {
            return Err(CliError::shape(format!(
                "{stem}: prediction is {:?}, ground truth {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        pairs.push((stem, pred, gt));
    }
    if pairs.is_empty() {
        return Err(CliError::empty(format!(
            "no prediction in {} pairs with a ground-truth mask of split {split:?}",
            pred_dir.display()
        )));
    }

    let k_gt = palette.len();
    let max_pred = pairs.iter().flat_map(|(_, p, _)| p.labels().iter().copied()).max().unwrap_or(0);
    let k_pred = (max_pred as usize + 1).max(k_gt);
    let mut pooled = ConfusionMatrix::new(k_pred, k_gt);
    let mut per_image = Vec::with_capacity(pairs.len());
    for (_, pred, gt) in &pairs {
        let mut conf = ConfusionMatrix::new(k_pred, k_gt);
        conf.accumulate(pred, gt, ignore_id)?;
        pooled.merge(&conf)?;
        per_image.push(conf);
    }
    let (method, matching) = if k_pred == k_gt {
        ("hungarian", hungarian_match(&pooled)?)
    } else {
        ("greedy", greedy_match(&pooled))
    };
    let matching: Vec<Option<usize>> = matching.into_iter().map(Some).collect();
    let report = evaluate(&pooled, &matching)?;

    let per_sample: Vec<SampleScore> = pairs
        .iter()
        .zip(&per_image)
        .map(|((stem, _, _), conf)| SampleScore {
            stem: stem.clone(),
            pixel_accuracy: evaluate(conf, &matching).ok().map(|r| r.pixel_accuracy),
            n_pixels: conf.total(),
        })
        .collect();
    let scored: Vec<f64> = per_sample.iter().filter_map(|s| s.pixel_accuracy).collect();
    let mean = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);

    let out = cfg.output_dir();
    create_dir(&out)?;
    write_stamped_json(
        &out.join("eval_report.json"),
        &RunStamp::of(cfg),
        &EvalOutput {
            split,
            n_samples: pairs.len(),
            ignore_id,
            matching_method: method,
            class_names: palette.classes.iter().map(|c| c.name.clone()).collect(),
            report: &report,
            per_sample,
            per_sample_mean_accuracy: mean,
        },
    )?;
    Ok(format!(
        "eval: pixel accuracy {:.4}, mIoU {:.4} over {} samples ({} pixels); per-sample mean accuracy {}\n",
        report.pixel_accuracy,
        report.miou,
        pairs.len(),
        report.n_pixels,
        mean.map_or("n/a".into(), |m| format!("{m:.4}"))
    ))
}
