use corrseg_core::seg_head::{init_head, train, write_checkpoint, EpochMetrics, TrainConfig};
use serde::Serialize;

use super::{load_features, load_manifest, split_entries, write_stamped_json, RunStamp};
use crate::config::{HeadConfig, RunConfig};
use crate::error::CliError;

#[derive(Debug, Serialize)]
struct TrainLog<'a> {
    split: &'a str,
    n_images: usize,
    c: usize,
    d: usize,
    h_hidden: usize,
    head: &'a HeadConfig,
    train: &'a TrainConfig,
    epochs: &'a [EpochMetrics],
    first_epoch_loss: Option<f64>,
    final_epoch_loss: Option<f64>,
}

/// Trains a head on the configured split and writes the checkpoint and log.
pub fn run(cfg: &RunConfig) -> Result<String, CliError> {
    let manifest = load_manifest(cfg)?;
    let split = cfg.splits.train.as_str();
    let entries = split_entries(&manifest, split)?;
    if entries.is_empty() {
        return Err(CliError::empty(format!("split {split:?} has no images")));
    }
    let features = load_features(cfg, entries)?;
    let c = features[0].channels();
    let d = cfg.head.d;
    let h_hidden = cfg.head.h_hidden.unwrap_or(2 * c);
    let params = init_head(c, d, h_hidden, cfg.seed)?;
    log::info!(
        "training on {} images from {split:?}: c={c} d={d} h_hidden={h_hidden}, {} epochs",
        features.len(),
        cfg.train.epochs
    );

    let (params, history) = train(&features, params, &cfg.train, |m| {
        log::info!("epoch {:>3}: mean loss {:.6} over {} batches", m.epoch, m.total, m.batches);
    })?;

    let checkpoint = cfg.checkpoint_path();
    if let Some(parent) = checkpoint.parent() {
        super::create_dir(parent)?;
    }
    write_checkpoint(&params, &checkpoint)?;
    let out = cfg.output_dir();
    super::create_dir(&out)?;
    let first = history.first().map(|m| m.total);
    let last = history.last().map(|m| m.total);
    write_stamped_json(
        &out.join("train_log.json"),
        &RunStamp::of(cfg),
        &TrainLog {
            split,
            n_images: features.len(),
            c,
            d,
            h_hidden,
            head: &cfg.head,
            train: &cfg.train,
            epochs: &history,
            first_epoch_loss: first,
            final_epoch_loss: last,
        },
    )?;

    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.6}"));
    Ok(format!(
        "train: {} epochs on {} images, loss {} -> {}; checkpoint {}\n",
        history.len(),
        features.len(),
        fmt(first),
        fmt(last),
        checkpoint.display()
    ))
}
