pub mod eval;
pub mod infer;
pub mod synth;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use corrseg_core::dataset::{build_split, ManifestEntry, SplitManifest};
use corrseg_core::feature_io::read_feature_map;
use corrseg_core::fsutil::write_atomic;
use corrseg_core::FeatureMap;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::RunConfig;
use crate::error::CliError;

/// Seed and digest stamped into every JSON artifact.
#[derive(Debug, Clone, Serialize)]
pub struct RunStamp {
    pub seed: u64,
    pub config_digest: String,
}

impl RunStamp {
    pub fn of(cfg: &RunConfig) -> Self {
        Self {
            seed: cfg.seed,
            config_digest: cfg.digest(),
        }
    }

    pub fn png_text(&self) -> [(&'static str, String); 2] {
        [
            ("seed", self.seed.to_string()),
            ("config_digest", self.config_digest.clone()),
        ]
    }
}

pub(crate) fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| {
        CliError::new(crate::error::exit::IO, format!("cannot create {}: {e}", path.display()))
    })
}

/// Serializes `body` with `seed` and `config_digest` as the leading keys.
pub(crate) fn write_stamped_json<T: Serialize>(
    path: &Path,
    stamp: &RunStamp,
    body: &T,
) -> Result<(), CliError> {
    let mut out = Map::new();
    out.insert("seed".into(), stamp.seed.into());
    out.insert("config_digest".into(), stamp.config_digest.clone().into());
    match serde_json::to_value(body).expect("artifact serializes") {
        Value::Object(fields) => out.extend(fields),
        other => {
            out.insert("value".into(), other);
        }
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(out)).expect("json serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(Into::into)
}

pub(crate) fn load_manifest(cfg: &RunConfig) -> Result<SplitManifest, CliError> {
    let path = cfg.manifest_path();
    if !path.exists() {
        return Err(CliError::config(format!("manifest {} does not exist", path.display())));
    }
    Ok(build_split(&path)?)
}

pub(crate) fn split_entries<'m>(
    manifest: &'m SplitManifest,
    name: &str,
) -> Result<&'m [ManifestEntry], CliError> {
    manifest
        .split(name)
        .ok_or_else(|| CliError::config(format!("manifest has no split named {name:?}")))
}

/// The feature file for an entry: the image itself when it is a `.fmap`,
/// otherwise `<feature_dir>/<stem>.fmap`.
pub(crate) fn feature_path(cfg: &RunConfig, entry: &ManifestEntry) -> PathBuf {
    if entry.is_feature_file() {
        entry.image.clone()
    } else {
        cfg.feature_dir().join(format!("{}.fmap", entry.stem()))
    }
}

/// Loads the feature maps of a split, requiring one channel count throughout.
pub(crate) fn load_features(
    cfg: &RunConfig,
    entries: &[ManifestEntry],
) -> Result<Vec<FeatureMap>, CliError> {
    let mut maps: Vec<FeatureMap> = Vec::with_capacity(entries.len());
    for entry in entries {
        let path = feature_path(cfg, entry);
        let fm = read_feature_map(&path)?;
        if let Some(first) = maps.first() {
            if first.channels() != fm.channels() {
                return Err(CliError::shape(format!(
                    "{} has {} channels, earlier features have {}",
                    path.display(),
                    fm.channels(),
                    first.channels()
                )));
            }
        }
        maps.push(fm);
    }
    Ok(maps)
}
