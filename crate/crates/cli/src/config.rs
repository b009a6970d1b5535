//! Run configuration: one JSON file shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use corrseg_core::seg_head::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Where `<stem>.fmap` files live when manifest images are rasters.
    pub feature_dir: Option<PathBuf>,
    /// Recorded for completeness; rasters are referenced through the manifest.
    pub image_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub palette: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub pred_dir: Option<PathBuf>,
    /// Previously saved centroids; when set, `infer` loads instead of fitting.
    pub centroids: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub hp: usize,
    pub wp: usize,
    pub k: usize,
    pub c: usize,
    pub noise_sigma: f64,
    /// Ground-truth masks are written at `hp·mask_scale × wp·mask_scale` pixels.
    pub mask_scale: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 5,
            hp: 32,
            wp: 32,
            k: 5,
            c: 16,
            noise_sigma: 0.1,
            mask_scale: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub d: usize,
    /// Defaults to `2·c` once the channel count is known.
    pub h_hidden: Option<usize>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { d: 16, h_hidden: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Defaults to the palette size.
    pub k: Option<usize>,
    pub max_iters: usize,
    pub restarts: usize,
    /// Allows `k` above the number of classes, scored by many-to-one matching.
    pub over_cluster: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: None,
            max_iters: 100,
            restarts: 4,
            over_cluster: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitNames {
    pub train: String,
    pub infer: String,
    pub eval: String,
}

impl Default for SplitNames {
    fn default() -> Self {
        Self {
            train: "pseudo_train".into(),
            infer: "test".into(),
            eval: "test".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Pixels per feature cell, used when an input has no mask to size against.
    pub patch_size: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { patch_size: 8 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Overrides the palette's ignore id when set.
    pub ignore_id: Option<u8>,
    /// Ignore nothing, even if the palette names an ignore id.
    pub no_ignore: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub head: HeadConfig,
    /// `train.seed` is replaced by the run seed.
    pub train: TrainConfig,
    pub cluster: ClusterConfig,
    pub splits: SplitNames,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

/// Everything except file locations; this is what the digest covers, so
/// moving a run to another directory keeps its identity.
#[derive(Serialize)]
pub struct Parameters<'a> {
    pub seed: u64,
    pub synth: &'a SynthConfig,
    pub head: &'a HeadConfig,
    pub train: &'a TrainConfig,
    pub cluster: &'a ClusterConfig,
    pub splits: &'a SplitNames,
    pub infer: &'a InferConfig,
    pub eval: &'a EvalConfig,
}

impl RunConfig {
    /// Reads a config, resolves relative paths against the file's directory
    /// and applies command-line overrides.
    pub fn load(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        if let Some(out) = out {
            cfg.paths.output_dir = Some(out.to_path_buf());
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.feature_dir,
            &mut p.image_dir,
            &mut p.manifest,
            &mut p.palette,
            &mut p.checkpoint,
            &mut p.output_dir,
            &mut p.pred_dir,
            &mut p.centroids,
        ] {
            if let Some(rel) = slot.as_ref().filter(|p| p.is_relative()) {
                *slot = Some(base.join(rel));
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        let s = &self.synth;
        if s.mask_scale == 0 || self.infer.patch_size == 0 {
            return Err(CliError::config("mask_scale and patch_size must be positive"));
        }
        if s.noise_sigma < 0.0 || !s.noise_sigma.is_finite() {
            return Err(CliError::config("noise_sigma must be finite and non-negative"));
        }
        if self.cluster.max_iters == 0 {
            return Err(CliError::config("cluster.max_iters must be positive"));
        }
        if self.cluster.k == Some(0) {
            return Err(CliError::config("cluster.k must be positive"));
        }
        Ok(())
    }

    pub fn parameters(&self) -> Parameters<'_> {
        Parameters {
            seed: self.seed,
            synth: &self.synth,
            head: &self.head,
            train: &self.train,
            cluster: &self.cluster,
            splits: &self.splits,
            infer: &self.infer,
            eval: &self.eval,
        }
    }

    /// SHA-256 of the canonical JSON of [`Parameters`], hex encoded.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(&self.parameters()).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    fn in_output(&self, slot: &Option<PathBuf>, name: &str) -> PathBuf {
        slot.clone().unwrap_or_else(|| self.output_dir().join(name))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.in_output(&self.paths.manifest, "manifest.json")
    }

    pub fn palette_path(&self) -> PathBuf {
        self.in_output(&self.paths.palette, "palette.json")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.in_output(&self.paths.checkpoint, "head.sghd")
    }

    pub fn pred_dir(&self) -> PathBuf {
        self.in_output(&self.paths.pred_dir, "preds")
    }

    pub fn feature_dir(&self) -> PathBuf {
        self.in_output(&self.paths.feature_dir, "features")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.synth.n_train, 200);
        assert_eq!(cfg.head.d, 16);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 3}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"lr": 3}}"#).is_err());
    }

    #[test]
    fn digest_ignores_paths_but_not_parameters() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths.output_dir = Some("elsewhere".into());
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"paths": {"output_dir": "out", "manifest": "/abs/m.json"}}"#).unwrap();
        let cfg = RunConfig::load(&path, Some(9), None).unwrap();
        assert_eq!(cfg.output_dir(), dir.path().join("out"));
        assert_eq!(cfg.manifest_path(), PathBuf::from("/abs/m.json"));
        assert_eq!(cfg.train.seed, 9);
    }
}
