//! Experiment configuration: one TOML file per experiment. Every field has a
//! default and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augmentation::AugmentationPolicy;
use crate::data::{PreprocessOptions, SplitFractions, VolumeOptions};
use crate::error::{Error, Result};
use crate::evaluation::{Fusion, ProbeConfig, Subset};
use crate::model::BackboneConfig;
use crate::trainer::TrainConfig;

/// Environment variable that overrides `data.data_root`.
pub const DATA_ROOT_ENV: &str = "TRAJREP_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Generate a synthetic cohort instead of reading volumes.
    pub synthetic: bool,
    pub data_root: PathBuf,
    pub labels_path: PathBuf,
    pub cache_dir: PathBuf,
    pub recompute_ser: bool,
    pub volume: VolumeOptions,
    pub fractions: SplitFractions,
    pub split_seed: u64,
    pub workers: usize,
    pub synthetic_patients: usize,
    pub responder_fraction: f64,
    pub synthetic_image_size: usize,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: false,
            data_root: PathBuf::from("data"),
            labels_path: PathBuf::from("data/labels.csv"),
            cache_dir: PathBuf::from("cache"),
            recompute_ser: false,
            volume: VolumeOptions::default(),
            fractions: SplitFractions::default(),
            split_seed: 0,
            workers: 0,
            synthetic_patients: 200,
            responder_fraction: 0.33,
            synthetic_image_size: 64,
            synthetic_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn preprocess_options(&self) -> PreprocessOptions {
        PreprocessOptions {
            data_root: self.data_root.clone(),
            labels_path: self.labels_path.clone(),
            cache_dir: self.cache_dir.clone(),
            volume: self.volume.clone(),
            recompute_ser: self.recompute_ser,
            fractions: self.fractions,
            seed: self.split_seed,
            workers: self.workers,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub subsets: Vec<Subset>,
    pub runs: usize,
    pub fusion: Fusion,
    pub probe: ProbeConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            subsets: Subset::ALL.to_vec(),
            runs: 10,
            fusion: Fusion::Concat,
            probe: ProbeConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: BackboneConfig,
    pub train: TrainConfig,
    pub augmentation: AugmentationPolicy,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Desk-scale preset: synthetic 64 x 64 cohort, narrow backbone, 30 epochs.
    pub fn synthetic() -> Self {
        let mut c = Self::default();
        c.data.synthetic = true;
        c.data.cache_dir = PathBuf::from("cache/synthetic");
        c.model = BackboneConfig::synthetic();
        c.train.epochs = 30;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| e.at(path))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply_env(&mut self) {
        if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
            if !root.is_empty() {
                self.data.data_root = PathBuf::from(root);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augmentation.validate()?;
        if self.eval.runs == 0 || self.eval.subsets.is_empty() {
            return Err(Error::Config("eval needs at least one run and one subset".into()));
        }
        if self.data.synthetic {
            let s = self.data.synthetic_image_size;
            if self.model.image_size != (s, s) {
                return Err(Error::Config(format!(
                    "synthetic images are {s}x{s} but the model expects {:?}",
                    self.model.image_size
                )));
            }
            if self.model.input_channels != 3 {
                return Err(Error::Config("synthetic images have 3 channels".into()));
            }
        }
        Ok(())
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))[..12].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml("[train]\nlearnin_rate = 0.1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(ExperimentConfig::from_toml("[bogus]\n"), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ExperimentConfig::synthetic();
        c.train.align = false;
        c.eval.subsets = vec![Subset::T0];
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::synthetic();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 9;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn synthetic_size_must_match_model() {
        let mut c = ExperimentConfig::synthetic();
        c.data.synthetic_image_size = 32;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
