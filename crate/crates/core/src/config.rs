//! Declarative experiment configuration: one TOML document with nested
//! sections mirroring the module boundaries, round-tripping losslessly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::AdaptConfig;
use crate::daca::AugmentConfig;
use crate::error::{Error, Result};
use crate::toy::{DomainShift, LossWeights, SceneSpec, ToyDetectorConfig};

/// Dataset split sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source_train: usize,
    pub source_eval: usize,
    pub target_train: usize,
    pub target_eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source_train: 400,
            source_eval: 100,
            target_train: 500,
            target_eval: 60,
        }
    }
}

/// Detector architecture knobs (input size and class count come from the
/// scene section, so they cannot drift apart).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub channels: [usize; 4],
    pub conf_floor: f64,
    pub nms_iou: f64,
    pub loss_weights: LossWeights,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let d = ToyDetectorConfig::default();
        DetectorSection {
            channels: d.channels,
            conf_floor: d.conf_floor,
            nms_iou: d.nms_iou,
            loss_weights: d.loss_weights,
        }
    }
}

/// Supervised pretraining schedule (optimizer settings shared with
/// adaptation by default).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            learning_rate: 1e-3,
            momentum: 0.9,
        }
    }
}

/// Run-level knobs: seeding, output location, probe cadence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Iterations between mAP probes during adaptation (0 disables).
    pub eval_every: usize,
    /// Seeds aggregated by the ablation harness.
    pub ablation_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            eval_every: 5,
            ablation_seeds: vec![0, 1, 2],
        }
    }
}

/// The whole experiment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scene: SceneSpec,
    pub shift: DomainShift,
    pub data: DataConfig,
    pub detector: DetectorSection,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub augment: AugmentConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.shift.validate()?;
        self.adapt.validate()?;
        self.augment.validate()?;
        self.detector_config().validate()?;
        let bad = |key: &str, reason: &str| {
            Err(Error::InvalidConfig {
                key: key.to_string(),
                reason: reason.to_string(),
            })
        };
        if self.data.source_train == 0 || self.data.target_train == 0 {
            return bad("data", "train splits must be non-empty");
        }
        if self.data.source_eval == 0 || self.data.target_eval == 0 {
            return bad("data", "eval splits must be non-empty");
        }
        if self.pretrain.learning_rate <= 0.0 {
            return bad("pretrain.learning_rate", "must be positive");
        }
        if !(0.0..1.0).contains(&self.pretrain.momentum) {
            return bad("pretrain.momentum", "must lie in [0, 1)");
        }
        Ok(())
    }

    /// The toy detector config implied by the scene + detector sections.
    pub fn detector_config(&self) -> ToyDetectorConfig {
        ToyDetectorConfig {
            input_size: self.scene.image_size,
            channels: self.detector.channels,
            num_classes: self.scene.num_classes,
            conf_floor: self.detector.conf_floor,
            nms_iou: self.detector.nms_iou,
            loss_weights: self.detector.loss_weights,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::ConfigParse {
            path: PathBuf::from("<memory>"),
            message: e.to_string(),
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::ConfigParse {
            path: PathBuf::from("<memory>"),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::ConfigParse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::experiments::write_atomic(path, self.to_toml()?.as_bytes())
    }

    /// Hex SHA-256 of the canonical TOML form; stored in checkpoints for
    /// provenance.
    pub fn hash(&self) -> Result<String> {
        let canonical = self.to_toml()?;
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        Ok(hex_string(&hasher.finalize()))
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn modified_config_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.adapt.alpha = 0.95;
        cfg.adapt.selection_confidence = 0.7;
        cfg.scene.image_size = 64;
        cfg.run.ablation_seeds = vec![5, 6];
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash().unwrap(), back.hash().unwrap());
    }

    #[test]
    fn unknown_key_is_diagnosed() {
        let text = "[adapt]\nalpa = 0.9\n";
        let err = ExperimentConfig::from_toml(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("alpa"), "diagnostic should name the key: {msg}");
    }

    #[test]
    fn invalid_values_name_their_key_path() {
        let mut cfg = ExperimentConfig::default();
        cfg.adapt.alpha = 0.0;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("adapt.alpha"));

        let mut cfg = ExperimentConfig::default();
        cfg.shift.severity = 1.5;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("shift.severity"));
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.run.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn detector_config_follows_scene() {
        let mut cfg = ExperimentConfig::default();
        cfg.scene.image_size = 64;
        cfg.scene.num_classes = 5;
        let dc = cfg.detector_config();
        assert_eq!(dc.input_size, 64);
        assert_eq!(dc.num_classes, 5);
    }
}
