//! Experiment configuration (TOML on disk) and content digests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackSpec, Sanitize};
use crate::classifier::{PresetName, TrainConfig};
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::guard::{GuardTrainConfig, VaePresetName};
use crate::rf_sim::DatasetConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparisons {
    /// Train a watermark-free twin with the same seed.
    pub no_watermark: bool,
    /// Train a twin with the trigger but without adversarial rows.
    pub plain_trigger: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSection {
    pub preset: PresetName,
    pub key_seed: u64,
    pub train: TrainConfig,
    pub comparisons: Comparisons,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifySection {
    pub probe_count: usize,
    /// Filter chain for sanitized-mode trigger checks.
    pub sanitize: Vec<Sanitize>,
    /// Random keys checked against the trained model (false-claim rate).
    pub wrong_keys: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuardSection {
    pub preset: VaePresetName,
    pub alpha: f64,
    pub target_fpr: f64,
    pub train: GuardTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Artifacts and caches go here. Not part of the digest.
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub frontend: FrontendConfig,
    pub classifier: ClassifierSection,
    pub verify: VerifySection,
    pub guard: GuardSection,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
}

impl ExperimentConfig {
    /// The desk setup with mini_resnet and the robust guard. Attacks follow
    /// the standard list.
    pub fn desk(output_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            seed: 7,
            output_dir: output_dir.into(),
            dataset: DatasetConfig::desk(),
            frontend: FrontendConfig::default(),
            classifier: ClassifierSection {
                preset: PresetName::MiniResnet,
                key_seed: 1337,
                train: TrainConfig::default(),
                comparisons: Comparisons { no_watermark: true, plain_trigger: true },
            },
            verify: VerifySection {
                probe_count: 200,
                sanitize: vec![Sanitize::GaussianBlur { sigma: 1.0 }, Sanitize::Noise { sigma: 0.05 }],
                wrong_keys: 100,
            },
            guard: GuardSection { preset: VaePresetName::Robust, alpha: 0.5, target_fpr: 0.05, train: GuardTrainConfig::robust() },
            attacks: vec![
                AttackSpec::Prune { rho: 0.3 },
                AttackSpec::Quantize { bits: 8 },
                AttackSpec::Finetune { epochs: 3, lr: 1e-4 },
                AttackSpec::Sanitize { steps: vec![Sanitize::GaussianBlur { sigma: 1.0 }, Sanitize::Noise { sigma: 0.05 }] },
                AttackSpec::Evade { epsilon: 0.3, steps: 10, max_inputs: 200 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.frontend.validate()?;
        self.classifier.train.hyper.validate()?;
        self.classifier.train.wm.validate()?;
        self.guard.train.validate()?;
        if !(0.0..=1.0).contains(&self.guard.alpha) || !(0.0..1.0).contains(&self.guard.target_fpr) {
            return Err(Error::InvalidConfig("guard alpha must lie in [0, 1] and target_fpr in [0, 1)".into()));
        }
        if self.verify.probe_count < crate::watermark::MIN_PROBES {
            return Err(Error::InvalidConfig(format!("probe_count must be ≥ {}", crate::watermark::MIN_PROBES)));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Digest of everything that affects results.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        digest_of(&c)
    }
}

/// SHA-256 (hex) of the JSON encoding of `value`.
pub fn digest_of<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config values serialize");
    hex(&Sha256::digest(&json))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_digest() {
        let cfg = ExperimentConfig::desk("runs/a");
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        let moved = ExperimentConfig { output_dir: "elsewhere".into(), ..cfg.clone() };
        assert_eq!(moved.digest(), cfg.digest());
        let reseeded = ExperimentConfig { seed: 8, ..cfg.clone() };
        assert_ne!(reseeded.digest(), cfg.digest());
        assert_eq!(cfg.digest().len(), 64);
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = ExperimentConfig::desk("x");
        cfg.verify.probe_count = 4;
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_toml("seed = 1").is_err());
    }
}
