//! TOML experiment configuration.
//!
//! ```toml
//! [data]
//! synthetic = { classes = 8, samples_per_class = 60, visual_dim = 32,
//!               audio_dim = 32, visual_noise = 0.6, audio_noise = 3.0,
//!               correlation = 1.0, seed = 0 }
//! # or: features = "features.txt"   (relative to the config file)
//!
//! [model]   # encoders::ModelConfig
//! [fusion]  # fusion::FusionConfig
//! [train]   # trainer::TrainConfig
//! ```
//!
//! Every section except `[data]` may be omitted. `MCIL_SEED`, when set,
//! replaces `train.seed`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::scenario::{generate_synthetic, load_precomputed, Dataset, SyntheticConfig};
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "MCIL_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative feature path is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(f) = &cfg.data.features {
            if f.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.data.features = Some(base.join(f));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.synthetic, &self.data.features) {
            (Some(s), None) => s.validate()?,
            (None, Some(_)) => {}
            _ => return Err(Error::Config("[data] needs exactly one of `synthetic` or `features`".into())),
        }
        self.model.validate()?;
        self.fusion.validate()?;
        self.train.validate()
    }

    /// Applies `MCIL_SEED` from the environment.
    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match (&self.data.synthetic, &self.data.features) {
            (Some(s), None) => generate_synthetic(s),
            (None, Some(p)) => load_precomputed(p),
            _ => Err(Error::Config("[data] needs exactly one of `synthetic` or `features`".into())),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Method;

    const MINIMAL: &str = "[data]\nsynthetic = { classes = 4, samples_per_class = 10, visual_dim = 6, audio_dim = 5, visual_noise = 0.1, audio_noise = 0.5, correlation = 1.0 }\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.fusion.threshold, 0.8);
        assert_eq!(cfg.train.prompts, 35);
        assert_eq!(cfg.train.alpha, 0.7);
        assert_eq!(cfg.load_dataset().unwrap().num_classes(), 4);
    }

    #[test]
    fn sections_and_round_trip() {
        let text = format!("{MINIMAL}[train]\nmethod = \"naive_finetune\"\nepochs = 3\n[fusion]\nmode = \"concat\"\n");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.train.method, Method::NaiveFinetune);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml("[data]\n").is_err());
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}[train]\nalpha = 1.5\n")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}[train]\nbogus = 1\n")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}[fusion]\nthreshold = 2.0\n")).is_err());
    }

    #[test]
    fn seed_override() {
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.apply_seed_override(Some("42")).unwrap();
        assert_eq!(cfg.train.seed, 42);
        cfg.apply_seed_override(None).unwrap();
        assert_eq!(cfg.train.seed, 42);
        assert!(cfg.apply_seed_override(Some("x")).is_err());
    }

    #[test]
    fn relative_feature_paths_follow_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("exp.toml");
        fs::write(&cfg_path, "[data]\nfeatures = \"f.txt\"\n").unwrap();
        let cfg = ExperimentConfig::load(&cfg_path).unwrap();
        assert_eq!(cfg.data.features.unwrap(), dir.path().join("f.txt"));
    }
}
