//! Top-level configuration file: `[model]`, `[features]`, `[loss]` and
//! `[train]` tables in TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::FeatureConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.features.validate()?;
        if self.features.n_mels != self.model.f {
            return Err(Error::Config(format!(
                "features.n_mels ({}) must equal model.f ({})",
                self.features.n_mels, self.model.f
            )));
        }
        self.loss.validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
c = 4
f = 72
stages = [
  { sf = 1, mult = 1, n2d = 1, kind2d = "convnext2d", kind1d = "mha" },
  { sf = 2, mult = 2, n2d = 1, kind2d = "fwse_resnet2d", kind1d = "conv1d+mha" },
]
"#;

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = Config::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.model.embedding_dim, 192);
        assert_eq!(cfg.loss, LossConfig::default());
        assert_eq!(cfg.train.lr_max, 0.1);
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_offending_key() {
        let e = Config::from_toml(&MINIMAL.replace("kind1d = \"mha\"", "kind1d = \"lstm\"")).unwrap_err().to_string();
        assert!(e.contains("stages[0]"), "{e}");
        let e = Config::from_toml(&format!("{MINIMAL}\n[loss]\nkind = \"aam\"\nscle = 3.0\n")).unwrap_err().to_string();
        assert!(e.contains("scle"), "{e}");
        let e = Config::from_toml(&format!("{MINIMAL}\n[features]\nn_mels = 64\n")).unwrap_err().to_string();
        assert!(e.contains("n_mels"), "{e}");
    }
}
