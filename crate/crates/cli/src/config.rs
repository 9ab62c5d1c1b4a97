//! Run configuration: TOML file with one section per module, then the
//! `SOG_SEED` environment variable, then command-line flags.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sog_core::dataset::GenConfig;
use sog_core::training::TrainConfig;
use sog_core::ModelConfig;

use crate::error::CliError;

pub const SEED_ENV: &str = "SOG_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::User(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text).map_err(|e| CliError::User(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed: u64 = v.trim().parse().map_err(|_| CliError::User(format!("{SEED_ENV}='{v}' is not an integer")))?;
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::User(format!("cannot serialize config: {e}")))
    }

    /// Write the resolved configuration as `config.toml` in `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }
}
