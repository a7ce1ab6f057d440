//! TOML run configuration covering the network, training and phantom generation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compnet::NetConfig;
use crate::error::{Error, Result};
use crate::synth::PhantomSpec;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub num_cases: usize,
    pub base_seed: u64,
    /// Built-in schema name used when generating phantoms.
    pub schema: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_cases: 200,
            base_seed: 0,
            schema: "mms2".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub phantom: PhantomSpec,
    pub data: DataConfig,
}

impl Default for RunConfig {
    /// The desk-scale preset.
    fn default() -> Self {
        Self {
            net: NetConfig::desk(),
            train: TrainConfig::desk(),
            phantom: PhantomSpec::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Fields missing from `text` keep their desk-preset values, section by section.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config_err = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let user: toml::Table = toml::from_str(text).map_err(|e| config_err(&e))?;
        let mut merged = toml::Table::try_from(Self::default()).map_err(|e| config_err(&e))?;
        merge(&mut merged, user);
        let cfg: Self = merged.try_into().map_err(|e| config_err(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        self.phantom.validate()?;
        if self.data.num_cases < 3 {
            return Err(Error::Config("at least three cases are needed for train, val and test".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml_str("[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.net, NetConfig::desk());
        assert_eq!(cfg.train.lr, TrainConfig::desk().lr);
        let cfg = RunConfig::from_toml_str("[net]\nuse_cmfi = false\n").unwrap();
        assert_eq!(cfg.net.stage_channels, NetConfig::desk().stage_channels);
        assert_eq!(cfg.net.fusion_residual, NetConfig::desk().fusion_residual);
        assert!(RunConfig::from_toml_str("[train]\nlr = -1.0\n").is_err());
        assert!(RunConfig::from_toml_str("[train]\nunknown = 1\n").is_ok());
    }
}
