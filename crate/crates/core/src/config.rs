//! TOML run configuration.
//!
//! Top-level keys are the [`TrainConfig`] fields; `[encoder]` and `[head]`
//! hold the model settings and `[data]` the generator settings. Every key is
//! optional and unknown keys are rejected:
//!
//! ```toml
//! learning_rate = 0.0005
//! epochs = 30
//! temperature = 10.0
//! precision = "f32"
//!
//! [encoder]
//! patch_size = 4
//! stage_dims = [16, 32]
//! stage_depths = [2, 2]
//!
//! [data]
//! classes = 20
//! seen = 15
//! ```

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Name of the configuration copy written next to a checkpoint.
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: GenConfig,
}

#[derive(Serialize)]
struct Out<'a> {
    #[serde(flatten)]
    train: &'a TrainConfig,
    data: &'a GenConfig,
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::format(path, e.to_string()))?;
        let data = match table.remove("data") {
            Some(v) => v
                .try_into::<GenConfig>()
                .map_err(|e| Error::format(path, format!("[data]: {e}")))?,
            None => GenConfig::default(),
        };
        let train = toml::Value::Table(table)
            .try_into::<TrainConfig>()
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(RunConfig { train, data })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&Out {
            train: &self.train,
            data: &self.data,
        })
        .expect("configuration is serialisable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Precision;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::parse("", Path::new("c")).unwrap(), RunConfig::default());
    }

    #[test]
    fn roundtrip() {
        let mut c = RunConfig::default();
        c.train.temperature = 10.0;
        c.train.precision = Precision::F64;
        c.train.encoder.stage_dims = vec![8, 16];
        c.train.head.mlp_hidden_layers = 2;
        c.data.noise = 0.05;
        let back = RunConfig::parse(&c.to_toml(), Path::new("c")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_and_unknown_keys() {
        let c = RunConfig::parse(
            "epochs = 3\n[encoder]\nstate_dim = 4\n[data]\nseed = 9\n",
            Path::new("c"),
        )
        .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.encoder.state_dim, 4);
        assert_eq!(c.train.encoder.patch_size, 4);
        assert_eq!(c.data.seed, 9);
        assert!(RunConfig::parse("epoch = 3\n", Path::new("c")).is_err());
        assert!(RunConfig::parse("[encoder]\nwidth = 3\n", Path::new("c")).is_err());
    }
}
