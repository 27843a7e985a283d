use std::fs;
use std::path::Path;

use fusionbench::datagen::{canonical_hash, GenConfig};
use fusionbench::evalstat::ConvergenceConfig;
use fusionbench::models::ModelConfig;
use fusionbench::trainer::TrainConfig;
use fusionbench::{Error, Result};
use serde::{Deserialize, Serialize};

/// The single experiment configuration. Every section and key is optional;
/// omitted keys take their defaults, unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Global seed: dataset seed for `gen`, first-run seed base for `eval-loop`.
    pub seed: u64,
    pub datagen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub convergence: ConvergenceConfig,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: Config = match path {
            None => Config::default(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.datagen.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.convergence.validate()
    }

    /// Hash of the whole configuration, seed included.
    pub fn hash(&self) -> String {
        canonical_hash(self)
    }
}
