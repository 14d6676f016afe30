//! One serializable record for a whole run: data, model, training, output
//! directory and the global seed.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Seeds data generation, model initialization and the batch stream.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            data: SyntheticConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Default configuration with `seed` propagated everywhere.
    pub fn with_seed(seed: u64) -> Self {
        let mut cfg = Self::default();
        cfg.set_seed(seed);
        cfg
    }

    /// Sets the global seed and copies it into the data and training
    /// sections.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
    }

    /// Seed of the model initialization.
    pub fn model_seed(&self) -> u64 {
        self.seed
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.data.seed != self.seed || self.train.seed != self.seed {
            return Err(Error::invalid(format!(
                "data seed {} and train seed {} must equal the global seed {}",
                self.data.seed, self.train.seed, self.seed
            )));
        }
        self.check_data_shape(self.data.clip_shape, self.data.num_classes)
    }

    /// Checks that clips of `clip_shape` with `num_classes` labels fit the
    /// model.
    pub fn check_data_shape(&self, clip_shape: [usize; 4], num_classes: usize) -> Result<()> {
        if clip_shape != self.model.input_shape {
            return Err(Error::shape(format!(
                "clips {:?} do not match model input {:?}",
                clip_shape, self.model.input_shape
            )));
        }
        if num_classes != self.model.num_actions {
            return Err(Error::shape(format!(
                "{num_classes} action classes but the model predicts {}",
                self.model.num_actions
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form, with the
    /// output directory excluded.
    pub fn config_hash(&self) -> String {
        let canonical = Self {
            out_dir: None,
            ..self.clone()
        };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }
}
