//! JSON run configuration shared by the command-line tools.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SyntheticSpec};
use crate::decoder::{DecoderConfig, HeadKind};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use crate::xlstm::ForgetGate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    #[serde(default = "default_decoder")]
    pub decoder: HeadKind,
    #[serde(default = "default_channels")]
    pub decoder_channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_one")]
    pub num_heads: usize,
    #[serde(default = "default_block")]
    pub qkv_block_size: usize,
    #[serde(default)]
    pub forget_gate: ForgetGate,
    #[serde(default = "default_scales")]
    pub pool_scales: Vec<usize>,
    #[serde(default = "default_channels_in")]
    pub in_channels: usize,
}

fn default_patch() -> usize {
    16
}
fn default_expansion() -> usize {
    2
}
fn default_decoder() -> HeadKind {
    HeadKind::Upernet
}
fn default_channels() -> usize {
    512
}
fn default_one() -> usize {
    1
}
fn default_block() -> usize {
    4
}
fn default_scales() -> Vec<usize> {
    vec![1, 2, 3, 6]
}
fn default_channels_in() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum DataSection {
    /// An existing dataset: manifest file or its directory.
    Manifest(PathBuf),
    /// Generated into `<output>/data` before training.
    Synthetic(SyntheticSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub output: PathBuf,
    pub seed: u64,
}

impl ModelSection {
    /// Position embeddings are laid out for `train_size / patch`.
    pub fn to_model(&self, train_size: (usize, usize)) -> Result<ModelConfig> {
        let depths: [usize; 4] = self.depths.as_slice().try_into().map_err(|_| {
            Error::Config(format!(
                "depths must have exactly 4 entries, got {}",
                self.depths.len()
            ))
        })?;
        let p = self.patch_size;
        if p == 0 || !train_size.0.is_multiple_of(p) || !train_size.1.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "crop {}×{} is not a multiple of patch size {p}",
                train_size.0, train_size.1
            )));
        }
        let decoder = DecoderConfig {
            head: self.decoder,
            channels: self.decoder_channels,
            num_classes: self.num_classes,
            pool_scales: match self.decoder {
                HeadKind::Upernet => self.pool_scales.clone(),
                HeadKind::Fcn => Vec::new(),
            },
        };
        let model = ModelConfig {
            encoder: EncoderConfig {
                embed_dim: self.embed_dim,
                depths,
                patch_size: p,
                expansion: self.expansion,
                in_channels: self.in_channels,
                pos_grid: (train_size.0 / p, train_size.1 / p),
                num_heads: self.num_heads,
                qkv_block_size: self.qkv_block_size,
                forget_gate: self.forget_gate,
            },
            decoder,
        };
        model.validate()?;
        Ok(model)
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn model(&self) -> Result<ModelConfig> {
        self.model.to_model(self.train.crop)
    }

    pub fn data_dir(&self) -> PathBuf {
        match &self.data {
            DataSection::Manifest(p) => p.clone(),
            DataSection::Synthetic(_) => self.output.join("data"),
        }
    }

    /// Model, schedule and data checks that need no compute.
    pub fn validate(&self) -> Result<ModelConfig> {
        let model = self.model()?;
        self.train.validate()?;
        match &self.data {
            DataSection::Manifest(p) => {
                let ds = Dataset::open(p)?;
                self.check_classes(ds.meta.num_classes)?;
            }
            DataSection::Synthetic(spec) => {
                spec.validate()?;
                self.check_classes(spec.num_classes)?;
            }
        }
        Ok(model)
    }

    fn check_classes(&self, n: usize) -> Result<()> {
        if n != self.model.num_classes {
            return Err(Error::Config(format!(
                "model has {} classes but the dataset has {n}",
                self.model.num_classes
            )));
        }
        Ok(())
    }
}
