//! Run configuration: one TOML file, strictly validated.
//!
//! ```toml
//! output_dir = "runs/desk"
//!
//! [model]          # any ModelConfig field; omitted fields take the toy preset
//! mode = "full"
//!
//! [train]          # any TrainConfig field
//! epochs = 50
//!
//! [data]           # either a dataset file ...
//! path = "runs/data/dataset.nrld"
//! # ... or generation settings; geometry defaults to the model's
//! train_samples = 512
//!
//! [prompts]
//! modality = "xray"
//! class_names = ["normal", "pneumonia"]
//! ```

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use nearl_core::data::DatasetSpec;
use nearl_core::prompt::PromptSpec;
use nearl_core::train::TrainConfig;
use nearl_core::ModelConfig;

use crate::ConfigError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Existing `NRLD1` file; when absent the dataset is generated in memory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_patches: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch_dim: Option<usize>,
    pub signal_patch_fraction: f64,
    pub noise_std: f64,
    pub class_separation: f64,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DatasetSpec::default();
        DataSection {
            path: None,
            train_samples: d.train_samples,
            val_samples: d.val_samples,
            test_samples: d.test_samples,
            num_classes: None,
            num_patches: None,
            patch_dim: None,
            signal_patch_fraction: d.signal_patch_fraction,
            noise_std: d.noise_std,
            class_separation: d.class_separation,
            seed: d.seed,
        }
    }
}

impl DataSection {
    pub fn spec(&self, model: &ModelConfig) -> DatasetSpec {
        DatasetSpec {
            num_classes: self.num_classes.unwrap_or(model.num_classes),
            train_samples: self.train_samples,
            val_samples: self.val_samples,
            test_samples: self.test_samples,
            num_patches: self.num_patches.unwrap_or(model.num_patches),
            patch_dim: self.patch_dim.unwrap_or(model.patch_dim),
            signal_patch_fraction: self.signal_patch_fraction,
            noise_std: self.noise_std,
            class_separation: self.class_separation,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSection,
    pub prompts: PromptSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("nearl-out"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataSection::default(),
            prompts: PromptSpec::default(),
        }
    }
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).with_context(|| format!("cannot resolve path {}", path.display()))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ConfigError(e.message().trim().to_string()).into())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Validates every section and makes every path absolute. Relative
    /// paths are taken relative to `base` (the config file's directory).
    pub fn resolve(mut self, base: &Path) -> Result<Self> {
        let join = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        self.output_dir = absolute(&join(&self.output_dir))?;
        if let Some(p) = &self.data.path {
            self.data.path = Some(absolute(&join(p))?);
        }
        self.model.validate()?;
        self.train.validate()?;
        self.data.spec(&self.model).validate()?;
        if self.prompts.class_names.len() != self.model.num_classes {
            return Err(ConfigError(format!(
                "prompts list {} class names but model.num_classes = {}",
                self.prompts.class_names.len(),
                self.model.num_classes
            ))
            .into());
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
