use std::fs;
use std::path::{Path, PathBuf};

use cmkd::network::{ArchConfig, ArchName, LayerKind};
use cmkd::norm::NormKind;
use cmkd::synth::DatasetConfig;
use cmkd::trainer::TrainingConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

fn default_arch_name() -> ArchName {
    ArchName::DilatedMini
}

fn default_norm() -> NormKind {
    NormKind::Batch
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    #[serde(default = "default_arch_name")]
    pub name: ArchName,
    #[serde(default = "default_norm")]
    pub norm: NormKind,
    #[serde(default = "one")]
    pub input_channels: usize,
    /// Required for `custom`, ignored otherwise.
    #[serde(default)]
    pub layers: Option<Vec<LayerKind>>,
    #[serde(default)]
    pub private_prefix: Option<usize>,
    #[serde(default)]
    pub private_suffix: Option<usize>,
}

impl Default for ArchSection {
    fn default() -> Self {
        Self {
            name: default_arch_name(),
            norm: default_norm(),
            input_channels: 1,
            layers: None,
            private_prefix: None,
            private_suffix: None,
        }
    }
}

impl ArchSection {
    pub fn build(&self, classes: usize, training: &TrainingConfig) -> Result<ArchConfig, CliError> {
        let setting = training.setting;
        let mut arch = match self.name {
            ArchName::DilatedMini => ArchConfig::dilated_mini(classes, setting, self.norm),
            ArchName::UnetMini => ArchConfig::unet_mini(classes, setting, self.norm),
            ArchName::Custom => ArchConfig {
                name: ArchName::Custom,
                input_channels: self.input_channels,
                num_classes: classes,
                layers: self
                    .layers
                    .clone()
                    .ok_or_else(|| CliError::Config("custom architecture needs `layers`".into()))?,
                setting,
                private_prefix: 1,
                private_suffix: 1,
            },
        };
        if let Some(p) = self.private_prefix {
            arch.private_prefix = p;
        }
        if let Some(s) = self.private_suffix {
            arch.private_suffix = s;
        }
        Ok(arch)
    }
}

/// Experiment description; relative paths resolve against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of a generated dataset.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Generator settings for `gen-data`; the desk default when absent.
    #[serde(default)]
    pub data: Option<DatasetConfig>,
    #[serde(default)]
    pub arch: ArchSection,
    #[serde(default)]
    pub training: TrainingConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            fs::read_to_string(path).map_err(|_| CliError::MissingFile(path.to_path_buf()))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(d) = &cfg.dataset {
            if d.is_relative() {
                cfg.dataset = Some(base.join(d));
            }
        }
        cfg.training
            .validate()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(d) = &cfg.data {
            d.validate()
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        }
        Ok(cfg)
    }

    /// Dataset root from the flag or the config, made absolute when it exists.
    pub fn dataset_root(&self, flag: Option<&Path>) -> Result<PathBuf, CliError> {
        let root = flag
            .map(Path::to_path_buf)
            .or_else(|| self.dataset.clone())
            .ok_or_else(|| CliError::Config("no dataset path in config or --dataset".into()))?;
        Ok(fs::canonicalize(&root).unwrap_or(root))
    }
}
