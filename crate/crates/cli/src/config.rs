//! Config files of each command and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use sjepa::data::SynthConfig;
use sjepa::finetune::{DownstreamSpec, Strategy};
use sjepa::harness::GridConfig;
use sjepa::nets::{ModelConfig, Placement};
use sjepa::optim::AdamConfig;
use sjepa::pretrain::PretrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFile {
    #[serde(default)]
    pub seed: u64,
    pub synth: SynthConfig,
}

fn default_interval() -> f64 {
    sjepa::data::DEFAULT_INTERVAL_S
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainFile {
    #[serde(default)]
    pub seed: u64,
    /// Corpus directory written by `synth`.
    pub corpus: PathBuf,
    /// Spacing of example starts within each recording.
    #[serde(default = "default_interval")]
    pub interval_s: f64,
    /// Number of trailing subjects used for validation.
    #[serde(default = "one")]
    pub validation_subjects: usize,
    pub pretrain: PretrainConfig,
}

/// Fine-tuning settings shared by all pipelines.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tuning {
    pub virtual_channels: usize,
    pub warmup_epochs: usize,
    pub patience: usize,
    pub lr_pretrained: f64,
    pub lr_new: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub adam: AdamConfig,
}

impl Default for Tuning {
    fn default() -> Self {
        let s = DownstreamSpec::new(Placement::Contextual, Strategy::Full, 2);
        Self {
            virtual_channels: s.virtual_channels,
            warmup_epochs: s.warmup_epochs,
            patience: s.patience,
            lr_pretrained: s.lr_pretrained,
            lr_new: s.lr_new,
            batch_size: s.batch_size,
            max_epochs: s.max_epochs,
            adam: s.adam,
        }
    }
}

impl Tuning {
    /// Template spec; the class count of 0 is replaced by the data's.
    pub fn spec(&self, architecture: Placement, strategy: Strategy) -> DownstreamSpec {
        DownstreamSpec {
            virtual_channels: self.virtual_channels,
            warmup_epochs: self.warmup_epochs,
            patience: self.patience,
            lr_pretrained: self.lr_pretrained,
            lr_new: self.lr_new,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            adam: self.adam,
            ..DownstreamSpec::new(architecture, strategy, 0)
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldSettings {
    pub n_folds: usize,
    pub validation_fraction: f64,
}

impl Default for FoldSettings {
    fn default() -> Self {
        let s = sjepa::data::SplitConfig::default();
        Self { n_folds: s.n_folds, validation_fraction: s.validation_fraction }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneFile {
    #[serde(default)]
    pub seed: u64,
    pub corpus: PathBuf,
    /// Dataset label in the results; defaults to the corpus directory name.
    #[serde(default)]
    pub dataset: Option<String>,
    /// Pre-trained checkpoint; absent for the no-pre-training baseline.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub architecture: Placement,
    pub strategy: Strategy,
    #[serde(default)]
    pub downstream: Tuning,
    /// Backbone of the baseline; ignored when a checkpoint is given.
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub folds: FoldSettings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub name: String,
    pub corpus: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub max_new_cells: Option<usize>,
    pub grid: GridConfig,
    pub datasets: Vec<DatasetEntry>,
    /// Checkpoint path per pre-training id, e.g. `"16s-40%" = "runs/a/best.ckpt"`.
    #[serde(default)]
    pub checkpoints: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub downstream: Tuning,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub folds: FoldSettings,
}

/// Written to `<out>/manifest.toml` before a command does any work. Passing
/// it back as `--config` repeats the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: String,
    pub seed: u64,
    pub output_dir: String,
    pub version: String,
    pub config: toml::Table,
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, config_path: &Path, seed: u64, out: &Path, config: &C) -> Result<Self, CliError> {
        let config = toml::Table::try_from(config).map_err(|e| CliError::Input(format!("cannot record config: {e}")))?;
        Ok(Self {
            command: command.into(),
            config_path: config_path.display().to_string(),
            seed,
            output_dir: out.display().to_string(),
            version: env!("CARGO_PKG_VERSION").into(),
            config,
        })
    }

    pub fn write(&self, out: &Path) -> Result<(), CliError> {
        fs::create_dir_all(out).map_err(|e| CliError::Input(format!("{}: {e}", out.display())))?;
        let text = toml::to_string(self).map_err(|e| CliError::Input(format!("cannot write manifest: {e}")))?;
        let path = out.join("manifest.toml");
        fs::write(&path, text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }
}

/// Parse a command's config file. A run manifest for the same command is
/// accepted in place of the original file.
pub fn load<C: DeserializeOwned>(path: &Path, command: &str) -> Result<C, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {}", path.display(), e.message())))?;
    if let (Some(toml::Value::String(cmd)), Some(toml::Value::Table(_))) = (table.get("command"), table.get("config")) {
        if cmd != command {
            return Err(CliError::Input(format!("{}: manifest of `{cmd}`, not `{command}`", path.display())));
        }
        let Some(toml::Value::Table(inner)) = table.remove("config") else { unreachable!() };
        table = inner;
    }
    table.try_into().map_err(|e: toml::de::Error| CliError::Input(format!("{}: {}", path.display(), e.message())))
}
