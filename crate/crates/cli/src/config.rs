use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smoothswap::adversary::DiscriminatorConfig;
use smoothswap::embedder::{EmbedderConfig, EmbedderTrainConfig};
use smoothswap::evaluate::EvalConfig;
use smoothswap::generator::GeneratorConfig;
use smoothswap::swap::{SwapLossWeights, TrainRunConfig};
use smoothswap::synth::DatasetConfig;
use smoothswap::{Error, Result};

pub const SCHEMA: &str = "smoothswap.experiment/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Contrastive,
    Ce,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Contrastive => "contrastive",
            Mode::Ce => "ce",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSection {
    pub mode: Mode,
    pub model: EmbedderConfig,
    pub train: EmbedderTrainConfig,
}

impl Default for EmbedderSection {
    fn default() -> Self {
        Self {
            mode: Mode::Contrastive,
            model: EmbedderConfig::default(),
            train: EmbedderTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwapSection {
    /// Which trained embedder conditions the generator.
    pub embedder: Option<Mode>,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub weights: SwapLossWeights,
    pub run: TrainRunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub embedder: EmbedderSection,
    pub swap: SwapSection,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA.to_string(),
            output_dir: PathBuf::from("runs"),
            dataset: DatasetConfig::default(),
            embedder: EmbedderSection::default(),
            swap: SwapSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        match value.get("schema").and_then(|s| s.as_str()) {
            Some(SCHEMA) => {}
            Some(other) => {
                return Err(Error::Config(format!(
                    "unsupported config schema `{other}`, expected `{SCHEMA}`"
                )))
            }
            None => return Err(Error::Config(format!("{} has no `schema` field", path.display()))),
        }
        serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.embedder.model.validate()?;
        self.swap.generator.validate()?;
        self.swap.discriminator.validate()?;
        self.swap.weights.validate()?;
        self.swap.run.validate()?;
        self.eval.validate()?;
        let res = self.dataset.resolution;
        if self.embedder.model.resolution != res
            || self.swap.generator.resolution != res
            || self.swap.discriminator.resolution != res
        {
            return Err(Error::Config(format!(
                "every network must run at the dataset resolution {res}"
            )));
        }
        if self.swap.generator.d_emb != self.embedder.model.d_emb {
            return Err(Error::Config("generator d_emb must match the embedder".into()));
        }
        Ok(())
    }
}

/// What a command wrote next to its outputs: the resolved config and how it was invoked.
#[derive(Debug, Serialize)]
pub struct RunRecord<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub config: &'a ExperimentConfig,
}

pub fn write_run_config(dir: &Path, command: &str, config: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let rec = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config,
    };
    Ok(std::fs::write(
        dir.join("run_config.json"),
        serde_json::to_vec_pretty(&rec)?,
    )?)
}

/// Output locations under the experiment root.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn embedder(&self, mode: Mode) -> PathBuf {
        self.root.join(format!("embedder-{}", mode.name()))
    }
    pub fn swap(&self, mode: Mode) -> PathBuf {
        self.root.join(format!("swap-{}", mode.name()))
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn interp(&self, mode: Mode) -> PathBuf {
        self.root.join(format!("interp-{}", mode.name()))
    }
}
