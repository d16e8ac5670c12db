//! Experiment configuration: a single JSON file drives dataset generation,
//! training, and reporting, so a run is reproducible from one artifact.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use neuron_dro::activations::ActivationSpec;
use neuron_dro::datagen::GeneratorConfig;
use neuron_dro::driver::AlgoSettings;

use crate::Failure;

/// Artifact formats a command may emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
    Svg,
}

/// One experiment: how to sample data, how to train on it, and where the
/// artifacts go.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub algo: AlgoSettings,
    /// Activation used for training; it also overrides the generator's, so
    /// one field decides both the planted signal and the fitted model.
    pub activation: ActivationSpec,
    /// Default output directory; the `--out` flag overrides it.
    pub output_dir: PathBuf,
    /// Must be nonempty. `report` emits its chart only when `svg` is listed.
    pub formats: Vec<OutputFormat>,
}

/// Read and validate a config file. All failures are configuration errors.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("invalid config {}: {e}", path.display())))?;
    if cfg.formats.is_empty() {
        return Err(Failure::Config(format!(
            "invalid config {}: formats must list at least one of csv, json, svg",
            path.display()
        )));
    }
    Ok(cfg)
}
