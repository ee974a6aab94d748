//! Run configuration: built-in defaults, then the `--config` file, then
//! command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use visfit_core::fitter::FitConfig;
use visfit_core::synth::SyntheticProblemSpec;

use crate::CliError;

/// Contents of a `--config` file. Every field is optional. Relative paths
/// are taken relative to the file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: Option<PathBuf>,
    pub prior: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub count: Option<usize>,
    #[serde(default)]
    pub fit: Option<serde_json::Value>,
    #[serde(default)]
    pub synth: Option<serde_json::Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        require_file(path)?;
        let mut cfg: ConfigFile = visfit_core::io::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.model, &mut cfg.prior, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Fit settings from the file over the defaults.
    pub fn fit_config(&self) -> Result<FitConfig, CliError> {
        match &self.fit {
            None => Ok(FitConfig::default()),
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| CliError::invalid(format!("config field `fit`: {e}"))),
        }
    }

    pub fn synth_spec(&self) -> Result<SyntheticProblemSpec, CliError> {
        match &self.synth {
            None => Ok(SyntheticProblemSpec::default()),
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| CliError::invalid(format!("config field `synth`: {e}"))),
        }
    }
}

/// First of flag, file value; missing is an error naming the option.
pub fn pick_path(flag: Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| file.clone())
        .ok_or_else(|| CliError::invalid(format!("--{name} is required (flag or config file)")))
}

pub fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::new("missing_path", 2, format!("file not found: `{}`", path.display())))
    }
}

/// Values actually used by a run, written next to its outputs.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    pub command: &'static str,
    pub inputs: BTreeMap<&'static str, Vec<PathBuf>>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub jobs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SyntheticProblemSpec>,
}
