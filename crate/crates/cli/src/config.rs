use std::fmt;
use std::path::{Path, PathBuf};

use erg_core::data::DatasetSpec;
use erg_core::guidance::{GuidanceSpec, Method};
use erg_core::metrics::MetricsConfig;
use erg_core::model::{DenoiserConfig, EncoderConfig};
use erg_core::sampler::SamplerConfig;
use erg_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Failure of a CLI command, classified for the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable or invalid configuration / arguments (exit code 2).
    Config(String),
    /// Failure inside the numeric core.
    Core(erg_core::Error),
}

impl CliError {
    /// 2 for configuration errors, 3 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use erg_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                E::Diverged { .. } | E::NonFiniteLoss { .. } | E::NonFinite { .. } | E::Singular => 3,
                E::InvalidArgument { .. } | E::ShapeMismatch { .. } | E::Checkpoint(_) | E::Json(_) => 2,
                _ => 1,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<erg_core::Error> for CliError {
    fn from(e: erg_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Everything needed to reproduce a run. `seed` drives both training and
/// sampling; the per-stage seeds are overwritten from it on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub denoiser: DenoiserConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub guidance: GuidanceSpec,
    pub metrics: MetricsConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let denoiser = DenoiserConfig::default();
        let encoder = EncoderConfig::default();
        let guidance = GuidanceSpec::defaults(Method::Erg, 3.0, denoiser.depth, encoder.depth);
        RunConfig {
            dataset: DatasetSpec::default(),
            denoiser,
            encoder,
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            guidance,
            metrics: MetricsConfig::default(),
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Parses a config file; errors name the file, the offending field and
    /// its line/column.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => config_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        Ok(cfg.normalized())
    }

    /// Loads `path` if given, otherwise the defaults.
    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default().normalized()),
        }
    }

    pub fn normalized(mut self) -> Self {
        self.train.seed = self.seed;
        self.sampler.seed = self.seed;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes `config.json` into `dir`.
    pub fn save(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), self.to_json())?;
        Ok(())
    }
}

/// Worker cap from `ERG_THREADS`, if set.
pub fn worker_cap(requested: usize) -> usize {
    let cap = std::env::var("ERG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0);
    let n = requested.max(1);
    cap.map_or(n, |c| n.min(c))
}
