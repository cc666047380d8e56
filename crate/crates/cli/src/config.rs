//! Settings resolved from flags, then `DLGF_*` environment variables, then a
//! TOML config file.

use std::path::{Path, PathBuf};

use dlgf_core::compile::{Augmentation, WalkLimits};
use dlgf_core::hcn::Hyperparams;
use dlgf_core::teach::{HyperOverrides, ServiceConfig};
use serde::Deserialize;
use thiserror::Error;

pub const DEFAULT_DATA_DIR: &str = "dlgf-data";
pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_CONFIG: &str = "dlgf.toml";

/// Contents of the config file. Every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data_dir: Option<PathBuf>,
    pub port: Option<u16>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub hyper: HyperOverrides,
    #[serde(default)]
    pub compile: CompileConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompileConfig {
    pub max_cycle_visits: Option<usize>,
    pub max_walks: Option<usize>,
    pub synonyms_per_option: Option<usize>,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Read(String, std::io::Error),
    #[error("bad config {0}: {1}")]
    Parse(String, String),
    #[error("port {0} is outside 1024..=65535")]
    Port(u16),
}

/// Reads `path`, or the default file when `path` is `None` and it exists.
pub fn load_file(path: Option<&Path>) -> Result<FileConfig, ConfigError> {
    let (path, required) = match path {
        Some(p) => (p.to_path_buf(), true),
        None => (PathBuf::from(DEFAULT_CONFIG), false),
    };
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if !required && e.kind() == std::io::ErrorKind::NotFound => return Ok(FileConfig::default()),
        Err(e) => return Err(ConfigError::Read(path.display().to_string(), e)),
    };
    toml::from_str(&text).map_err(|e| ConfigError::Parse(path.display().to_string(), e.to_string()))
}

/// Final settings for one invocation.
#[derive(Debug, Clone)]
pub struct CliConfig {
    pub data_dir: PathBuf,
    pub port: u16,
    pub seed: Option<u64>,
    pub service: ServiceConfig,
}

/// Layers `flags` (already merged with the environment by clap) over `file`.
pub fn resolve(
    file: FileConfig,
    data_dir: Option<PathBuf>,
    port: Option<u16>,
    seed: Option<u64>,
    hyper: HyperOverrides,
) -> Result<CliConfig, ConfigError> {
    let port = port.or(file.port).unwrap_or(DEFAULT_PORT);
    if port < 1024 {
        return Err(ConfigError::Port(port));
    }
    let seed = seed.or(file.seed);
    let mut base = file.hyper.apply(Hyperparams::default());
    if let Some(s) = seed {
        base.seed = s;
    }
    let limits = WalkLimits {
        max_cycle_visits: file.compile.max_cycle_visits.unwrap_or(WalkLimits::default().max_cycle_visits),
        max_walks: file.compile.max_walks.unwrap_or(WalkLimits::default().max_walks),
    };
    let augmentation = Augmentation { synonyms_per_option: file.compile.synonyms_per_option.unwrap_or(0) };
    Ok(CliConfig {
        data_dir: data_dir.or(file.data_dir).unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR)),
        port,
        seed,
        service: ServiceConfig { hyper: hyper.apply(base), limits, augmentation },
    })
}
