//! Run configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bilevel::BilevelOptions;
use crate::mcp::SolverOptions;
use crate::racing::{RaceParams, TrackError, TrackLayout};
use crate::sim::SimSettings;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("track file {path}: {source}")]
    Track { path: PathBuf, source: TrackError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub n_conditions: usize,
    pub horizon_steps: usize,
    pub master_seed: u64,
    /// Zero uses every available core.
    pub workers: usize,
    pub output_dir: PathBuf,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            n_conditions: 200,
            horizon_steps: 25,
            master_seed: 0,
            workers: 0,
            output_dir: PathBuf::from("results"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub smoothing_initial: f64,
    pub smoothing_decrease: f64,
    pub piece_cap: usize,
    pub max_outer_iterations: usize,
    pub improve_tol: f64,
    pub move_tol: f64,
    pub stall_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let m = SolverOptions::default();
        let b = BilevelOptions::default();
        Self {
            tolerance: m.tolerance,
            max_iterations: m.max_iterations,
            smoothing_initial: m.smoothing_initial,
            smoothing_decrease: m.smoothing_decrease,
            piece_cap: b.piece_cap,
            max_outer_iterations: b.max_outer_iterations,
            improve_tol: b.improve_tol,
            move_tol: b.move_tol,
            stall_tol: b.stall_tol,
        }
    }
}

impl SolverConfig {
    pub fn mcp_options(&self) -> SolverOptions {
        SolverOptions {
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
            smoothing_initial: self.smoothing_initial,
            smoothing_decrease: self.smoothing_decrease,
            ..SolverOptions::default()
        }
    }

    pub fn bilevel_options(&self) -> BilevelOptions {
        BilevelOptions {
            piece_cap: self.piece_cap,
            max_outer_iterations: self.max_outer_iterations,
            improve_tol: self.improve_tol,
            move_tol: self.move_tol,
            stall_tol: self.stall_tol,
            mcp: self.mcp_options(),
            ..BilevelOptions::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackConfig {
    /// Checkpoint file; the built-in pattern when absent. Relative paths
    /// resolve against the config file's directory.
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub race: RaceParams,
    pub study: StudyConfig,
    pub solver: SolverConfig,
    pub track: TrackConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, resolving a relative track file against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            e => e,
        })?;
        if let (Some(f), Some(dir)) = (&cfg.track.file, path.parent()) {
            if f.is_relative() {
                cfg.track.file = Some(dir.join(f));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.race.validate().map_err(ConfigError::Invalid)?;
        if self.study.n_conditions == 0 {
            return Err(ConfigError::Invalid("study.n_conditions must be at least 1".into()));
        }
        if !(self.solver.tolerance > 0.0) {
            return Err(ConfigError::Invalid("solver.tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn track_layout(&self) -> Result<TrackLayout, ConfigError> {
        match &self.track.file {
            None => Ok(TrackLayout::default_pattern(self.race.w_track)),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.clone(),
                    source,
                })?;
                TrackLayout::parse(&text, self.race.w_track).map_err(|source| ConfigError::Track {
                    path: path.clone(),
                    source,
                })
            }
        }
    }

    pub fn sim_settings(&self) -> Result<SimSettings, ConfigError> {
        Ok(SimSettings {
            params: self.race.clone(),
            track: self.track_layout()?,
            solver: self.solver.mcp_options(),
            bilevel: self.solver.bilevel_options(),
        })
    }
}

/// Package version with the git description of the source tree, when known.
pub fn version() -> &'static str {
    concat!(env!("CARGO_PKG_VERSION"), "+", env!("STACKRACE_GIT_DESCRIBE"))
}
