//! Effective run configuration: built-in defaults, then a TOML file, then
//! command-line flags.

use std::path::{Path, PathBuf};

use letflow::{DetectorConfig, LetNetWeights, TrackConfig};
use serde::{Deserialize, Serialize};

use crate::cli::{DetectFlags, GlobalArgs, TrackFlags};
use crate::error::CliError;

/// Built-in network used when no weights file is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Network {
    /// Hand-set weights whose features are per-pixel chromaticity.
    #[default]
    Chromaticity,
    /// Seeded random weights.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub weights: Option<PathBuf>,
    pub network: Network,
    pub seed: u64,
    pub inference_scale: f64,
    pub format: Format,
    pub detector: DetectorConfig,
    pub tracker: TrackConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            weights: None,
            network: Network::default(),
            seed: 0,
            inference_scale: 1.0,
            format: Format::default(),
            detector: DetectorConfig::default(),
            tracker: TrackConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::ConfigFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| CliError::ConfigFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn resolve(global: &GlobalArgs, detect: &DetectFlags, track: &TrackFlags) -> Result<Self, CliError> {
        let mut cfg = match &global.config {
            Some(path) => Self::from_toml_file(path)?,
            None => Self::default(),
        };
        if let Some(w) = &global.weights {
            cfg.weights = Some(w.clone());
        }
        set(&mut cfg.network, global.network);
        set(&mut cfg.seed, global.seed);
        set(&mut cfg.inference_scale, global.inference_scale);
        set(&mut cfg.format, global.format);

        let d = &mut cfg.detector;
        set(&mut d.max_points, detect.max_points);
        set(&mut d.score_threshold, detect.score_threshold);
        set(&mut d.min_interval, detect.min_interval);
        set(&mut d.border, detect.border);

        let t = &mut cfg.tracker;
        set(&mut t.window_radius, track.window_radius);
        set(&mut t.levels, track.levels);
        set(&mut t.max_iterations, track.max_iterations);
        set(&mut t.epsilon, track.epsilon);
        set(&mut t.min_eigen_threshold, track.min_eigen_threshold);
        if let Some(v) = track.fb_threshold {
            t.fb_threshold = Some(v);
        }
        if track.no_fb_check {
            t.fb_threshold = None;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.inference_scale > 0.0 && self.inference_scale <= 1.0) {
            return Err(CliError::Config(format!(
                "inference_scale must lie in (0, 1], got {}",
                self.inference_scale
            )));
        }
        self.detector.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.tracker.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(path) = &self.weights {
            if !path.is_file() {
                return Err(CliError::Read {
                    path: path.clone(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
                });
            }
        }
        Ok(())
    }

    pub fn load_weights(&self) -> Result<LetNetWeights, CliError> {
        match &self.weights {
            Some(path) => LetNetWeights::load(path).map_err(|source| CliError::Weights {
                path: path.clone(),
                source,
            }),
            None => Ok(match self.network {
                Network::Chromaticity => LetNetWeights::chromaticity(),
                Network::Random => LetNetWeights::random(self.seed),
            }),
        }
    }
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
