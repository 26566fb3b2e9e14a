//! Engine configuration: every tunable of the pipeline in one struct, with
//! TOML loading for the CLI. Explicit flags are merged on top by the caller.

use crate::ace::{AceConfig, NoiseFilterConfig};
use crate::chain::ChainStrategy;
use crate::grounding::{AnnotationMode, GroundingConfig};
use crate::scene::{VisibilityConfig, VisibilityMode};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimingMode {
    /// Measure wall time with the process clock.
    Real,
    /// Write zeros, keeping offline runs byte-reproducible.
    #[default]
    Fixed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub strategy: ChainStrategy,
    /// View budget V shared by cognition enhancement and per-candidate
    /// selection.
    pub max_views: usize,
    /// Soft margin for lexicographic view selection.
    pub alpha: f64,
    /// Candidate-retrieval cosine threshold.
    pub tau_cand: f64,
    /// 3D mask merge threshold.
    pub tau_iou: f64,
    /// Whole-scene fallback novelty threshold.
    pub fallback_tau: f64,
    pub noise_radius: f64,
    pub min_neighbors: usize,
    pub annotation_mode: AnnotationMode,
    pub visibility_mode: VisibilityMode,
    pub depth_tolerance: f64,
    pub seed: u64,
    /// Retrieve by exact label instead of the embedder after a cognition
    /// extension (both coincide under the exact-match provider).
    pub exact_retrieval_after_ace: bool,
    pub temperature: f32,
    pub timing: TimingMode,
    /// Also emit every annotated view as a PNG artifact alongside the trace.
    pub trace_images: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            strategy: ChainStrategy::Full,
            max_views: 3,
            alpha: 0.9,
            tau_cand: 0.9,
            tau_iou: 0.5,
            fallback_tau: 0.3,
            noise_radius: 0.05,
            min_neighbors: 4,
            annotation_mode: AnnotationMode::Ours,
            visibility_mode: VisibilityMode::Occlusion,
            depth_tolerance: 0.05,
            seed: 0,
            exact_retrieval_after_ace: false,
            temperature: 0.2,
            timing: TimingMode::Fixed,
            trace_images: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_views == 0 {
            return Err(ConfigError::Invalid("max_views must be at least 1".into()));
        }
        if !(0.0 < self.alpha && self.alpha <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "alpha {} must lie in (0, 1]",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.tau_cand) {
            return Err(ConfigError::Invalid(format!(
                "tau_cand {} must lie in [0, 1]",
                self.tau_cand
            )));
        }
        if !(0.0 < self.tau_iou && self.tau_iou <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "tau_iou {} must lie in (0, 1]",
                self.tau_iou
            )));
        }
        if !(0.0..=1.0).contains(&self.fallback_tau) {
            return Err(ConfigError::Invalid(format!(
                "fallback_tau {} must lie in [0, 1]",
                self.fallback_tau
            )));
        }
        Ok(())
    }

    pub fn ace(&self) -> AceConfig {
        AceConfig {
            max_views: self.max_views,
            tau_iou: self.tau_iou,
            fallback_tau: self.fallback_tau,
            noise_filter: NoiseFilterConfig {
                neighbor_radius: self.noise_radius,
                min_neighbors: self.min_neighbors,
            },
        }
    }

    pub fn grounding(&self) -> GroundingConfig {
        GroundingConfig {
            max_views: self.max_views,
            alpha: self.alpha,
            annotation_mode: self.annotation_mode,
        }
    }

    pub fn visibility(&self) -> VisibilityConfig {
        VisibilityConfig {
            mode: self.visibility_mode,
            depth_tolerance: self.depth_tolerance,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: EngineConfig = toml::from_str(&raw).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }
}
