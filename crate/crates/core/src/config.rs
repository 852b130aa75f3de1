//! Pipeline configuration: a flat JSON object whose missing keys take defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::majority_votes;

/// Minimum number of views that must agree on a back-projected point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VotesRepr", into = "VotesRepr")]
pub enum FusionVotes {
    /// `ceil(views / 2)`.
    Majority,
    Fixed(usize),
}

impl FusionVotes {
    pub fn threshold(self, views: usize) -> usize {
        match self {
            FusionVotes::Majority => majority_votes(views),
            FusionVotes::Fixed(n) => n.max(1),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum VotesRepr {
    Count(usize),
    Name(String),
}

impl TryFrom<VotesRepr> for FusionVotes {
    type Error = String;

    fn try_from(r: VotesRepr) -> Result<Self, String> {
        match r {
            VotesRepr::Count(0) => Err("fusion_min_votes must be at least 1".into()),
            VotesRepr::Count(n) => Ok(FusionVotes::Fixed(n)),
            VotesRepr::Name(s) if s == "majority" => Ok(FusionVotes::Majority),
            VotesRepr::Name(s) => Err(format!("fusion_min_votes: expected \"majority\" or an integer, got \"{s}\"")),
        }
    }
}

impl From<FusionVotes> for VotesRepr {
    fn from(v: FusionVotes) -> Self {
        match v {
            FusionVotes::Majority => VotesRepr::Name("majority".into()),
            FusionVotes::Fixed(n) => VotesRepr::Count(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Matching threshold on the IoU-weighted score.
    pub gamma: f64,
    /// Angular threshold for view clustering.
    pub epsilon_degrees: f64,
    /// Frames kept per candidate, ranked by projected area.
    pub k_v: usize,
    /// Images per reasoning call.
    pub batch_limit: usize,
    pub depth_tol_m: f64,
    pub min_visible_fraction: f64,
    pub fusion_min_votes: FusionVotes,
    pub denoise_k: usize,
    pub denoise_std_ratio: f64,
    pub bev_m_per_px: f64,
    pub max_fine_frames: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            gamma: 0.07,
            epsilon_degrees: 30.0,
            k_v: 5,
            batch_limit: 4,
            depth_tol_m: 0.05,
            min_visible_fraction: 0.25,
            fusion_min_votes: FusionVotes::Majority,
            denoise_k: 10,
            denoise_std_ratio: 2.0,
            bev_m_per_px: 0.02,
            max_fine_frames: 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl Config {
    pub fn epsilon_radians(&self) -> f64 {
        self.epsilon_degrees.to_radians()
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            path: "<config>".into(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: shown.clone(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            ConfigError::Parse { reason, .. } => ConfigError::Parse { path: shown, reason },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must be in (0, 1)");
        }
        if !(self.epsilon_degrees > 0.0 && self.epsilon_degrees <= 180.0) {
            return bad("epsilon_degrees must be in (0, 180]");
        }
        if self.k_v == 0 || self.max_fine_frames == 0 || self.denoise_k == 0 {
            return bad("k_v, max_fine_frames and denoise_k must be at least 1");
        }
        if self.batch_limit < 2 {
            return bad("batch_limit must be at least 2");
        }
        if !positive(self.depth_tol_m) {
            return bad("depth_tol_m must be positive");
        }
        if !(self.min_visible_fraction > 0.0 && self.min_visible_fraction <= 1.0) {
            return bad("min_visible_fraction must be in (0, 1]");
        }
        if !positive(self.denoise_std_ratio) || !positive(self.bev_m_per_px) {
            return bad("denoise_std_ratio and bev_m_per_px must be positive");
        }
        Ok(())
    }
}

/// False for NaN.
fn positive(x: f64) -> bool {
    x > 0.0
}
