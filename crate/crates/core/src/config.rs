//! TOML configuration. Every section is optional; missing keys take their
//! defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::AgentSettings;
use crate::backends::mock::MockConfig;
use crate::candidates::CandidateConfig;
use crate::geometry::DEFAULT_STALE_LIMIT;
use crate::virtual_cursor::CursorConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    pub stale_limit: u32,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            stale_limit: DEFAULT_STALE_LIMIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionSettings {
    /// Virtual time between frames.
    pub frame_interval_ms: u64,
    /// Per-subscriber event queue bound.
    pub event_buffer: usize,
}

impl Default for SessionSettings {
    fn default() -> Self {
        Self {
            frame_interval_ms: 33,
            event_buffer: 256,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScopeConfig {
    pub candidates: CandidateConfig,
    pub cursor: CursorConfig,
    pub agent: AgentSettings,
    pub tracking: TrackingConfig,
    pub session: SessionSettings,
    pub mock: MockConfig,
}

impl ScopeConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScopeConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        let c = &self.candidates;
        if !(c.overlap_threshold > 0.0 && c.overlap_threshold < 1.0) {
            return bad("candidates.overlap_threshold must be in (0, 1)");
        }
        if c.page_size == 0 {
            return bad("candidates.page_size must be positive");
        }
        let k = &self.cursor;
        if k.offset_px < 0.0 || k.radius_px == 0 || k.required_consecutive == 0 {
            return bad("cursor offset must be >= 0, radius and required_consecutive >= 1");
        }
        if !(k.occupancy_threshold > 0.0 && k.occupancy_threshold <= 1.0) {
            return bad("cursor.occupancy_threshold must be in (0, 1]");
        }
        if self.session.event_buffer == 0 {
            return bad("session.event_buffer must be positive");
        }
        Ok(())
    }
}
