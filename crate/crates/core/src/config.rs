//! Engine configuration and run manifests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::context::{ModeState, DEFAULT_CONTEXT_SECONDS, DEFAULT_VOTE_SHARE};
use crate::parser::Mode;
use crate::profile::{DEFAULT_MIN_MESSAGES, DEFAULT_SAMPLE_SIZE};
use crate::scoring::{ScorerConfig, ScoringMethod};

pub const DEFAULT_RECLUSTER_SECONDS: u32 = 3600;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Toml {
        path: String,
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub context_duration_s: u32,
    pub recluster_interval_s: u32,
    pub scorer: ScorerConfig,
    pub min_messages: u64,
    pub sample_size: usize,
    pub seed: u64,
    pub vote_share_threshold: f64,
    pub initial_mode: Mode,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            context_duration_s: DEFAULT_CONTEXT_SECONDS,
            recluster_interval_s: DEFAULT_RECLUSTER_SECONDS,
            scorer: ScorerConfig::default(),
            min_messages: DEFAULT_MIN_MESSAGES,
            sample_size: DEFAULT_SAMPLE_SIZE,
            seed: 0,
            vote_share_threshold: DEFAULT_VOTE_SHARE,
            initial_mode: Mode::Anarchy,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.context_duration_s == 0 {
            return bad("context_duration_s must be positive".into());
        }
        if self.recluster_interval_s < self.context_duration_s {
            return bad(format!(
                "recluster_interval_s ({}) must be at least context_duration_s ({})",
                self.recluster_interval_s, self.context_duration_s
            ));
        }
        if !(self.vote_share_threshold > 0.5 && self.vote_share_threshold <= 1.0) {
            return bad("vote_share_threshold must lie in (0.5, 1.0]".into());
        }
        if self.scorer.method.uses_k() && self.scorer.k == 0 {
            return bad("k must be positive".into());
        }
        if !self.scorer.threshold.is_finite() {
            return bad("threshold must be finite".into());
        }
        if self.sample_size == 0 {
            return bad("sample_size must be positive".into());
        }
        Ok(())
    }

    pub fn mode_state(&self) -> ModeState {
        ModeState::new(self.initial_mode, self.vote_share_threshold)
    }
}

/// Command-line values that override the config file.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub context_duration_s: Option<u32>,
    pub recluster_interval_s: Option<u32>,
    pub method: Option<ScoringMethod>,
    pub k: Option<usize>,
    pub threshold: Option<f64>,
    pub min_messages: Option<u64>,
    pub sample_size: Option<usize>,
    pub seed: Option<u64>,
    pub vote_share_threshold: Option<f64>,
}

/// Resolve a config: defaults, then the TOML file, then flags.
pub fn parse_config(
    file: Option<&Path>,
    flags: &ConfigOverrides,
) -> Result<EngineConfig, ConfigError> {
    let cfg = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.display().to_string(),
                source,
            })?;
            toml::from_str(&text).map_err(|source| ConfigError::Toml {
                path: path.display().to_string(),
                source,
            })?
        }
        None => EngineConfig::default(),
    };
    apply_overrides(cfg, flags)
}

/// Resolve a config from TOML text, then flags.
pub fn parse_config_str(text: &str, flags: &ConfigOverrides) -> Result<EngineConfig, ConfigError> {
    let cfg = toml::from_str(text).map_err(|source| ConfigError::Toml {
        path: "<string>".into(),
        source,
    })?;
    apply_overrides(cfg, flags)
}

fn apply_overrides(
    mut cfg: EngineConfig,
    flags: &ConfigOverrides,
) -> Result<EngineConfig, ConfigError> {
    macro_rules! set {
        ($field:ident => $($target:tt)+) => {
            if let Some(v) = flags.$field {
                cfg.$($target)+ = v;
            }
        };
    }
    set!(context_duration_s => context_duration_s);
    set!(recluster_interval_s => recluster_interval_s);
    set!(method => scorer.method);
    set!(k => scorer.k);
    set!(threshold => scorer.threshold);
    set!(min_messages => min_messages);
    set!(sample_size => sample_size);
    set!(seed => seed);
    set!(vote_share_threshold => vote_share_threshold);
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to rerun a command and get the same bytes out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputHash>,
    pub counts: BTreeMap<String, u64>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: Option<u64>) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config: serde_json::to_value(config).expect("config serializes"),
            inputs: Vec::new(),
            counts: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn count(&mut self, stage: &str, n: u64) {
        self.counts.insert(stage.to_string(), n);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h)?;
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
