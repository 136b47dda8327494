//! Contextual anomaly detection for crowd-controlled game chat.
//!
//! Chat lines are parsed into [`parser::ChatEvent`]s, grouped into fixed
//! time windows ([`context::Context`]) that record what the crowd was
//! aiming for, and folded into per-user counters ([`profile::UserProfile`]).
//! Ten behavioral features per user feed distance-based outlier scoring
//! ([`scoring`]), either in one batch or continuously in the [`online`]
//! engine.

pub mod config;
pub mod context;
pub mod online;
pub mod parser;
pub mod pca;
pub mod pipeline;
pub mod profile;
pub mod report;
pub mod scoring;
pub mod synth;

pub use config::{parse_config, EngineConfig};
pub use context::{build_contexts, Context, ContextBuilder, ModeState};
pub use online::{run_online, EngineEvent, OnlineEngine};
pub use parser::{classify_message, parse_event, Button, ChatEvent, MessageClass, Mode};
pub use profile::{extract_features, FeatureMatrix, ProfileStore, UserProfile};
pub use scoring::{Label, Scoreboard, ScorerConfig, ScoringMethod};
