//! Batch pipeline: events to contexts to profiles to scores.

use crate::config::EngineConfig;
use crate::context::{Context, ContextBuilder};
use crate::parser::ChatEvent;
use crate::profile::{FeatureMatrix, ProfileStore};
use crate::scoring::{score_population, Label, ScoreError, Scoreboard, ScoredUser};

#[derive(Debug, Clone)]
pub struct ProfileBuild {
    pub profiles: ProfileStore,
    pub contexts: Vec<Context>,
    pub late_dropped: u64,
}

/// Run events through the context builder into a profile store.
pub fn build_profiles<I>(events: I, config: &EngineConfig, keep_contexts: bool) -> ProfileBuild
where
    I: IntoIterator<Item = ChatEvent>,
{
    let mut builder = ContextBuilder::new(config.context_duration_s, config.mode_state());
    let mut profiles = ProfileStore::new();
    let mut contexts = Vec::new();
    let mut take = |w: crate::context::ClosedWindow| {
        profiles.ingest_window(&w);
        if keep_contexts {
            contexts.push(w.context);
        }
    };
    for ev in events {
        for w in builder.push(ev) {
            take(w);
        }
    }
    if let Some(w) = builder.finish() {
        take(w);
    }
    ProfileBuild {
        profiles,
        contexts,
        late_dropped: builder.late_dropped(),
    }
}

/// Score an eligible-user snapshot under `config`.
///
/// A population too small for the configured k yields an all-normal board
/// with zero scores, plus the reason.
pub fn score_snapshot(
    matrix: &FeatureMatrix,
    config: &EngineConfig,
) -> (Scoreboard, Option<ScoreError>) {
    match score_population(matrix, &config.scorer, config.sample_size, config.seed) {
        Ok(board) => (board, None),
        Err(e) => {
            let users = matrix
                .usernames
                .iter()
                .map(|u| ScoredUser {
                    username: u.clone(),
                    raw_distance: 0.0,
                    anomaly_score: 0.0,
                    label: Label::Normal,
                })
                .collect();
            (
                Scoreboard {
                    config: config.scorer,
                    users,
                    prototype: None,
                    reference_size: 0,
                },
                Some(e),
            )
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub build: ProfileBuild,
    pub features: FeatureMatrix,
    pub scoreboard: Scoreboard,
    pub score_error: Option<ScoreError>,
}

pub fn run_batch<I>(events: I, config: &EngineConfig) -> BatchResult
where
    I: IntoIterator<Item = ChatEvent>,
{
    let build = build_profiles(events, config, false);
    let features = build.profiles.snapshot(config.min_messages);
    let (scoreboard, score_error) = score_snapshot(&features, config);
    BatchResult {
        build,
        features,
        scoreboard,
        score_error,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::ScoringMethod;

    #[test]
    fn tiny_population_is_all_normal() {
        let events = (0..30).map(|i| ChatEvent::new(i * 100, format!("u{}", i % 3), "a"));
        let mut cfg = EngineConfig::default();
        cfg.scorer.method = ScoringMethod::Dknn;
        cfg.scorer.k = 5;
        let r = run_batch(events, &cfg);
        assert_eq!(r.features.len(), 3);
        assert!(matches!(
            r.score_error,
            Some(ScoreError::PopulationTooSmall { n: 3, k: 5 })
        ));
        assert_eq!(r.scoreboard.trolls(), 0);
    }

    #[test]
    fn min_messages_filters_users() {
        let mut events: Vec<ChatEvent> = (0..12)
            .map(|i| ChatEvent::new(i * 10, "busy", "up"))
            .collect();
        events.push(ChatEvent::new(500, "drive_by", "start"));
        events.sort_by_key(|e| e.timestamp_ms);
        let r = run_batch(events, &EngineConfig::default());
        assert_eq!(r.build.profiles.len(), 2);
        assert_eq!(r.features.usernames, vec!["busy"]);
    }
}
