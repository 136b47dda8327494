//! Per-user lifetime counters and the ten behavioral features.
//!
//! | feature | meaning                                             |
//! |---------|-----------------------------------------------------|
//! | f1..f3  | share of button inputs within the top 1/2/3 goals   |
//! | f4      | share of messages that are spam                     |
//! | f5      | share of button inputs sent during anarchy mode     |
//! | f6      | share of button inputs that are START               |
//! | f7      | share of mode votes that are ANARCHY                |
//! | f8..f10 | share of button inputs within the bottom 1/2/3 goals|
//!
//! Counters are plain sums, so stores built over disjoint shards of the
//! same windows can be merged in any order.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ClosedWindow, Context};
use crate::parser::{Button, ChatEvent, MessageClass, Mode};

pub const N_FEATURES: usize = 10;
pub const DEFAULT_MIN_MESSAGES: u64 = 10;
pub const DEFAULT_SAMPLE_SIZE: usize = 10_000;

pub type FeatureRow = [f64; N_FEATURES];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub username: String,
    pub button_total: u64,
    pub spam_total: u64,
    pub message_total: u64,
    pub mode_vote_total: u64,
    pub anarchy_vote_count: u64,
    pub start_count: u64,
    pub anarchy_mode_button_count: u64,
    pub top_hits: [u64; 3],
    pub bottom_hits: [u64; 3],
    pub first_seen_ms: i64,
    pub last_seen_ms: i64,
}

impl UserProfile {
    pub fn new(username: impl Into<String>) -> Self {
        UserProfile {
            username: username.into(),
            button_total: 0,
            spam_total: 0,
            message_total: 0,
            mode_vote_total: 0,
            anarchy_vote_count: 0,
            start_count: 0,
            anarchy_mode_button_count: 0,
            top_hits: [0; 3],
            bottom_hits: [0; 3],
            first_seen_ms: i64::MAX,
            last_seen_ms: i64::MIN,
        }
    }

    fn record(&mut self, ev: &ChatEvent, context: &Context) {
        self.message_total += 1;
        self.first_seen_ms = self.first_seen_ms.min(ev.timestamp_ms);
        self.last_seen_ms = self.last_seen_ms.max(ev.timestamp_ms);
        match ev.class {
            MessageClass::Button(b) => {
                self.button_total += 1;
                let rank = context.goal_rank(b);
                for j in 0..3 {
                    if rank <= j {
                        self.top_hits[j] += 1;
                    }
                    if rank >= 7 - j {
                        self.bottom_hits[j] += 1;
                    }
                }
                if b == Button::Start {
                    self.start_count += 1;
                }
                if context.mode_in_effect == Mode::Anarchy {
                    self.anarchy_mode_button_count += 1;
                }
            }
            MessageClass::ModeVote(m) => {
                self.mode_vote_total += 1;
                if m == Mode::Anarchy {
                    self.anarchy_vote_count += 1;
                }
            }
            MessageClass::Spam => self.spam_total += 1,
        }
    }

    pub fn merge(&mut self, other: &UserProfile) {
        debug_assert_eq!(self.username, other.username);
        self.button_total += other.button_total;
        self.spam_total += other.spam_total;
        self.message_total += other.message_total;
        self.mode_vote_total += other.mode_vote_total;
        self.anarchy_vote_count += other.anarchy_vote_count;
        self.start_count += other.start_count;
        self.anarchy_mode_button_count += other.anarchy_mode_button_count;
        for j in 0..3 {
            self.top_hits[j] += other.top_hits[j];
            self.bottom_hits[j] += other.bottom_hits[j];
        }
        self.first_seen_ms = self.first_seen_ms.min(other.first_seen_ms);
        self.last_seen_ms = self.last_seen_ms.max(other.last_seen_ms);
    }

    /// Checks the counter invariants. Returns a description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let t = &self.top_hits;
        let b = &self.bottom_hits;
        if !(t[0] <= t[1] && t[1] <= t[2]) {
            return Err(format!("{}: top hits not monotone {t:?}", self.username));
        }
        if !(b[0] <= b[1] && b[1] <= b[2]) {
            return Err(format!("{}: bottom hits not monotone {b:?}", self.username));
        }
        if self.button_total + self.spam_total + self.mode_vote_total != self.message_total {
            return Err(format!("{}: message total does not add up", self.username));
        }
        // top-3 and bottom-3 of an 8-item permutation are disjoint.
        if t[2] + b[2] > self.button_total {
            return Err(format!("{}: top/bottom hits overlap", self.username));
        }
        if self.anarchy_vote_count > self.mode_vote_total
            || self.start_count > self.button_total
            || self.anarchy_mode_button_count > self.button_total
        {
            return Err(format!("{}: sub-counter exceeds its total", self.username));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub FeatureRow);

impl FeatureVector {
    pub fn get(&self, feature: usize) -> f64 {
        self.0[feature - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("user has {messages} messages, fewer than the required {required}")]
pub struct Ineligible {
    pub messages: u64,
    pub required: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Derive f1..f10 from a profile. Zero denominators give 0.0.
pub fn extract_features(
    profile: &UserProfile,
    min_messages: u64,
) -> Result<FeatureVector, Ineligible> {
    if profile.message_total < min_messages {
        return Err(Ineligible {
            messages: profile.message_total,
            required: min_messages,
        });
    }
    let bt = profile.button_total;
    Ok(FeatureVector([
        ratio(profile.top_hits[0], bt),
        ratio(profile.top_hits[1], bt),
        ratio(profile.top_hits[2], bt),
        ratio(profile.spam_total, profile.message_total),
        ratio(profile.anarchy_mode_button_count, bt),
        ratio(profile.start_count, bt),
        ratio(profile.anarchy_vote_count, profile.mode_vote_total),
        ratio(profile.bottom_hits[0], bt),
        ratio(profile.bottom_hits[1], bt),
        ratio(profile.bottom_hits[2], bt),
    ]))
}

/// Profiles keyed by exact (case-sensitive) username.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProfileStore {
    profiles: BTreeMap<String, UserProfile>,
}

impl ProfileStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn get(&self, username: &str) -> Option<&UserProfile> {
        self.profiles.get(username)
    }

    pub fn iter(&self) -> impl Iterator<Item = &UserProfile> {
        self.profiles.values()
    }

    /// Fold one finalized context's events into the profiles.
    pub fn ingest_context(&mut self, context: &Context, window_events: &[ChatEvent]) {
        for ev in window_events {
            debug_assert!(context.contains(ev.timestamp_ms));
            let p = match self.profiles.get_mut(&ev.username) {
                Some(p) => p,
                None => self
                    .profiles
                    .entry(ev.username.clone())
                    .or_insert_with(|| UserProfile::new(ev.username.as_str())),
            };
            p.record(ev, context);
        }
    }

    pub fn ingest_window(&mut self, window: &ClosedWindow) {
        self.ingest_context(&window.context, &window.events);
    }

    /// Sum another store's counters into this one.
    pub fn merge(&mut self, other: &ProfileStore) {
        for (name, p) in &other.profiles {
            match self.profiles.get_mut(name) {
                Some(mine) => mine.merge(p),
                None => {
                    self.profiles.insert(name.clone(), p.clone());
                }
            }
        }
    }

    /// Point-in-time feature matrix of every eligible user, ordered by username.
    pub fn snapshot(&self, min_messages: u64) -> FeatureMatrix {
        let mut m = FeatureMatrix::default();
        for p in self.profiles.values() {
            if let Ok(fv) = extract_features(p, min_messages) {
                m.push(FeatureRecord {
                    username: p.username.clone(),
                    features: fv.0,
                    message_total: p.message_total,
                    first_seen_ms: p.first_seen_ms,
                    last_seen_ms: p.last_seen_ms,
                });
            }
        }
        m
    }
}

/// One row of the feature interchange file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub username: String,
    pub features: FeatureRow,
    pub message_total: u64,
    pub first_seen_ms: i64,
    pub last_seen_ms: i64,
}

/// Immutable feature matrix with a row-aligned username index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureMatrix {
    pub usernames: Vec<String>,
    pub rows: Vec<FeatureRow>,
    pub message_totals: Vec<u64>,
    pub first_seen_ms: Vec<i64>,
    pub last_seen_ms: Vec<i64>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, rec: FeatureRecord) {
        self.usernames.push(rec.username);
        self.rows.push(rec.features);
        self.message_totals.push(rec.message_total);
        self.first_seen_ms.push(rec.first_seen_ms);
        self.last_seen_ms.push(rec.last_seen_ms);
    }

    pub fn record(&self, i: usize) -> FeatureRecord {
        FeatureRecord {
            username: self.usernames[i].clone(),
            features: self.rows[i],
            message_total: self.message_totals[i],
            first_seen_ms: self.first_seen_ms[i],
            last_seen_ms: self.last_seen_ms[i],
        }
    }

    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        let mut m = FeatureMatrix::default();
        for &i in indices {
            m.push(self.record(i));
        }
        m
    }

    pub const CSV_HEADER: [&'static str; 14] = [
        "username",
        "f1",
        "f2",
        "f3",
        "f4",
        "f5",
        "f6",
        "f7",
        "f8",
        "f9",
        "f10",
        "message_total",
        "first_seen_ms",
        "last_seen_ms",
    ];

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(Self::CSV_HEADER)?;
        for i in 0..self.len() {
            let mut row = Vec::with_capacity(14);
            row.push(self.usernames[i].clone());
            row.extend(self.rows[i].iter().map(|f| f.to_string()));
            row.push(self.message_totals[i].to_string());
            row.push(self.first_seen_ms[i].to_string());
            row.push(self.last_seen_ms[i].to_string());
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<FeatureMatrix, FeatureCsvError> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        if header.iter().ne(Self::CSV_HEADER.iter().copied()) {
            return Err(FeatureCsvError::Header(
                header.iter().collect::<Vec<_>>().join(","),
            ));
        }
        let mut m = FeatureMatrix::default();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| FeatureCsvError::Row {
                row: line + 1,
                msg: what.to_string(),
            };
            let mut features = [0.0; N_FEATURES];
            for (i, f) in features.iter_mut().enumerate() {
                let v: f64 = rec[i + 1]
                    .trim()
                    .parse()
                    .map_err(|_| bad("feature is not a number"))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(bad("feature outside [0, 1]"));
                }
                *f = v;
            }
            m.push(FeatureRecord {
                username: rec[0].to_string(),
                features,
                message_total: rec[11]
                    .trim()
                    .parse()
                    .map_err(|_| bad("bad message_total"))?,
                first_seen_ms: rec[12]
                    .trim()
                    .parse()
                    .map_err(|_| bad("bad first_seen_ms"))?,
                last_seen_ms: rec[13]
                    .trim()
                    .parse()
                    .map_err(|_| bad("bad last_seen_ms"))?,
            });
        }
        Ok(m)
    }
}

#[derive(Debug, Error)]
pub enum FeatureCsvError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("unexpected feature header: {0}")]
    Header(String),
    #[error("row {row}: {msg}")]
    Row { row: usize, msg: String },
}

/// Seeded uniform sample of `n` row indices without replacement, ascending.
///
/// Returns every index when `n >= population`.
pub fn sample_indices(population: usize, n: usize, seed: u64) -> Vec<usize> {
    if n >= population {
        return (0..population).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, population, n).into_vec();
    picked.sort_unstable();
    picked
}

pub fn sample_features(matrix: &FeatureMatrix, n: usize, seed: u64) -> FeatureMatrix {
    matrix.select(&sample_indices(matrix.len(), n, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{build_contexts, ModeState};
    use proptest::prelude::*;

    fn ctx(ranking: [Button; 8], mode: Mode) -> Context {
        Context {
            window_start_ms: 0,
            duration_s: 20,
            button_counts: [0; 8],
            mode_vote_counts: [0; 2],
            total_messages: 0,
            spam_count: 0,
            goal_ranking: ranking,
            mode_in_effect: mode,
        }
    }

    const RANK: [Button; 8] = [
        Button::A,
        Button::Up,
        Button::B,
        Button::Down,
        Button::Left,
        Button::Right,
        Button::Select,
        Button::Start,
    ];

    #[test]
    fn second_goal_hits_top2_and_top3() {
        let mut s = ProfileStore::new();
        s.ingest_context(&ctx(RANK, Mode::Anarchy), &[ChatEvent::new(1, "u", "up")]);
        assert_eq!(s.get("u").unwrap().top_hits, [0, 1, 1]);
        assert_eq!(s.get("u").unwrap().bottom_hits, [0, 0, 0]);
    }

    #[test]
    fn start_in_anarchy() {
        let mut s = ProfileStore::new();
        s.ingest_context(
            &ctx(RANK, Mode::Anarchy),
            &[ChatEvent::new(1, "u", "start")],
        );
        let p = s.get("u").unwrap();
        assert_eq!(p.start_count, 1);
        assert_eq!(p.anarchy_mode_button_count, 1);
        // start is last in RANK
        assert_eq!(p.bottom_hits, [1, 1, 1]);

        let mut s = ProfileStore::new();
        s.ingest_context(
            &ctx(RANK, Mode::Democracy),
            &[ChatEvent::new(1, "u", "start")],
        );
        assert_eq!(s.get("u").unwrap().anarchy_mode_button_count, 0);
    }

    #[test]
    fn democracy_vote() {
        let mut s = ProfileStore::new();
        s.ingest_context(
            &ctx(RANK, Mode::Anarchy),
            &[ChatEvent::new(1, "u", "democracy")],
        );
        let p = s.get("u").unwrap();
        assert_eq!((p.mode_vote_total, p.anarchy_vote_count), (1, 0));
        assert_eq!(p.button_total, 0);
        assert_eq!(p.message_total, 1);
    }

    #[test]
    fn feature_examples() {
        let mut p = UserProfile::new("u");
        p.button_total = 10;
        p.message_total = 10;
        p.start_count = 2;
        let f = extract_features(&p, 10).unwrap();
        assert_eq!(f.get(6), 0.2);
        assert_eq!(f.get(7), 0.0);

        let mut p = UserProfile::new("v");
        p.button_total = 12;
        p.message_total = 12;
        p.top_hits = [12, 12, 12];
        let f = extract_features(&p, 10).unwrap();
        assert_eq!((f.get(1), f.get(2), f.get(3)), (1.0, 1.0, 1.0));
    }

    #[test]
    fn ineligible_below_min_messages() {
        let mut p = UserProfile::new("u");
        p.message_total = 9;
        assert_eq!(
            extract_features(&p, 10),
            Err(Ineligible {
                messages: 9,
                required: 10
            })
        );
    }

    #[test]
    fn snapshot_rows_follow_usernames() {
        let mut s = ProfileStore::new();
        let c = ctx(RANK, Mode::Anarchy);
        let evs: Vec<_> = ["zed", "amy", "zed", "amy", "amy"]
            .iter()
            .enumerate()
            .map(|(i, u)| ChatEvent::new(i as i64, *u, "a"))
            .collect();
        s.ingest_context(&c, &evs);
        let m = s.snapshot(1);
        assert_eq!(m.usernames, vec!["amy", "zed"]);
        assert_eq!(m.message_totals, vec![3, 2]);
        assert_eq!(s.snapshot(3).usernames, vec!["amy"]);
    }

    #[test]
    fn csv_round_trip_and_validation() {
        let mut m = FeatureMatrix::default();
        m.push(FeatureRecord {
            username: "a,b".into(),
            features: [0.1, 0.2, 0.3, 1.0 / 3.0, 0.0, 1.0, 0.5, 0.0, 0.0, 0.0],
            message_total: 42,
            first_seen_ms: 5,
            last_seen_ms: 9,
        });
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(FeatureMatrix::read_csv(buf.as_slice()).unwrap(), m);

        let bad =
            "username,f1,f2,f3,f4,f5,f6,f7,f8,f9,f10,message_total,first_seen_ms,last_seen_ms\n\
                   u,1.5,0,0,0,0,0,0,0,0,0,1,0,0\n";
        assert!(FeatureMatrix::read_csv(bad.as_bytes()).is_err());
        assert!(FeatureMatrix::read_csv("a,b\n".as_bytes()).is_err());
    }

    #[test]
    fn sampling_is_seeded_and_bounded() {
        let a = sample_indices(1000, 100, 7);
        assert_eq!(a, sample_indices(1000, 100, 7));
        assert_ne!(a, sample_indices(1000, 100, 8));
        assert_eq!(a.len(), 100);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_indices(5, 10, 1), vec![0, 1, 2, 3, 4]);
    }

    fn arb_events() -> impl Strategy<Value = Vec<ChatEvent>> {
        let msgs = prop_oneof![
            Just("a"),
            Just("b"),
            Just("up"),
            Just("down"),
            Just("left"),
            Just("right"),
            Just("start"),
            Just("select"),
            Just("anarchy"),
            Just("democracy"),
            Just("kappa"),
        ];
        prop::collection::vec((0i64..200_000, 0u8..6, msgs), 1..300).prop_map(|mut v| {
            v.sort_by_key(|x| x.0);
            v.into_iter()
                .map(|(t, u, m)| ChatEvent::new(t, format!("user{u}"), m))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn features_are_monotone_fractions(events in arb_events()) {
            let mut s = ProfileStore::new();
            for w in build_contexts(events, 20, ModeState::default()) {
                s.ingest_window(&w);
            }
            for p in s.iter() {
                prop_assert!(p.check_invariants().is_ok(), "{:?}", p.check_invariants());
                let f = extract_features(p, 0).unwrap().0;
                prop_assert!(f.iter().all(|x| (0.0..=1.0).contains(x)));
                prop_assert!(f[0] <= f[1] && f[1] <= f[2]);
                prop_assert!(f[7] <= f[8] && f[8] <= f[9]);
                prop_assert_eq!(extract_features(p, 0).unwrap(), extract_features(p, 0).unwrap());
            }
        }

        #[test]
        fn context_order_does_not_matter(events in arb_events(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let windows = build_contexts(events, 20, ModeState::default());
            let mut forward = ProfileStore::new();
            for w in &windows {
                forward.ingest_window(w);
            }
            let mut shuffled = windows.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut other = ProfileStore::new();
            for w in &shuffled {
                other.ingest_window(w);
            }
            prop_assert_eq!(forward, other);
        }

        #[test]
        fn shard_merge_matches_single_store(events in arb_events(), shards in 1usize..5) {
            let windows = build_contexts(events, 20, ModeState::default());
            let mut whole = ProfileStore::new();
            let mut parts = vec![ProfileStore::new(); shards];
            for w in &windows {
                whole.ingest_window(w);
                for (i, part) in parts.iter_mut().enumerate() {
                    let mine: Vec<ChatEvent> = w.events.iter().enumerate()
                        .filter(|(j, _)| j % shards == i).map(|(_, e)| e.clone()).collect();
                    part.ingest_context(&w.context, &mine);
                }
            }
            // Merge in reverse to exercise commutativity as well.
            let mut merged = ProfileStore::new();
            for p in parts.iter().rev() {
                merged.merge(p);
            }
            prop_assert_eq!(merged, whole);
        }
    }
}
