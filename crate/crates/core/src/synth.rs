//! Labeled synthetic chat streams.
//!
//! A scripted goal timeline says which button the crowd is trying to press
//! in each step; users press it with their `goal_follow_prob`. Contexts then
//! discover the goal empirically from the crowd, as they would on real data.
//! The default script cycles through walking, menu navigation and the
//! bush-cutting button chain, in which START is the crowd's goal for one
//! step.
//!
//! A mode schedule alternates anarchy and democracy phases. At each phase
//! start some normal users cast a vote for the new mode, which is what makes
//! the context mode machine flip. Raid trolls join during a democracy phase,
//! vote anarchy and leave shortly after the crowd swings back.
//!
//! Behavior defaults are calibration choices, not measured values.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::parser::{Button, ChatEvent, Mode};
use crate::profile::sample_indices;
use crate::scoring::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionPattern {
    /// Active for the whole scenario.
    Persistent,
    /// Joins during a democracy phase, votes anarchy, leaves after the flip.
    Raid,
}

impl SessionPattern {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionPattern::Persistent => "persistent",
            SessionPattern::Raid => "raid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorProfile {
    /// Probability a button press is the current scripted goal.
    pub goal_follow_prob: f64,
    /// Probability a message is spam.
    pub spam_rate: f64,
    /// Probability an off-goal button press is START.
    pub start_rate: f64,
    /// Probability a mode vote is ANARCHY. Regular players under a mode
    /// schedule instead back whichever mode the schedule is in.
    pub anarchy_vote_bias: f64,
    /// Probability a non-spam message is a mode vote.
    pub vote_rate: f64,
    pub session_pattern: SessionPattern,
    /// Messages per minute while active.
    pub message_rate: f64,
}

impl BehaviorProfile {
    pub fn normal() -> Self {
        BehaviorProfile {
            goal_follow_prob: 0.8,
            spam_rate: 0.25,
            start_rate: 0.02,
            anarchy_vote_bias: 0.5,
            vote_rate: 0.05,
            session_pattern: SessionPattern::Persistent,
            message_rate: 6.0,
        }
    }

    pub fn troll() -> Self {
        BehaviorProfile {
            goal_follow_prob: 0.1,
            spam_rate: 0.25,
            start_rate: 0.25,
            anarchy_vote_bias: 0.95,
            vote_rate: 0.2,
            session_pattern: SessionPattern::Raid,
            message_rate: 10.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("goal_follow_prob", self.goal_follow_prob),
            ("spam_rate", self.spam_rate),
            ("start_rate", self.start_rate),
            ("anarchy_vote_bias", self.anarchy_vote_bias),
            ("vote_rate", self.vote_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} = {p} is not a probability"));
            }
        }
        if !(self.message_rate > 0.0 && self.message_rate.is_finite()) {
            return Err(format!(
                "message_rate = {} must be positive",
                self.message_rate
            ));
        }
        Ok(())
    }
}

/// Cyclic timeline of intended buttons, one per fixed-length step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalScript {
    pub steps: Vec<Button>,
    pub step_s: u32,
}

/// DOWN > START > UP > UP > A > UP > A > DOWN > DOWN > A
pub const SEQUENCE_1: [Button; 10] = [
    Button::Down,
    Button::Start,
    Button::Up,
    Button::Up,
    Button::A,
    Button::Up,
    Button::A,
    Button::Down,
    Button::Down,
    Button::A,
];

impl Default for GoalScript {
    fn default() -> Self {
        use Button::*;
        let mut steps = vec![Up, Up, Up, Left, Left, Up, Right, Right, Up, Up];
        steps.extend([A, A, B, A, Down, A]);
        steps.extend(SEQUENCE_1);
        GoalScript { steps, step_s: 20 }
    }
}

impl GoalScript {
    pub fn goal_at(&self, start_ms: i64, ts: i64) -> Button {
        let step = (ts - start_ms).div_euclid(i64::from(self.step_s) * 1000);
        self.steps[step.rem_euclid(self.steps.len() as i64) as usize]
    }

    pub fn contains_start_goal(&self) -> bool {
        self.steps.contains(&Button::Start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModePhase {
    pub mode: Mode,
    pub duration_s: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub n_users: usize,
    pub troll_fraction: f64,
    pub duration_s: u32,
    /// First instant of the stream; aligned to the goal step by convention.
    pub start_ms: i64,
    pub seed: u64,
    pub normal: BehaviorProfile,
    pub troll: BehaviorProfile,
    pub goal_script: GoalScript,
    /// Cyclic crowd mode timeline. Empty means no swings.
    pub mode_schedule: Vec<ModePhase>,
    /// Probability a normal user casts a swing vote at a phase start.
    pub swing_participation: f64,
}

/// 2014-02-14 00:00:00 UTC.
pub const DEFAULT_START_MS: i64 = 1_392_336_000_000;

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            n_users: 1000,
            troll_fraction: 0.01,
            duration_s: 3600,
            start_ms: DEFAULT_START_MS,
            seed: 0,
            normal: BehaviorProfile::normal(),
            troll: BehaviorProfile::troll(),
            goal_script: GoalScript::default(),
            mode_schedule: vec![
                ModePhase {
                    mode: Mode::Anarchy,
                    duration_s: 600,
                },
                ModePhase {
                    mode: Mode::Democracy,
                    duration_s: 300,
                },
            ],
            swing_participation: 0.3,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.troll_fraction) {
            return Err(format!(
                "troll_fraction = {} must lie in [0, 1]",
                self.troll_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.swing_participation) {
            return Err("swing_participation must lie in [0, 1]".into());
        }
        if self.goal_script.steps.is_empty() || self.goal_script.step_s == 0 {
            return Err("goal script needs at least one step of positive length".into());
        }
        if self.mode_schedule.iter().any(|p| p.duration_s == 0) {
            return Err("mode phases need positive length".into());
        }
        self.normal.validate()?;
        self.troll.validate()
    }

    pub fn end_ms(&self) -> i64 {
        self.start_ms + i64::from(self.duration_s) * 1000
    }

    pub fn n_trolls(&self) -> usize {
        (self.n_users as f64 * self.troll_fraction).round() as usize
    }

    /// Phase intervals `(start, end, mode)` covering the scenario.
    pub fn phases(&self) -> Vec<(i64, i64, Mode)> {
        let mut out = Vec::new();
        if self.mode_schedule.is_empty() {
            return out;
        }
        let mut t = self.start_ms;
        let end = self.end_ms();
        for phase in self.mode_schedule.iter().cycle() {
            if t >= end {
                break;
            }
            let e = t + i64::from(phase.duration_s) * 1000;
            out.push((t, e.min(end), phase.mode));
            t = e;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub username: String,
    pub label: Label,
    pub behavior: BehaviorProfile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStream {
    pub events: Vec<ChatEvent>,
    pub truth: Vec<GroundTruth>,
}

/// An owned test account with a known label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub username: String,
    pub label: Label,
    pub behavior: BehaviorProfile,
}

const SPAM: [&str; 12] = [
    "Kappa",
    "Praise Helix!",
    "lol",
    "DansGame",
    "BibleThump",
    "a a a",
    "up up up",
    "this is fine",
    "RIOT",
    "helix fossil",
    "why are we in the menu",
    "start9",
];

fn user_seed(seed: u64, salt: u64) -> u64 {
    // SplitMix64 finalizer.
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn render(rng: &mut ChaCha8Rng, cmd: &str) -> String {
    match rng.gen_range(0..4) {
        0 => cmd.to_ascii_uppercase(),
        1 => {
            let mut s = cmd.to_string();
            s[..1].make_ascii_uppercase();
            s
        }
        _ => cmd.to_string(),
    }
}

fn pick_button(rng: &mut ChaCha8Rng, b: &BehaviorProfile, goal: Button) -> Button {
    if rng.gen_bool(b.goal_follow_prob) {
        return goal;
    }
    if goal != Button::Start && rng.gen_bool(b.start_rate) {
        return Button::Start;
    }
    let others: Vec<Button> = Button::ALL
        .iter()
        .copied()
        .filter(|x| *x != goal && *x != Button::Start)
        .collect();
    others[rng.gen_range(0..others.len())]
}

fn active_interval(
    rng: &mut ChaCha8Rng,
    scenario: &Scenario,
    pattern: SessionPattern,
) -> (i64, i64) {
    let (start, end) = (scenario.start_ms, scenario.end_ms());
    match pattern {
        SessionPattern::Persistent => (start, end),
        SessionPattern::Raid => {
            let democracy: Vec<(i64, i64, Mode)> = scenario
                .phases()
                .into_iter()
                .filter(|p| p.2 == Mode::Democracy)
                .collect();
            if democracy.is_empty() {
                let len = (end - start) / 4;
                let s = start + rng.gen_range(0..=(end - start - len).max(0));
                return (s, s + len);
            }
            let (ps, pe, _) = democracy[rng.gen_range(0..democracy.len())];
            let span = pe - ps;
            let join = ps + (span as f64 * rng.gen_range(0.1..0.5)) as i64;
            let leave = (pe + rng.gen_range(0..30_000)).min(end);
            (join, leave)
        }
    }
}

fn user_events(
    scenario: &Scenario,
    username: &str,
    behavior: &BehaviorProfile,
    swing_voter: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<ChatEvent> {
    let (from, to) = active_interval(rng, scenario, behavior.session_pattern);
    let mean_gap_ms = 60_000.0 / behavior.message_rate;
    let phases = scenario.phases();
    let mut events = Vec::new();
    let mut t = from as f64;
    loop {
        let u: f64 = rng.gen();
        t += -(1.0 - u).ln() * mean_gap_ms;
        let ts = t as i64;
        if ts >= to {
            break;
        }
        let msg = if rng.gen_bool(behavior.spam_rate) {
            SPAM[rng.gen_range(0..SPAM.len())].to_string()
        } else if rng.gen_bool(behavior.vote_rate) {
            let scheduled = phases
                .iter()
                .find(|p| p.0 <= ts && ts < p.1)
                .map(|p| p.2)
                .filter(|_| swing_voter);
            let biased = rng.gen_bool(behavior.anarchy_vote_bias);
            let m = scheduled.unwrap_or(if biased {
                Mode::Anarchy
            } else {
                Mode::Democracy
            });
            render(rng, m.as_str())
        } else {
            let goal = scenario.goal_script.goal_at(scenario.start_ms, ts);
            let b = pick_button(rng, behavior, goal);
            render(rng, b.as_str())
        };
        events.push(ChatEvent::new(ts, username, msg));
    }

    if swing_voter {
        for &(ps, _, mode) in phases.iter().skip(1) {
            if ps >= from && ps < to && rng.gen_bool(scenario.swing_participation) {
                let window = i64::from(scenario.goal_script.step_s) * 1000;
                let ts = ps + rng.gen_range(0..window);
                events.push(ChatEvent::new(ts, username, render(rng, mode.as_str())));
            }
        }
    }
    events
}

fn merge_sorted(mut events: Vec<ChatEvent>) -> Vec<ChatEvent> {
    events.sort_by(|a, b| {
        a.timestamp_ms
            .cmp(&b.timestamp_ms)
            .then_with(|| a.username.cmp(&b.username))
            .then_with(|| a.raw_msg.cmp(&b.raw_msg))
    });
    events
}

pub fn username_for(index: usize) -> String {
    format!("user{index:05}")
}

/// Generate the scenario's stream and per-user ground truth.
///
/// Each user draws from its own generator seeded by the scenario seed and
/// the user index, so output does not depend on generation order.
pub fn generate_stream(scenario: &Scenario) -> SyntheticStream {
    scenario.validate().expect("invalid scenario");
    let trolls = sample_indices(
        scenario.n_users,
        scenario.n_trolls(),
        user_seed(scenario.seed, u64::MAX),
    );
    let mut is_troll = vec![false; scenario.n_users];
    for i in trolls {
        is_troll[i] = true;
    }

    let mut events = Vec::new();
    let mut truth = Vec::with_capacity(scenario.n_users);
    for (i, troll) in is_troll.into_iter().enumerate() {
        let name = username_for(i);
        let behavior = if troll {
            scenario.troll
        } else {
            scenario.normal
        };
        let mut rng = ChaCha8Rng::seed_from_u64(user_seed(scenario.seed, i as u64));
        events.extend(user_events(scenario, &name, &behavior, !troll, &mut rng));
        truth.push(GroundTruth {
            username: name,
            label: if troll { Label::Troll } else { Label::Normal },
            behavior,
        });
    }
    SyntheticStream {
        events: merge_sorted(events),
        truth,
    }
}

/// Events for owned probe accounts, following the scenario's script.
pub fn generate_probe_events(scenario: &Scenario, probes: &[ProbeSpec]) -> Vec<ChatEvent> {
    let mut events = Vec::new();
    for (i, p) in probes.iter().enumerate() {
        p.behavior.validate().expect("invalid probe behavior");
        let mut rng =
            ChaCha8Rng::seed_from_u64(user_seed(scenario.seed ^ 0x50_524F_4245, i as u64));
        events.extend(user_events(
            scenario,
            &p.username,
            &p.behavior,
            false,
            &mut rng,
        ));
    }
    merge_sorted(events)
}

/// Default probe accounts: two trolls and two regular players.
pub fn default_probes() -> Vec<ProbeSpec> {
    let troll = BehaviorProfile {
        session_pattern: SessionPattern::Persistent,
        ..BehaviorProfile::troll()
    };
    vec![
        ProbeSpec {
            username: "probe_troll_1".into(),
            label: Label::Troll,
            behavior: troll,
        },
        ProbeSpec {
            username: "probe_troll_2".into(),
            label: Label::Troll,
            behavior: troll,
        },
        ProbeSpec {
            username: "probe_player_1".into(),
            label: Label::Normal,
            behavior: BehaviorProfile::normal(),
        },
        ProbeSpec {
            username: "probe_player_2".into(),
            label: Label::Normal,
            behavior: BehaviorProfile::normal(),
        },
    ]
}

/// Render events as log lines.
pub fn serialize_stream(events: &[ChatEvent]) -> Vec<String> {
    events.iter().map(ChatEvent::to_line).collect()
}

pub fn write_stream<W: Write>(events: &[ChatEvent], mut w: W) -> std::io::Result<()> {
    for ev in events {
        writeln!(w, "{}", ev.to_line())?;
    }
    w.flush()
}

pub fn write_truth<W: Write>(truth: &[GroundTruth], w: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "username",
        "label",
        "goal_follow_prob",
        "spam_rate",
        "start_rate",
        "anarchy_vote_bias",
        "session_pattern",
        "message_rate",
        "vote_rate",
    ])?;
    for t in truth {
        let b = &t.behavior;
        wr.write_record([
            t.username.clone(),
            t.label.to_string(),
            b.goal_follow_prob.to_string(),
            b.spam_rate.to_string(),
            b.start_rate.to_string(),
            b.anarchy_vote_bias.to_string(),
            b.session_pattern.as_str().to_string(),
            b.message_rate.to_string(),
            b.vote_rate.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
