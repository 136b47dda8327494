//! Fixed-duration context windows over the event stream.
//!
//! A context summarizes every message in one aligned window: per-button
//! counts, mode votes, spam, the resulting goal ranking and the game mode
//! that was in effect while the window was open.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::parser::{Button, ChatEvent, MessageClass, Mode};

pub const DEFAULT_CONTEXT_SECONDS: u32 = 20;
pub const DEFAULT_VOTE_SHARE: f64 = 0.75;

/// Buttons ordered from most to least frequent.
pub type GoalRanking = [Button; 8];

/// Rank all eight buttons by descending count.
///
/// Ties fall back to the lexicographic button order, so all-zero counts
/// rank as `a, b, down, left, right, select, start, up`.
pub fn rank_goals(button_counts: &[u64; 8]) -> GoalRanking {
    let mut ranking = Button::ALL;
    // Stable sort keeps lexicographic order among equal counts.
    ranking.sort_by(|x, y| button_counts[y.index()].cmp(&button_counts[x.index()]));
    ranking
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub window_start_ms: i64,
    pub duration_s: u32,
    pub button_counts: [u64; 8],
    /// Indexed by [`Mode::index`]: anarchy, democracy.
    pub mode_vote_counts: [u64; 2],
    pub total_messages: u64,
    pub spam_count: u64,
    pub goal_ranking: GoalRanking,
    pub mode_in_effect: Mode,
}

impl Context {
    fn empty(window_start_ms: i64, duration_s: u32, mode: Mode) -> Self {
        Context {
            window_start_ms,
            duration_s,
            button_counts: [0; 8],
            mode_vote_counts: [0; 2],
            total_messages: 0,
            spam_count: 0,
            goal_ranking: Button::ALL,
            mode_in_effect: mode,
        }
    }

    pub fn window_end_ms(&self) -> i64 {
        self.window_start_ms + i64::from(self.duration_s) * 1000
    }

    pub fn contains(&self, ts: i64) -> bool {
        ts >= self.window_start_ms && ts < self.window_end_ms()
    }

    /// Position of `button` in the goal ranking, 0 = top goal.
    pub fn goal_rank(&self, button: Button) -> usize {
        self.goal_ranking
            .iter()
            .position(|b| *b == button)
            .expect("ranking is a permutation")
    }

    fn record(&mut self, class: MessageClass) {
        self.total_messages += 1;
        match class {
            MessageClass::Button(b) => self.button_counts[b.index()] += 1,
            MessageClass::ModeVote(m) => self.mode_vote_counts[m.index()] += 1,
            MessageClass::Spam => self.spam_count += 1,
        }
    }

    pub fn csv_header() -> &'static str {
        "window_start_ms,duration_s,a,b,down,left,right,select,start,up,\
         anarchy_votes,democracy_votes,spam_count,total_messages,mode_in_effect,goal_ranking"
    }

    pub fn to_csv_row(&self) -> String {
        let mut row = format!("{},{}", self.window_start_ms, self.duration_s);
        for c in self.button_counts {
            row.push_str(&format!(",{c}"));
        }
        let ranking: Vec<&str> = self.goal_ranking.iter().map(|b| b.as_str()).collect();
        row.push_str(&format!(
            ",{},{},{},{},{},{}",
            self.mode_vote_counts[0],
            self.mode_vote_counts[1],
            self.spam_count,
            self.total_messages,
            self.mode_in_effect,
            ranking.join("-")
        ));
        row
    }
}

/// Vote-driven game mode state machine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeState {
    pub current_mode: Mode,
    /// Share of a context's mode votes that must favour the other mode
    /// before the mode flips. Must lie in (0.5, 1.0].
    pub vote_share_threshold: f64,
}

impl Default for ModeState {
    fn default() -> Self {
        ModeState {
            current_mode: Mode::Anarchy,
            vote_share_threshold: DEFAULT_VOTE_SHARE,
        }
    }
}

impl ModeState {
    pub fn new(initial: Mode, vote_share_threshold: f64) -> Self {
        assert!(
            vote_share_threshold > 0.5 && vote_share_threshold <= 1.0,
            "vote share threshold must lie in (0.5, 1.0]"
        );
        ModeState {
            current_mode: initial,
            vote_share_threshold,
        }
    }

    /// Mode for the context after `context`. Also stores it as the current mode.
    pub fn update_mode(&mut self, context: &Context) -> Mode {
        let total: u64 = context.mode_vote_counts.iter().sum();
        if total >= 1 {
            let other = self.current_mode.opposite();
            let share = context.mode_vote_counts[other.index()] as f64 / total as f64;
            if share >= self.vote_share_threshold {
                self.current_mode = other;
            }
        }
        self.current_mode
    }
}

/// A finalized context together with the events that fell inside it.
#[derive(Debug, Clone)]
pub struct ClosedWindow {
    pub context: Context,
    pub events: Vec<ChatEvent>,
}

/// Incremental context construction.
///
/// Windows are aligned to multiples of the duration (counted from the Unix
/// epoch), so any two runs over the same events produce the same windows.
/// Events older than the open window are dropped and counted.
#[derive(Debug, Clone)]
pub struct ContextBuilder {
    duration_s: u32,
    mode: ModeState,
    open: Option<ClosedWindow>,
    late_dropped: u64,
}

impl ContextBuilder {
    pub fn new(duration_s: u32, mode: ModeState) -> Self {
        assert!(duration_s > 0, "context duration must be positive");
        ContextBuilder {
            duration_s,
            mode,
            open: None,
            late_dropped: 0,
        }
    }

    pub fn duration_ms(&self) -> i64 {
        i64::from(self.duration_s) * 1000
    }

    pub fn align(&self, ts: i64) -> i64 {
        ts.div_euclid(self.duration_ms()) * self.duration_ms()
    }

    pub fn late_dropped(&self) -> u64 {
        self.late_dropped
    }

    pub fn mode_state(&self) -> ModeState {
        self.mode
    }

    /// Start of the window currently being filled, if any.
    pub fn open_window_start(&self) -> Option<i64> {
        self.open.as_ref().map(|w| w.context.window_start_ms)
    }

    /// Push one event; returns every window that closed because of it.
    pub fn push(&mut self, ev: ChatEvent) -> Vec<ClosedWindow> {
        let mut closed = Vec::new();
        match &self.open {
            None => {
                let start = self.align(ev.timestamp_ms);
                self.open = Some(self.fresh(start));
            }
            Some(w) if ev.timestamp_ms < w.context.window_start_ms => {
                self.late_dropped += 1;
                return closed;
            }
            Some(_) => {
                closed = self.advance_to(ev.timestamp_ms);
            }
        }
        let w = self.open.as_mut().expect("window open");
        w.context.record(ev.class);
        w.events.push(ev);
        closed
    }

    /// Close every window that ends at or before `ts`, opening empty ones as
    /// needed so the windows tile the time axis.
    pub fn advance_to(&mut self, ts: i64) -> Vec<ClosedWindow> {
        let mut closed = Vec::new();
        let dur = self.duration_ms();
        while let Some(w) = &self.open {
            let end = w.context.window_start_ms + dur;
            if ts < end {
                break;
            }
            closed.push(self.close_open());
            self.open = Some(self.fresh(end));
        }
        closed
    }

    /// Like [`ContextBuilder::advance_to`], but windows that would be empty
    /// are skipped instead of emitted, so a long silence costs nothing.
    /// Empty windows hold no votes, so the mode is unaffected.
    pub fn advance_sparse(&mut self, ts: i64) -> Vec<ClosedWindow> {
        let dur = self.duration_ms();
        let Some(w) = &self.open else {
            return Vec::new();
        };
        if ts < w.context.window_start_ms + dur {
            return Vec::new();
        }
        let empty = w.events.is_empty();
        let closed = self.close_open();
        self.open = Some(self.fresh(self.align(ts)));
        if empty {
            Vec::new()
        } else {
            vec![closed]
        }
    }

    /// Close the open window regardless of time.
    pub fn finish(&mut self) -> Option<ClosedWindow> {
        if self.open.is_some() {
            Some(self.close_open())
        } else {
            None
        }
    }

    fn fresh(&self, start: i64) -> ClosedWindow {
        ClosedWindow {
            context: Context::empty(start, self.duration_s, self.mode.current_mode),
            events: Vec::new(),
        }
    }

    fn close_open(&mut self) -> ClosedWindow {
        let mut w = self.open.take().expect("window open");
        w.context.goal_ranking = rank_goals(&w.context.button_counts);
        self.mode.update_mode(&w.context);
        w
    }
}

/// Build all contexts for a time-ordered event sequence.
pub fn build_contexts<I>(events: I, duration_s: u32, mode: ModeState) -> Vec<ClosedWindow>
where
    I: IntoIterator<Item = ChatEvent>,
{
    let mut builder = ContextBuilder::new(duration_s, mode);
    let mut out = Vec::new();
    for ev in events {
        out.extend(builder.push(ev));
    }
    out.extend(builder.finish());
    out
}

/// One point of the per-second spam series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpamPoint {
    pub second_start_ms: i64,
    pub total: u64,
    pub spam: u64,
    /// Spam fraction for this period alone.
    pub fraction: f64,
    /// Mean of the trailing periods' fractions, including this one.
    pub moving_average: f64,
}

/// Per-period spam fraction and its trailing moving average.
///
/// Periods with no messages have fraction 0. The first `window_periods - 1`
/// points average over however many periods exist so far.
pub fn spam_moving_average(
    events: &[ChatEvent],
    period_s: u32,
    window_periods: usize,
) -> Vec<SpamPoint> {
    assert!(period_s > 0 && window_periods > 0);
    let Some(first) = events.first() else {
        return Vec::new();
    };
    let period_ms = i64::from(period_s) * 1000;
    let origin = first.timestamp_ms.div_euclid(period_ms) * period_ms;
    let last = events
        .iter()
        .map(|e| e.timestamp_ms)
        .max()
        .unwrap_or(origin);
    let n_periods = ((last - origin).div_euclid(period_ms) + 1) as usize;

    let mut totals = vec![(0u64, 0u64); n_periods];
    for ev in events {
        if ev.timestamp_ms < origin {
            continue;
        }
        let slot = &mut totals[((ev.timestamp_ms - origin) / period_ms) as usize];
        slot.0 += 1;
        if ev.class.is_spam() {
            slot.1 += 1;
        }
    }

    let mut window: VecDeque<f64> = VecDeque::with_capacity(window_periods);
    let mut sum = 0.0;
    totals
        .into_iter()
        .enumerate()
        .map(|(i, (total, spam))| {
            let fraction = if total == 0 {
                0.0
            } else {
                spam as f64 / total as f64
            };
            if window.len() == window_periods {
                sum -= window.pop_front().unwrap();
            }
            window.push_back(fraction);
            sum += fraction;
            // Periodic re-sum bounds running-sum drift.
            if i % 4096 == 4095 {
                sum = window.iter().sum();
            }
            SpamPoint {
                second_start_ms: origin + i as i64 * period_ms,
                total,
                spam,
                fraction,
                moving_average: sum / window.len() as f64,
            }
        })
        .collect()
}
