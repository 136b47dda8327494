//! Online engine: live ingestion with periodic re-clustering.
//!
//! Ingestion is a single ordered consumer. Windows close as soon as an event
//! (or, for live sources, a clock tick) moves past their end, and their
//! events go straight into the profile store, so a profile never lags its
//! latest closed window by more than one context duration.
//!
//! Every `recluster_interval_s` of stream time the engine snapshots eligible
//! users and hands the immutable snapshot to a re-clustering worker. The
//! worker scores it, diffs labels against the previous epoch, and publishes
//! the new board in one atomic swap.

use std::collections::{HashMap, VecDeque};
use std::io::{self, BufRead, Write};
use std::net::{TcpListener, ToSocketAddrs};
use std::sync::mpsc;
use std::sync::{Arc, RwLock};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::context::ContextBuilder;
use crate::parser::{parse_event, ChatEvent, LineParser, ParseStats};
use crate::pipeline::score_snapshot;
use crate::profile::{FeatureMatrix, ProfileStore};
use crate::scoring::{Label, ScoredUser, ScoringMethod};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelEvent {
    pub username: String,
    pub old_label: Label,
    pub new_label: Label,
    pub recluster_epoch: u64,
    pub anomaly_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreboardEvent {
    pub recluster_epoch: u64,
    /// Stream time up to which profiles were complete.
    pub boundary_ms: i64,
    pub terminal: bool,
    pub method: ScoringMethod,
    pub k: Option<usize>,
    pub n: usize,
    pub trolls: usize,
    pub troll_percent: f64,
    pub reference_size: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
    pub users: Vec<ScoredUser>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OnlineStats {
    pub lines: u64,
    pub malformed: u64,
    pub out_of_order: u64,
    pub late_dropped: u64,
}

/// Newline-delimited JSON output of the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EngineEvent {
    Relabel(RelabelEvent),
    Scoreboard(ScoreboardEvent),
    ParseStats(OnlineStats),
    SourceError {
        message: String,
        retry_in_ms: u64,
    },
    /// Outcome for an injected account with a known label.
    ProbeCheck {
        username: String,
        expected: Label,
        observed: Option<Label>,
        ok: bool,
    },
}

impl EngineEvent {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }
}

/// Consumer of engine output.
pub trait EventSink: Send {
    fn emit(&mut self, event: &EngineEvent) -> io::Result<()>;
}

impl EventSink for Vec<EngineEvent> {
    fn emit(&mut self, event: &EngineEvent) -> io::Result<()> {
        self.push(event.clone());
        Ok(())
    }
}

/// Writes one JSON object per line.
pub struct JsonLinesSink<W>(pub W);

impl<W: Write + Send> EventSink for JsonLinesSink<W> {
    fn emit(&mut self, event: &EngineEvent) -> io::Result<()> {
        writeln!(self.0, "{}", event.to_json())?;
        self.0.flush()
    }
}

/// An immutable snapshot queued for re-clustering.
#[derive(Debug, Clone)]
pub struct ReclusterJob {
    pub epoch: u64,
    pub boundary_ms: i64,
    pub terminal: bool,
    pub snapshot: FeatureMatrix,
}

/// Ingestion half of the engine.
#[derive(Debug)]
pub struct OnlineEngine {
    config: EngineConfig,
    parser: LineParser,
    builder: ContextBuilder,
    profiles: ProfileStore,
    next_boundary: Option<i64>,
    epoch: u64,
    /// End of the latest window folded into the profiles.
    watermark: Option<i64>,
    finished: bool,
}

impl OnlineEngine {
    pub fn new(config: EngineConfig) -> Self {
        let builder = ContextBuilder::new(config.context_duration_s, config.mode_state());
        OnlineEngine {
            config,
            parser: LineParser::new(),
            builder,
            profiles: ProfileStore::new(),
            next_boundary: None,
            epoch: 0,
            watermark: None,
            finished: false,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn profiles(&self) -> &ProfileStore {
        &self.profiles
    }

    pub fn watermark(&self) -> Option<i64> {
        self.watermark
    }

    pub fn stats(&self) -> OnlineStats {
        let p: ParseStats = self.parser.stats();
        OnlineStats {
            lines: p.lines,
            malformed: p.malformed,
            out_of_order: p.out_of_order,
            late_dropped: self.builder.late_dropped(),
        }
    }

    fn interval_ms(&self) -> i64 {
        i64::from(self.config.recluster_interval_s) * 1000
    }

    pub fn ingest_line(&mut self, line: &str) -> Vec<ReclusterJob> {
        match self.parser.feed(line) {
            Some(ev) => self.push_event(ev),
            None => Vec::new(),
        }
    }

    pub fn ingest_bytes(&mut self, line: &[u8]) -> Vec<ReclusterJob> {
        match self.parser.feed_bytes(line) {
            Some(ev) => self.push_event(ev),
            None => Vec::new(),
        }
    }

    /// Ingest an already parsed event.
    pub fn ingest_event(&mut self, ev: ChatEvent) -> Vec<ReclusterJob> {
        self.parser.observe(&ev);
        self.push_event(ev)
    }

    fn push_event(&mut self, ev: ChatEvent) -> Vec<ReclusterJob> {
        assert!(!self.finished, "engine already finished");
        if self.next_boundary.is_none() {
            let interval = self.interval_ms();
            self.next_boundary = Some(ev.timestamp_ms.div_euclid(interval) * interval + interval);
        }
        let jobs = self.advance(ev.timestamp_ms);
        let closed = self.builder.push(ev);
        debug_assert!(closed.is_empty());
        jobs
    }

    /// Close windows that ended before `now_ms` (wall-clock sources).
    pub fn advance_clock(&mut self, now_ms: i64) -> Vec<ReclusterJob> {
        if self.finished {
            return Vec::new();
        }
        self.advance(now_ms)
    }

    fn advance(&mut self, ts: i64) -> Vec<ReclusterJob> {
        let before = self.builder.open_window_start();
        for w in self.builder.advance_sparse(ts) {
            self.profiles.ingest_window(&w);
        }
        let after = self.builder.open_window_start();
        if after != before {
            self.watermark = after;
        }
        match (self.watermark, self.next_boundary) {
            (Some(w), Some(b)) if w >= b => {
                let interval = self.interval_ms();
                self.next_boundary = Some(w.div_euclid(interval) * interval + interval);
                vec![self.job(w, false)]
            }
            _ => Vec::new(),
        }
    }

    fn job(&mut self, boundary_ms: i64, terminal: bool) -> ReclusterJob {
        self.epoch += 1;
        ReclusterJob {
            epoch: self.epoch,
            boundary_ms,
            terminal,
            snapshot: self.profiles.snapshot(self.config.min_messages),
        }
    }

    /// Flush the open window and produce the terminal re-cluster.
    pub fn finish(&mut self) -> ReclusterJob {
        assert!(!self.finished, "engine already finished");
        if let Some(w) = self.builder.finish() {
            self.profiles.ingest_window(&w);
            self.watermark = Some(w.context.window_end_ms());
        }
        self.finished = true;
        let boundary = self.watermark.unwrap_or(0);
        self.job(boundary, true)
    }
}

/// Labels published by the latest completed epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PublishedLabels {
    pub epoch: u64,
    pub boundary_ms: i64,
    pub users: HashMap<String, ScoredUser>,
}

impl PublishedLabels {
    pub fn label(&self, username: &str) -> Option<Label> {
        self.users.get(username).map(|u| u.label)
    }

    pub fn trolls(&self) -> Vec<String> {
        let mut t: Vec<String> = self
            .users
            .values()
            .filter(|u| u.label.is_troll())
            .map(|u| u.username.clone())
            .collect();
        t.sort();
        t
    }
}

/// Shared read handle on the published labels. Readers always see a whole epoch.
#[derive(Debug, Clone, Default)]
pub struct LabelHandle(Arc<RwLock<Arc<PublishedLabels>>>);

impl LabelHandle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn current(&self) -> Arc<PublishedLabels> {
        self.0.read().expect("label lock poisoned").clone()
    }

    fn publish(&self, labels: PublishedLabels) {
        *self.0.write().expect("label lock poisoned") = Arc::new(labels);
    }
}

/// Re-clustering half of the engine.
#[derive(Debug)]
pub struct Reclusterer {
    config: EngineConfig,
    previous: HashMap<String, Label>,
    handle: LabelHandle,
}

impl Reclusterer {
    pub fn new(config: EngineConfig, handle: LabelHandle) -> Self {
        Reclusterer {
            config,
            previous: HashMap::new(),
            handle,
        }
    }

    /// Score a snapshot and return the relabels followed by the scoreboard.
    ///
    /// Users not seen in an earlier epoch start out as normal.
    pub fn run(&mut self, job: &ReclusterJob) -> Vec<EngineEvent> {
        let (board, err) = score_snapshot(&job.snapshot, &self.config);
        let mut out = Vec::new();
        for u in &board.users {
            let old = self
                .previous
                .get(&u.username)
                .copied()
                .unwrap_or(Label::Normal);
            if old != u.label {
                out.push(EngineEvent::Relabel(RelabelEvent {
                    username: u.username.clone(),
                    old_label: old,
                    new_label: u.label,
                    recluster_epoch: job.epoch,
                    anomaly_score: u.anomaly_score,
                }));
            }
        }
        self.previous = board
            .users
            .iter()
            .map(|u| (u.username.clone(), u.label))
            .collect();
        self.handle.publish(PublishedLabels {
            epoch: job.epoch,
            boundary_ms: job.boundary_ms,
            users: board
                .users
                .iter()
                .map(|u| (u.username.clone(), u.clone()))
                .collect(),
        });
        out.push(EngineEvent::Scoreboard(ScoreboardEvent {
            recluster_epoch: job.epoch,
            boundary_ms: job.boundary_ms,
            terminal: job.terminal,
            method: board.config.method,
            k: board.config.method.uses_k().then_some(board.config.k),
            n: board.users.len(),
            trolls: board.trolls(),
            troll_percent: board.troll_percent(),
            reference_size: board.reference_size,
            note: err.map(|e| format!("scoring skipped: {e}")),
            users: board.users,
        }));
        out
    }
}

/// One item from an input source.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceItem {
    Line(Vec<u8>),
    /// Wall-clock time with nothing to read.
    Tick(i64),
    /// A recoverable source failure; the source retries after the delay.
    Error {
        message: String,
        retry_in_ms: u64,
    },
}

enum WorkerMsg {
    Job(ReclusterJob),
    Emit(EngineEvent),
}

#[derive(Debug)]
pub struct OnlineOutcome<S> {
    pub sink: S,
    pub stats: OnlineStats,
    pub epochs: u64,
}

/// Run the engine over a source until it ends.
pub fn run_online<I, S>(source: I, config: &EngineConfig, sink: S) -> io::Result<OnlineOutcome<S>>
where
    I: IntoIterator<Item = SourceItem>,
    S: EventSink,
{
    run_online_with(source, config, sink, LabelHandle::new())
}

/// [`run_online`] publishing labels through a caller-held handle.
pub fn run_online_with<I, S>(
    source: I,
    config: &EngineConfig,
    mut sink: S,
    labels: LabelHandle,
) -> io::Result<OnlineOutcome<S>>
where
    I: IntoIterator<Item = SourceItem>,
    S: EventSink,
{
    let (tx, rx) = mpsc::channel::<WorkerMsg>();
    let mut reclusterer = Reclusterer::new(config.clone(), labels);
    thread::scope(|scope| {
        let worker = scope.spawn(move || -> io::Result<S> {
            for msg in rx {
                match msg {
                    WorkerMsg::Job(job) => {
                        for ev in reclusterer.run(&job) {
                            sink.emit(&ev)?;
                        }
                    }
                    WorkerMsg::Emit(ev) => sink.emit(&ev)?,
                }
            }
            Ok(sink)
        });

        let mut engine = OnlineEngine::new(config.clone());
        let send = |m: WorkerMsg| {
            tx.send(m)
                .map_err(|_| io::Error::other("re-cluster worker stopped"))
        };
        for item in source {
            let jobs = match item {
                SourceItem::Line(line) => engine.ingest_bytes(&line),
                SourceItem::Tick(now) => engine.advance_clock(now),
                SourceItem::Error {
                    message,
                    retry_in_ms,
                } => {
                    send(WorkerMsg::Emit(EngineEvent::SourceError {
                        message,
                        retry_in_ms,
                    }))?;
                    Vec::new()
                }
            };
            for job in jobs {
                send(WorkerMsg::Job(job))?;
            }
        }
        let epochs_before = engine.epoch;
        send(WorkerMsg::Job(engine.finish()))?;
        let stats = engine.stats();
        send(WorkerMsg::Emit(EngineEvent::ParseStats(stats)))?;
        drop(tx);
        let sink = worker
            .join()
            .map_err(|_| io::Error::other("re-cluster worker panicked"))??;
        Ok(OnlineOutcome {
            sink,
            stats,
            epochs: epochs_before + 1,
        })
    })
}

/// Lines from a recorded log, optionally paced by event timestamps.
///
/// `speed` is the replay rate relative to real time; 0 replays unthrottled.
pub struct ReplaySource<R> {
    reader: R,
    speed: f64,
    first: Option<(i64, Instant)>,
}

impl<R: BufRead> ReplaySource<R> {
    pub fn new(reader: R, speed: f64) -> Self {
        ReplaySource {
            reader,
            speed,
            first: None,
        }
    }

    fn pace(&mut self, line: &[u8]) {
        let Some(ts) = std::str::from_utf8(line)
            .ok()
            .and_then(|l| parse_event(l).ok())
            .map(|e| e.timestamp_ms)
        else {
            return;
        };
        let (t0, start) = *self.first.get_or_insert((ts, Instant::now()));
        let due = Duration::from_secs_f64(((ts - t0).max(0) as f64 / 1000.0) / self.speed);
        let elapsed = start.elapsed();
        if due > elapsed {
            thread::sleep(due - elapsed);
        }
    }
}

impl<R: BufRead> Iterator for ReplaySource<R> {
    type Item = SourceItem;

    fn next(&mut self) -> Option<SourceItem> {
        let mut buf = Vec::new();
        loop {
            match self.reader.read_until(b'\n', &mut buf) {
                Ok(0) => return None,
                Ok(_) => {
                    while matches!(buf.last(), Some(b'\n' | b'\r')) {
                        buf.pop();
                    }
                    if self.speed > 0.0 {
                        self.pace(&buf);
                    }
                    return Some(SourceItem::Line(buf));
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => {
                    // A broken file does not heal; report and stop.
                    log::error!("replay read failed: {e}");
                    return None;
                }
            }
        }
    }
}

pub fn wall_clock_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

/// Options for [`tcp_source`].
#[derive(Debug, Clone)]
pub struct TcpSourceOptions {
    /// Stop after this many connections have closed; `None` serves forever.
    pub max_connections: Option<usize>,
    /// Emit wall-clock ticks this often while idle; `None` disables ticks.
    pub tick: Option<Duration>,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for TcpSourceOptions {
    fn default() -> Self {
        TcpSourceOptions {
            max_connections: None,
            tick: Some(Duration::from_secs(1)),
            initial_backoff: Duration::from_millis(100),
            max_backoff: Duration::from_secs(30),
        }
    }
}

/// Listen for plain line streams and feed them to the engine.
///
/// Connections are served one at a time. Accept and read failures are
/// reported as [`SourceItem::Error`] and retried with exponential backoff.
pub fn tcp_source(
    addr: impl ToSocketAddrs,
    opts: TcpSourceOptions,
) -> io::Result<(std::net::SocketAddr, TcpLines)> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let (tx, rx) = mpsc::sync_channel::<SourceItem>(65_536);
    let max = opts.max_connections;
    let (init, cap) = (opts.initial_backoff, opts.max_backoff);
    thread::spawn(move || {
        let mut served = 0usize;
        let mut backoff = init;
        let report = |tx: &mpsc::SyncSender<SourceItem>, message: String, wait: Duration| {
            tx.send(SourceItem::Error {
                message,
                retry_in_ms: wait.as_millis() as u64,
            })
            .is_ok()
        };
        while max.is_none_or(|m| served < m) {
            let stream = match listener.accept() {
                Ok((s, peer)) => {
                    log::info!("source connected: {peer}");
                    backoff = init;
                    s
                }
                Err(e) => {
                    if !report(&tx, format!("accept failed: {e}"), backoff) {
                        return;
                    }
                    thread::sleep(backoff);
                    backoff = (backoff * 2).min(cap);
                    continue;
                }
            };
            let mut reader = io::BufReader::new(stream);
            loop {
                let mut buf = Vec::new();
                match reader.read_until(b'\n', &mut buf) {
                    Ok(0) => break,
                    Ok(_) => {
                        while matches!(buf.last(), Some(b'\n' | b'\r')) {
                            buf.pop();
                        }
                        if tx.send(SourceItem::Line(buf)).is_err() {
                            return;
                        }
                    }
                    Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                    Err(e) => {
                        if !report(&tx, format!("read failed: {e}"), backoff) {
                            return;
                        }
                        thread::sleep(backoff);
                        backoff = (backoff * 2).min(cap);
                        break;
                    }
                }
            }
            served += 1;
        }
    });
    Ok((
        local,
        TcpLines {
            rx,
            tick: opts.tick,
        },
    ))
}

/// Receiving end of [`tcp_source`].
pub struct TcpLines {
    rx: mpsc::Receiver<SourceItem>,
    tick: Option<Duration>,
}

impl Iterator for TcpLines {
    type Item = SourceItem;

    fn next(&mut self) -> Option<SourceItem> {
        match self.tick {
            None => self.rx.recv().ok(),
            Some(t) => match self.rx.recv_timeout(t) {
                Ok(item) => Some(item),
                Err(mpsc::RecvTimeoutError::Timeout) => Some(SourceItem::Tick(wall_clock_ms())),
                Err(mpsc::RecvTimeoutError::Disconnected) => None,
            },
        }
    }
}

/// Interleave probe-account events into a live source by timestamp.
///
/// A probe event goes out just before the first live line with a later
/// timestamp; ties favour the live line. Unparseable live lines pass
/// through in place. Leftover probes follow the end of the live stream.
pub fn inject_probe_users<I>(probes: Vec<ChatEvent>, live: I) -> ProbeInjector<I::IntoIter>
where
    I: IntoIterator<Item = SourceItem>,
{
    let mut probes = probes;
    probes.sort_by_key(|e| e.timestamp_ms);
    ProbeInjector {
        live: live.into_iter(),
        probes: probes.into(),
        held: None,
    }
}

pub struct ProbeInjector<I> {
    live: I,
    probes: VecDeque<ChatEvent>,
    held: Option<(i64, SourceItem)>,
}

impl<I: Iterator<Item = SourceItem>> Iterator for ProbeInjector<I> {
    type Item = SourceItem;

    fn next(&mut self) -> Option<SourceItem> {
        if self.held.is_none() {
            match self.live.next() {
                Some(item) => {
                    let ts = match &item {
                        SourceItem::Line(l) => std::str::from_utf8(l)
                            .ok()
                            .and_then(|s| parse_event(s).ok())
                            .map(|e| e.timestamp_ms),
                        SourceItem::Tick(now) => Some(*now),
                        SourceItem::Error { .. } => None,
                    };
                    match ts {
                        Some(ts) => self.held = Some((ts, item)),
                        None => return Some(item),
                    }
                }
                None => {
                    return self
                        .probes
                        .pop_front()
                        .map(|p| SourceItem::Line(p.to_line().into_bytes()));
                }
            }
        }
        let (ts, _) = self.held.as_ref().expect("held item");
        let ts = *ts;
        if let Some(p) = self.probes.pop_front_if(|p| p.timestamp_ms < ts) {
            return Some(SourceItem::Line(p.to_line().into_bytes()));
        }
        self.held.take().map(|(_, item)| item)
    }
}

/// Compare published labels with the known labels of probe accounts.
pub fn probe_checks(labels: &PublishedLabels, expected: &[(String, Label)]) -> Vec<EngineEvent> {
    expected
        .iter()
        .map(|(username, want)| {
            let observed = labels.label(username);
            EngineEvent::ProbeCheck {
                username: username.clone(),
                expected: *want,
                observed,
                ok: observed == Some(*want),
            }
        })
        .collect()
}

/// Lines of a recorded log as source items, unpaced.
pub fn lines_source(lines: impl IntoIterator<Item = String>) -> impl Iterator<Item = SourceItem> {
    lines.into_iter().map(|l| SourceItem::Line(l.into_bytes()))
}
