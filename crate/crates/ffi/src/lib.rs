//! C ABI for chatwatch.
//!
//! Every fallible function returns a [`CwStatus`]. On failure a description
//! is available from [`cw_last_error`] on the same thread until the next
//! call. Strings handed out by the library must be released with
//! [`cw_string_free`]; engines with [`cw_engine_free`].

use std::cell::RefCell;
use std::collections::VecDeque;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use chatwatch::config::{parse_config_str, EngineConfig};
use chatwatch::online::{EngineEvent, LabelHandle, OnlineEngine, ReclusterJob, Reclusterer};
use chatwatch::parser::{classify_message, parse_event, MessageClass};
use chatwatch::profile::{FeatureRow, N_FEATURES};
use chatwatch::scoring::{
    label_for, normalize_scores, raw_distances, Label, ScoreError, ScorerConfig, ScoringMethod,
};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    ParseError = 4,
    PopulationTooSmall = 5,
    EngineFinished = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CwMethod {
    Dknn = 0,
    Sknn = 1,
    Kmeans = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CwMessageKind {
    Button = 0,
    ModeVote = 1,
    Spam = 2,
}

/// Label codes written by scoring and lookup functions.
pub const CW_LABEL_NORMAL: i32 = 0;
pub const CW_LABEL_TROLL: i32 = 1;
/// The user has not been scored yet.
pub const CW_LABEL_UNKNOWN: i32 = -1;

/// Number of features per row expected by [`cw_score`].
pub const CW_N_FEATURES: usize = 10;
const _: () = assert!(CW_N_FEATURES == N_FEATURES);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: CwStatus, msg: impl Into<String>) -> CwStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> CwStatus) -> CwStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(CwStatus::Panic, format!("internal error: {msg}"))
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, CwStatus> {
    if p.is_null() {
        return Err(fail(CwStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(CwStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

macro_rules! need {
    ($p:expr, $name:literal) => {
        if $p.is_null() {
            return fail(CwStatus::NullPointer, concat!($name, " is null"));
        }
    };
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Last error message for this thread, or null. Owned by the library.
#[no_mangle]
pub extern "C" fn cw_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn cw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cw_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Classify a chat message.
///
/// `out_index` receives the button index (a, b, down, left, right, select,
/// start, up), the mode (0 anarchy, 1 democracy) or -1 for spam.
///
/// # Safety
/// `msg` must be a NUL-terminated string; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn cw_classify_message(
    msg: *const c_char,
    out_kind: *mut CwMessageKind,
    out_index: *mut i32,
) -> CwStatus {
    guard(|| {
        need!(out_kind, "out_kind");
        need!(out_index, "out_index");
        let msg = tri!(str_arg(msg, "msg"));
        let (kind, index) = match classify_message(msg) {
            MessageClass::Button(b) => (CwMessageKind::Button, b.index() as i32),
            MessageClass::ModeVote(m) => (CwMessageKind::ModeVote, m.index() as i32),
            MessageClass::Spam => (CwMessageKind::Spam, -1),
        };
        *out_kind = kind;
        *out_index = index;
        CwStatus::Ok
    })
}

/// Parse one log line and report its timestamp in epoch milliseconds.
///
/// # Safety
/// `line` must be a NUL-terminated string; `out_timestamp_ms` writable.
#[no_mangle]
pub unsafe extern "C" fn cw_parse_line(
    line: *const c_char,
    out_timestamp_ms: *mut i64,
) -> CwStatus {
    guard(|| {
        need!(out_timestamp_ms, "out_timestamp_ms");
        let line = tri!(str_arg(line, "line"));
        match parse_event(line) {
            Ok(ev) => {
                *out_timestamp_ms = ev.timestamp_ms;
                CwStatus::Ok
            }
            Err(e) => fail(CwStatus::ParseError, e.to_string()),
        }
    })
}

fn method_of(m: CwMethod) -> ScoringMethod {
    match m {
        CwMethod::Dknn => ScoringMethod::Dknn,
        CwMethod::Sknn => ScoringMethod::Sknn,
        CwMethod::Kmeans => ScoringMethod::Kmeans,
    }
}

/// Score `n_rows` feature rows stored row-major, [`CW_N_FEATURES`] values each.
///
/// Each output array holds `n_rows` entries; any of them may be null.
/// `k` is ignored for k-means.
///
/// # Safety
/// `rows` must point to `n_rows * CW_N_FEATURES` doubles; non-null outputs
/// must have room for `n_rows` values.
#[no_mangle]
pub unsafe extern "C" fn cw_score(
    rows: *const f64,
    n_rows: usize,
    method: CwMethod,
    k: usize,
    threshold: f64,
    out_raw: *mut f64,
    out_scores: *mut f64,
    out_labels: *mut i32,
) -> CwStatus {
    guard(|| {
        if n_rows == 0 {
            return fail(CwStatus::PopulationTooSmall, "no rows");
        }
        need!(rows, "rows");
        if !threshold.is_finite() {
            return fail(CwStatus::InvalidArgument, "threshold must be finite");
        }
        let flat = std::slice::from_raw_parts(rows, n_rows * N_FEATURES);
        let rows: Vec<FeatureRow> = flat
            .chunks_exact(N_FEATURES)
            .map(|c| c.try_into().expect("chunk of N_FEATURES"))
            .collect();
        let cfg = ScorerConfig {
            method: method_of(method),
            k,
            threshold,
        };
        let raw = match raw_distances(&rows, &cfg) {
            Ok((raw, _)) => raw,
            Err(e @ ScoreError::ZeroK) => return fail(CwStatus::InvalidArgument, e.to_string()),
            Err(e) => return fail(CwStatus::PopulationTooSmall, e.to_string()),
        };
        let scores = normalize_scores(&raw);
        for i in 0..n_rows {
            if !out_raw.is_null() {
                *out_raw.add(i) = raw[i];
            }
            if !out_scores.is_null() {
                *out_scores.add(i) = scores[i];
            }
            if !out_labels.is_null() {
                *out_labels.add(i) = label_code(label_for(scores[i], threshold));
            }
        }
        CwStatus::Ok
    })
}

fn label_code(l: Label) -> i32 {
    match l {
        Label::Normal => CW_LABEL_NORMAL,
        Label::Troll => CW_LABEL_TROLL,
    }
}

/// Streaming engine. Re-clustering runs synchronously inside the call that
/// crosses a boundary; results are queued as JSON lines for [`cw_engine_poll`].
pub struct CwEngine {
    engine: OnlineEngine,
    reclusterer: Reclusterer,
    labels: LabelHandle,
    queue: VecDeque<String>,
    finished: bool,
}

impl CwEngine {
    fn run(&mut self, jobs: Vec<ReclusterJob>) {
        for job in jobs {
            for ev in self.reclusterer.run(&job) {
                self.queue.push_back(ev.to_json());
            }
        }
    }
}

/// Create an engine. `config_toml` may be null for defaults.
///
/// # Safety
/// `config_toml` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cw_engine_new(
    config_toml: *const c_char,
    out: *mut *mut CwEngine,
) -> CwStatus {
    guard(|| {
        need!(out, "out");
        *out = ptr::null_mut();
        let config: EngineConfig = if config_toml.is_null() {
            EngineConfig::default()
        } else {
            let text = tri!(str_arg(config_toml, "config_toml"));
            match toml_config(text) {
                Ok(c) => c,
                Err(e) => return fail(CwStatus::InvalidArgument, e),
            }
        };
        let labels = LabelHandle::new();
        let engine = Box::new(CwEngine {
            engine: OnlineEngine::new(config.clone()),
            reclusterer: Reclusterer::new(config, labels.clone()),
            labels,
            queue: VecDeque::new(),
            finished: false,
        });
        *out = Box::into_raw(engine);
        CwStatus::Ok
    })
}

fn toml_config(text: &str) -> Result<EngineConfig, String> {
    parse_config_str(text, &Default::default()).map_err(|e| e.to_string())
}

/// Destroy an engine. Null is ignored.
///
/// # Safety
/// `engine` must come from [`cw_engine_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cw_engine_free(engine: *mut CwEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

unsafe fn engine_arg<'a>(e: *mut CwEngine) -> Result<&'a mut CwEngine, CwStatus> {
    e.as_mut()
        .ok_or_else(|| fail(CwStatus::NullPointer, "engine is null"))
}

fn live(e: &CwEngine) -> Result<(), CwStatus> {
    if e.finished {
        Err(fail(CwStatus::EngineFinished, "engine already finished"))
    } else {
        Ok(())
    }
}

/// Feed one raw log line. Malformed lines are counted, not rejected.
///
/// # Safety
/// `engine` must be valid; `line` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cw_engine_push_line(
    engine: *mut CwEngine,
    line: *const c_char,
) -> CwStatus {
    guard(|| {
        let e = tri!(engine_arg(engine));
        tri!(live(e));
        need!(line, "line");
        let jobs = e.engine.ingest_bytes(CStr::from_ptr(line).to_bytes());
        e.run(jobs);
        CwStatus::Ok
    })
}

/// Close windows that ended before `now_ms`.
///
/// # Safety
/// `engine` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cw_engine_advance_clock(engine: *mut CwEngine, now_ms: i64) -> CwStatus {
    guard(|| {
        let e = tri!(engine_arg(engine));
        tri!(live(e));
        let jobs = e.engine.advance_clock(now_ms);
        e.run(jobs);
        CwStatus::Ok
    })
}

/// Flush the open window, run the final re-cluster and queue parse stats.
///
/// # Safety
/// `engine` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cw_engine_finish(engine: *mut CwEngine) -> CwStatus {
    guard(|| {
        let e = tri!(engine_arg(engine));
        tri!(live(e));
        let job = e.engine.finish();
        e.run(vec![job]);
        let stats = EngineEvent::ParseStats(e.engine.stats());
        e.queue.push_back(stats.to_json());
        e.finished = true;
        CwStatus::Ok
    })
}

/// Pop the next queued event as a JSON string, or null when none is queued.
///
/// # Safety
/// `engine` must be valid; `out_json` writable. Free the result with
/// [`cw_string_free`].
#[no_mangle]
pub unsafe extern "C" fn cw_engine_poll(
    engine: *mut CwEngine,
    out_json: *mut *mut c_char,
) -> CwStatus {
    guard(|| {
        need!(out_json, "out_json");
        let e = tri!(engine_arg(engine));
        *out_json = match e.queue.pop_front() {
            Some(s) => CString::new(s).expect("JSON has no NUL").into_raw(),
            None => ptr::null_mut(),
        };
        CwStatus::Ok
    })
}

/// Latest published label of `username`, or [`CW_LABEL_UNKNOWN`].
///
/// # Safety
/// `engine` must be valid; `username` NUL-terminated; `out_label` writable.
#[no_mangle]
pub unsafe extern "C" fn cw_engine_label(
    engine: *mut CwEngine,
    username: *const c_char,
    out_label: *mut i32,
) -> CwStatus {
    guard(|| {
        need!(out_label, "out_label");
        let e = tri!(engine_arg(engine));
        let name = tri!(str_arg(username, "username"));
        *out_label = e
            .labels
            .current()
            .label(name)
            .map_or(CW_LABEL_UNKNOWN, label_code);
        CwStatus::Ok
    })
}

/// Number of completed re-clustering epochs.
///
/// # Safety
/// `engine` must be valid; `out_epoch` writable.
#[no_mangle]
pub unsafe extern "C" fn cw_engine_epoch(engine: *mut CwEngine, out_epoch: *mut u64) -> CwStatus {
    guard(|| {
        need!(out_epoch, "out_epoch");
        let e = tri!(engine_arg(engine));
        *out_epoch = e.labels.current().epoch;
        CwStatus::Ok
    })
}
