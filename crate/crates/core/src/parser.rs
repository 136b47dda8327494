//! Log line parsing and message classification.
//!
//! Each record is one line of tag-delimited fields:
//!
//! ```text
//! <date>2014-02-14</date><time>08:16:23</time><user>yeniuss</user><msg>A</msg>
//! ```
//!
//! Tags may appear in any order but each exactly once. The time may carry an
//! optional fractional part (`08:16:23.456`); missing fractions mean `.000`.

use std::fmt;
use std::io::BufRead;

use chrono::{NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The eight game buttons, in lexicographic order of their command names.
///
/// The discriminant order doubles as the goal-ranking tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Button {
    A,
    B,
    Down,
    Left,
    Right,
    Select,
    Start,
    Up,
}

impl Button {
    pub const ALL: [Button; 8] = [
        Button::A,
        Button::B,
        Button::Down,
        Button::Left,
        Button::Right,
        Button::Select,
        Button::Start,
        Button::Up,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Button> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Button::A => "a",
            Button::B => "b",
            Button::Down => "down",
            Button::Left => "left",
            Button::Right => "right",
            Button::Select => "select",
            Button::Start => "start",
            Button::Up => "up",
        }
    }

    pub fn parse(s: &str) -> Option<Button> {
        Self::ALL.iter().copied().find(|b| b.as_str() == s)
    }
}

impl fmt::Display for Button {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Game input mode. Also used as the value of a mode vote.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Anarchy,
    Democracy,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Anarchy => "anarchy",
            Mode::Democracy => "democracy",
        }
    }

    pub fn opposite(self) -> Mode {
        match self {
            Mode::Anarchy => Mode::Democracy,
            Mode::Democracy => Mode::Anarchy,
        }
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageClass {
    Button(Button),
    ModeVote(Mode),
    Spam,
}

impl MessageClass {
    pub fn is_spam(self) -> bool {
        matches!(self, MessageClass::Spam)
    }
}

/// Classify a chat message.
///
/// A message is a command only if, after trimming ASCII whitespace and
/// ASCII case-folding, it equals one of the ten recognized commands.
pub fn classify_message(msg: &str) -> MessageClass {
    let folded = msg.trim_matches(|c: char| c.is_ascii_whitespace());
    // Longest command is "democracy"; anything longer is spam.
    if folded.len() > 9 {
        return MessageClass::Spam;
    }
    let folded = folded.to_ascii_lowercase();
    if let Some(b) = Button::parse(&folded) {
        return MessageClass::Button(b);
    }
    match folded.as_str() {
        "anarchy" => MessageClass::ModeVote(Mode::Anarchy),
        "democracy" => MessageClass::ModeVote(Mode::Democracy),
        _ => MessageClass::Spam,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("missing <{0}> tag")]
    MissingTag(&'static str),
    #[error("duplicate <{0}> tag")]
    DuplicateTag(&'static str),
    #[error("unterminated <{0}> tag")]
    Unterminated(String),
    #[error("unexpected text outside tags at byte {0}")]
    StrayText(usize),
    #[error("invalid date {0:?}")]
    BadDate(String),
    #[error("invalid time {0:?}")]
    BadTime(String),
    #[error("empty username")]
    EmptyUser,
    #[error("line is not valid UTF-8")]
    NotUtf8,
}

/// The four fields of one log line, with date and time already validated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub date: NaiveDate,
    /// Millisecond precision; finer fractions are truncated on parse.
    pub time: NaiveTime,
    pub user: String,
    pub msg: String,
}

impl RawRecord {
    pub fn timestamp_ms(&self) -> i64 {
        NaiveDateTime::new(self.date, self.time)
            .and_utc()
            .timestamp_millis()
    }

    pub fn from_timestamp_ms(ts: i64, user: impl Into<String>, msg: impl Into<String>) -> Self {
        let dt = chrono::DateTime::from_timestamp_millis(ts)
            .expect("timestamp out of range")
            .naive_utc();
        RawRecord {
            date: dt.date(),
            time: dt.time(),
            user: user.into(),
            msg: msg.into(),
        }
    }

    /// Render back to a single log line. Inverse of [`parse_record`].
    pub fn to_line(&self) -> String {
        let ms = self.time.nanosecond() / 1_000_000;
        let time = if ms == 0 {
            self.time.format("%H:%M:%S").to_string()
        } else {
            format!("{}.{:03}", self.time.format("%H:%M:%S"), ms)
        };
        format!(
            "<date>{}</date><time>{}</time><user>{}</user><msg>{}</msg>",
            self.date.format("%Y-%m-%d"),
            time,
            escape(&self.user),
            escape(&self.msg)
        )
    }
}

const TAGS: [&str; 4] = ["date", "time", "user", "msg"];

/// Parse one log line into its four fields.
pub fn parse_record(line: &str) -> Result<RawRecord, ParseError> {
    let line = line.trim_end_matches(['\n', '\r']);
    let mut fields: [Option<&str>; 4] = [None; 4];
    let bytes = line.as_bytes();
    let mut pos = 0;

    while pos < line.len() {
        if bytes[pos].is_ascii_whitespace() {
            pos += 1;
            continue;
        }
        if bytes[pos] != b'<' {
            return Err(ParseError::StrayText(pos));
        }
        let name_end = line[pos..]
            .find('>')
            .map(|i| pos + i)
            .ok_or_else(|| ParseError::Unterminated(line[pos + 1..].to_string()))?;
        let name = &line[pos + 1..name_end];
        let close = format!("</{name}>");
        let body_start = name_end + 1;
        let body_len = line[body_start..]
            .find(&close)
            .ok_or_else(|| ParseError::Unterminated(name.to_string()))?;
        let body = &line[body_start..body_start + body_len];
        pos = body_start + body_len + close.len();

        // Unknown tags are tolerated and ignored.
        if let Some(slot) = TAGS.iter().position(|t| *t == name) {
            if fields[slot].is_some() {
                return Err(ParseError::DuplicateTag(TAGS[slot]));
            }
            fields[slot] = Some(body);
        }
    }

    let [date, time, user, msg] = fields;
    let date = date.ok_or(ParseError::MissingTag("date"))?;
    let time = time.ok_or(ParseError::MissingTag("time"))?;
    let user = user.ok_or(ParseError::MissingTag("user"))?;
    let msg = msg.ok_or(ParseError::MissingTag("msg"))?;

    let date = NaiveDate::parse_from_str(date.trim(), "%Y-%m-%d")
        .map_err(|_| ParseError::BadDate(date.to_string()))?;
    let time = parse_time(time.trim()).ok_or_else(|| ParseError::BadTime(time.to_string()))?;
    let user = unescape(user);
    if user.is_empty() {
        return Err(ParseError::EmptyUser);
    }
    Ok(RawRecord {
        date,
        time,
        user,
        msg: unescape(msg),
    })
}

fn parse_time(s: &str) -> Option<NaiveTime> {
    let (hms, frac) = match s.split_once('.') {
        Some((hms, frac)) => (hms, Some(frac)),
        None => (s, None),
    };
    let mut parts = hms.split(':');
    let h: u32 = parse_digits(parts.next()?, 2)?;
    let m: u32 = parse_digits(parts.next()?, 2)?;
    let sec: u32 = parse_digits(parts.next()?, 2)?;
    if parts.next().is_some() {
        return None;
    }
    let ms = match frac {
        None => 0,
        Some(f) if !f.is_empty() && f.len() <= 9 && f.bytes().all(|b| b.is_ascii_digit()) => {
            // Pad or truncate to exactly three digits.
            let mut digits = [b'0'; 3];
            for (d, b) in digits.iter_mut().zip(f.bytes()) {
                *d = b;
            }
            std::str::from_utf8(&digits).ok()?.parse().ok()?
        }
        Some(_) => return None,
    };
    NaiveTime::from_hms_milli_opt(h, m, sec, ms)
}

fn parse_digits(s: &str, max_len: usize) -> Option<u32> {
    if s.is_empty() || s.len() > max_len || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '\n' => out.push_str("&#10;"),
            '\r' => out.push_str("&#13;"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    if !s.contains('&') {
        return s.to_string();
    }
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find('&') {
        out.push_str(&rest[..i]);
        rest = &rest[i..];
        let mut matched = false;
        for (ent, c) in [
            ("&amp;", '&'),
            ("&lt;", '<'),
            ("&gt;", '>'),
            ("&#10;", '\n'),
            ("&#13;", '\r'),
        ] {
            if rest.starts_with(ent) {
                out.push(c);
                rest = &rest[ent.len()..];
                matched = true;
                break;
            }
        }
        if !matched {
            out.push('&');
            rest = &rest[1..];
        }
    }
    out.push_str(rest);
    out
}

/// One parsed, classified chat message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatEvent {
    pub timestamp_ms: i64,
    pub username: String,
    pub class: MessageClass,
    pub raw_msg: String,
}

impl ChatEvent {
    pub fn new(timestamp_ms: i64, username: impl Into<String>, raw_msg: impl Into<String>) -> Self {
        let raw_msg = raw_msg.into();
        ChatEvent {
            timestamp_ms,
            username: username.into(),
            class: classify_message(&raw_msg),
            raw_msg,
        }
    }

    pub fn from_record(rec: RawRecord) -> Self {
        let ts = rec.timestamp_ms();
        ChatEvent {
            timestamp_ms: ts,
            class: classify_message(&rec.msg),
            username: rec.user,
            raw_msg: rec.msg,
        }
    }

    pub fn to_line(&self) -> String {
        RawRecord::from_timestamp_ms(
            self.timestamp_ms,
            self.username.as_str(),
            self.raw_msg.as_str(),
        )
        .to_line()
    }
}

/// Parse a single line straight to an event.
pub fn parse_event(line: &str) -> Result<ChatEvent, ParseError> {
    parse_record(line).map(ChatEvent::from_record)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseStats {
    pub lines: u64,
    pub malformed: u64,
    pub out_of_order: u64,
}

impl ParseStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("stats serialize")
    }
}

/// Tracks parse statistics over a sequence of lines.
#[derive(Debug, Clone, Default)]
pub struct LineParser {
    stats: ParseStats,
    max_ts: Option<i64>,
}

impl LineParser {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stats(&self) -> ParseStats {
        self.stats
    }

    /// Parse one line, updating counters. Malformed lines yield `None`.
    pub fn feed(&mut self, line: &str) -> Option<ChatEvent> {
        self.stats.lines += 1;
        match parse_event(line) {
            Ok(ev) => {
                self.observe(&ev);
                Some(ev)
            }
            Err(e) => {
                log::debug!("malformed line {}: {e}", self.stats.lines);
                self.stats.malformed += 1;
                None
            }
        }
    }

    pub fn feed_bytes(&mut self, line: &[u8]) -> Option<ChatEvent> {
        match std::str::from_utf8(line) {
            Ok(s) => self.feed(s),
            Err(_) => {
                self.stats.lines += 1;
                self.stats.malformed += 1;
                None
            }
        }
    }

    /// Account for an event that did not come through [`LineParser::feed`].
    pub fn observe(&mut self, ev: &ChatEvent) {
        match self.max_ts {
            Some(m) if ev.timestamp_ms < m => self.stats.out_of_order += 1,
            _ => self.max_ts = Some(ev.timestamp_ms),
        }
    }
}

/// Iterator over the events of a line-oriented source.
///
/// Malformed lines are counted and skipped; I/O errors are yielded.
pub struct EventStream<R> {
    reader: R,
    parser: LineParser,
    buf: Vec<u8>,
}

impl<R: BufRead> EventStream<R> {
    pub fn new(reader: R) -> Self {
        EventStream {
            reader,
            parser: LineParser::new(),
            buf: Vec::with_capacity(256),
        }
    }

    pub fn stats(&self) -> ParseStats {
        self.parser.stats()
    }
}

impl<R: BufRead> Iterator for EventStream<R> {
    type Item = std::io::Result<ChatEvent>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.reader.read_until(b'\n', &mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {
                    let mut line = self.buf.as_slice();
                    if let Some(l) = line.strip_suffix(b"\n") {
                        line = l;
                    }
                    if let Some(l) = line.strip_suffix(b"\r") {
                        line = l;
                    }
                    if let Some(ev) = self.parser.feed_bytes(line) {
                        return Some(Ok(ev));
                    }
                }
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e) => return Some(Err(e)),
            }
        }
    }
}

/// Parse a whole source into events plus statistics.
pub fn parse_stream<R: BufRead>(reader: R) -> std::io::Result<(Vec<ChatEvent>, ParseStats)> {
    let mut stream = EventStream::new(reader);
    let mut events = Vec::new();
    for ev in stream.by_ref() {
        events.push(ev?);
    }
    Ok((events, stream.stats()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_reference_line() {
        let r = parse_record(
            "<date>2014-02-14</date><time>08:16:23</time><user>yeniuss</user><msg>A</msg>",
        )
        .unwrap();
        assert_eq!(r.date, NaiveDate::from_ymd_opt(2014, 2, 14).unwrap());
        assert_eq!(r.time, NaiveTime::from_hms_opt(8, 16, 23).unwrap());
        assert_eq!(r.user, "yeniuss");
        assert_eq!(r.msg, "A");
    }

    #[test]
    fn missing_user_is_malformed() {
        let e = parse_record("<date>2014-02-14</date><time>08:16:23</time><msg>A</msg>");
        assert_eq!(e, Err(ParseError::MissingTag("user")));
    }

    #[test]
    fn millisecond_fraction() {
        let r = parse_record(
            "<date>2014-02-14</date><time>08:16:23.456</time><user>u</user><msg>left</msg>",
        )
        .unwrap();
        // 2014-02-14 is day 16115 after 1970-01-01.
        // 16115 * 86400 + 8 * 3600 + 16 * 60 + 23 = 1392365783 seconds.
        assert_eq!(r.timestamp_ms(), 1_392_365_783_456);
        let whole = parse_record(
            "<date>2014-02-14</date><time>08:16:23</time><user>u</user><msg>left</msg>",
        )
        .unwrap();
        assert_eq!(r.timestamp_ms() - whole.timestamp_ms(), 456);
    }

    #[test]
    fn short_fractions_pad_right() {
        let r = parse_record(
            "<date>2014-02-14</date><time>00:00:00.5</time><user>u</user><msg>x</msg>",
        )
        .unwrap();
        assert_eq!(r.time.nanosecond(), 500_000_000);
    }

    #[test]
    fn tag_order_is_free_but_duplicates_fail() {
        let r = parse_record(
            "<msg>up</msg><user>bob</user><time>01:02:03</time><date>2014-03-01</date>",
        )
        .unwrap();
        assert_eq!(r.user, "bob");
        let e = parse_record(
            "<date>2014-03-01</date><date>2014-03-01</date><time>01:02:03</time><user>b</user><msg>x</msg>",
        );
        assert_eq!(e, Err(ParseError::DuplicateTag("date")));
    }

    #[test]
    fn rejects_bad_fields() {
        let bad = [
            "<date>2014-02-30</date><time>08:16:23</time><user>u</user><msg>A</msg>",
            "<date>2014-02-14</date><time>25:16:23</time><user>u</user><msg>A</msg>",
            "<date>2014-02-14</date><time>08:16</time><user>u</user><msg>A</msg>",
            "<date>2014-02-14</date><time>08:16:23.</time><user>u</user><msg>A</msg>",
            "<date>2014-02-14</date><time>08:16:23</time><user></user><msg>A</msg>",
            "<date>2014-02-14</date><time>08:16:23</time><user>u</user><msg>A",
            "junk <date>2014-02-14</date>",
            "",
        ];
        for line in bad {
            assert!(parse_record(line).is_err(), "{line}");
        }
    }

    #[test]
    fn empty_message_is_spam() {
        let r =
            parse_record("<date>2014-02-14</date><time>08:16:23</time><user>u</user><msg></msg>")
                .unwrap();
        assert_eq!(classify_message(&r.msg), MessageClass::Spam);
    }

    #[test]
    fn classification_examples() {
        assert_eq!(classify_message("A"), MessageClass::Button(Button::A));
        assert_eq!(
            classify_message("anarchy"),
            MessageClass::ModeVote(Mode::Anarchy)
        );
        assert_eq!(classify_message("Praise Helix!"), MessageClass::Spam);
        assert_eq!(classify_message("a a a"), MessageClass::Spam);
        assert_eq!(
            classify_message("  START\t"),
            MessageClass::Button(Button::Start)
        );
        assert_eq!(
            classify_message("DemocracY"),
            MessageClass::ModeVote(Mode::Democracy)
        );
        assert_eq!(classify_message("upp"), MessageClass::Spam);
    }

    #[test]
    fn stream_counts_malformed_and_out_of_order() {
        let log = "\
<date>2014-02-14</date><time>08:16:23</time><user>a</user><msg>up</msg>
garbage
<date>2014-02-14</date><time>08:16:21</time><user>b</user><msg>down</msg>
<date>2014-02-14</date><time>08:16:25</time><user>c</user><msg>hi</msg>
";
        let (events, stats) = parse_stream(log.as_bytes()).unwrap();
        assert_eq!(events.len(), 3);
        assert_eq!(
            stats,
            ParseStats {
                lines: 4,
                malformed: 1,
                out_of_order: 1
            }
        );
        assert_eq!(
            stats.to_json(),
            r#"{"lines":4,"malformed":1,"out_of_order":1}"#
        );
    }

    #[test]
    fn invalid_utf8_counts_as_malformed() {
        let mut data =
            b"<date>2014-02-14</date><time>08:16:23</time><user>a</user><msg>up</msg>\n".to_vec();
        data.extend_from_slice(b"\xff\xfe\n");
        let (events, stats) = parse_stream(data.as_slice()).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(stats.malformed, 1);
    }

    fn render_variants(cmd: &str) -> Vec<String> {
        let upper = cmd.to_ascii_uppercase();
        let mut title = cmd.to_string();
        title[..1].make_ascii_uppercase();
        vec![
            cmd.to_string(),
            upper,
            title,
            format!("  {cmd} "),
            format!("\t{cmd}\r\n"),
        ]
    }

    #[test]
    fn every_command_recovers_under_case_variants() {
        for b in Button::ALL {
            for v in render_variants(b.as_str()) {
                assert_eq!(classify_message(&v), MessageClass::Button(b), "{v:?}");
            }
        }
        for m in [Mode::Anarchy, Mode::Democracy] {
            for v in render_variants(m.as_str()) {
                assert_eq!(classify_message(&v), MessageClass::ModeVote(m), "{v:?}");
            }
        }
    }

    fn arb_record() -> impl Strategy<Value = RawRecord> {
        (0i64..4_000_000_000_000, "[^\\x00]{1,12}", "(?s).{0,24}")
            .prop_map(|(ts, user, msg)| RawRecord::from_timestamp_ms(ts, user, msg))
    }

    proptest! {
        #[test]
        fn record_round_trip(rec in arb_record()) {
            let line = rec.to_line();
            prop_assert!(!line.contains('\n'));
            prop_assert_eq!(parse_record(&line).unwrap(), rec);
        }

        #[test]
        fn event_count_matches_lines_minus_malformed(lines in prop::collection::vec(
            prop_oneof![
                arb_record().prop_map(|r| r.to_line()),
                "[a-z<>/ ]{0,30}",
            ], 0..40)) {
            let text = lines.join("\n");
            let (events, stats) = parse_stream(text.as_bytes()).unwrap();
            prop_assert_eq!(events.len() as u64, stats.lines - stats.malformed);
        }

        #[test]
        fn classify_is_total(s in "(?s).{0,20}") {
            let c = classify_message(&s);
            prop_assert_eq!(c, classify_message(&s));
        }
    }
}
