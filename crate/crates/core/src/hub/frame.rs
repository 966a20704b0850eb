//! Line protocol spoken between the hub and its clients.
//!
//! One UTF-8 line per frame, fields separated by a single space:
//!
//! ```text
//! SET <topic> <seq> <ts_us> <value>      -> OK
//! GET <topic>                            -> MSG <topic> <seq> <ts_us> <value> | ERR nokey
//! PUB <topic> <seq> <ts_us> <value>      -> OK <count>
//! SUB <pattern> / UNSUB <pattern>        -> OK
//! PING                                   -> PONG <server_ts_us>
//! ```
//!
//! A value is either a finite decimal float or a double-quoted string in which
//! only `"` and `\` are escaped. The canonical encoding renders floats in their
//! shortest round-trip form, so `encode(parse(line)) == line` for every line
//! already in canonical form.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Upper bound on a single frame, newline included.
pub const MAX_FRAME_LEN: usize = 4096;
/// Upper bound on a topic or pattern, in bytes.
pub const MAX_TOPIC_LEN: usize = 256;
/// Upper bound on an unescaped text payload, in bytes.
pub const MAX_TEXT_LEN: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed frame: {reason}")]
pub struct MalformedFrame {
    pub reason: String,
}

impl MalformedFrame {
    fn new(reason: impl Into<String>) -> Self {
        Self {
            reason: reason.into(),
        }
    }
}

fn valid_segment(seg: &str) -> bool {
    !seg.is_empty()
        && seg
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

fn check_path(s: &str, wildcards: bool) -> Result<(), MalformedFrame> {
    if s.is_empty() || s.len() > MAX_TOPIC_LEN {
        return Err(MalformedFrame::new("topic length"));
    }
    for seg in s.split('/') {
        if !(valid_segment(seg) || (wildcards && seg == "*")) {
            return Err(MalformedFrame::new(format!("bad topic segment {seg:?}")));
        }
    }
    Ok(())
}

/// A concrete hierarchical topic such as `prismes/pv/power`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Topic(String);

impl Topic {
    pub fn new(s: impl Into<String>) -> Result<Self, MalformedFrame> {
        let s = s.into();
        check_path(&s, false)?;
        Ok(Self(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }

    /// First path segment, used as the namespace of the emitting component.
    pub fn root(&self) -> &str {
        self.0.split('/').next().unwrap_or_default()
    }
}

impl FromStr for Topic {
    type Err = MalformedFrame;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Topic::new(s)
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A subscription pattern. A `*` segment matches exactly one topic segment.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pattern(String);

impl Pattern {
    pub fn new(s: impl Into<String>) -> Result<Self, MalformedFrame> {
        let s = s.into();
        check_path(&s, true)?;
        Ok(Self(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn matches(&self, topic: &Topic) -> bool {
        let mut pat = self.0.split('/');
        let mut top = topic.segments();
        loop {
            match (pat.next(), top.next()) {
                (None, None) => return true,
                (Some(p), Some(t)) if p == "*" || p == t => continue,
                _ => return false,
            }
        }
    }
}

impl From<Topic> for Pattern {
    fn from(t: Topic) -> Self {
        Pattern(t.0)
    }
}

impl FromStr for Pattern {
    type Err = MalformedFrame;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Pattern::new(s)
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Value carried by SET/PUB/MSG frames.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Num(f64),
    Text(String),
}

impl Payload {
    pub fn num(v: f64) -> Result<Self, MalformedFrame> {
        if v.is_finite() {
            Ok(Payload::Num(v))
        } else {
            Err(MalformedFrame::new("non-finite value"))
        }
    }

    pub fn text(s: impl Into<String>) -> Result<Self, MalformedFrame> {
        let s = s.into();
        if s.len() > MAX_TEXT_LEN || s.chars().any(char::is_control) {
            return Err(MalformedFrame::new("bad text payload"));
        }
        Ok(Payload::Text(s))
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Payload::Num(v) => Some(*v),
            Payload::Text(_) => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Payload::Text(s) => Some(s),
            Payload::Num(_) => None,
        }
    }

    fn parse(s: &str) -> Result<Self, MalformedFrame> {
        if let Some(body) = s.strip_prefix('"') {
            let body = body
                .strip_suffix('"')
                .ok_or_else(|| MalformedFrame::new("unterminated string"))?;
            let mut out = String::with_capacity(body.len());
            let mut chars = body.chars();
            while let Some(c) = chars.next() {
                match c {
                    '\\' => match chars.next() {
                        Some(e @ ('"' | '\\')) => out.push(e),
                        _ => return Err(MalformedFrame::new("bad escape")),
                    },
                    '"' => return Err(MalformedFrame::new("unescaped quote")),
                    c => out.push(c),
                }
            }
            Payload::text(out)
        } else {
            let looks_numeric = !s.is_empty()
                && s.bytes()
                    .all(|b| b.is_ascii_digit() || matches!(b, b'-' | b'+' | b'.' | b'e' | b'E'));
            if !looks_numeric {
                return Err(MalformedFrame::new("non-numeric value"));
            }
            let v: f64 = s
                .parse()
                .map_err(|_| MalformedFrame::new("non-numeric value"))?;
            Payload::num(v)
        }
    }
}

impl fmt::Display for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            // `Display` for f64 is the shortest representation that round-trips.
            Payload::Num(v) => write!(f, "{v}"),
            Payload::Text(s) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    if c == '"' || c == '\\' {
                        f.write_str("\\")?;
                    }
                    write!(f, "{c}")?;
                }
                f.write_str("\"")
            }
        }
    }
}

/// The `<topic> <seq> <ts_us> <value>` body shared by SET, PUB and MSG.
#[derive(Debug, Clone, PartialEq)]
pub struct Telemetry {
    pub topic: Topic,
    pub seq: u64,
    pub ts_us: u64,
    pub value: Payload,
}

impl Telemetry {
    pub fn new(topic: Topic, seq: u64, ts_us: u64, value: Payload) -> Self {
        Self {
            topic,
            seq,
            ts_us,
            value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Command {
    Set,
    Get,
    Pub,
    Sub,
    Unsub,
    Ping,
    Ok,
    Err,
    Msg,
    Pong,
}

impl Command {
    pub fn keyword(self) -> &'static str {
        match self {
            Command::Set => "SET",
            Command::Get => "GET",
            Command::Pub => "PUB",
            Command::Sub => "SUB",
            Command::Unsub => "UNSUB",
            Command::Ping => "PING",
            Command::Ok => "OK",
            Command::Err => "ERR",
            Command::Msg => "MSG",
            Command::Pong => "PONG",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Set(Telemetry),
    Get(Topic),
    Pub(Telemetry),
    Sub(Pattern),
    Unsub(Pattern),
    Ping,
    Pong { ts_us: u64 },
    /// `OK`, or `OK <count>` in reply to PUB.
    Ok(Option<u64>),
    /// Error reason is a single `[A-Za-z0-9_-]+` token.
    Err(String),
    Msg(Telemetry),
}

impl Frame {
    pub fn command(&self) -> Command {
        match self {
            Frame::Set(_) => Command::Set,
            Frame::Get(_) => Command::Get,
            Frame::Pub(_) => Command::Pub,
            Frame::Sub(_) => Command::Sub,
            Frame::Unsub(_) => Command::Unsub,
            Frame::Ping => Command::Ping,
            Frame::Pong { .. } => Command::Pong,
            Frame::Ok(_) => Command::Ok,
            Frame::Err(_) => Command::Err,
            Frame::Msg(_) => Command::Msg,
        }
    }

    pub fn error(reason: &str) -> Frame {
        debug_assert!(valid_segment(reason));
        Frame::Err(reason.to_string())
    }

    pub fn topic(&self) -> Option<&str> {
        match self {
            Frame::Set(t) | Frame::Pub(t) | Frame::Msg(t) => Some(t.topic.as_str()),
            Frame::Get(t) => Some(t.as_str()),
            Frame::Sub(p) | Frame::Unsub(p) => Some(p.as_str()),
            _ => None,
        }
    }
}

fn parse_u64(s: &str, what: &str) -> Result<u64, MalformedFrame> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(MalformedFrame::new(format!("non-numeric {what}")));
    }
    s.parse()
        .map_err(|_| MalformedFrame::new(format!("{what} out of range")))
}

fn parse_telemetry(rest: &str) -> Result<Telemetry, MalformedFrame> {
    let mut it = rest.splitn(4, ' ');
    let (Some(topic), Some(seq), Some(ts), Some(value)) = (it.next(), it.next(), it.next(), it.next())
    else {
        return Err(MalformedFrame::new("missing fields"));
    };
    Ok(Telemetry {
        topic: Topic::new(topic)?,
        seq: parse_u64(seq, "seq")?,
        ts_us: parse_u64(ts, "timestamp")?,
        value: Payload::parse(value)?,
    })
}

/// Parses one newline-terminated line into a [`Frame`].
pub fn parse_frame(bytes: &[u8]) -> Result<Frame, MalformedFrame> {
    if bytes.len() > MAX_FRAME_LEN {
        return Err(MalformedFrame::new("frame too long"));
    }
    let line = bytes
        .strip_suffix(b"\n")
        .ok_or_else(|| MalformedFrame::new("missing newline"))?;
    let line = std::str::from_utf8(line).map_err(|_| MalformedFrame::new("invalid utf-8"))?;
    if line.contains('\n') {
        return Err(MalformedFrame::new("embedded newline"));
    }
    let (keyword, rest) = match line.split_once(' ') {
        Some((k, r)) => (k, Some(r)),
        None => (line, None),
    };
    fn single(rest: Option<&str>) -> Result<&str, MalformedFrame> {
        match rest {
            Some(r) if !r.contains(' ') => Ok(r),
            _ => Err(MalformedFrame::new("expected exactly one argument")),
        }
    }
    match keyword {
        "SET" => Ok(Frame::Set(parse_telemetry(rest.unwrap_or_default())?)),
        "PUB" => Ok(Frame::Pub(parse_telemetry(rest.unwrap_or_default())?)),
        "MSG" => Ok(Frame::Msg(parse_telemetry(rest.unwrap_or_default())?)),
        "GET" => Ok(Frame::Get(Topic::new(single(rest)?)?)),
        "SUB" => Ok(Frame::Sub(Pattern::new(single(rest)?)?)),
        "UNSUB" => Ok(Frame::Unsub(Pattern::new(single(rest)?)?)),
        "PING" if rest.is_none() => Ok(Frame::Ping),
        "PONG" => Ok(Frame::Pong {
            ts_us: parse_u64(single(rest)?, "timestamp")?,
        }),
        "OK" => match rest {
            None => Ok(Frame::Ok(None)),
            Some(r) => Ok(Frame::Ok(Some(parse_u64(single(Some(r))?, "count")?))),
        },
        "ERR" => {
            let reason = single(rest)?;
            if !valid_segment(reason) {
                return Err(MalformedFrame::new("bad error token"));
            }
            Ok(Frame::Err(reason.to_string()))
        }
        _ => Err(MalformedFrame::new("unknown command")),
    }
}

impl fmt::Display for Frame {
    /// Canonical encoding without the trailing newline.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kw = self.command().keyword();
        match self {
            Frame::Set(t) | Frame::Pub(t) | Frame::Msg(t) => {
                write!(f, "{kw} {} {} {} {}", t.topic, t.seq, t.ts_us, t.value)
            }
            Frame::Get(t) => write!(f, "{kw} {t}"),
            Frame::Sub(p) | Frame::Unsub(p) => write!(f, "{kw} {p}"),
            Frame::Ping | Frame::Ok(None) => f.write_str(kw),
            Frame::Pong { ts_us } => write!(f, "{kw} {ts_us}"),
            Frame::Ok(Some(n)) => write!(f, "{kw} {n}"),
            Frame::Err(reason) => write!(f, "{kw} {reason}"),
        }
    }
}

/// Canonical single-line encoding, newline included.
pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let mut s = frame.to_string();
    s.push('\n');
    s.into_bytes()
}
