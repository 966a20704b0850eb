//! The whiteboard hub: topic-based publish/subscribe with a per-key
//! last-value store.
//!
//! [`Hub`] is a pure state machine. Every mutation goes through `&mut self`,
//! so whoever owns it (the virtual-time scheduler or the socket server's
//! dispatcher thread) serializes all SET/PUB/GET into one total order.
//! Frames addressed to clients accumulate in an outbox drained by the owner.

pub mod client;
pub mod frame;
pub mod local;
pub mod server;

use std::collections::BTreeMap;

pub use frame::{
    encode_frame, parse_frame, Command, Frame, MalformedFrame, Pattern, Payload, Telemetry, Topic,
};

pub type ConnId = u32;

/// One timestamped, sequenced telemetry sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub topic: Topic,
    pub value: Payload,
    pub source_ts: u64,
    pub seq: u64,
    pub source_id: String,
}

impl Measurement {
    pub fn new(topic: Topic, value: Payload, source_ts: u64, seq: u64, source_id: &str) -> Self {
        Self {
            topic,
            value,
            source_ts,
            seq,
            source_id: source_id.to_string(),
        }
    }

    /// Rebuilds a measurement from wire form. The wire carries no source id;
    /// topics are namespaced by component, so the root segment stands in.
    pub fn from_wire(t: Telemetry) -> Self {
        let source_id = t.topic.root().to_string();
        Self {
            topic: t.topic,
            value: t.value,
            source_ts: t.ts_us,
            seq: t.seq,
            source_id,
        }
    }

    pub fn to_wire(&self) -> Telemetry {
        Telemetry::new(self.topic.clone(), self.seq, self.source_ts, self.value.clone())
    }
}

#[derive(Debug, Clone, Default)]
pub struct KeyState {
    pub last: Option<Measurement>,
}

#[derive(Debug)]
struct Connection {
    name: String,
    // Registration order is delivery order for this connection.
    patterns: Vec<Pattern>,
}

#[derive(Debug, Default)]
pub struct Hub {
    keys: BTreeMap<Topic, KeyState>,
    conns: BTreeMap<ConnId, Connection>,
    next_conn: ConnId,
    outbox: Vec<(ConnId, Frame)>,
}

impl Hub {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn connect(&mut self, name: &str) -> ConnId {
        let id = self.next_conn;
        self.next_conn += 1;
        self.conns.insert(
            id,
            Connection {
                name: name.to_string(),
                patterns: Vec::new(),
            },
        );
        id
    }

    pub fn disconnect(&mut self, conn: ConnId) {
        self.conns.remove(&conn);
        self.outbox.retain(|(c, _)| *c != conn);
    }

    pub fn connection_name(&self, conn: ConnId) -> Option<&str> {
        self.conns.get(&conn).map(|c| c.name.as_str())
    }

    /// Stores `m` as the last value of `key` and fans it out to matching
    /// subscribers.
    pub fn set(&mut self, key: &Topic, m: Measurement) {
        self.store_and_fanout(key, m);
    }

    pub fn get(&self, key: &Topic) -> Option<&Measurement> {
        self.keys.get(key).and_then(|k| k.last.as_ref())
    }

    /// Returns the number of subscriptions the measurement was delivered to.
    pub fn publish(&mut self, topic: &Topic, m: Measurement) -> usize {
        self.store_and_fanout(topic, m)
    }

    /// Returns false if the connection already held this exact pattern.
    pub fn subscribe(&mut self, conn: ConnId, pattern: Pattern) -> bool {
        let Some(c) = self.conns.get_mut(&conn) else {
            return false;
        };
        if c.patterns.contains(&pattern) {
            return false;
        }
        c.patterns.push(pattern);
        true
    }

    pub fn unsubscribe(&mut self, conn: ConnId, pattern: &Pattern) -> bool {
        let Some(c) = self.conns.get_mut(&conn) else {
            return false;
        };
        let before = c.patterns.len();
        c.patterns.retain(|p| p != pattern);
        c.patterns.len() != before
    }

    pub fn subscription_count(&self) -> usize {
        self.conns.values().map(|c| c.patterns.len()).sum()
    }

    fn store_and_fanout(&mut self, topic: &Topic, m: Measurement) -> usize {
        let wire = m.to_wire();
        let mut count = 0;
        for (id, conn) in &self.conns {
            for pattern in &conn.patterns {
                if pattern.matches(topic) {
                    self.outbox.push((*id, Frame::Msg(wire.clone())));
                    count += 1;
                }
            }
        }
        self.keys.entry(topic.clone()).or_default().last = Some(m);
        count
    }

    /// Applies one client frame; replies and fanout land in the outbox.
    pub fn handle_frame(&mut self, conn: ConnId, frame: Frame, now_us: u64) {
        let source = self
            .conns
            .get(&conn)
            .map(|c| c.name.clone())
            .unwrap_or_default();
        let reply = match frame {
            Frame::Set(t) => {
                let topic = t.topic.clone();
                let m = Measurement::new(t.topic, t.value, t.ts_us, t.seq, &source);
                self.set(&topic, m);
                Frame::Ok(None)
            }
            Frame::Pub(t) => {
                let topic = t.topic.clone();
                let m = Measurement::new(t.topic, t.value, t.ts_us, t.seq, &source);
                let n = self.publish(&topic, m);
                Frame::Ok(Some(n as u64))
            }
            Frame::Get(topic) => match self.get(&topic) {
                Some(m) => Frame::Msg(m.to_wire()),
                None => Frame::error("nokey"),
            },
            Frame::Sub(p) => {
                self.subscribe(conn, p);
                Frame::Ok(None)
            }
            Frame::Unsub(p) => {
                self.unsubscribe(conn, &p);
                Frame::Ok(None)
            }
            Frame::Ping => Frame::Pong { ts_us: now_us },
            Frame::Pong { .. } | Frame::Ok(_) | Frame::Err(_) | Frame::Msg(_) => {
                Frame::error("badcmd")
            }
        };
        if self.conns.contains_key(&conn) {
            self.outbox.push((conn, reply));
        }
    }

    /// Parses and applies one raw line; malformed input is answered with
    /// `ERR malformed` and the connection stays usable.
    pub fn handle_line(&mut self, conn: ConnId, line: &[u8], now_us: u64) {
        match parse_frame(line) {
            Ok(frame) => self.handle_frame(conn, frame, now_us),
            Err(_) => {
                if self.conns.contains_key(&conn) {
                    self.outbox.push((conn, Frame::error("malformed")));
                }
            }
        }
    }

    pub fn drain_outbox(&mut self) -> Vec<(ConnId, Frame)> {
        std::mem::take(&mut self.outbox)
    }
}
