//! In-process hub access in virtual time, with an emulated link on each
//! direction of every connection.
//!
//! Frames are applied at the hub the moment they arrive, so callers must
//! drive time forward monotonically. The full experiment uses the event
//! scheduler instead; this wrapper backs tests and latency probes.

use std::collections::BTreeMap;

use thiserror::Error;

use super::{ConnId, Frame, Hub, Measurement};
use crate::netem::{DelayModel, LatencyStats, Link};

/// Default probe timeout, in microseconds.
pub const DEFAULT_PING_TIMEOUT_US: u64 = 5_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum PingError {
    #[error("no PONG within {timeout_us} us (rtt would be {rtt_us} us)")]
    Timeout { timeout_us: u64, rtt_us: u64 },
    #[error("unexpected reply to PING: {0}")]
    UnexpectedReply(String),
}

struct LocalConn {
    up: Link,
    down: Link,
    mailbox: Vec<(u64, Frame)>,
}

pub struct LocalHub {
    hub: Hub,
    conns: BTreeMap<ConnId, LocalConn>,
}

impl Default for LocalHub {
    fn default() -> Self {
        Self::new()
    }
}

impl LocalHub {
    pub fn new() -> Self {
        Self {
            hub: Hub::new(),
            conns: BTreeMap::new(),
        }
    }

    pub fn hub(&self) -> &Hub {
        &self.hub
    }

    pub fn connect(&mut self, name: &str, up: DelayModel, down: DelayModel) -> ConnId {
        let id = self.hub.connect(name);
        self.conns.insert(
            id,
            LocalConn {
                up: Link::new(up),
                down: Link::new(down),
                mailbox: Vec::new(),
            },
        );
        id
    }

    /// Sends `frame` at `now_us`; returns when it reached the hub.
    pub fn send(&mut self, conn: ConnId, frame: Frame, now_us: u64) -> u64 {
        let conn_state = self.conns.get_mut(&conn).expect("unknown local connection");
        let at_hub = conn_state.up.deliver(now_us);
        self.hub.handle_frame(conn, frame, at_hub);
        for (to, f) in self.hub.drain_outbox() {
            if let Some(c) = self.conns.get_mut(&to) {
                let arrival = c.down.deliver(at_hub);
                c.mailbox.push((arrival, f));
            }
        }
        at_hub
    }

    /// Drains every frame delivered to `conn`, ordered by arrival time.
    pub fn recv(&mut self, conn: ConnId) -> Vec<(u64, Frame)> {
        let Some(c) = self.conns.get_mut(&conn) else {
            return Vec::new();
        };
        let mut out = std::mem::take(&mut c.mailbox);
        out.sort_by_key(|(t, _)| *t);
        out
    }

    /// Drains delivered MSG frames as measurements; replies are discarded.
    pub fn messages(&mut self, conn: ConnId) -> Vec<Measurement> {
        self.recv(conn)
            .into_iter()
            .filter_map(|(_, f)| match f {
                Frame::Msg(t) => Some(Measurement::from_wire(t)),
                _ => None,
            })
            .collect()
    }

    /// Round trip of one PING issued at `now_us`, on the caller's clock.
    pub fn ping(&mut self, conn: ConnId, now_us: u64, timeout_us: u64) -> Result<u64, PingError> {
        self.send(conn, Frame::Ping, now_us);
        let c = self.conns.get_mut(&conn).expect("unknown local connection");
        let pos = c
            .mailbox
            .iter()
            .rposition(|(_, f)| matches!(f, Frame::Pong { .. }));
        let Some(pos) = pos else {
            let last = c.mailbox.last().map(|(_, f)| f.to_string()).unwrap_or_default();
            return Err(PingError::UnexpectedReply(last));
        };
        let (arrival, _) = c.mailbox.remove(pos);
        let rtt = arrival - now_us;
        if rtt > timeout_us {
            return Err(PingError::Timeout {
                timeout_us,
                rtt_us: rtt,
            });
        }
        Ok(rtt)
    }

    pub fn link_stats(&self, conn: ConnId) -> Option<(LatencyStats, LatencyStats)> {
        self.conns
            .get(&conn)
            .map(|c| (c.up.stats(), c.down.stats()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hub::{Pattern, Payload, Telemetry, Topic};
    use crate::netem::LinkMode;

    #[test]
    fn deterministic_rtt_is_twice_one_way() {
        let mut lh = LocalHub::new();
        let fixed = DelayModel::fixed(32.0, LinkMode::Stream);
        let c = lh.connect("probe", fixed.clone(), fixed);
        assert_eq!(lh.ping(c, 0, DEFAULT_PING_TIMEOUT_US), Ok(64_000));
        assert_eq!(lh.ping(c, 1_000_000, DEFAULT_PING_TIMEOUT_US), Ok(64_000));
    }

    #[test]
    fn zero_delay_rtt_is_zero() {
        let mut lh = LocalHub::new();
        let c = lh.connect("probe", DelayModel::zero(), DelayModel::zero());
        assert_eq!(lh.ping(c, 42, DEFAULT_PING_TIMEOUT_US), Ok(0));
    }

    #[test]
    fn slow_link_times_out() {
        let mut lh = LocalHub::new();
        let slow = DelayModel::fixed(3_000.0, LinkMode::Stream);
        let c = lh.connect("probe", slow.clone(), slow);
        assert!(matches!(
            lh.ping(c, 0, DEFAULT_PING_TIMEOUT_US),
            Err(PingError::Timeout { rtt_us: 6_000_000, .. })
        ));
    }

    #[test]
    fn subscriber_receives_over_links() {
        let mut lh = LocalHub::new();
        let fixed = DelayModel::fixed(32.0, LinkMode::Stream);
        let publisher = lh.connect("gw", fixed.clone(), fixed);
        let sub = lh.connect("sim", DelayModel::zero(), DelayModel::fixed(1.0, LinkMode::Stream));
        lh.send(sub, Frame::Sub(Pattern::new("prismes/*/power").unwrap()), 0);
        lh.recv(sub);
        let t = Telemetry::new(
            Topic::new("prismes/pv/power").unwrap(),
            1,
            0,
            Payload::Num(3512.5),
        );
        lh.send(publisher, Frame::Pub(t.clone()), 0);
        assert_eq!(lh.recv(publisher), vec![(64_000, Frame::Ok(Some(1)))]);
        assert_eq!(lh.recv(sub), vec![(33_000, Frame::Msg(t))]);
    }
}
