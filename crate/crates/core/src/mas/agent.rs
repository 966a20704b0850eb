//! One secondary-control agent per storage unit.
//!
//! Every frequency measurement starts a control cycle. Within a cycle the
//! agent runs synchronous consensus rounds with its neighbors: it publishes
//! `round:x`, waits for every neighbor's value of the same round, mixes, and
//! repeats. A neighbor whose own change stayed below `eps` for `r` rounds
//! (visible from the values it sent) has stopped; its last value is reused.
//! On local convergence the agent shifts its droop setpoint by `k_s * x` and
//! publishes it if it changed.

use std::collections::BTreeMap;

use log::{debug, warn};

use crate::hub::{Frame, Pattern, Payload, Telemetry, Topic};
use crate::microgrid::{ess_setpoint_topic, freq_topic};
use crate::node::{Node, NodeError, NodeIo, PeerId};

use super::graph::{AgentGraph, ConvergenceCriterion};
use super::MasError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    /// One PUB per round; neighbors subscribe to each other's topics.
    Hub,
    /// One frame per neighbor on a point-to-point channel.
    Direct,
}

impl Transport {
    pub fn as_str(self) -> &'static str {
        match self {
            Transport::Hub => "hub",
            Transport::Direct => "direct",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentConfig {
    pub crit: ConvergenceCriterion,
    pub k_s: f64,
    pub f_nom: f64,
    pub transport: Transport,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            crit: ConvergenceCriterion::default(),
            k_s: 1.0,
            f_nom: 50.0,
            transport: Transport::Hub,
        }
    }
}

/// `agents/<i>/x`, 1-based.
pub fn x_topic(index: usize) -> Topic {
    Topic::new(format!("agents/{}/x", index + 1)).expect("static topic")
}

fn parse_x_topic(t: &Topic) -> Option<usize> {
    let segs: Vec<&str> = t.segments().collect();
    match segs.as_slice() {
        ["agents", i, "x"] => i.parse::<usize>().ok().filter(|i| *i >= 1).map(|i| i - 1),
        _ => None,
    }
}

pub fn encode_round(round: u64, x: f64) -> String {
    format!("{round}:{x}")
}

pub fn decode_round(s: &str) -> Option<(u64, f64)> {
    let (r, x) = s.split_once(':')?;
    let x: f64 = x.parse().ok()?;
    x.is_finite().then_some(())?;
    Some((r.parse().ok()?, x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CycleOutcome {
    Converged,
    Aborted,
    NoConvergence,
}

impl CycleOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            CycleOutcome::Converged => "converged",
            CycleOutcome::Aborted => "aborted",
            CycleOutcome::NoConvergence => "no_convergence",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusEvent {
    pub agent: usize,
    pub cycle_us: u64,
    pub start_us: u64,
    pub end_us: u64,
    pub rounds: u64,
    pub x: f64,
    pub u: f64,
    pub outcome: CycleOutcome,
}

#[derive(Debug, Default)]
struct NeighborView {
    values: BTreeMap<u64, f64>,
    scanned: Option<u64>,
    small: u32,
    done_at: Option<u64>,
}

impl NeighborView {
    /// Replays the neighbor's own convergence test over its contiguous
    /// prefix of received values.
    fn refresh(&mut self, crit: &ConvergenceCriterion) {
        if self.scanned.is_none() && self.values.contains_key(&0) {
            self.scanned = Some(0);
        }
        while let Some(s) = self.scanned {
            if self.done_at.is_some() {
                break;
            }
            let (Some(prev), Some(next)) = (self.values.get(&s), self.values.get(&(s + 1))) else {
                break;
            };
            self.small = if (next - prev).abs() < crit.eps { self.small + 1 } else { 0 };
            self.scanned = Some(s + 1);
            if self.small >= crit.r {
                self.done_at = Some(s + 1);
            }
        }
    }

    fn value_for(&self, round: u64) -> Option<f64> {
        if let Some(v) = self.values.get(&round) {
            return Some(*v);
        }
        match self.done_at {
            Some(k) if k < round => self.values.get(&k).copied(),
            _ => None,
        }
    }
}

struct Cycle {
    id: u64,
    start_us: u64,
    round: u64,
    xs: Vec<f64>,
    small: u32,
    views: BTreeMap<usize, NeighborView>,
    finished: bool,
}

pub struct AgentNode {
    index: usize,
    neighbors: Vec<usize>,
    self_weight: f64,
    weights: BTreeMap<usize, f64>,
    cfg: AgentConfig,
    u: f64,
    cycle: Option<Cycle>,
    /// Messages for cycles not started here yet: (cycle, from, round, x).
    early: Vec<(u64, usize, u64, f64)>,
    x_seq: u64,
    u_seq: u64,
    stale: u64,
    setpoints_sent: u64,
    events: Vec<ConsensusEvent>,
}

impl AgentNode {
    pub fn new(index: usize, graph: &AgentGraph, cfg: AgentConfig) -> Result<Self, MasError> {
        cfg.crit.validate()?;
        if index >= graph.n() {
            return Err(MasError::InvalidGraph(format!("agent {index} not in graph of {}", graph.n())));
        }
        let neighbors = graph.neighbors(index);
        let row = &graph.weights()[index];
        Ok(Self {
            index,
            weights: neighbors.iter().map(|&j| (j, row[j])).collect(),
            neighbors,
            self_weight: row[index],
            cfg,
            u: 0.0,
            cycle: None,
            early: Vec::new(),
            x_seq: 0,
            u_seq: 0,
            stale: 0,
            setpoints_sent: 0,
            events: Vec::new(),
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn u(&self) -> f64 {
        self.u
    }

    /// Messages dropped because their cycle or round had already passed.
    pub fn stale_rounds(&self) -> u64 {
        self.stale
    }

    pub fn setpoints_sent(&self) -> u64 {
        self.setpoints_sent
    }

    pub fn events(&self) -> &[ConsensusEvent] {
        &self.events
    }

    /// Values `x(0), x(1), ...` of the current or last cycle.
    pub fn x_history(&self) -> &[f64] {
        self.cycle.as_ref().map_or(&[], |c| c.xs.as_slice())
    }

    /// Starts a cycle from an explicit initial value. An unfinished cycle
    /// is abandoned.
    pub fn begin_cycle(&mut self, cycle_id: u64, x0: f64, now_us: u64, io: &mut NodeIo) {
        if let Some(c) = &self.cycle {
            if !c.finished {
                self.log(now_us, CycleOutcome::Aborted);
            }
        }
        let mut views: BTreeMap<usize, NeighborView> =
            self.neighbors.iter().map(|&j| (j, NeighborView::default())).collect();
        let early = std::mem::take(&mut self.early);
        for (cyc, from, round, x) in early {
            if cyc == cycle_id {
                if let Some(v) = views.get_mut(&from) {
                    v.values.insert(round, x);
                }
            } else if cyc > cycle_id {
                self.early.push((cyc, from, round, x));
            } else {
                self.stale += 1;
            }
        }
        self.cycle = Some(Cycle {
            id: cycle_id,
            start_us: now_us,
            round: 0,
            xs: vec![x0],
            small: 0,
            views,
            finished: false,
        });
        self.send_x(0, x0, cycle_id, io);
        self.advance(now_us, io);
    }

    fn send_x(&mut self, round: u64, x: f64, cycle_id: u64, io: &mut NodeIo) {
        self.x_seq += 1;
        let payload = Payload::text(encode_round(round, x)).expect("short payload");
        let t = Telemetry::new(x_topic(self.index), self.x_seq, cycle_id, payload);
        match self.cfg.transport {
            Transport::Hub => io.to_hub.push(Frame::Pub(t)),
            Transport::Direct => {
                for &j in &self.neighbors {
                    io.to_peers.push((j as PeerId, Frame::Msg(t.clone())));
                }
            }
        }
    }

    fn log(&mut self, now_us: u64, outcome: CycleOutcome) {
        let c = self.cycle.as_ref().expect("logging needs a cycle");
        self.events.push(ConsensusEvent {
            agent: self.index,
            cycle_us: c.id,
            start_us: c.start_us,
            end_us: now_us,
            rounds: c.round,
            x: *c.xs.last().expect("x(0) always present"),
            u: self.u,
            outcome,
        });
    }

    /// Runs as many rounds as the received values allow.
    fn advance(&mut self, now_us: u64, io: &mut NodeIo) {
        let crit = self.cfg.crit;
        loop {
            let Some(c) = self.cycle.as_mut() else { return };
            if c.finished {
                return;
            }
            let k = c.round;
            let x = *c.xs.last().expect("x(0) always present");
            let mut next = self.self_weight * x;
            for (j, view) in c.views.iter_mut() {
                view.refresh(&crit);
                match view.value_for(k) {
                    Some(v) => next += self.weights[j] * v,
                    None => return,
                }
            }
            c.small = if (next - x).abs() < crit.eps { c.small + 1 } else { 0 };
            c.round = k + 1;
            c.xs.push(next);
            let (id, converged) = (c.id, c.small >= crit.r);
            let exhausted = c.round >= crit.max_iter;
            self.send_x(k + 1, next, id, io);
            if converged {
                self.finish_converged(next, now_us, io);
                return;
            }
            if exhausted {
                warn!("agent {}: no convergence within {} rounds", self.index + 1, crit.max_iter);
                self.cycle.as_mut().expect("cycle present").finished = true;
                self.log(now_us, CycleOutcome::NoConvergence);
                return;
            }
        }
    }

    fn finish_converged(&mut self, x: f64, now_us: u64, io: &mut NodeIo) {
        self.cycle.as_mut().expect("cycle present").finished = true;
        let u = self.u + self.cfg.k_s * x;
        if u != self.u {
            self.u = u;
            self.u_seq += 1;
            self.setpoints_sent += 1;
            let t = Telemetry::new(ess_setpoint_topic(self.index + 1), self.u_seq, now_us, Payload::Num(u));
            io.to_hub.push(Frame::Pub(t));
        }
        self.log(now_us, CycleOutcome::Converged);
    }

    fn on_neighbor(&mut self, from: usize, cycle_id: u64, round: u64, x: f64, now_us: u64, io: &mut NodeIo) {
        if !self.neighbors.contains(&from) {
            return;
        }
        let current = self.cycle.as_ref().map(|c| c.id);
        match current {
            Some(id) if cycle_id < id => self.stale += 1,
            Some(id) if cycle_id == id => {
                let c = self.cycle.as_mut().expect("cycle present");
                if c.finished {
                    return;
                }
                let view = c.views.get_mut(&from).expect("neighbors have views");
                if round < c.round || view.values.contains_key(&round) {
                    debug!("agent {}: stale round {round} from {}", self.index + 1, from + 1);
                    self.stale += 1;
                    return;
                }
                view.values.insert(round, x);
                self.advance(now_us, io);
            }
            _ => self.early.push((cycle_id, from, round, x)),
        }
    }
}

impl Node for AgentNode {
    fn name(&self) -> String {
        format!("agent{}", self.index + 1)
    }

    fn start(&mut self, _now_us: u64, io: &mut NodeIo) -> Result<(), NodeError> {
        io.to_hub.push(Frame::Sub(freq_topic().into()));
        if self.cfg.transport == Transport::Hub {
            for &j in &self.neighbors {
                io.to_hub.push(Frame::Sub(Pattern::from(x_topic(j))));
            }
        }
        Ok(())
    }

    fn on_timer(&mut self, _now_us: u64, _io: &mut NodeIo) -> Result<(), NodeError> {
        Ok(())
    }

    fn on_frame(&mut self, now_us: u64, frame: Frame, io: &mut NodeIo) -> Result<(), NodeError> {
        let t = match frame {
            Frame::Msg(t) => t,
            _ => return Ok(()),
        };
        if t.topic == freq_topic() {
            let Some(f) = t.value.as_f64() else { return Ok(()) };
            if self.cycle.as_ref().is_some_and(|c| t.ts_us <= c.id) {
                return Ok(());
            }
            self.begin_cycle(t.ts_us, self.cfg.f_nom - f, now_us, io);
        } else if let Some(from) = parse_x_topic(&t.topic) {
            match t.value.as_text().and_then(decode_round) {
                Some((round, x)) => self.on_neighbor(from, t.ts_us, round, x, now_us, io),
                None => self.stale += 1,
            }
        }
        Ok(())
    }
}
