//! Remote-site SCADA emulation: an address tree over recorded device
//! profiles, periodic telemetry emission and on-site breaker logic.

pub mod profile;
pub mod synthetic;

use std::collections::{BTreeMap, VecDeque};

use log::warn;
use thiserror::Error;

use crate::hub::local::LocalHub;
use crate::hub::{ConnId, Frame, Measurement, Pattern, Payload, Telemetry, Topic};
use crate::node::{Node, NodeError, NodeIo};
pub use profile::{crop_window, load_profile, sample_hold, Profile, ProfileError};

/// Root of every path published by the gateway.
pub const SITE: &str = "prismes";

#[derive(Debug, Error, PartialEq)]
pub enum GatewayError {
    #[error("unknown device {0:?}")]
    UnknownDevice(String),
    #[error("unknown address node {0:?}")]
    UnknownNode(String),
    #[error("emission period must be positive")]
    InvalidPeriod,
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Variable,
    Method,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quality {
    Good,
    Stale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AddressNode {
    pub path: String,
    pub kind: NodeKind,
    pub value: Option<Measurement>,
    pub quality: Quality,
}

/// Flat map keyed by full path; the hierarchy lives in the paths.
#[derive(Debug, Clone, Default)]
pub struct AddressSpace {
    nodes: BTreeMap<String, AddressNode>,
}

impl AddressSpace {
    fn add(&mut self, path: String, kind: NodeKind) {
        let node = AddressNode {
            path: path.clone(),
            kind,
            value: None,
            quality: Quality::Stale,
        };
        let previous = self.nodes.insert(path, node);
        debug_assert!(previous.is_none(), "address paths are unique");
    }

    pub fn resolve(&self, path: &str) -> Result<&AddressNode, GatewayError> {
        self.nodes
            .get(path)
            .ok_or_else(|| GatewayError::UnknownNode(path.to_string()))
    }

    fn update(&mut self, m: Measurement, quality: Quality) {
        if let Some(node) = self.nodes.get_mut(m.topic.as_str()) {
            node.value = Some(m);
            node.quality = quality;
        }
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.nodes.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BreakerCommand {
    Open,
    Close,
}

impl BreakerCommand {
    fn from_payload(p: &Payload) -> Option<Self> {
        match p {
            Payload::Text(s) if s == "open" => Some(BreakerCommand::Open),
            Payload::Text(s) if s == "close" => Some(BreakerCommand::Close),
            Payload::Num(v) if *v == 0.0 => Some(BreakerCommand::Open),
            Payload::Num(v) if *v == 1.0 => Some(BreakerCommand::Close),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BreakerState {
    pub device_id: String,
    pub closed: bool,
    pub last_change_ts: u64,
}

pub fn power_topic(device: &str) -> Topic {
    Topic::new(format!("{SITE}/{device}/power")).expect("device ids are topic segments")
}

pub fn breaker_topic(device: &str) -> Topic {
    Topic::new(format!("{SITE}/{device}/breaker")).expect("device ids are topic segments")
}

pub fn status_topic(device: &str) -> Topic {
    Topic::new(format!("{SITE}/{device}/status")).expect("device ids are topic segments")
}

#[derive(Debug, Clone)]
struct Device {
    profile: Profile,
    breaker: BreakerState,
    power_topic: Topic,
    seq: u64,
}

#[derive(Debug, Clone)]
pub struct Gateway {
    devices: Vec<Device>,
    address: AddressSpace,
    period_us: u64,
    horizon_us: u64,
}

impl Gateway {
    /// One device per profile, breakers initially closed.
    pub fn new(profiles: Vec<Profile>, period_us: u64, horizon_us: u64) -> Result<Self, GatewayError> {
        if period_us == 0 {
            return Err(GatewayError::InvalidPeriod);
        }
        let mut address = AddressSpace::default();
        let devices = profiles
            .into_iter()
            .map(|profile| {
                let id = profile.device_id.clone();
                Topic::new(id.as_str()).map_err(|_| GatewayError::UnknownDevice(id.clone()))?;
                address.add(power_topic(&id).to_string(), NodeKind::Variable);
                address.add(status_topic(&id).to_string(), NodeKind::Variable);
                address.add(breaker_topic(&id).to_string(), NodeKind::Method);
                Ok(Device {
                    power_topic: power_topic(&id),
                    breaker: BreakerState {
                        device_id: id,
                        closed: true,
                        last_change_ts: 0,
                    },
                    profile,
                    seq: 0,
                })
            })
            .collect::<Result<Vec<_>, GatewayError>>()?;
        Ok(Self {
            devices,
            address,
            period_us,
            horizon_us,
        })
    }

    pub fn period_us(&self) -> u64 {
        self.period_us
    }

    pub fn horizon_us(&self) -> u64 {
        self.horizon_us
    }

    pub fn device_ids(&self) -> impl Iterator<Item = &str> {
        self.devices.iter().map(|d| d.breaker.device_id.as_str())
    }

    pub fn profile(&self, device_id: &str) -> Option<&Profile> {
        self.devices
            .iter()
            .find(|d| d.breaker.device_id == device_id)
            .map(|d| &d.profile)
    }

    pub fn breaker(&self, device_id: &str) -> Result<&BreakerState, GatewayError> {
        self.devices
            .iter()
            .find(|d| d.breaker.device_id == device_id)
            .map(|d| &d.breaker)
            .ok_or_else(|| GatewayError::UnknownDevice(device_id.to_string()))
    }

    /// Emission instants `0, period, 2*period, ...` strictly before the horizon.
    pub fn emission_times(&self) -> impl Iterator<Item = u64> {
        let period = self.period_us;
        let horizon = self.horizon_us;
        (0..).map(move |k| k * period).take_while(move |t| *t < horizon)
    }

    /// Applies a breaker command. Repeating the current state is acknowledged
    /// without changing `last_change_ts`.
    pub fn handle_command(
        &mut self,
        cmd: BreakerCommand,
        device_id: &str,
        now_us: u64,
    ) -> Result<BreakerState, GatewayError> {
        let dev = self
            .devices
            .iter_mut()
            .find(|d| d.breaker.device_id == device_id)
            .ok_or_else(|| GatewayError::UnknownDevice(device_id.to_string()))?;
        let closed = cmd == BreakerCommand::Close;
        if dev.breaker.closed != closed {
            dev.breaker.closed = closed;
            dev.breaker.last_change_ts = now_us;
        }
        let state = dev.breaker.clone();
        let status = Measurement::new(
            status_topic(device_id),
            Payload::Num(if closed { 1.0 } else { 0.0 }),
            now_us,
            0,
            SITE,
        );
        self.address.update(status, Quality::Good);
        Ok(state)
    }

    pub fn resolve(&self, path: &str) -> Result<&AddressNode, GatewayError> {
        self.address.resolve(path)
    }

    pub fn address_space(&self) -> &AddressSpace {
        &self.address
    }

    /// Produces one measurement per device for emission time `t_us`. A device
    /// behind an open breaker reports exactly 0 W with stale quality.
    pub fn emit(&mut self, t_us: u64) -> Result<Vec<Measurement>, GatewayError> {
        let mut out = Vec::with_capacity(self.devices.len());
        for dev in &mut self.devices {
            let (value, quality) = if dev.breaker.closed {
                (sample_hold(&dev.profile, t_us)?, Quality::Good)
            } else {
                (0.0, Quality::Stale)
            };
            dev.seq += 1;
            let m = Measurement::new(
                dev.power_topic.clone(),
                Payload::Num(value),
                t_us,
                dev.seq,
                SITE,
            );
            self.address.update(m.clone(), quality);
            out.push(m);
        }
        Ok(out)
    }
}

/// Plays the whole horizon through an in-process hub connection and returns
/// every emitted measurement in emission order.
pub fn run_emitter(gw: &mut Gateway, hub: &mut LocalHub, conn: ConnId) -> Result<Vec<Measurement>, GatewayError> {
    let times: Vec<u64> = gw.emission_times().collect();
    let mut emitted = Vec::new();
    for t in times {
        for m in gw.emit(t)? {
            hub.send(conn, Frame::Pub(m.to_wire()), t);
            emitted.push(m);
        }
    }
    Ok(emitted)
}

/// How the gateway hands telemetry to the hub.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    /// PUB: pushes to subscribers and updates the store.
    PubSub,
    /// SET: store only; consumers poll with GET.
    Poll,
}

impl Coupling {
    pub fn as_str(self) -> &'static str {
        match self {
            Coupling::PubSub => "pubsub",
            Coupling::Poll => "poll",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledCommand {
    pub t_us: u64,
    pub device_id: String,
    pub cmd: BreakerCommand,
}

/// The gateway as a hub client: timer-driven emission plus breaker
/// commands, both local (scheduled) and remote (`prismes/<dev>/breaker`).
pub struct GatewayNode {
    gw: Gateway,
    coupling: Coupling,
    schedule: VecDeque<ScheduledCommand>,
    emit_index: u64,
    status_seq: BTreeMap<String, u64>,
    emissions: Vec<Measurement>,
    rejected_commands: u64,
}

impl GatewayNode {
    pub fn new(gw: Gateway, coupling: Coupling, mut schedule: Vec<ScheduledCommand>) -> Self {
        schedule.retain(|c| c.t_us < gw.horizon_us());
        schedule.sort_by_key(|c| c.t_us);
        Self {
            gw,
            coupling,
            schedule: schedule.into(),
            emit_index: 0,
            status_seq: BTreeMap::new(),
            emissions: Vec::new(),
            rejected_commands: 0,
        }
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gw
    }

    pub fn emissions(&self) -> &[Measurement] {
        &self.emissions
    }

    /// Emission instants played so far.
    pub fn emission_count(&self) -> u64 {
        self.emit_index
    }

    pub fn rejected_commands(&self) -> u64 {
        self.rejected_commands
    }

    fn next_emit_us(&self) -> Option<u64> {
        let t = self.emit_index * self.gw.period_us();
        (t < self.gw.horizon_us()).then_some(t)
    }

    fn schedule_wake(&self, io: &mut NodeIo) {
        let next_cmd = self.schedule.front().map(|c| c.t_us);
        io.wake_at = match (self.next_emit_us(), next_cmd) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
    }

    fn command(&mut self, cmd: BreakerCommand, device: &str, now_us: u64, io: &mut NodeIo) {
        match self.gw.handle_command(cmd, device, now_us) {
            Ok(state) => {
                let seq = self.status_seq.entry(device.to_string()).or_insert(0);
                *seq += 1;
                let value = Payload::Num(if state.closed { 1.0 } else { 0.0 });
                let t = Telemetry::new(status_topic(device), *seq, now_us, value);
                io.to_hub.push(Frame::Pub(t));
            }
            Err(e) => {
                warn!("gateway rejected breaker command: {e}");
                self.rejected_commands += 1;
            }
        }
    }
}

impl Node for GatewayNode {
    fn name(&self) -> String {
        "gateway".into()
    }

    fn start(&mut self, _now_us: u64, io: &mut NodeIo) -> Result<(), NodeError> {
        io.to_hub
            .push(Frame::Sub(Pattern::new(format!("{SITE}/*/breaker")).expect("static pattern")));
        self.schedule_wake(io);
        Ok(())
    }

    fn on_timer(&mut self, now_us: u64, io: &mut NodeIo) -> Result<(), NodeError> {
        while self.schedule.front().is_some_and(|c| c.t_us <= now_us) {
            let c = self.schedule.pop_front().expect("checked non-empty");
            self.command(c.cmd, &c.device_id, now_us, io);
        }
        // Under wall-clock pacing a wake-up may be late; emissions keep their
        // nominal timestamps and are never skipped.
        while let Some(t) = self.next_emit_us().filter(|t| *t <= now_us) {
            for m in self.gw.emit(t)? {
                let wire = m.to_wire();
                io.to_hub.push(match self.coupling {
                    Coupling::PubSub => Frame::Pub(wire),
                    Coupling::Poll => Frame::Set(wire),
                });
                self.emissions.push(m);
            }
            self.emit_index += 1;
        }
        self.schedule_wake(io);
        Ok(())
    }

    fn on_frame(&mut self, now_us: u64, frame: Frame, io: &mut NodeIo) -> Result<(), NodeError> {
        if let Frame::Msg(t) = frame {
            let segs: Vec<&str> = t.topic.segments().collect();
            if let [SITE, device, "breaker"] = segs.as_slice() {
                let device = device.to_string();
                match BreakerCommand::from_payload(&t.value) {
                    Some(cmd) => self.command(cmd, &device, now_us, io),
                    None => self.rejected_commands += 1,
                }
            }
        }
        Ok(())
    }
}
