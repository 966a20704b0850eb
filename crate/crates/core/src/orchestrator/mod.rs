//! Wires hub, links, gateway, simulator and agents from a scenario and runs
//! them either in virtual time or against the wall clock.

pub mod check;
pub mod realtime;
pub mod report;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::gateway::{BreakerCommand, Gateway, GatewayNode, ScheduledCommand};
use crate::hub::{encode_frame, parse_frame, ConnId, Frame, Hub};
use crate::mas::{AgentConfig, AgentNode, ConsensusEvent, Transport};
use crate::microgrid::node::SimTiming;
use crate::microgrid::{Action, Disturbance, Microgrid, MicrogridState, SimNode, TraceRow};
use crate::netem::{LatencyStats, Link, Transit};
use crate::node::{Node, NodeError, NodeIo};
use crate::scenario::{Mode, Placement, Scenario, ScenarioError};
use crate::sched::EventQueue;

pub use check::{check_acceptance, event_metrics, EventMetrics, Status, Verdict};
pub use realtime::{run_components, run_realtime, run_realtime_on};
pub use report::{emit_report, load_result};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("setup: {0}")]
    Setup(String),
    #[error("{name} failed at t = {t_us} us: {source}")]
    Component {
        name: String,
        t_us: u64,
        source: NodeError,
    },
    #[error("{component}: could not reach hub at {addr} within 5 s")]
    ConnectTimeout { component: String, addr: String },
    #[error("component {0} crashed")]
    ComponentCrash(String),
    #[error("scenario mode is {0}, wrong runner")]
    WrongMode(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Every message that crossed one direction of one connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub label: String,
    pub transits: Vec<Transit>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub scenario: Scenario,
    pub trace: Vec<TraceRow>,
    /// Link model name to the channels that used it.
    pub latency: BTreeMap<String, Vec<Channel>>,
    pub consensus: Vec<ConsensusEvent>,
    pub gateway_emissions: u64,
    pub stale_rounds: u64,
    pub setpoints: u64,
}

impl RunResult {
    pub fn n_ess(&self) -> usize {
        self.scenario.microgrid.ess.len()
    }

    /// Reorders are counted inside each channel, never across channels.
    pub fn link_stats(&self, link: &str) -> LatencyStats {
        let parts: Vec<LatencyStats> = self
            .latency
            .get(link)
            .map(|chs| chs.iter().map(|c| LatencyStats::from_transits(&c.transits)).collect())
            .unwrap_or_default();
        LatencyStats::merge(&parts)
    }
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream seed for a named component channel.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ fnv1a(label))
}

pub enum Component {
    Gateway(GatewayNode),
    Sim(SimNode),
    Agent(AgentNode),
}

impl Component {
    pub fn node(&mut self) -> &mut dyn Node {
        match self {
            Component::Gateway(n) => n,
            Component::Sim(n) => n,
            Component::Agent(n) => n,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Component::Gateway(n) => n.name(),
            Component::Sim(n) => n.name(),
            Component::Agent(n) => n.name(),
        }
    }
}

/// A component with the link model it reaches the hub through.
pub struct Wired {
    pub component: Component,
    pub link: String,
}

pub fn build_gateway(s: &Scenario) -> Result<Wired, RunError> {
    let profiles = s.load_profiles()?;
    let gw = Gateway::new(profiles, s.run.emission_period_us, s.run.horizon_us)
        .map_err(|e| RunError::Setup(e.to_string()))?;
    let schedule = s
        .disturbances
        .iter()
        .filter(|d| d.placement == Placement::Gateway)
        .map(|d| ScheduledCommand {
            t_us: d.t_us,
            device_id: d.target.as_str().to_string(),
            cmd: match d.action {
                Action::Connect => BreakerCommand::Close,
                Action::Disconnect => BreakerCommand::Open,
            },
        })
        .collect();
    Ok(Wired {
        component: Component::Gateway(GatewayNode::new(gw, s.run.coupling, schedule)),
        link: s.gateway.link.clone(),
    })
}

pub fn build_sim(s: &Scenario) -> Result<Wired, RunError> {
    let mg = &s.microgrid;
    let mut state = MicrogridState::new(mg.ess_params());
    state.f_nom = mg.f_nom;
    state.f = mg.f_nom;
    state.tau_f_s = mg.tau_f_s;
    state.damping_d = mg.damping;
    state.s_base_w = mg.s_base_w;
    state.p_load2 = mg.load2_pu;
    state.recompute_outputs();
    let disturbances = s
        .disturbances
        .iter()
        .filter(|d| d.placement == Placement::Sim)
        .map(|d| Disturbance {
            t_us: d.t_us,
            action: d.action,
            target: d.target,
        })
        .collect();
    let grid = Microgrid::new(state, disturbances).map_err(|e| RunError::Setup(e.to_string()))?;
    let timing = SimTiming {
        dt_us: s.run.step_us,
        emission_period_us: s.run.emission_period_us,
        trace_period_us: s.run.trace_period_us,
        horizon_us: s.run.horizon_us,
    };
    Ok(Wired {
        component: Component::Sim(SimNode::new(grid, timing, s.run.coupling)),
        link: mg.link.clone(),
    })
}

pub fn build_agents(s: &Scenario, transport: Transport) -> Result<Vec<Wired>, RunError> {
    if !s.agents.enabled {
        return Ok(vec![]);
    }
    let n = s.microgrid.ess.len();
    let graph = s
        .agents
        .graph(n)
        .map_err(|e| RunError::Setup(e.to_string()))?;
    let cfg = AgentConfig {
        crit: s.agents.crit,
        k_s: s.agents.k_s,
        f_nom: s.microgrid.f_nom,
        transport,
    };
    (0..n)
        .map(|i| {
            let agent = AgentNode::new(i, &graph, cfg).map_err(|e| RunError::Setup(e.to_string()))?;
            Ok(Wired {
                component: Component::Agent(agent),
                link: s.agents.link.clone(),
            })
        })
        .collect()
}

/// Gateway, simulator, then agents in index order.
pub fn build_all(s: &Scenario, transport: Transport) -> Result<Vec<Wired>, RunError> {
    let mut all = vec![build_gateway(s)?, build_sim(s)?];
    all.extend(build_agents(s, transport)?);
    Ok(all)
}

/// Collects node outputs into a result.
fn assemble(scenario: Scenario, comps: Vec<Component>, latency: BTreeMap<String, Vec<Channel>>) -> RunResult {
    let mut r = RunResult {
        scenario,
        trace: Vec::new(),
        latency,
        consensus: Vec::new(),
        gateway_emissions: 0,
        stale_rounds: 0,
        setpoints: 0,
    };
    for c in comps {
        match c {
            Component::Gateway(g) => r.gateway_emissions = g.emission_count(),
            Component::Sim(s) => r.trace = s.into_trace(),
            Component::Agent(a) => {
                r.stale_rounds += a.stale_rounds();
                r.setpoints += a.setpoints_sent();
                r.consensus.extend(a.events().iter().cloned());
            }
        }
    }
    r.consensus.sort_by_key(|e| (e.cycle_us, e.agent, e.start_us));
    r
}

const PRIO_AT_HUB: u8 = 0;
const PRIO_AT_NODE: u8 = 1;
const PRIO_TIMER: u8 = 2;

enum Ev {
    AtHub { slot: usize, bytes: Vec<u8> },
    AtNode { slot: usize, bytes: Vec<u8> },
    Timer { slot: usize, generation: u64 },
}

struct Slot {
    component: Component,
    link: String,
    conn: ConnId,
    up: Link,
    down: Link,
    timer_generation: u64,
}

struct World {
    hub: Hub,
    slots: Vec<Slot>,
    by_conn: BTreeMap<ConnId, usize>,
    /// Direct agent channels keyed by (from slot, to slot).
    peers: BTreeMap<(usize, usize), Link>,
    queue: EventQueue<Ev>,
    first_agent: usize,
}

impl World {
    fn apply(&mut self, slot: usize, now: u64, io: &mut NodeIo) {
        for frame in io.to_hub.drain(..) {
            let at = self.slots[slot].up.deliver(now);
            self.queue.push(at, PRIO_AT_HUB, Ev::AtHub { slot, bytes: encode_frame(&frame) });
        }
        for (peer, frame) in io.to_peers.drain(..) {
            let to = self.first_agent + peer;
            let link = self
                .peers
                .get_mut(&(slot, to))
                .expect("direct frames only go to graph neighbors");
            let at = link.deliver(now);
            self.queue.push(at, PRIO_AT_NODE, Ev::AtNode { slot: to, bytes: encode_frame(&frame) });
        }
        if let Some(t) = io.wake_at.take() {
            let s = &mut self.slots[slot];
            s.timer_generation += 1;
            self.queue.push(
                t.max(now),
                PRIO_TIMER,
                Ev::Timer {
                    slot,
                    generation: s.timer_generation,
                },
            );
        }
        io.clear();
    }

    fn fail(&self, slot: usize, now: u64, source: NodeError) -> RunError {
        RunError::Component {
            name: self.slots[slot].component.name(),
            t_us: now,
            source,
        }
    }
}

/// Runs every component on one discrete-event queue. Frames cross links as
/// encoded wire lines; all randomness comes from seeds derived from the
/// scenario seed, so a (scenario, seed) pair always yields the same result.
pub fn run_virtual(s: &Scenario) -> Result<RunResult, RunError> {
    if s.run.mode != Mode::Virtual {
        return Err(RunError::WrongMode(s.run.mode.as_str()));
    }
    let wired = build_all(s, s.agents.transport)?;
    let mut hub = Hub::new();
    let mut slots = Vec::new();
    let mut by_conn = BTreeMap::new();
    let mut first_agent = wired.len();
    for (i, w) in wired.into_iter().enumerate() {
        let name = w.component.name();
        if matches!(w.component, Component::Agent(_)) {
            first_agent = first_agent.min(i);
        }
        let spec = &s.links[&w.link];
        let conn = hub.connect(&name);
        by_conn.insert(conn, i);
        slots.push(Slot {
            up: Link::new(spec.model(derive_seed(s.run.seed, &format!("{name}/up")))),
            down: Link::new(spec.model(derive_seed(s.run.seed, &format!("{name}/down")))),
            component: w.component,
            link: w.link,
            conn,
            timer_generation: 0,
        });
    }
    let mut peers = BTreeMap::new();
    if s.agents.enabled && s.agents.transport == Transport::Direct {
        let spec = &s.links[&s.agents.link];
        for &(a, b) in &s.agents.edges {
            for (x, y) in [(a, b), (b, a)] {
                let label = format!("agent{x}->agent{y}");
                let link = Link::new(spec.model(derive_seed(s.run.seed, &label)));
                peers.insert((first_agent + x - 1, first_agent + y - 1), link);
            }
        }
    }
    let mut w = World {
        hub,
        slots,
        by_conn,
        peers,
        queue: EventQueue::new(),
        first_agent,
    };

    let mut io = NodeIo::default();
    // An empty horizon starts nothing, so even subscriptions stay off the wire.
    let live = if s.run.horizon_us > 0 { w.slots.len() } else { 0 };
    for slot in 0..live {
        w.slots[slot]
            .component
            .node()
            .start(0, &mut io)
            .map_err(|e| w.fail(slot, 0, e))?;
        w.apply(slot, 0, &mut io);
    }

    while let Some((now, ev)) = w.queue.pop() {
        match ev {
            Ev::AtHub { slot, bytes } => {
                let conn = w.slots[slot].conn;
                w.hub.handle_line(conn, &bytes, now);
                for (to_conn, frame) in w.hub.drain_outbox() {
                    let to = w.by_conn[&to_conn];
                    let at = w.slots[to].down.deliver(now);
                    w.queue
                        .push(at, PRIO_AT_NODE, Ev::AtNode { slot: to, bytes: encode_frame(&frame) });
                }
            }
            Ev::AtNode { slot, bytes } => {
                let frame: Frame = parse_frame(&bytes).map_err(|e| RunError::Setup(e.to_string()))?;
                w.slots[slot]
                    .component
                    .node()
                    .on_frame(now, frame, &mut io)
                    .map_err(|e| w.fail(slot, now, e))?;
                w.apply(slot, now, &mut io);
            }
            Ev::Timer { slot, generation } => {
                if generation != w.slots[slot].timer_generation {
                    continue;
                }
                w.slots[slot]
                    .component
                    .node()
                    .on_timer(now, &mut io)
                    .map_err(|e| w.fail(slot, now, e))?;
                w.apply(slot, now, &mut io);
            }
        }
    }

    let mut latency: BTreeMap<String, Vec<Channel>> = BTreeMap::new();
    let mut comps = Vec::new();
    for slot in w.slots {
        let name = slot.component.name();
        let chans = latency.entry(slot.link.clone()).or_default();
        chans.push(Channel {
            label: format!("{name}/up"),
            transits: slot.up.transits().to_vec(),
        });
        chans.push(Channel {
            label: format!("{name}/down"),
            transits: slot.down.transits().to_vec(),
        });
        comps.push(slot.component);
    }
    for ((from, to), link) in w.peers {
        latency.entry(s.agents.link.clone()).or_default().push(Channel {
            label: format!("agent{}->agent{}", from - w.first_agent + 1, to - w.first_agent + 1),
            transits: link.transits().to_vec(),
        });
    }
    Ok(assemble(s.clone(), comps, latency))
}
