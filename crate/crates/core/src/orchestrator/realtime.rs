//! Wall-clock execution: a TCP hub and one thread per component, each
//! driving the same node state machines used in virtual time.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::TcpStream;
use std::sync::mpsc::RecvTimeoutError;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};

use crate::hub::client::{connect_with_retry, spawn_frame_reader, DEFAULT_CONNECT_TIMEOUT};
use crate::hub::server::HubServer;
use crate::hub::{encode_frame, Frame};
use crate::mas::Transport;
use crate::netem::Link;
use crate::node::NodeIo;
use crate::scenario::{Mode, Scenario};
use crate::sched::EventQueue;

use super::{assemble, build_all, derive_seed, Channel, Component, RunError, RunResult, Wired};

/// Extra simulated time after the horizon for in-flight messages.
const DRAIN_US: u64 = 500_000;

/// Simulated microseconds since a shared epoch, scaled by `speedup`.
#[derive(Debug, Clone, Copy)]
pub struct Clock {
    epoch: Instant,
    speedup: f64,
}

impl Clock {
    pub fn new(epoch: Instant, speedup: f64) -> Self {
        Self { epoch, speedup }
    }

    pub fn now_us(&self) -> u64 {
        (self.epoch.elapsed().as_secs_f64() * 1e6 * self.speedup) as u64
    }

    fn wall_until(&self, t_us: u64) -> Duration {
        let target = Duration::from_secs_f64(t_us as f64 / 1e6 / self.speedup);
        target.saturating_sub(self.epoch.elapsed())
    }
}

pub fn connect(component: &str, addr: &str) -> Result<TcpStream, RunError> {
    connect_with_retry(addr, DEFAULT_CONNECT_TIMEOUT).map_err(|_| RunError::ConnectTimeout {
        component: component.to_string(),
        addr: addr.to_string(),
    })
}

/// Runs one component until `end_us`. Outgoing frames wait in an uplink
/// queue until their emulated arrival; incoming frames wait in a downlink
/// queue likewise.
pub fn drive(
    component: &mut Component,
    stream: TcpStream,
    up: &mut Link,
    down: &mut Link,
    clock: Clock,
    end_us: u64,
) -> Result<(), RunError> {
    let mut writer = stream.try_clone()?;
    let rx = spawn_frame_reader(stream)?;
    let mut uplink: EventQueue<Vec<u8>> = EventQueue::new();
    let mut downlink: EventQueue<Frame> = EventQueue::new();
    let mut wake: Option<u64> = None;
    let mut io = NodeIo::default();
    let name = component.name();
    let fail = |t_us: u64, source| RunError::Component {
        name: name.clone(),
        t_us,
        source,
    };

    let mut absorb = |io: &mut NodeIo, now: u64, uplink: &mut EventQueue<Vec<u8>>, wake: &mut Option<u64>| {
        for f in io.to_hub.drain(..) {
            uplink.push(up.deliver(now), 0, encode_frame(&f));
        }
        if let Some(t) = io.wake_at.take() {
            *wake = Some(t);
        }
        io.clear();
    };

    let now = clock.now_us();
    component.node().start(now, &mut io).map_err(|e| fail(now, e))?;
    absorb(&mut io, now, &mut uplink, &mut wake);

    loop {
        let now = clock.now_us();
        if now >= end_us {
            break;
        }
        while uplink.peek_time().is_some_and(|t| t <= now) {
            let (_, bytes) = uplink.pop().expect("peeked");
            writer.write_all(&bytes)?;
        }
        while downlink.peek_time().is_some_and(|t| t <= now) {
            let (_, frame) = downlink.pop().expect("peeked");
            component.node().on_frame(now, frame, &mut io).map_err(|e| fail(now, e))?;
            absorb(&mut io, now, &mut uplink, &mut wake);
        }
        if wake.is_some_and(|t| t <= now) {
            wake = None;
            component.node().on_timer(now, &mut io).map_err(|e| fail(now, e))?;
            absorb(&mut io, now, &mut uplink, &mut wake);
        }
        let next = [uplink.peek_time(), downlink.peek_time(), wake, Some(end_us)]
            .into_iter()
            .flatten()
            .min()
            .expect("end is always present");
        if next <= clock.now_us() {
            continue;
        }
        match rx.recv_timeout(clock.wall_until(next)) {
            Ok(frame) => {
                let t = clock.now_us();
                downlink.push(down.deliver(t), 0, frame);
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => {
                warn!("{name}: hub closed the connection");
                break;
            }
        }
    }
    let _ = writer.shutdown(std::net::Shutdown::Both);
    Ok(())
}

struct Finished {
    component: Component,
    link: String,
    up: Link,
    down: Link,
}

/// Spawns the whole pipeline against a hub at `addr`. Agents always talk
/// through the hub here.
pub fn run_realtime_on(s: &Scenario, addr: &str) -> Result<RunResult, RunError> {
    run_components(s, build_all(s, Transport::Hub)?, addr)
}

/// Runs the given components, one thread each, against the hub at `addr`
/// and assembles whatever they produced. Used whole by `run` and piecewise
/// by the per-component commands.
pub fn run_components(s: &Scenario, wired: Vec<Wired>, addr: &str) -> Result<RunResult, RunError> {
    if s.run.horizon_us == 0 {
        let mut latency: BTreeMap<String, Vec<Channel>> = BTreeMap::new();
        let mut comps = Vec::new();
        for w in wired {
            let name = w.component.name();
            for dir in ["up", "down"] {
                latency.entry(w.link.clone()).or_default().push(Channel {
                    label: format!("{name}/{dir}"),
                    transits: Vec::new(),
                });
            }
            comps.push(w.component);
        }
        return Ok(assemble(s.clone(), comps, latency));
    }
    let mut streams = Vec::new();
    for w in &wired {
        streams.push(connect(&w.component.name(), addr)?);
    }
    let clock = Clock::new(Instant::now(), s.run.speedup);
    let end_us = s.run.horizon_us + DRAIN_US;
    let mut handles = Vec::new();
    for (w, stream) in wired.into_iter().zip(streams) {
        let Wired { mut component, link } = w;
        let name = component.name();
        let spec = s.links[&link].clone();
        let mut up = Link::new(spec.model(derive_seed(s.run.seed, &format!("{name}/up"))));
        let mut down = Link::new(spec.model(derive_seed(s.run.seed, &format!("{name}/down"))));
        let h = thread::Builder::new().name(name.clone()).spawn(move || {
            drive(&mut component, stream, &mut up, &mut down, clock, end_us).map(|()| Finished {
                component,
                link,
                up,
                down,
            })
        })?;
        handles.push((name, h));
    }
    let mut comps = Vec::new();
    let mut latency: BTreeMap<String, Vec<Channel>> = BTreeMap::new();
    let mut first_err = None;
    for (name, h) in handles {
        match h.join() {
            Ok(Ok(f)) => {
                let chans = latency.entry(f.link).or_default();
                chans.push(Channel {
                    label: format!("{name}/up"),
                    transits: f.up.transits().to_vec(),
                });
                chans.push(Channel {
                    label: format!("{name}/down"),
                    transits: f.down.transits().to_vec(),
                });
                comps.push(f.component);
            }
            Ok(Err(e)) => {
                first_err.get_or_insert(e);
            }
            Err(_) => {
                first_err.get_or_insert(RunError::ComponentCrash(name));
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    Ok(assemble(s.clone(), comps, latency))
}

/// Starts an in-process TCP hub on the scenario's address and runs the
/// pipeline against it.
pub fn run_realtime(s: &Scenario) -> Result<RunResult, RunError> {
    if s.run.mode != Mode::Realtime {
        return Err(RunError::WrongMode(s.run.mode.as_str()));
    }
    let server = HubServer::spawn(s.run.hub.as_str(), Instant::now())?;
    let addr = server.local_addr().to_string();
    info!("realtime run against hub {addr}, speedup {}", s.run.speedup);
    let result = run_realtime_on(s, &addr);
    server.shutdown();
    result
}
