//! The simulator as a hub client: fixed-step integration, periodic
//! publication of frequency and unit outputs, decimated trace recording.

use crate::gateway::{power_topic, Coupling};
use crate::hub::{Frame, Measurement, Pattern, Payload, Telemetry};
use crate::node::{Node, NodeError, NodeIo};

use super::{ess_power_topic, freq_topic, Microgrid, SITE};

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t_us: u64,
    pub f_hz: f64,
    /// Effective injections: zero while the breaker is open.
    pub p_pv: f64,
    pub p_building: f64,
    pub p_load2: f64,
    pub p_ess: Vec<f64>,
    pub u: Vec<f64>,
}

impl TraceRow {
    pub fn header(n_ess: usize) -> String {
        let mut h = String::from("t_us,f_hz,p_pv_pu,p_building_pu,p_load2_pu");
        for i in 1..=n_ess {
            h.push_str(&format!(",p_ess{i}_pu"));
        }
        for i in 1..=n_ess {
            h.push_str(&format!(",u{i}_hz"));
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{}",
            self.t_us, self.f_hz, self.p_pv, self.p_building, self.p_load2
        );
        for v in self.p_ess.iter().chain(&self.u) {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimTiming {
    pub dt_us: u64,
    pub emission_period_us: u64,
    pub trace_period_us: u64,
    pub horizon_us: u64,
}

pub struct SimNode {
    grid: Microgrid,
    timing: SimTiming,
    coupling: Coupling,
    inbox: Vec<Measurement>,
    next_emit_us: u64,
    next_trace_us: u64,
    seq: u64,
    trace: Vec<TraceRow>,
}

impl SimNode {
    pub fn new(grid: Microgrid, timing: SimTiming, coupling: Coupling) -> Self {
        Self {
            grid,
            timing,
            coupling,
            inbox: Vec::new(),
            next_emit_us: 0,
            next_trace_us: 0,
            seq: 0,
            trace: Vec::new(),
        }
    }

    pub fn grid(&self) -> &Microgrid {
        &self.grid
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<TraceRow> {
        self.trace
    }

    fn row(&self) -> TraceRow {
        let s = &self.grid.state;
        let on = |closed: bool, p: f64| if closed { p } else { 0.0 };
        TraceRow {
            t_us: s.t_us,
            f_hz: s.f,
            p_pv: on(s.breakers.pv, s.p_pv),
            p_building: on(s.breakers.building, s.p_building),
            p_load2: on(s.breakers.load2, s.p_load2),
            p_ess: s.ess.iter().map(|e| e.p).collect(),
            u: s.ess.iter().map(|e| e.params.u).collect(),
        }
    }

    fn publish(&mut self, io: &mut NodeIo) {
        let t = self.grid.state.t_us;
        self.seq += 1;
        let seq = self.seq;
        io.to_hub.push(Frame::Pub(Telemetry::new(
            freq_topic(),
            seq,
            t,
            Payload::Num(self.grid.state.f),
        )));
        for e in &self.grid.state.ess {
            io.to_hub.push(Frame::Pub(Telemetry::new(
                ess_power_topic(e.params.id),
                seq,
                t,
                Payload::Num(e.p),
            )));
        }
        if self.coupling == Coupling::Poll {
            for dev in ["pv", "building"] {
                io.to_hub.push(Frame::Get(power_topic(dev)));
            }
        }
    }

    fn tick(&mut self, io: &mut NodeIo) -> Result<(), NodeError> {
        let t = self.grid.state.t_us;
        if t >= self.next_trace_us {
            self.trace.push(self.row());
            self.next_trace_us += self.timing.trace_period_us;
        }
        if t >= self.next_emit_us {
            self.publish(io);
            self.next_emit_us += self.timing.emission_period_us;
        }
        let inbox = std::mem::take(&mut self.inbox);
        self.grid.step(self.timing.dt_us, &inbox)?;
        Ok(())
    }
}

impl Node for SimNode {
    fn name(&self) -> String {
        "sim".into()
    }

    fn start(&mut self, _now_us: u64, io: &mut NodeIo) -> Result<(), NodeError> {
        if self.coupling == Coupling::PubSub {
            io.to_hub
                .push(Frame::Sub(Pattern::new("prismes/*/power").expect("static pattern")));
        }
        io.to_hub
            .push(Frame::Sub(Pattern::new(format!("{SITE}/ess/*/u")).expect("static pattern")));
        if self.timing.horizon_us > 0 {
            io.wake_at = Some(0);
        }
        Ok(())
    }

    fn on_timer(&mut self, now_us: u64, io: &mut NodeIo) -> Result<(), NodeError> {
        // Late wake-ups (wall-clock pacing) catch up step by step.
        while self.grid.state.t_us <= now_us && self.grid.state.t_us < self.timing.horizon_us {
            self.tick(io)?;
        }
        if self.grid.state.t_us < self.timing.horizon_us {
            io.wake_at = Some(self.grid.state.t_us);
        }
        Ok(())
    }

    fn on_frame(&mut self, _now_us: u64, frame: Frame, _io: &mut NodeIo) -> Result<(), NodeError> {
        if let Frame::Msg(t) = frame {
            self.inbox.push(Measurement::from_wire(t));
        }
        Ok(())
    }
}
