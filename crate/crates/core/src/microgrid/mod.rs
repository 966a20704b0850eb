//! Islanded microgrid with a common system frequency.
//!
//! Grid-forming storage units follow a P-f droop law
//! `p_i = clamp(p_set + (f_nom + u_i - f) / m_i, p_min, p_max)`, the PV pack
//! and the loads are power injections, and the frequency relaxes toward the
//! droop equilibrium through a first-order lag integrated with explicit
//! Euler steps. All powers are per unit of `s_base_w`.

pub mod node;

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::hub::{Measurement, Topic};

pub use node::{SimNode, TraceRow};

/// Root of every path owned by the simulator.
pub const SITE: &str = "predis";

#[derive(Debug, Error, PartialEq)]
pub enum MicrogridError {
    #[error("no grid-forming unit online: frequency is undefined")]
    NoFormingSource,
    #[error("storage fleet saturated: {imbalance_pu} pu cannot be balanced at any frequency")]
    Saturated { imbalance_pu: f64 },
    #[error("step length must be positive")]
    InvalidStep,
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EssParams {
    pub id: usize,
    /// Hz per pu.
    pub m_droop: f64,
    pub p_set: f64,
    pub p_min: f64,
    pub p_max: f64,
    /// Secondary correction, Hz.
    pub u: f64,
    pub online: bool,
}

impl EssParams {
    pub fn new(id: usize, m_droop: f64) -> Self {
        Self {
            id,
            m_droop,
            p_set: 0.0,
            p_min: -1.0,
            p_max: 1.0,
            u: 0.0,
            online: true,
        }
    }

    pub fn validate(&self) -> Result<(), MicrogridError> {
        if !(self.m_droop > 0.0 && self.m_droop.is_finite()) {
            return Err(MicrogridError::InvalidParams(format!("ess {}: m_droop must be > 0", self.id)));
        }
        if !(self.p_min <= 0.0 && 0.0 <= self.p_max) {
            return Err(MicrogridError::InvalidParams(format!(
                "ess {}: need p_min <= 0 <= p_max",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ess {
    pub params: EssParams,
    /// Current output, pu.
    pub p: f64,
}

/// Droop law for one unit.
pub fn ess_power(f: f64, f_nom: f64, params: &EssParams) -> f64 {
    let raw = params.p_set + (f_nom + params.u - f) / params.m_droop;
    raw.clamp(params.p_min, params.p_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Target {
    Pv,
    Building,
    Load2,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Pv => "pv",
            Target::Building => "building",
            Target::Load2 => "load2",
        }
    }
}

impl std::str::FromStr for Target {
    type Err = MicrogridError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pv" => Ok(Target::Pv),
            "building" => Ok(Target::Building),
            "load2" => Ok(Target::Load2),
            _ => Err(MicrogridError::InvalidParams(format!("unknown target {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Connect,
    Disconnect,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Connect => "connect",
            Action::Disconnect => "disconnect",
        }
    }
}

impl std::str::FromStr for Action {
    type Err = MicrogridError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "connect" => Ok(Action::Connect),
            "disconnect" => Ok(Action::Disconnect),
            _ => Err(MicrogridError::InvalidParams(format!("unknown action {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Disturbance {
    pub t_us: u64,
    pub action: Action,
    pub target: Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Breakers {
    pub pv: bool,
    pub building: bool,
    pub load2: bool,
}

impl Breakers {
    pub fn get(&self, t: Target) -> bool {
        match t {
            Target::Pv => self.pv,
            Target::Building => self.building,
            Target::Load2 => self.load2,
        }
    }

    fn set(&mut self, t: Target, closed: bool) {
        match t {
            Target::Pv => self.pv = closed,
            Target::Building => self.building = closed,
            Target::Load2 => self.load2 = closed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicrogridState {
    pub t_us: u64,
    pub f: f64,
    pub ess: Vec<Ess>,
    pub p_pv: f64,
    pub p_building: f64,
    pub p_load2: f64,
    pub breakers: Breakers,
    pub f_nom: f64,
    pub damping_d: f64,
    pub tau_f_s: f64,
    pub s_base_w: f64,
}

impl MicrogridState {
    /// Nominal frequency, units at their setpoints, everything else
    /// disconnected.
    pub fn new(ess: Vec<EssParams>) -> Self {
        let f_nom = 50.0;
        let ess = ess
            .into_iter()
            .map(|params| Ess {
                p: ess_power(f_nom, f_nom, &params),
                params,
            })
            .collect();
        Self {
            t_us: 0,
            f: f_nom,
            ess,
            p_pv: 0.0,
            p_building: 0.0,
            p_load2: 0.0,
            breakers: Breakers::default(),
            f_nom,
            damping_d: 0.0,
            tau_f_s: 0.5,
            s_base_w: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<(), MicrogridError> {
        for e in &self.ess {
            e.params.validate()?;
        }
        if !(self.tau_f_s > 0.0) {
            return Err(MicrogridError::InvalidParams("tau_f must be > 0".into()));
        }
        if !(self.s_base_w > 0.0) {
            return Err(MicrogridError::InvalidParams("s_base must be > 0".into()));
        }
        if !(self.damping_d >= 0.0) {
            return Err(MicrogridError::InvalidParams("damping must be >= 0".into()));
        }
        if self.p_pv < 0.0 {
            return Err(MicrogridError::InvalidParams("p_pv must be >= 0".into()));
        }
        Ok(())
    }

    /// Net external injection, with open breakers contributing nothing.
    pub fn p_ext(&self) -> f64 {
        let b = &self.breakers;
        let on = |closed: bool, p: f64| if closed { p } else { 0.0 };
        on(b.pv, self.p_pv) - on(b.building, self.p_building) - on(b.load2, self.p_load2)
    }

    fn online(&self) -> impl Iterator<Item = &EssParams> {
        self.ess.iter().map(|e| &e.params).filter(|p| p.online)
    }

    fn balance_at(&self, f: f64) -> f64 {
        let fleet: f64 = self.online().map(|p| ess_power(f, self.f_nom, p)).sum();
        fleet + self.p_ext() - self.damping_d * (f - self.f_nom)
    }

    pub fn recompute_outputs(&mut self) {
        let (f, f_nom) = (self.f, self.f_nom);
        for e in &mut self.ess {
            e.p = if e.params.online {
                ess_power(f, f_nom, &e.params)
            } else {
                0.0
            };
        }
    }
}

/// Solves the droop power balance for the frequency.
///
/// Without saturation the balance is linear in `f` and solved in closed
/// form. If that solution pushes a unit past a limit, the balance is still
/// piecewise linear and non-increasing in `f`; the segment holding the root
/// is bracketed between unit breakpoints and solved with the saturated units
/// held at their limits.
pub fn steady_state_frequency(state: &MicrogridState) -> Result<f64, MicrogridError> {
    let units: Vec<&EssParams> = state.online().collect();
    if units.is_empty() {
        return Err(MicrogridError::NoFormingSource);
    }
    let f_nom = state.f_nom;
    let d = state.damping_d;
    let p_ext = state.p_ext();

    let solve = |free: &dyn Fn(&EssParams) -> Option<f64>| -> f64 {
        // `free` returns None for a free unit, Some(limit) for a saturated one.
        let mut num = p_ext + d * f_nom;
        let mut den = d;
        for p in &units {
            match free(p) {
                None => {
                    num += p.p_set + (f_nom + p.u) / p.m_droop;
                    den += 1.0 / p.m_droop;
                }
                Some(limit) => num += limit,
            }
        }
        num / den
    };

    let f0 = solve(&|_| None);
    let unclamped = |p: &EssParams, f: f64| {
        let raw = p.p_set + (f_nom + p.u - f) / p.m_droop;
        raw >= p.p_min && raw <= p.p_max
    };
    if units.iter().all(|p| unclamped(p, f0)) {
        return Ok(f0);
    }

    let mut breaks: Vec<f64> = units
        .iter()
        .flat_map(|p| {
            let at = |limit: f64| f_nom + p.u - p.m_droop * (limit - p.p_set);
            [at(p.p_max), at(p.p_min)]
        })
        .collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let first = breaks[0];
    let last = breaks[breaks.len() - 1];
    let g_first = state.balance_at(first);
    let g_last = state.balance_at(last);

    if g_first <= 0.0 {
        // Every unit at p_max below the first breakpoint.
        if g_first == 0.0 {
            return Ok(first);
        }
        if d == 0.0 {
            return Err(MicrogridError::Saturated { imbalance_pu: g_first });
        }
        let p_max: f64 = units.iter().map(|p| p.p_max).sum();
        return Ok(f_nom + (p_max + p_ext) / d);
    }
    if g_last >= 0.0 {
        if g_last == 0.0 {
            return Ok(last);
        }
        if d == 0.0 {
            return Err(MicrogridError::Saturated { imbalance_pu: g_last });
        }
        let p_min: f64 = units.iter().map(|p| p.p_min).sum();
        return Ok(f_nom + (p_min + p_ext) / d);
    }

    for w in breaks.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let g_hi = state.balance_at(hi);
        if g_hi > 0.0 {
            continue;
        }
        if g_hi == 0.0 {
            return Ok(hi);
        }
        let mid = 0.5 * (lo + hi);
        let f = solve(&|p: &EssParams| {
            let raw = p.p_set + (f_nom + p.u - mid) / p.m_droop;
            if raw > p.p_max {
                Some(p.p_max)
            } else if raw < p.p_min {
                Some(p.p_min)
            } else {
                None
            }
        });
        return Ok(f.clamp(lo, hi));
    }
    unreachable!("balance changes sign between the first and last breakpoints")
}

/// `sum(p_i) + p_ext - d (f - f_nom)` with each `p_i` taken from the droop
/// law at the current frequency.
pub fn power_balance_residual(state: &MicrogridState) -> f64 {
    state.balance_at(state.f)
}

/// Sets the targeted breaker; applying the state it is already in is a no-op.
pub fn apply_disturbance(state: &mut MicrogridState, d: &Disturbance) {
    state.breakers.set(d.target, d.action == Action::Connect);
}

fn topic_index(topic: &Topic, kind: &str) -> Option<usize> {
    let segs: Vec<&str> = topic.segments().collect();
    match segs.as_slice() {
        [SITE, "ess", i, k] if *k == kind => i.parse().ok(),
        _ => None,
    }
}

pub fn freq_topic() -> Topic {
    Topic::new(format!("{SITE}/grid/freq")).expect("static topic")
}

/// `predis/ess/<i>/p`, 1-based.
pub fn ess_power_topic(i: usize) -> Topic {
    Topic::new(format!("{SITE}/ess/{i}/p")).expect("static topic")
}

/// `predis/ess/<i>/u`, 1-based.
pub fn ess_setpoint_topic(i: usize) -> Topic {
    Topic::new(format!("{SITE}/ess/{i}/u")).expect("static topic")
}

/// The simulator proper: state plus pending disturbances and input
/// bookkeeping.
#[derive(Debug, Clone)]
pub struct Microgrid {
    pub state: MicrogridState,
    pending: VecDeque<Disturbance>,
    last_seq: BTreeMap<Topic, u64>,
    pv_topic: Topic,
    building_topic: Topic,
}

impl Microgrid {
    pub fn new(state: MicrogridState, mut disturbances: Vec<Disturbance>) -> Result<Self, MicrogridError> {
        state.validate()?;
        disturbances.sort_by_key(|d| d.t_us);
        Ok(Self {
            state,
            pending: disturbances.into(),
            last_seq: BTreeMap::new(),
            pv_topic: crate::gateway::power_topic("pv"),
            building_topic: crate::gateway::power_topic("building"),
        })
    }

    /// Folds the newest value of each known topic; samples older than one
    /// already applied are ignored.
    pub fn fold_inputs<'a>(&mut self, inputs: impl IntoIterator<Item = &'a Measurement>) {
        for m in inputs {
            let Some(v) = m.value.as_f64() else { continue };
            let last = self.last_seq.entry(m.topic.clone()).or_insert(0);
            if m.seq <= *last && *last != 0 {
                continue;
            }
            *last = m.seq;
            let s_base = self.state.s_base_w;
            if m.topic == self.pv_topic {
                self.state.p_pv = (v / s_base).max(0.0);
            } else if m.topic == self.building_topic {
                self.state.p_building = v / s_base;
            } else if let Some(i) = topic_index(&m.topic, "u") {
                if let Some(e) = self.state.ess.iter_mut().find(|e| e.params.id == i) {
                    e.params.u = v;
                }
            }
        }
    }

    /// Applies every pending disturbance whose time has come.
    pub fn apply_due(&mut self) {
        while self.pending.front().is_some_and(|d| d.t_us <= self.state.t_us) {
            let d = self.pending.pop_front().expect("checked non-empty");
            apply_disturbance(&mut self.state, &d);
        }
    }

    /// One explicit Euler step of the frequency lag.
    pub fn step<'a>(
        &mut self,
        dt_us: u64,
        inputs: impl IntoIterator<Item = &'a Measurement>,
    ) -> Result<(), MicrogridError> {
        if dt_us == 0 {
            return Err(MicrogridError::InvalidStep);
        }
        self.fold_inputs(inputs);
        self.apply_due();
        let f_ss = steady_state_frequency(&self.state)?;
        let dt_s = dt_us as f64 / 1e6;
        self.state.f += dt_s / self.state.tau_f_s * (f_ss - self.state.f);
        self.state.recompute_outputs();
        self.state.t_us += dt_us;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hub::Payload;

    fn four(m: f64) -> MicrogridState {
        MicrogridState::new((1..=4).map(|i| EssParams::new(i, m)).collect())
    }

    fn with_load(p_ext: f64) -> MicrogridState {
        let mut s = four(0.1);
        s.breakers.load2 = true;
        s.p_load2 = -p_ext;
        s
    }

    #[test]
    fn closed_form_examples() {
        let s = with_load(-0.2);
        let f = steady_state_frequency(&s).unwrap();
        assert!((f - 49.995).abs() < 1e-12, "{f}");
        for e in &s.ess {
            assert!((ess_power(f, 50.0, &e.params) - 0.05).abs() < 1e-9);
        }

        let mut s = with_load(-0.2);
        for e in &mut s.ess {
            e.params.u = 0.005;
        }
        assert!((steady_state_frequency(&s).unwrap() - 50.0).abs() < 1e-12);

        assert_eq!(steady_state_frequency(&four(0.1)).unwrap(), 50.0);
    }

    #[test]
    fn droop_law_examples() {
        let mut p = EssParams::new(1, 0.1);
        p.p_set = 0.1;
        assert_eq!(ess_power(50.0, 50.0, &p), 0.1);
        p.p_set = 0.0;
        p.p_max = 10.0;
        assert!((ess_power(49.9, 50.0, &p) - 1.0).abs() < 1e-12);
        p.p_max = 0.5;
        assert_eq!(ess_power(49.9, 50.0, &p), 0.5);
    }

    #[test]
    fn no_forming_source() {
        let mut s = four(0.1);
        for e in &mut s.ess {
            e.params.online = false;
        }
        assert_eq!(steady_state_frequency(&s), Err(MicrogridError::NoFormingSource));
        let empty = MicrogridState::new(vec![]);
        assert_eq!(steady_state_frequency(&empty), Err(MicrogridError::NoFormingSource));
    }

    #[test]
    fn saturation_is_respected() {
        // 0.2 pu deficit, one unit capped at 0.01 pu: the other three share the rest.
        let mut s = with_load(-0.2);
        s.ess[0].params.p_max = 0.01;
        let f = steady_state_frequency(&s).unwrap();
        assert!(power_balance_residual(&s.clone_at(f)).abs() < 1e-12);
        let expected = 50.0 - 0.1 * (0.2 - 0.01) / 3.0;
        assert!((f - expected).abs() < 1e-12, "{f} vs {expected}");

        // Deficit beyond fleet capacity with no damping has no balance point.
        let s = with_load(-4.5);
        assert!(matches!(
            steady_state_frequency(&s),
            Err(MicrogridError::Saturated { .. })
        ));
        // Damping absorbs what the saturated fleet cannot.
        let mut s = with_load(-4.5);
        s.damping_d = 1.0;
        let f = steady_state_frequency(&s).unwrap();
        assert!((f - 49.5).abs() < 1e-12, "{f}");
    }

    #[test]
    fn residual_cases() {
        let s = four(0.1);
        assert_eq!(power_balance_residual(&s), 0.0);
        let mut s = with_load(-0.2);
        assert!(power_balance_residual(&s).abs() > 0.1);
        s.f = steady_state_frequency(&s).unwrap();
        assert!(power_balance_residual(&s).abs() < 1e-9);
    }

    #[test]
    fn euler_step_example() {
        let mut s = with_load(-0.2);
        s.tau_f_s = 0.5;
        let mut g = Microgrid::new(s, vec![]).unwrap();
        g.step(100_000, &[]).unwrap();
        assert!((g.state.f - 49.999).abs() < 1e-12, "{}", g.state.f);
        assert_eq!(g.state.t_us, 100_000);
    }

    #[test]
    fn zero_step_rejected() {
        let mut g = Microgrid::new(four(0.1), vec![]).unwrap();
        assert_eq!(g.step(0, &[]), Err(MicrogridError::InvalidStep));
    }

    #[test]
    fn disturbances_apply_on_time_and_are_idempotent() {
        let ds = vec![
            Disturbance { t_us: 60_000_000, action: Action::Connect, target: Target::Load2 },
            Disturbance { t_us: 120_000_000, action: Action::Disconnect, target: Target::Building },
        ];
        let mut s = four(0.1);
        s.breakers.building = true;
        s.p_building = 0.1;
        s.p_load2 = 0.1;
        let mut g = Microgrid::new(s, ds).unwrap();
        while g.state.t_us < 60_000_000 {
            g.step(1_000_000, &[]).unwrap();
            assert!(!g.state.breakers.load2);
        }
        g.step(1_000_000, &[]).unwrap();
        assert!(g.state.breakers.load2);
        assert!((g.state.p_ext() + 0.2).abs() < 1e-15);
        while g.state.t_us <= 120_000_000 {
            g.step(1_000_000, &[]).unwrap();
        }
        assert!(!g.state.breakers.building);
        assert!((g.state.p_ext() + 0.1).abs() < 1e-15);

        let before = g.state.breakers;
        apply_disturbance(
            &mut g.state,
            &Disturbance { t_us: 0, action: Action::Connect, target: Target::Load2 },
        );
        assert_eq!(g.state.breakers, before);
    }

    #[test]
    fn inputs_convert_to_pu_and_ignore_stale() {
        let mut s = four(0.1);
        s.breakers.pv = true;
        let mut g = Microgrid::new(s, vec![]).unwrap();
        let pv = |v: f64, seq: u64| {
            Measurement::new(crate::gateway::power_topic("pv"), Payload::Num(v), 0, seq, "prismes")
        };
        g.step(10_000, &[pv(3500.0, 2)]).unwrap();
        assert_eq!(g.state.p_pv, 0.35);
        g.step(10_000, &[pv(1000.0, 1)]).unwrap();
        assert_eq!(g.state.p_pv, 0.35);
        let u = Measurement::new(ess_setpoint_topic(3), Payload::Num(0.01), 0, 1, "agents");
        g.step(10_000, &[u]).unwrap();
        assert_eq!(g.state.ess[2].params.u, 0.01);
    }

    impl MicrogridState {
        fn clone_at(&self, f: f64) -> Self {
            let mut s = self.clone();
            s.f = f;
            s
        }
    }
}
