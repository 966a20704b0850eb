mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use gridloop::gateway::Coupling;
use gridloop::mas::Transport;
use gridloop::orchestrator::report::{freq_svg, summary, LATENCY_HEADER, SUMMARY_FILE, TRACE_FILE};
use gridloop::orchestrator::{
    check_acceptance, emit_report, event_metrics, load_result, run_realtime, run_realtime_on, run_virtual, RunError,
    RunResult, Status, Verdict,
};
use gridloop::scenario::{Mode, Scenario};

fn verdicts(r: &RunResult) -> BTreeMap<String, Status> {
    check_acceptance(r).into_iter().map(|v| (v.name, v.status)).collect()
}

fn status(vs: &[Verdict], name: &str) -> Status {
    vs.iter().find(|v| v.name == name).unwrap_or_else(|| panic!("no verdict {name}")).status
}

#[test]
fn shipped_scenario_passes_everything() {
    let r = run_virtual(&common::shipped_scenario()).unwrap();
    let vs = check_acceptance(&r);
    for v in &vs {
        assert_ne!(v.status, Status::Fail, "{v}");
    }
    let text = summary(&r);
    let events: Vec<&str> = text.lines().filter(|l| l.starts_with("event ")).collect();
    assert_eq!(events.len(), 3, "{text}");
}

#[test]
fn no_secondary_control_fails_restoration() {
    let mut s = common::shipped_scenario();
    s.agents.k_s = 0.0;
    let r = run_virtual(&s).unwrap();
    assert_eq!(status(&check_acceptance(&r), "frequency_restoration"), Status::Fail);
    assert_eq!(r.setpoints, 0);
}

#[test]
fn spike_free_link_reports_no_peaks() {
    let mut s = common::shipped_scenario();
    s.links.get_mut("wan").unwrap().spike_prob = 0.0;
    let vs = check_acceptance(&run_virtual(&s).unwrap());
    assert_eq!(status(&vs, "latency_peaks"), Status::Info);
    assert_eq!(status(&vs, "latency_max"), Status::Pass);
}

#[test]
fn zero_horizon_writes_headers_only() {
    let mut s = common::shipped_scenario();
    s.run.horizon_us = 0;
    let r = run_virtual(&s).unwrap();
    assert!(r.trace.is_empty());
    assert_eq!(r.gateway_emissions, 0);
    let dir = tempfile::tempdir().unwrap();
    emit_report(&r, dir.path()).unwrap();
    let trace = std::fs::read_to_string(dir.path().join(TRACE_FILE)).unwrap();
    assert_eq!(trace.lines().count(), 1);
    let lat = std::fs::read_to_string(dir.path().join("latency_wan.csv")).unwrap();
    assert_eq!(lat.trim_end(), LATENCY_HEADER);
    let sum = std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
    assert!(sum.contains("0 messages"), "{sum}");
    assert_eq!(status(&check_acceptance(&r), "trace_coverage"), Status::Pass);

    let started = Instant::now();
    let rt = run_realtime(&realtime(0, 1.0)).unwrap();
    assert!(started.elapsed() < Duration::from_secs(1));
    assert!(rt.trace.is_empty() && rt.link_stats("wan").count == 0);
}

#[test]
fn report_reloads_to_the_same_verdicts() {
    let r = run_virtual(&common::shipped_scenario()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&r, dir.path()).unwrap();
    let back = load_result(dir.path()).unwrap();
    assert_eq!(back.trace.len(), r.trace.len());
    assert_eq!(back.consensus.len(), r.consensus.len());
    assert_eq!(verdicts(&back), verdicts(&r));
    assert_eq!(check_acceptance(&back), check_acceptance(&r));
}

#[test]
fn frequency_plot_has_one_vertex_per_row() {
    let mut s = common::shipped_scenario();
    s.run.horizon_us = 20_000_000;
    let r = run_virtual(&s).unwrap();
    let svg = freq_svg(&r);
    let points = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
    assert_eq!(points.split_whitespace().count(), r.trace.len());
}

#[test]
fn seeds_change_latency_but_not_structure() {
    let mut s = common::shipped_scenario();
    s.run.horizon_us = 30_000_000;
    let a = run_virtual(&s).unwrap();
    let a2 = run_virtual(&s).unwrap();
    s.run.seed += 1;
    let b = run_virtual(&s).unwrap();
    assert_eq!(a.latency, a2.latency);
    assert_eq!(a.trace, a2.trace);
    assert_ne!(a.latency, b.latency);
    assert_eq!(a.trace.len(), b.trace.len());
    assert_eq!(a.gateway_emissions, b.gateway_emissions);
}

#[test]
fn alternative_wiring_still_restores() {
    for (coupling, transport) in [(Coupling::Poll, Transport::Hub), (Coupling::PubSub, Transport::Direct)] {
        let mut s = common::shipped_scenario();
        s.run.coupling = coupling;
        s.agents.transport = transport;
        let r = run_virtual(&s).unwrap();
        let vs = check_acceptance(&r);
        assert_eq!(status(&vs, "frequency_restoration"), Status::Pass, "{coupling:?}/{transport:?}");
        assert_eq!(status(&vs, "consensus"), Status::Pass);
    }
}

#[test]
fn runners_reject_the_other_mode() {
    let mut s = common::shipped_scenario();
    assert!(matches!(run_realtime(&s), Err(RunError::WrongMode("virtual"))));
    s.run.mode = Mode::Realtime;
    assert!(matches!(run_virtual(&s), Err(RunError::WrongMode("realtime"))));
}

fn realtime(horizon_s: u64, speedup: f64) -> Scenario {
    let mut s = common::shipped_scenario();
    s.run.mode = Mode::Realtime;
    s.run.horizon_us = horizon_s * 1_000_000;
    s.run.speedup = speedup;
    s.run.hub = "127.0.0.1:0".into();
    s
}

#[test]
fn realtime_emits_on_wall_clock() {
    let s = realtime(10, 10.0);
    let started = Instant::now();
    let r = run_realtime(&s).unwrap();
    let took = started.elapsed();
    assert!((9..=11).contains(&r.gateway_emissions), "{} emissions", r.gateway_emissions);
    assert!(took >= Duration::from_millis(900) && took < Duration::from_secs(5), "{took:?}");
    assert_eq!(status(&check_acceptance(&r), "ordering"), Status::Pass);
}

#[test]
fn unreachable_hub_times_out() {
    let addr = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().to_string()
    };
    let started = Instant::now();
    let e = run_realtime_on(&realtime(5, 10.0), &addr).unwrap_err();
    assert!(matches!(e, RunError::ConnectTimeout { .. }), "{e}");
    assert!(started.elapsed() < Duration::from_secs(8));
}

#[test]
fn realtime_agrees_with_virtual() {
    let v = run_virtual(&common::shipped_scenario()).unwrap();
    let s = realtime(180, 20.0);
    let r = run_realtime(&s).unwrap();
    let events = s.event_times();
    let mv = event_metrics(&v.trace, &events, s.run.horizon_us, 50.0);
    let mr = event_metrics(&r.trace, &events, s.run.horizon_us, 50.0);
    assert_eq!(mv.len(), mr.len());
    let at = |trace: &[gridloop::microgrid::TraceRow], t: u64| {
        trace.iter().rev().find(|row| row.t_us < t).map(|row| row.f_hz).unwrap()
    };
    for m in &mv {
        let end = m.end_us;
        let fv = at(&v.trace, end);
        let fr = at(&r.trace, end);
        assert!((fv - fr).abs() <= 0.05, "window ending {end}: virtual {fv}, realtime {fr}");
        assert!((fr - 50.0).abs() <= 0.05, "window ending {end}: realtime {fr}");
    }
    for v in check_acceptance(&r) {
        assert_ne!(v.status, Status::Fail, "{v}");
    }
}
