//! Result directory: CSV traces, plain-text summary, SVG plots, and the
//! scenario as run. `load_result` reads the same files back.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::mas::{ConsensusEvent, CycleOutcome};
use crate::microgrid::TraceRow;
use crate::netem::Transit;
use crate::scenario::{parse_scenario_in, print_scenario};

use super::check::{event_metrics, FINE_BAND_HZ, RESTORE_BAND_HZ};
use super::{Channel, RunError, RunResult};

pub const TRACE_FILE: &str = "trace.csv";
pub const CONSENSUS_FILE: &str = "consensus.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const SCENARIO_FILE: &str = "scenario.scn";
pub const LATENCY_HEADER: &str = "send_ts_us,delivery_ts_us,delay_ms,channel";
const CONSENSUS_HEADER: &str = "agent,cycle_us,start_us,end_us,rounds,x_hz,u_hz,outcome";

pub fn latency_file(link: &str) -> String {
    format!("latency_{link}.csv")
}

pub fn trace_csv(r: &RunResult) -> String {
    let mut s = TraceRow::header(r.n_ess());
    s.push('\n');
    for row in &r.trace {
        s.push_str(&row.to_csv());
        s.push('\n');
    }
    s
}

pub fn latency_csv(channels: &[Channel]) -> String {
    let mut s = format!("{LATENCY_HEADER}\n");
    for c in channels {
        for t in &c.transits {
            let _ = writeln!(s, "{},{},{},{}", t.send_us, t.delivery_us, t.delay_ms(), c.label);
        }
    }
    s
}

pub fn consensus_csv(events: &[ConsensusEvent]) -> String {
    let mut s = format!("{CONSENSUS_HEADER}\n");
    for e in events {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            e.agent + 1,
            e.cycle_us,
            e.start_us,
            e.end_us,
            e.rounds,
            e.x,
            e.u,
            e.outcome.as_str()
        );
    }
    s
}

fn secs(us: u64) -> f64 {
    us as f64 / 1e6
}

/// Human-readable digest. Contains nothing that depends on wall time.
pub fn summary(r: &RunResult) -> String {
    let s = &r.scenario;
    let mut out = String::new();
    let _ = writeln!(out, "mode = {}", s.run.mode.as_str());
    let _ = writeln!(out, "seed = {}", s.run.seed);
    let _ = writeln!(out, "horizon_s = {}", secs(s.run.horizon_us));
    let _ = writeln!(out, "trace_rows = {}", r.trace.len());
    let _ = writeln!(out, "gateway_emissions = {}", r.gateway_emissions);
    let _ = writeln!(out, "stale_rounds = {}", r.stale_rounds);
    let _ = writeln!(out, "setpoints = {}", r.setpoints);

    let f_nom = s.microgrid.f_nom;
    let max_dev = r.trace.iter().map(|row| (row.f_hz - f_nom).abs()).fold(0.0, f64::max);
    let _ = writeln!(out, "\n[frequency]");
    let _ = writeln!(out, "max_deviation_hz = {max_dev:.6}");
    let fmt_settle = |t: Option<u64>| t.map_or("never".to_string(), |t| format!("{:.2}", secs(t)));
    for m in event_metrics(&r.trace, &s.event_times(), s.run.horizon_us, f_nom) {
        let _ = writeln!(
            out,
            "event t={}s: peak {:.6} Hz, settle(+-{RESTORE_BAND_HZ}) {} s, settle(+-{FINE_BAND_HZ}) {} s",
            secs(m.t_us),
            m.peak_dev_hz,
            fmt_settle(m.settle_us),
            fmt_settle(m.settle_fine_us)
        );
    }

    let _ = writeln!(out, "\n[latency]");
    if r.latency.values().flatten().all(|c| c.transits.is_empty()) {
        let _ = writeln!(out, "no latency samples (0 messages)");
    }
    for link in r.latency.keys() {
        let st = r.link_stats(link);
        let _ = writeln!(
            out,
            "{link}: count {} mean {:.3} ms max {:.3} ms reorders {}",
            st.count, st.mean_ms, st.max_ms, st.reorder_count
        );
    }

    let _ = writeln!(out, "\n[consensus]");
    for o in [CycleOutcome::Converged, CycleOutcome::Aborted, CycleOutcome::NoConvergence] {
        let n = r.consensus.iter().filter(|e| e.outcome == o).count();
        let _ = writeln!(out, "{} = {n}", o.as_str());
    }
    out
}

struct Plot {
    x_range: (f64, f64),
    y_range: (f64, f64),
}

const W: f64 = 800.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

impl Plot {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let pad = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) };
        Self {
            x_range: pad(x),
            y_range: pad(y),
        }
    }

    fn px(&self, x: f64) -> f64 {
        let (lo, hi) = self.x_range;
        MARGIN + (x - lo) / (hi - lo) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        let (lo, hi) = self.y_range;
        H - MARGIN - (y - lo) / (hi - lo) * (H - 2.0 * MARGIN)
    }

    fn render(&self, title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
        let (x0, x1) = (MARGIN, W - MARGIN);
        let (y0, y1) = (H - MARGIN, MARGIN);
        let _ = writeln!(s, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#);
        for k in 0..=5 {
            let fx = self.x_range.0 + (self.x_range.1 - self.x_range.0) * k as f64 / 5.0;
            let fy = self.y_range.0 + (self.y_range.1 - self.y_range.0) * k as f64 / 5.0;
            let (tx, ty) = (self.px(fx), self.py(fy));
            let _ = writeln!(
                s,
                r#"<line x1="{tx:.2}" y1="{y0}" x2="{tx:.2}" y2="{}" stroke="black"/><text x="{tx:.2}" y="{}" text-anchor="middle">{}</text>"#,
                y0 + 5.0,
                y0 + 18.0,
                tick(fx)
            );
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{ty:.2}" x2="{x0}" y2="{ty:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
                x0 - 5.0,
                x0 - 7.0,
                ty + 4.0,
                tick(fy)
            );
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, W / 2.0, H - 10.0);
        let _ = writeln!(
            s,
            r#"<text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">{y_label}</text>"#,
            H / 2.0,
            H / 2.0
        );
        for (i, (name, pts)) in series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let mut points = String::new();
            for &(x, y) in pts {
                let _ = write!(points, "{:.2},{:.2} ", self.px(x), self.py(y));
            }
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1" points="{}"><title>{name}</title></polyline>"#,
                points.trim_end()
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
                x1 - 120.0,
                y1 + 14.0 * (i as f64 + 1.0)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

fn bounds(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

pub fn freq_svg(r: &RunResult) -> String {
    let pts: Vec<(f64, f64)> = r.trace.iter().map(|row| (secs(row.t_us), row.f_hz)).collect();
    let f_nom = r.scenario.microgrid.f_nom;
    let (lo, hi) = bounds(pts.iter().map(|p| p.1).chain([f_nom - RESTORE_BAND_HZ, f_nom + RESTORE_BAND_HZ]));
    let x = (0.0, secs(r.scenario.run.horizon_us));
    Plot::new(x, (lo, hi)).render("Frequency", "t (s)", "f (Hz)", &[("f".to_string(), pts)])
}

pub fn latency_svg(r: &RunResult) -> String {
    let link = &r.scenario.gateway.link;
    let series: Vec<(String, Vec<(f64, f64)>)> = r
        .latency
        .get(link)
        .into_iter()
        .flatten()
        .filter(|c| !c.transits.is_empty())
        .map(|c| {
            let pts = c.transits.iter().map(|t| (secs(t.send_us), t.delay_ms())).collect();
            (c.label.clone(), pts)
        })
        .collect();
    let (_, hi) = bounds(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let y = (0.0, if hi.is_finite() { hi } else { 1.0 });
    let x = (0.0, secs(r.scenario.run.horizon_us));
    Plot::new(x, y).render(&format!("Latency on {link}"), "send time (s)", "delay (ms)", &series)
}

/// Writes the full result directory and returns the paths written.
pub fn emit_report(r: &RunResult, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = vec![
        (TRACE_FILE.to_string(), trace_csv(r)),
        (CONSENSUS_FILE.to_string(), consensus_csv(&r.consensus)),
        (SUMMARY_FILE.to_string(), summary(r)),
        (SCENARIO_FILE.to_string(), print_scenario(&r.scenario)),
        ("freq.svg".to_string(), freq_svg(r)),
        ("latency.svg".to_string(), latency_svg(r)),
    ];
    for (link, chans) in &r.latency {
        files.push((latency_file(link), latency_csv(chans)));
    }
    let mut written = Vec::new();
    for (name, body) in files {
        let p = dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
    }
    Ok(written)
}

fn bad(path: &Path, msg: impl std::fmt::Display) -> RunError {
    RunError::Setup(format!("{}: {msg}", path.display()))
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>, RunError> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| bad(path, e))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<T, RunError> {
    rec.get(i)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(path, format!("bad field {i} in line {:?}", rec.position().map(|p| p.line()))))
}

fn read_trace(path: &Path, n_ess: usize) -> Result<Vec<TraceRow>, RunError> {
    let mut out = Vec::new();
    for rec in reader(path)?.records() {
        let rec = rec.map_err(|e| bad(path, e))?;
        if rec.len() != 5 + 2 * n_ess {
            return Err(bad(path, "column count does not match the unit count"));
        }
        let vals = |from: usize| (from..from + n_ess).map(|i| field(&rec, i, path)).collect::<Result<Vec<f64>, _>>();
        out.push(TraceRow {
            t_us: field(&rec, 0, path)?,
            f_hz: field(&rec, 1, path)?,
            p_pv: field(&rec, 2, path)?,
            p_building: field(&rec, 3, path)?,
            p_load2: field(&rec, 4, path)?,
            p_ess: vals(5)?,
            u: vals(5 + n_ess)?,
        });
    }
    Ok(out)
}

fn read_latency(path: &Path) -> Result<Vec<Channel>, RunError> {
    let mut chans: Vec<Channel> = Vec::new();
    for rec in reader(path)?.records() {
        let rec = rec.map_err(|e| bad(path, e))?;
        let label = rec.get(3).ok_or_else(|| bad(path, "missing channel"))?;
        let t = Transit {
            send_us: field(&rec, 0, path)?,
            delivery_us: field(&rec, 1, path)?,
        };
        match chans.last_mut() {
            Some(c) if c.label == label => c.transits.push(t),
            _ => chans.push(Channel {
                label: label.to_string(),
                transits: vec![t],
            }),
        }
    }
    Ok(chans)
}

fn read_consensus(path: &Path) -> Result<Vec<ConsensusEvent>, RunError> {
    let mut out = Vec::new();
    for rec in reader(path)?.records() {
        let rec = rec.map_err(|e| bad(path, e))?;
        let outcome = match rec.get(7) {
            Some("converged") => CycleOutcome::Converged,
            Some("aborted") => CycleOutcome::Aborted,
            Some("no_convergence") => CycleOutcome::NoConvergence,
            other => return Err(bad(path, format!("unknown outcome {other:?}"))),
        };
        let agent: usize = field(&rec, 0, path)?;
        out.push(ConsensusEvent {
            agent: agent.checked_sub(1).ok_or_else(|| bad(path, "agents are numbered from 1"))?,
            cycle_us: field(&rec, 1, path)?,
            start_us: field(&rec, 2, path)?,
            end_us: field(&rec, 3, path)?,
            rounds: field(&rec, 4, path)?,
            x: field(&rec, 5, path)?,
            u: field(&rec, 6, path)?,
            outcome,
        });
    }
    Ok(out)
}

fn summary_counter(text: &str, key: &str) -> u64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key)?.trim_start().strip_prefix('=')?.trim().parse().ok())
        .unwrap_or(0)
}

/// Reads a directory written by [`emit_report`].
pub fn load_result(dir: &Path) -> Result<RunResult, RunError> {
    let scn_path = dir.join(SCENARIO_FILE);
    let text = fs::read_to_string(&scn_path).map_err(|e| bad(&scn_path, e))?;
    let scenario = parse_scenario_in(&text, dir, false)?;
    let n = scenario.microgrid.ess.len();
    let trace_path = dir.join(TRACE_FILE);
    let trace = if trace_path.exists() { read_trace(&trace_path, n)? } else { Vec::new() };
    let cons_path = dir.join(CONSENSUS_FILE);
    let consensus = if cons_path.exists() { read_consensus(&cons_path)? } else { Vec::new() };
    let mut latency = BTreeMap::new();
    for link in scenario.links.keys() {
        let p = dir.join(latency_file(link));
        if p.exists() {
            latency.insert(link.clone(), read_latency(&p)?);
        }
    }
    let summary = fs::read_to_string(dir.join(SUMMARY_FILE)).unwrap_or_default();
    Ok(RunResult {
        gateway_emissions: summary_counter(&summary, "gateway_emissions"),
        stale_rounds: summary_counter(&summary, "stale_rounds"),
        setpoints: summary_counter(&summary, "setpoints"),
        scenario,
        trace,
        latency,
        consensus,
    })
}
