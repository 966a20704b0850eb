//! Run-level acceptance verdicts and per-event frequency metrics.

use std::fmt;

use crate::mas::CycleOutcome;
use crate::microgrid::TraceRow;
use crate::netem::LinkMode;

use super::RunResult;

/// Band the frequency must return to after each event, Hz.
pub const RESTORE_BAND_HZ: f64 = 0.02;
/// Simulated time allowed for that return.
pub const RESTORE_WITHIN_US: u64 = 30_000_000;
/// Smallest transient that counts as a visible disturbance, Hz.
pub const MIN_TRANSIENT_HZ: f64 = 0.01;
/// Tighter band reported alongside, Hz.
pub const FINE_BAND_HZ: f64 = 0.001;

pub const LATENCY_MEAN_MS: (f64, f64) = (30.0, 35.0);
pub const LATENCY_MAX_MS: f64 = 85.0;
pub const SPIKE_MS: f64 = 70.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EventMetrics {
    pub t_us: u64,
    /// End of the window this event owns (next event or horizon).
    pub end_us: u64,
    pub peak_dev_hz: f64,
    /// Time from the event until the trace enters the band for good;
    /// `None` if it is still outside at the end of the window.
    pub settle_us: Option<u64>,
    pub settle_fine_us: Option<u64>,
}

fn settle(rows: &[&TraceRow], t0: u64, f_nom: f64, band: f64) -> Option<u64> {
    match rows.iter().rposition(|r| (r.f_hz - f_nom).abs() > band) {
        None => Some(0),
        Some(i) if i + 1 < rows.len() => Some(rows[i + 1].t_us - t0),
        Some(_) => None,
    }
}

/// Splits the trace at each event time and measures every window.
pub fn event_metrics(trace: &[TraceRow], events: &[u64], horizon_us: u64, f_nom: f64) -> Vec<EventMetrics> {
    events
        .iter()
        .enumerate()
        .map(|(k, &t0)| {
            let end = events.get(k + 1).copied().unwrap_or(horizon_us);
            let rows: Vec<&TraceRow> = trace.iter().filter(|r| r.t_us >= t0 && r.t_us < end).collect();
            let peak = rows.iter().map(|r| (r.f_hz - f_nom).abs()).fold(0.0, f64::max);
            EventMetrics {
                t_us: t0,
                end_us: end,
                peak_dev_hz: peak,
                settle_us: settle(&rows, t0, f_nom, RESTORE_BAND_HZ),
                settle_fine_us: settle(&rows, t0, f_nom, FINE_BAND_HZ),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    /// Reported, never fails a run.
    Info,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Info => "INFO",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub name: String,
    pub status: Status,
    pub measured: String,
}

impl Verdict {
    fn new(name: &str, pass: bool, measured: String) -> Self {
        Self {
            name: name.to_string(),
            status: if pass { Status::Pass } else { Status::Fail },
            measured,
        }
    }

    fn info(name: &str, measured: String) -> Self {
        Self {
            name: name.to_string(),
            status: Status::Info,
            measured,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", self.status.as_str(), self.name, self.measured)
    }
}

fn secs(us: u64) -> f64 {
    us as f64 / 1e6
}

/// Evaluates every criterion observable from one run.
pub fn check_acceptance(r: &RunResult) -> Vec<Verdict> {
    let s = &r.scenario;
    let mut out = Vec::new();

    let events = s.event_times();
    let metrics = event_metrics(&r.trace, &events, s.run.horizon_us, s.microgrid.f_nom);
    if metrics.is_empty() || r.trace.is_empty() {
        out.push(Verdict::info("frequency_restoration", "no disturbance events in the trace".into()));
    } else {
        let mut pass = true;
        let mut parts = Vec::new();
        for m in &metrics {
            let ok_settle = m.settle_us.is_some_and(|t| t <= RESTORE_WITHIN_US);
            let ok_peak = m.peak_dev_hz >= MIN_TRANSIENT_HZ;
            pass &= ok_settle && ok_peak;
            let settle = m
                .settle_us
                .map_or("never".to_string(), |t| format!("{:.2}s", secs(t)));
            parts.push(format!("t={}s peak={:.4}Hz settle={settle}", secs(m.t_us), m.peak_dev_hz));
        }
        out.push(Verdict::new("frequency_restoration", pass, parts.join("; ")));
    }

    let wan = &s.gateway.link;
    let st = r.link_stats(wan);
    if st.count == 0 {
        out.push(Verdict::info("latency_mean", format!("no samples on {wan}")));
    } else {
        let (lo, hi) = LATENCY_MEAN_MS;
        out.push(Verdict::new(
            "latency_mean",
            (lo..=hi).contains(&st.mean_ms),
            format!("{wan}: mean {:.3} ms over {} messages", st.mean_ms, st.count),
        ));
        out.push(Verdict::new(
            "latency_max",
            st.max_ms <= LATENCY_MAX_MS,
            format!("{wan}: max {:.3} ms", st.max_ms),
        ));
        let spikes: usize = r.latency[wan]
            .iter()
            .flat_map(|c| &c.transits)
            .filter(|t| t.delay_ms() >= SPIKE_MS)
            .count();
        if spikes == 0 {
            out.push(Verdict::info("latency_peaks", format!("{wan}: no spikes")));
        } else {
            out.push(Verdict::new("latency_peaks", true, format!("{wan}: {spikes} samples >= {SPIKE_MS} ms")));
        }
    }

    let mut stream_reorders = 0;
    let mut datagram_reorders = 0;
    for (name, spec) in &s.links {
        let n = r.link_stats(name).reorder_count;
        match spec.mode {
            LinkMode::Stream => stream_reorders += n,
            LinkMode::Datagram => datagram_reorders += n,
        }
    }
    out.push(Verdict::new(
        "ordering",
        stream_reorders == 0,
        format!("{stream_reorders} reorders on stream links, {datagram_reorders} on datagram links"),
    ));

    if r.consensus.is_empty() {
        out.push(Verdict::info("consensus", "no consensus cycles".into()));
    } else {
        let count = |o: CycleOutcome| r.consensus.iter().filter(|e| e.outcome == o).count();
        let converged: Vec<u64> = r
            .consensus
            .iter()
            .filter(|e| e.outcome == CycleOutcome::Converged)
            .map(|e| e.rounds)
            .collect();
        let failed = count(CycleOutcome::NoConvergence);
        out.push(Verdict::new(
            "consensus",
            failed == 0,
            format!(
                "{} converged (max {} rounds), {} aborted, {failed} without convergence",
                converged.len(),
                converged.iter().max().copied().unwrap_or(0),
                count(CycleOutcome::Aborted)
            ),
        ));
    }

    let expected_rows = s.run.horizon_us.div_ceil(s.run.trace_period_us) as usize;
    let monotone = r.trace.windows(2).all(|w| w[0].t_us < w[1].t_us);
    let covers = r.trace.first().is_none_or(|row| row.t_us == 0)
        && r.trace.last().is_none_or(|row| row.t_us < s.run.horizon_us);
    out.push(Verdict::new(
        "trace_coverage",
        monotone && covers && r.trace.len() == expected_rows,
        format!("{} rows, {expected_rows} expected", r.trace.len()),
    ));
    out
}
