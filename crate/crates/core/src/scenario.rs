//! Experiment description: a sectioned `key = value` text file.
//!
//! ```text
//! # comment
//! [run]
//! horizon_s = 180
//! [link.wan]
//! base_ms = 32
//! [disturbances]
//! load2_on = 60 connect load2
//! ```
//!
//! Every default is materialized on parse, so a parsed [`Scenario`] is
//! self-contained and [`print_scenario`] writes all of it back out.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::gateway::profile::{crop_window, load_profile, Profile};
use crate::gateway::{synthetic, Coupling};
use crate::hub::Topic;
use crate::mas::{AgentGraph, ConvergenceCriterion, Transport};
use crate::microgrid::{Action, EssParams, Target};
use crate::netem::{DelayModel, LinkMode};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },
    #[error("missing file {}", path.display())]
    MissingFile { path: PathBuf },
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn invalid(field: &str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Virtual,
    Realtime,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Virtual => "virtual",
            Mode::Realtime => "realtime",
        }
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "virtual" => Ok(Mode::Virtual),
            "realtime" => Ok(Mode::Realtime),
            _ => Err("expected virtual or realtime".into()),
        }
    }
}

fn parse_coupling(s: &str) -> Result<Coupling, String> {
    match s {
        "pubsub" => Ok(Coupling::PubSub),
        "poll" => Ok(Coupling::Poll),
        _ => Err("expected pubsub or poll".into()),
    }
}

fn parse_transport(s: &str) -> Result<Transport, String> {
    match s {
        "hub" => Ok(Transport::Hub),
        "direct" => Ok(Transport::Direct),
        _ => Err("expected hub or direct".into()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub horizon_us: u64,
    pub mode: Mode,
    pub seed: u64,
    pub emission_period_us: u64,
    pub step_us: u64,
    pub trace_period_us: u64,
    pub out_dir: PathBuf,
    pub coupling: Coupling,
    /// Realtime only: simulated seconds per wall-clock second.
    pub speedup: f64,
    /// Realtime only: hub listen/connect address.
    pub hub: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub base_ms: f64,
    pub jitter_ms: f64,
    pub spike_prob: f64,
    pub spike_min_ms: f64,
    pub spike_max_ms: f64,
    pub mode: LinkMode,
}

impl LinkSpec {
    pub fn wan_default() -> Self {
        let m = DelayModel::calibrated(0);
        Self {
            base_ms: m.base_ms,
            jitter_ms: m.jitter_std_ms,
            spike_prob: m.spike_prob,
            spike_min_ms: m.spike_range_ms.0,
            spike_max_ms: m.spike_range_ms.1,
            mode: m.mode,
        }
    }

    /// Same-site network between simulator and agents.
    pub fn lan_default() -> Self {
        Self {
            base_ms: 0.5,
            jitter_ms: 0.1,
            spike_prob: 0.0,
            spike_min_ms: 0.5,
            spike_max_ms: 0.5,
            mode: LinkMode::Stream,
        }
    }

    pub fn model(&self, seed: u64) -> DelayModel {
        DelayModel {
            base_ms: self.base_ms,
            jitter_std_ms: self.jitter_ms,
            spike_prob: self.spike_prob,
            spike_range_ms: (self.spike_min_ms, self.spike_max_ms),
            seed,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProfileSource {
    Builtin(String),
    /// As written in the file; relative paths resolve against the scenario
    /// directory.
    File(PathBuf),
}

impl ProfileSource {
    fn render(&self) -> String {
        match self {
            ProfileSource::Builtin(n) => format!("builtin:{n}"),
            ProfileSource::File(p) => p.display().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSpec {
    pub source: ProfileSource,
    pub crop_us: Option<(u64, u64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayConfig {
    pub link: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EssSpec {
    pub m_droop: f64,
    pub p_set: f64,
    pub p_min: f64,
    pub p_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicrogridConfig {
    pub ess: Vec<EssSpec>,
    pub f_nom: f64,
    pub tau_f_s: f64,
    pub damping: f64,
    pub s_base_w: f64,
    pub load2_pu: f64,
    pub link: String,
}

impl MicrogridConfig {
    pub fn ess_params(&self) -> Vec<EssParams> {
        self.ess
            .iter()
            .enumerate()
            .map(|(i, e)| EssParams {
                id: i + 1,
                m_droop: e.m_droop,
                p_set: e.p_set,
                p_min: e.p_min,
                p_max: e.p_max,
                u: 0.0,
                online: true,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentsConfig {
    pub enabled: bool,
    /// 1-based, as written.
    pub edges: Vec<(usize, usize)>,
    pub k_s: f64,
    pub crit: ConvergenceCriterion,
    pub transport: Transport,
    pub link: String,
}

impl AgentsConfig {
    pub fn graph(&self, n: usize) -> Result<AgentGraph, crate::mas::MasError> {
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|&(a, b)| (a - 1, b - 1)).collect();
        AgentGraph::from_edges(n, &edges)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Breaker inside the simulated grid.
    Sim,
    /// On-site breaker at the remote gateway.
    Gateway,
}

impl Placement {
    pub fn as_str(self) -> &'static str {
        match self {
            Placement::Sim => "sim",
            Placement::Gateway => "gateway",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSpec {
    pub label: String,
    pub t_us: u64,
    pub action: Action,
    pub target: Target,
    pub placement: Placement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Directory relative profile paths resolve against. Not printed.
    pub base_dir: PathBuf,
    pub run: RunConfig,
    pub links: BTreeMap<String, LinkSpec>,
    pub profiles: BTreeMap<String, ProfileSpec>,
    pub gateway: GatewayConfig,
    pub microgrid: MicrogridConfig,
    pub agents: AgentsConfig,
    /// Sorted by time; ties keep file order.
    pub disturbances: Vec<DisturbanceSpec>,
}

/// 11:00 and 12:20 in seconds since midnight.
pub const DEFAULT_CROP_S: (u64, u64) = (11 * 3600, 12 * 3600 + 20 * 60);

fn ring_edges(n: usize) -> Vec<(usize, usize)> {
    match n {
        0 | 1 => vec![],
        2 => vec![(1, 2)],
        _ => (1..=n).map(|i| (i, i % n + 1)).collect(),
    }
}

impl Scenario {
    /// Reads and parses a scenario file; relative paths resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                ScenarioError::MissingFile { path: path.to_path_buf() }
            } else {
                ScenarioError::Io {
                    path: path.to_path_buf(),
                    source: e,
                }
            }
        })?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        parse_scenario_in(&text, &base, true)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Loads, crops and re-bases every gateway profile.
    pub fn load_profiles(&self) -> Result<Vec<Profile>, ScenarioError> {
        self.profiles
            .iter()
            .map(|(dev, spec)| {
                let field = format!("profile.{dev}");
                let raw = match &spec.source {
                    ProfileSource::Builtin(name) => synthetic::builtin(name)
                        .ok_or_else(|| invalid(&field, format!("no builtin profile {name:?}")))?,
                    ProfileSource::File(p) => {
                        let path = self.resolve(p);
                        let text = std::fs::read_to_string(&path)
                            .map_err(|_| ScenarioError::MissingFile { path: path.clone() })?;
                        load_profile(dev, &text).map_err(|e| invalid(&field, e.to_string()))?
                    }
                };
                let mut p = match spec.crop_us {
                    Some((a, b)) => crop_window(&raw, a, b).map_err(|e| invalid(&field, e.to_string()))?,
                    None => raw,
                };
                p.device_id = dev.clone();
                Ok(p)
            })
            .collect()
    }

    /// Distinct disturbance instants; simultaneous entries form one event.
    pub fn event_times(&self) -> Vec<u64> {
        let set: BTreeSet<u64> = self.disturbances.iter().map(|d| d.t_us).collect();
        set.into_iter().collect()
    }
}

struct Entry {
    value: String,
    line: usize,
}

struct Section {
    name: String,
    line: usize,
    entries: Vec<(String, Entry)>,
}

fn split_sections(text: &str) -> Result<Vec<Section>, ScenarioError> {
    let mut sections: Vec<Section> = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| ScenarioError::Syntax {
                    line,
                    message: "unterminated section header".into(),
                })?
                .trim()
                .to_string();
            if name.is_empty() {
                return Err(ScenarioError::Syntax {
                    line,
                    message: "empty section name".into(),
                });
            }
            if !seen.insert(name.clone()) {
                return Err(ScenarioError::Syntax {
                    line,
                    message: format!("duplicate section [{name}]"),
                });
            }
            sections.push(Section {
                name,
                line,
                entries: Vec::new(),
            });
            continue;
        }
        let (k, v) = content.split_once('=').ok_or_else(|| ScenarioError::Syntax {
            line,
            message: "expected `key = value`".into(),
        })?;
        let key = k.trim().to_string();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(ScenarioError::Syntax {
                line,
                message: format!("bad key {key:?}"),
            });
        }
        let section = sections.last_mut().ok_or_else(|| ScenarioError::Syntax {
            line,
            message: "key outside of any section".into(),
        })?;
        if section.entries.iter().any(|(k2, _)| *k2 == key) {
            return Err(ScenarioError::Syntax {
                line,
                message: format!("duplicate key {key:?} in [{}]", section.name),
            });
        }
        section.entries.push((
            key,
            Entry {
                value: v.trim().to_string(),
                line,
            },
        ));
    }
    Ok(sections)
}

/// Typed access to one section's entries; anything not taken is an error.
struct Fields {
    section: String,
    entries: Vec<(String, Entry)>,
}

impl Fields {
    fn new(s: Section) -> Self {
        Self {
            section: s.name,
            entries: s.entries,
        }
    }

    fn empty(name: &str) -> Self {
        Self {
            section: name.to_string(),
            entries: Vec::new(),
        }
    }

    fn field(&self, key: &str) -> String {
        format!("{}.{key}", self.section)
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        let i = self.entries.iter().position(|(k, _)| k == key)?;
        Some(self.entries.remove(i).1.value)
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, ScenarioError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| invalid(&self.field(key), format!("cannot parse {v:?}"))),
        }
    }

    fn get_with<T>(
        &mut self,
        key: &str,
        default: T,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, ScenarioError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => parse(&v).map_err(|m| invalid(&self.field(key), m)),
        }
    }

    /// Seconds (or `scale` units) as a non-negative float, stored in µs.
    fn duration(&mut self, key: &str, default_us: u64, us_per_unit: f64) -> Result<u64, ScenarioError> {
        let field = self.field(key);
        match self.raw(key) {
            None => Ok(default_us),
            Some(v) => {
                let x: f64 = v.parse().map_err(|_| invalid(&field, format!("cannot parse {v:?}")))?;
                if !(x.is_finite() && x >= 0.0) {
                    return Err(invalid(&field, "must be a finite non-negative number"));
                }
                Ok((x * us_per_unit).round() as u64)
            }
        }
    }

    fn finish(self) -> Result<(), ScenarioError> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, e)) => Err(ScenarioError::Syntax {
                line: e.line,
                message: format!("unknown key {k:?} in [{}]", self.section),
            }),
        }
    }
}

fn parse_list(v: &str) -> Result<Vec<f64>, String> {
    v.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| format!("bad number {s:?}")))
        .collect()
}

fn parse_edges(v: &str) -> Result<Vec<(usize, usize)>, String> {
    if v.trim().is_empty() {
        return Ok(vec![]);
    }
    v.split(',')
        .map(|e| {
            let (a, b) = e.trim().split_once('-').ok_or(format!("bad edge {e:?}"))?;
            let a = a.trim().parse().map_err(|_| format!("bad edge {e:?}"))?;
            let b = b.trim().parse().map_err(|_| format!("bad edge {e:?}"))?;
            Ok((a, b))
        })
        .collect()
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    parse_scenario_in(text, Path::new("."), true)
}

/// Parses against `base_dir`. With `check_files` off, profile files are not
/// required to exist (used when re-reading saved results).
pub fn parse_scenario_in(text: &str, base_dir: &Path, check_files: bool) -> Result<Scenario, ScenarioError> {
    let mut run_f = Fields::empty("run");
    let mut gateway_f = Fields::empty("gateway");
    let mut microgrid_f = Fields::empty("microgrid");
    let mut agents_f = Fields::empty("agents");
    let mut disturbances: Option<Section> = None;
    let mut link_sections = Vec::new();
    let mut profile_sections = Vec::new();

    for s in split_sections(text)? {
        match s.name.as_str() {
            "run" => run_f = Fields::new(s),
            "gateway" => gateway_f = Fields::new(s),
            "microgrid" => microgrid_f = Fields::new(s),
            "agents" => agents_f = Fields::new(s),
            "disturbances" => disturbances = Some(s),
            n if n.starts_with("link.") => link_sections.push(s),
            n if n.starts_with("profile.") => profile_sections.push(s),
            _ => {
                return Err(ScenarioError::Syntax {
                    line: s.line,
                    message: format!("unknown section [{}]", s.name),
                })
            }
        }
    }

    let run = RunConfig {
        horizon_us: run_f.duration("horizon_s", 180_000_000, 1e6)?,
        mode: run_f.get("mode", Mode::Virtual)?,
        seed: run_f.get("seed", 42u64)?,
        emission_period_us: run_f.duration("emission_period_s", 1_000_000, 1e6)?,
        step_us: run_f.duration("step_ms", 10_000, 1e3)?,
        trace_period_us: run_f.duration("trace_period_ms", 100_000, 1e3)?,
        out_dir: run_f.get("out_dir", PathBuf::from("out"))?,
        coupling: run_f.get_with("coupling", Coupling::PubSub, parse_coupling)?,
        speedup: run_f.get("speedup", 1.0f64)?,
        hub: run_f.get("hub", String::from("127.0.0.1:0"))?,
    };
    run_f.finish()?;

    let mut links = BTreeMap::new();
    links.insert("wan".to_string(), LinkSpec::wan_default());
    links.insert("lan".to_string(), LinkSpec::lan_default());
    for s in link_sections {
        let name = s.name["link.".len()..].to_string();
        let mut f = Fields::new(s);
        let d = links.get(&name).cloned().unwrap_or_else(LinkSpec::wan_default);
        let spec = LinkSpec {
            base_ms: f.get("base_ms", d.base_ms)?,
            jitter_ms: f.get("jitter_ms", d.jitter_ms)?,
            spike_prob: f.get("spike_prob", d.spike_prob)?,
            spike_min_ms: f.get("spike_min_ms", d.spike_min_ms)?,
            spike_max_ms: f.get("spike_max_ms", d.spike_max_ms)?,
            mode: f.get_with("mode", d.mode, |v| v.parse().map_err(|e: crate::netem::NetemError| e.to_string()))?,
        };
        f.finish()?;
        spec.model(0)
            .validate()
            .map_err(|e| invalid(&format!("link.{name}"), e.to_string()))?;
        links.insert(name, spec);
    }

    let default_crop = Some((DEFAULT_CROP_S.0 * 1_000_000, DEFAULT_CROP_S.1 * 1_000_000));
    let mut profiles = BTreeMap::new();
    if profile_sections.is_empty() {
        for dev in ["building", "pv"] {
            profiles.insert(
                dev.to_string(),
                ProfileSpec {
                    source: ProfileSource::Builtin(dev.to_string()),
                    crop_us: default_crop,
                },
            );
        }
    }
    for s in profile_sections {
        let dev = s.name["profile.".len()..].to_string();
        let field = format!("profile.{dev}");
        if Topic::new(dev.as_str()).is_err() || dev.contains('/') {
            return Err(invalid(&field, "device id must be one topic segment"));
        }
        let mut f = Fields::new(s);
        let source = match f.raw("source") {
            None => ProfileSource::Builtin(dev.clone()),
            Some(v) => match v.strip_prefix("builtin:") {
                Some(n) => ProfileSource::Builtin(n.to_string()),
                None => ProfileSource::File(PathBuf::from(v)),
            },
        };
        let crop_us = match (f.raw("crop_start_s"), f.raw("crop_end_s")) {
            (None, None) => default_crop,
            (Some(a), Some(b)) => {
                let secs = |v: &str| -> Result<u64, ScenarioError> {
                    let x: f64 = v.parse().map_err(|_| invalid(&field, format!("bad crop bound {v:?}")))?;
                    if !(x.is_finite() && x >= 0.0) {
                        return Err(invalid(&field, "crop bounds must be >= 0"));
                    }
                    Ok((x * 1e6).round() as u64)
                };
                let (a, b) = (secs(&a)?, secs(&b)?);
                if a >= b {
                    return Err(invalid(&field, "crop_start_s must be < crop_end_s"));
                }
                Some((a, b))
            }
            _ => return Err(invalid(&field, "crop_start_s and crop_end_s go together")),
        };
        let none = f.get("crop", String::from("window"))?;
        let crop_us = match none.as_str() {
            "window" => crop_us,
            "none" => None,
            _ => return Err(invalid(&field, "crop must be window or none")),
        };
        f.finish()?;
        match &source {
            ProfileSource::Builtin(n) if synthetic::builtin(n).is_none() => {
                return Err(invalid(&field, format!("no builtin profile {n:?}")));
            }
            ProfileSource::File(p) if check_files => {
                let path = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
                if !path.is_file() {
                    return Err(ScenarioError::MissingFile { path });
                }
            }
            _ => {}
        }
        profiles.insert(dev, ProfileSpec { source, crop_us });
    }

    let gateway = GatewayConfig {
        link: gateway_f.get("link", String::from("wan"))?,
    };
    gateway_f.finish()?;

    let n_ess: usize = microgrid_f.get("n_ess", 4usize)?;
    if n_ess == 0 {
        return Err(invalid("microgrid.n_ess", "need at least one storage unit"));
    }
    let mut per_unit = |key: &str, default: f64| -> Result<Vec<f64>, ScenarioError> {
        let field = format!("microgrid.{key}");
        match microgrid_f.raw(key) {
            None => Ok(vec![default; n_ess]),
            Some(v) => {
                let xs = parse_list(&v).map_err(|m| invalid(&field, m))?;
                match xs.len() {
                    1 => Ok(vec![xs[0]; n_ess]),
                    n if n == n_ess => Ok(xs),
                    n => Err(invalid(&field, format!("{n} values for {n_ess} units"))),
                }
            }
        }
    };
    let m = per_unit("m_droop", 0.1)?;
    let p_set = per_unit("p_set", 0.0)?;
    let p_min = per_unit("p_min", -1.0)?;
    let p_max = per_unit("p_max", 1.0)?;
    let ess: Vec<EssSpec> = (0..n_ess)
        .map(|i| EssSpec {
            m_droop: m[i],
            p_set: p_set[i],
            p_min: p_min[i],
            p_max: p_max[i],
        })
        .collect();
    let microgrid = MicrogridConfig {
        ess,
        f_nom: microgrid_f.get("f_nom", 50.0)?,
        tau_f_s: microgrid_f.get("tau_f_s", 0.5)?,
        damping: microgrid_f.get("damping", 0.0)?,
        s_base_w: microgrid_f.get("s_base_w", 10_000.0)?,
        load2_pu: microgrid_f.get("load2_pu", 0.1)?,
        link: microgrid_f.get("link", String::from("lan"))?,
    };
    microgrid_f.finish()?;

    let defaults = ConvergenceCriterion::default();
    let agents = AgentsConfig {
        enabled: agents_f.get("enabled", true)?,
        edges: agents_f.get_with("edges", ring_edges(n_ess), parse_edges)?,
        k_s: agents_f.get("k_s", 1.0)?,
        crit: ConvergenceCriterion {
            eps: agents_f.get("eps_hz", defaults.eps)?,
            r: agents_f.get("rounds", defaults.r)?,
            max_iter: agents_f.get("max_iter", defaults.max_iter)?,
        },
        transport: agents_f.get_with("transport", Transport::Hub, parse_transport)?,
        link: agents_f.get("link", String::from("lan"))?,
    };
    agents_f.finish()?;

    let disturbances = match disturbances {
        None => vec![
            DisturbanceSpec {
                label: "pv_on".into(),
                t_us: 0,
                action: Action::Connect,
                target: Target::Pv,
                placement: Placement::Sim,
            },
            DisturbanceSpec {
                label: "building_on".into(),
                t_us: 0,
                action: Action::Connect,
                target: Target::Building,
                placement: Placement::Sim,
            },
        ],
        Some(s) => parse_disturbances(s)?,
    };

    let scenario = Scenario {
        base_dir: base_dir.to_path_buf(),
        run,
        links,
        profiles,
        gateway,
        microgrid,
        agents,
        disturbances,
    };
    validate(&scenario)?;
    Ok(scenario)
}

fn parse_disturbances(s: Section) -> Result<Vec<DisturbanceSpec>, ScenarioError> {
    let mut out = Vec::new();
    for (label, e) in s.entries {
        let field = format!("disturbances.{label}");
        let parts: Vec<&str> = e.value.split_whitespace().collect();
        if !(3..=4).contains(&parts.len()) {
            return Err(ScenarioError::Syntax {
                line: e.line,
                message: "expected `<t_s> <connect|disconnect> <pv|building|load2> [sim|gateway]`".into(),
            });
        }
        let t: f64 = parts[0]
            .parse()
            .map_err(|_| invalid(&field, format!("bad time {:?}", parts[0])))?;
        if !(t.is_finite() && t >= 0.0) {
            return Err(invalid(&field, "time must be >= 0"));
        }
        let action = parts[1].parse().map_err(|e: crate::microgrid::MicrogridError| invalid(&field, e.to_string()))?;
        let target = parts[2].parse().map_err(|e: crate::microgrid::MicrogridError| invalid(&field, e.to_string()))?;
        let placement = match parts.get(3) {
            None | Some(&"sim") => Placement::Sim,
            Some(&"gateway") => Placement::Gateway,
            Some(p) => return Err(invalid(&field, format!("bad placement {p:?}"))),
        };
        out.push(DisturbanceSpec {
            label,
            t_us: (t * 1e6).round() as u64,
            action,
            target,
            placement,
        });
    }
    out.sort_by_key(|d| d.t_us);
    Ok(out)
}

fn validate(s: &Scenario) -> Result<(), ScenarioError> {
    let r = &s.run;
    if r.emission_period_us == 0 {
        return Err(invalid("run.emission_period_s", "must be > 0"));
    }
    if r.step_us == 0 {
        return Err(invalid("run.step_ms", "must be > 0"));
    }
    if r.trace_period_us == 0 {
        return Err(invalid("run.trace_period_ms", "must be > 0"));
    }
    if !(r.speedup.is_finite() && r.speedup > 0.0) {
        return Err(invalid("run.speedup", "must be > 0"));
    }
    for (field, link) in [
        ("gateway.link", &s.gateway.link),
        ("microgrid.link", &s.microgrid.link),
        ("agents.link", &s.agents.link),
    ] {
        if !s.links.contains_key(link) {
            return Err(invalid(field, format!("no [link.{link}] defined")));
        }
    }
    let mg = &s.microgrid;
    for p in mg.ess_params() {
        p.validate()
            .map_err(|e| invalid("microgrid", e.to_string()))?;
    }
    if !(mg.tau_f_s > 0.0) {
        return Err(invalid("microgrid.tau_f_s", "must be > 0"));
    }
    if r.step_us as f64 / 1e6 >= mg.tau_f_s {
        return Err(invalid("run.step_ms", "must be shorter than microgrid.tau_f_s"));
    }
    if !(mg.damping >= 0.0) {
        return Err(invalid("microgrid.damping", "must be >= 0"));
    }
    if !(mg.s_base_w > 0.0) {
        return Err(invalid("microgrid.s_base_w", "must be > 0"));
    }
    let a = &s.agents;
    let n = mg.ess.len();
    if a.edges.iter().any(|&(x, y)| x == 0 || y == 0 || x > n || y > n) {
        return Err(invalid("agents.edges", format!("agent ids run from 1 to {n}")));
    }
    a.graph(n).map_err(|e| invalid("agents.edges", e.to_string()))?;
    a.crit
        .validate()
        .map_err(|e| invalid("agents", e.to_string()))?;
    if !a.k_s.is_finite() {
        return Err(invalid("agents.k_s", "must be finite"));
    }
    for d in &s.disturbances {
        let field = format!("disturbances.{}", d.label);
        if d.t_us > r.horizon_us {
            return Err(invalid(&field, "scheduled after the horizon"));
        }
        if d.placement == Placement::Gateway && !s.profiles.contains_key(d.target.as_str()) {
            return Err(invalid(&field, format!("gateway has no device {:?}", d.target.as_str())));
        }
    }
    Ok(())
}

fn secs(us: u64) -> f64 {
    us as f64 / 1e6
}

fn millis(us: u64) -> f64 {
    us as f64 / 1e3
}

fn list(xs: impl Iterator<Item = f64>) -> String {
    let xs: Vec<f64> = xs.collect();
    if xs.windows(2).all(|w| w[0] == w[1]) {
        xs[0].to_string()
    } else {
        xs.iter().map(f64::to_string).collect::<Vec<_>>().join(", ")
    }
}

/// Writes every field, defaults included.
pub fn print_scenario(s: &Scenario) -> String {
    let mut o = String::new();
    let r = &s.run;
    let _ = writeln!(o, "[run]");
    let _ = writeln!(o, "horizon_s = {}", secs(r.horizon_us));
    let _ = writeln!(o, "mode = {}", r.mode.as_str());
    let _ = writeln!(o, "seed = {}", r.seed);
    let _ = writeln!(o, "emission_period_s = {}", secs(r.emission_period_us));
    let _ = writeln!(o, "step_ms = {}", millis(r.step_us));
    let _ = writeln!(o, "trace_period_ms = {}", millis(r.trace_period_us));
    let _ = writeln!(o, "out_dir = {}", r.out_dir.display());
    let _ = writeln!(o, "coupling = {}", r.coupling.as_str());
    let _ = writeln!(o, "speedup = {}", r.speedup);
    let _ = writeln!(o, "hub = {}", r.hub);
    for (name, l) in &s.links {
        let _ = writeln!(o, "\n[link.{name}]");
        let _ = writeln!(o, "base_ms = {}", l.base_ms);
        let _ = writeln!(o, "jitter_ms = {}", l.jitter_ms);
        let _ = writeln!(o, "spike_prob = {}", l.spike_prob);
        let _ = writeln!(o, "spike_min_ms = {}", l.spike_min_ms);
        let _ = writeln!(o, "spike_max_ms = {}", l.spike_max_ms);
        let _ = writeln!(o, "mode = {}", l.mode.as_str());
    }
    for (dev, p) in &s.profiles {
        let _ = writeln!(o, "\n[profile.{dev}]");
        let _ = writeln!(o, "source = {}", p.source.render());
        match p.crop_us {
            Some((a, b)) => {
                let _ = writeln!(o, "crop_start_s = {}", secs(a));
                let _ = writeln!(o, "crop_end_s = {}", secs(b));
            }
            None => {
                let _ = writeln!(o, "crop = none");
            }
        }
    }
    let _ = writeln!(o, "\n[gateway]");
    let _ = writeln!(o, "link = {}", s.gateway.link);
    let mg = &s.microgrid;
    let _ = writeln!(o, "\n[microgrid]");
    let _ = writeln!(o, "n_ess = {}", mg.ess.len());
    let _ = writeln!(o, "m_droop = {}", list(mg.ess.iter().map(|e| e.m_droop)));
    let _ = writeln!(o, "p_set = {}", list(mg.ess.iter().map(|e| e.p_set)));
    let _ = writeln!(o, "p_min = {}", list(mg.ess.iter().map(|e| e.p_min)));
    let _ = writeln!(o, "p_max = {}", list(mg.ess.iter().map(|e| e.p_max)));
    let _ = writeln!(o, "f_nom = {}", mg.f_nom);
    let _ = writeln!(o, "tau_f_s = {}", mg.tau_f_s);
    let _ = writeln!(o, "damping = {}", mg.damping);
    let _ = writeln!(o, "s_base_w = {}", mg.s_base_w);
    let _ = writeln!(o, "load2_pu = {}", mg.load2_pu);
    let _ = writeln!(o, "link = {}", mg.link);
    let a = &s.agents;
    let _ = writeln!(o, "\n[agents]");
    let _ = writeln!(o, "enabled = {}", a.enabled);
    let edges: Vec<String> = a.edges.iter().map(|(x, y)| format!("{x}-{y}")).collect();
    let _ = writeln!(o, "edges = {}", edges.join(", "));
    let _ = writeln!(o, "k_s = {}", a.k_s);
    let _ = writeln!(o, "eps_hz = {}", a.crit.eps);
    let _ = writeln!(o, "rounds = {}", a.crit.r);
    let _ = writeln!(o, "max_iter = {}", a.crit.max_iter);
    let _ = writeln!(o, "transport = {}", a.transport.as_str());
    let _ = writeln!(o, "link = {}", a.link);
    let _ = writeln!(o, "\n[disturbances]");
    for d in &s.disturbances {
        let _ = writeln!(
            o,
            "{} = {} {} {} {}",
            d.label,
            secs(d.t_us),
            d.action.as_str(),
            d.target.as_str(),
            d.placement.as_str()
        );
    }
    o
}
