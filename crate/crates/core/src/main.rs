use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use gridloop::gateway::synthetic::builtin;
use gridloop::hub::server::HubServer;
use gridloop::mas::Transport;
use gridloop::orchestrator::{
    build_agents, build_gateway, build_sim, check_acceptance, emit_report, load_result, run_components, run_realtime,
    run_virtual, RunResult, Status, Verdict, Wired,
};
use gridloop::scenario::{Mode, Scenario};

#[derive(Parser)]
#[command(name = "gridloop", version, about = "Microgrid control loop over an emulated SCADA link")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a whole scenario and write its result directory.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the hub protocol over TCP until killed.
    Hub {
        #[arg(long, default_value = "127.0.0.1:7400")]
        listen: String,
    },
    /// Run only the gateway against an external hub.
    Gateway(Part),
    /// Run only the simulator against an external hub.
    Sim(Part),
    /// Run only the agents against an external hub.
    Agents(Part),
    /// Write a built-in day profile as CSV.
    Profile {
        /// `pv` or `building`.
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate the acceptance verdicts of a result directory.
    Check {
        #[arg(long)]
        result: PathBuf,
    },
}

#[derive(clap::Args)]
struct Part {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    hub: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn print_verdicts(verdicts: &[Verdict]) -> ExitCode {
    for v in verdicts {
        println!("{v}");
    }
    if verdicts.iter().any(|v| v.status == Status::Fail) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn out_dir(s: &Scenario, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| s.resolve(&s.run.out_dir))
}

fn write(r: &RunResult, dir: &Path) -> Result<()> {
    emit_report(r, dir).with_context(|| format!("writing {}", dir.display()))?;
    info!("results in {}", dir.display());
    Ok(())
}

fn run_part(p: Part, build: impl FnOnce(&Scenario) -> Result<Vec<Wired>>, name: &str) -> Result<ExitCode> {
    let mut s = Scenario::load(&p.scenario)?;
    s.run.mode = Mode::Realtime;
    let wired = build(&s)?;
    let r = run_components(&s, wired, &p.hub)?;
    let dir = out_dir(&s, p.out).join(name);
    write(&r, &dir)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Run {
            scenario,
            mode,
            seed,
            out,
        } => {
            let mut s = Scenario::load(&scenario)?;
            if let Some(m) = mode {
                s.run.mode = m;
            }
            if let Some(seed) = seed {
                s.run.seed = seed;
            }
            let started = Instant::now();
            let r = match s.run.mode {
                Mode::Virtual => run_virtual(&s)?,
                Mode::Realtime => run_realtime(&s)?,
            };
            info!("{} run finished in {:.2?}", s.run.mode.as_str(), started.elapsed());
            write(&r, &out_dir(&s, out))?;
            Ok(print_verdicts(&check_acceptance(&r)))
        }
        Cmd::Hub { listen } => {
            let server = HubServer::spawn(listen.as_str(), Instant::now())?;
            info!("hub listening on {}", server.local_addr());
            server.join();
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gateway(p) => run_part(p, |s| Ok(vec![build_gateway(s)?]), "gateway"),
        Cmd::Sim(p) => run_part(p, |s| Ok(vec![build_sim(s)?]), "sim"),
        Cmd::Agents(p) => run_part(p, |s| Ok(build_agents(s, Transport::Hub)?), "agents"),
        Cmd::Profile { name, out } => {
            let p = builtin(&name).with_context(|| format!("no builtin profile {name:?}"))?;
            std::fs::write(&out, p.to_csv()).with_context(|| format!("writing {}", out.display()))?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Check { result } => {
            let r = load_result(&result)?;
            Ok(print_verdicts(&check_acceptance(&r)))
        }
    }
}
