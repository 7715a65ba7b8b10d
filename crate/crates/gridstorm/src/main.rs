use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gridstorm_core::harness::{
    load_records, run_case, run_suite, summarize, write_summary, AttackerMode, CaseResult, Pacing,
    RunConfig, ScenarioNo,
};
use gridstorm_core::model::MgSystem;

#[derive(Parser)]
#[command(name = "gridstorm", version, about = "Breaker-attack scenarios on the 39-bus system with a bus-24 microgrid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one case.
    Run {
        /// TOML run configuration; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Microgrid mix: I (50% PV) or II (70% PV).
        #[arg(long)]
        system: Option<MgSystem>,
        /// Attack scenario: 1 forced islanding, 2 switching.
        #[arg(long)]
        scenario: Option<ScenarioNo>,
        #[arg(long, value_enum)]
        attacker: Option<Attacker>,
        #[arg(long, value_enum)]
        pacing: Option<PacingArg>,
        /// Output directory for the trace, metrics and attack report.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        t_end: Option<f64>,
        /// Where telemetry is sent (external attacker).
        #[arg(long)]
        telemetry_to: Option<SocketAddr>,
        /// Address the command listener binds.
        #[arg(long)]
        command_bind: Option<SocketAddr>,
    },
    /// Run all four system/scenario cases and write a summary.
    Suite {
        /// Run every case (the only supported selection).
        #[arg(long)]
        all: bool,
        /// Base TOML configuration; system and scenario are overridden per case.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum)]
        attacker: Option<Attacker>,
    },
    /// Rebuild the summary from the metrics files in a directory.
    Summarize {
        dir: PathBuf,
        /// Print JSON instead of the text table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Attacker {
    External,
    Embedded,
    None,
}

impl From<Attacker> for AttackerMode {
    fn from(a: Attacker) -> Self {
        match a {
            Attacker::External => AttackerMode::External,
            Attacker::Embedded => AttackerMode::Embedded,
            Attacker::None => AttackerMode::None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PacingArg {
    Lockstep,
    Realtime,
}

fn base_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn report(r: &CaseResult) {
    let m = &r.metrics;
    println!(
        "System {} Scenario {}: nadir {:.4} Hz, peak {:.4} Hz, t_settle {}, v_min {:.4} pu, UV {:.3} s, {} ({} breaker ops, {:.2} s wall)",
        r.config.system.label(),
        r.config.scenario,
        m.f_nadir,
        m.f_peak,
        m.t_settle.map_or("never".into(), |t| format!("{t:.3} s")),
        m.v_min,
        m.uv_duration,
        m.verdict.label(),
        r.breaker_transitions().len(),
        r.wall_time.as_secs_f64(),
    );
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            system,
            scenario,
            attacker,
            pacing,
            out,
            t_end,
            telemetry_to,
            command_bind,
        } => {
            let mut cfg = base_config(config.as_ref())?;
            if let Some(s) = system {
                cfg.system = s;
            }
            if let Some(s) = scenario {
                cfg.scenario = s;
            }
            if let Some(a) = attacker {
                cfg.attacker = a.into();
            }
            if let Some(p) = pacing {
                cfg.pacing = match p {
                    PacingArg::Lockstep => Pacing::Lockstep,
                    PacingArg::Realtime => Pacing::RealTime,
                };
            }
            if out.is_some() {
                cfg.output_dir = out;
            }
            if let Some(t) = t_end {
                cfg.t_end = t;
            }
            if let Some(a) = telemetry_to {
                cfg.telemetry_addr = a;
            }
            if let Some(a) = command_bind {
                cfg.command_addr = a;
            }
            let r = run_case(&cfg)?;
            report(&r);
            if let Some(dir) = &cfg.output_dir {
                println!("outputs written to {}", dir.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Suite {
            all,
            config,
            out,
            attacker,
        } => {
            if !all {
                bail!("specify --all to run the four cases");
            }
            let mut cfg = base_config(config.as_ref())?;
            if let Some(a) = attacker {
                cfg.attacker = a.into();
            }
            cfg.output_dir = Some(out.clone());
            let results = run_suite(&cfg)?;
            for r in &results {
                report(r);
            }
            let records: Vec<_> = results.iter().map(CaseResult::record).collect();
            let summary = summarize(&records);
            write_summary(&out, &summary)?;
            println!("\n{}", summary.to_text());
            Ok(ExitCode::SUCCESS)
        }
        Command::Summarize { dir, json } => {
            let records = load_records(&dir).with_context(|| format!("reading {}", dir.display()))?;
            if records.is_empty() {
                bail!("no *.metrics.json files in {}", dir.display());
            }
            let summary = summarize(&records);
            if json {
                print!("{}", summary.to_json());
            } else {
                print!("{}", summary.to_text());
            }
            Ok(if summary.is_partial() { ExitCode::from(2) } else { ExitCode::SUCCESS })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
