//! Standalone attack node: listens for telemetry, waits for an abnormal
//! condition at the microgrid bus, then sends the breaker command plan.

use std::net::{SocketAddr, ToSocketAddrs};
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{anyhow, Context, Result};
use clap::Parser;
use gridstorm_core::adversary::{
    run_attacker, AttackKind, AttackScenario, AttackerConfig, AttackerEndpoints, DetectorConfig,
};
use gridstorm_core::model::{parse_case, case::IEEE39_MG_CASE};
use gridstorm_core::netio::{DEFAULT_COMMAND_PORT, DEFAULT_TELEMETRY_PORT};

#[derive(Parser)]
#[command(name = "attacker", version, about = "Remote breaker-attack agent")]
struct Args {
    /// islanding (open, reclose after 0.5 s) or switching (3 open/close cycles).
    #[arg(long)]
    scenario: AttackKind,
    /// Breaker label from the case file.
    #[arg(long, default_value = "PCC-24")]
    target: String,
    /// Local address telemetry arrives on.
    #[arg(long, default_value_t = SocketAddr::from(([0, 0, 0, 0], DEFAULT_TELEMETRY_PORT)))]
    telemetry: SocketAddr,
    /// Simulator command endpoint.
    #[arg(long, default_value_t = format!("127.0.0.1:{DEFAULT_COMMAND_PORT}"))]
    command: String,
    /// Case file used to resolve the target label; built-in case when omitted.
    #[arg(long)]
    case: Option<PathBuf>,
    /// Bus whose frames drive detection.
    #[arg(long, default_value_t = 24)]
    bus: u16,
    /// Seconds to wait for the first telemetry frame.
    #[arg(long, default_value_t = 60.0)]
    contact_timeout: f64,
    /// JSON report of what was observed and sent.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn resolve_target(args: &Args) -> Result<u16> {
    if let Ok(id) = args.target.parse::<u16>() {
        return Ok(id);
    }
    let text = match &args.case {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => IEEE39_MG_CASE.to_owned(),
    };
    let model = parse_case(&text)?.build()?;
    model
        .breaker_by_label(&args.target)
        .map(|b| b.id)
        .ok_or_else(|| anyhow!("no breaker labelled `{}` in the case", args.target))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let target = resolve_target(&args)?;
    let command_to = args
        .command
        .to_socket_addrs()
        .with_context(|| format!("resolving {}", args.command))?
        .next()
        .ok_or_else(|| anyhow!("{} resolves to no address", args.command))?;
    let cfg = AttackerConfig {
        detector: DetectorConfig {
            bus_id: args.bus,
            ..DetectorConfig::default()
        },
        contact_timeout: Duration::from_secs_f64(args.contact_timeout),
        ..AttackerConfig::default()
    };
    let endpoints = AttackerEndpoints {
        telemetry_bind: args.telemetry,
        command_to,
    };
    let report = run_attacker(endpoints, AttackScenario::new(args.scenario, target), &cfg)?;
    log::info!(
        "done: {} frames, trigger {:?}, attack start {:?}, {} commands",
        report.frames_seen,
        report.trigger_time,
        report.attack_start,
        report.commands.len()
    );
    if let Some(p) = &args.report {
        report.write(p)?;
    }
    Ok(())
}
