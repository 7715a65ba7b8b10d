//! Scenario runner: power flow, initialization, the timed simulation loop
//! with its UDP link, and per-case metrics.

mod metrics;
mod summary;

use std::fmt;
use std::net::{SocketAddr, UdpSocket};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::adversary::{
    run_attacker_on, AttackError, AttackKind, AttackReport, AttackScenario, AttackerConfig,
    DetectorConfig,
};
use crate::dynamics::{DynamicsError, EventKind, EventOrigin, EventTarget, SimEvent, Simulator};
use crate::model::case::IEEE39_MG_CASE;
use crate::model::{parse_case, BreakerId, BusId, GridModel, MgSystem, ModelError};
use crate::netio::{
    publishes_at, Ack, LinkConfig, LinkStats, NetError, ReplyCode, SimLink, TelemetryFrame,
    DEFAULT_PUBLISH_EVERY,
};
use crate::protection::{
    check_limits, schedule_breaker, ActuationQueue, BusSample, ProtectionConfig, ProtectionError,
    ViolationLog,
};
use crate::steady::{init_dynamics, solve_power_flow, SteadyError, DEFAULT_MAX_ITER, DEFAULT_TOLERANCE};

pub use metrics::{
    compute_metrics, settling_instant, violation_log, CaseMetrics, Trace, TraceRow, Verdict,
    PRE_EVENT_WINDOW, SETTLE_BAND, SETTLE_HOLD,
};
pub use summary::{summarize, voltage_label, Summary, SummaryRow, TrendCheck};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("case model: {0}")]
    Model(#[from] ModelError),
    #[error("power flow / initialization: {0}")]
    Steady(#[from] SteadyError),
    #[error("simulation: {0}")]
    Dynamics(#[from] DynamicsError),
    #[error("protection: {0}")]
    Protection(#[from] ProtectionError),
    #[error("network link: {0}")]
    Net(#[from] NetError),
    #[error("attacker: {0}")]
    Attack(#[from] AttackError),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
    #[error("output: {0}")]
    Csv(#[from] csv::Error),
    #[error("output: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pacing {
    /// As fast as possible; the peer gates progress through acks.
    Lockstep,
    /// Sleeps to keep simulated time aligned with wall time.
    RealTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackerMode {
    /// A separate process on the configured endpoints.
    External,
    /// Attacker logic on a thread of this process, over loopback UDP.
    Embedded,
    None,
}

/// Attack scenario: 1 forced islanding, 2 switching attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ScenarioNo {
    One,
    Two,
}

impl ScenarioNo {
    pub fn number(self) -> u8 {
        match self {
            ScenarioNo::One => 1,
            ScenarioNo::Two => 2,
        }
    }

    pub fn attack_kind(self) -> AttackKind {
        match self {
            ScenarioNo::One => AttackKind::ForcedIslanding,
            ScenarioNo::Two => AttackKind::SwitchingAttack,
        }
    }
}

impl TryFrom<u8> for ScenarioNo {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(ScenarioNo::One),
            2 => Ok(ScenarioNo::Two),
            other => Err(format!("scenario must be 1 or 2, got {other}")),
        }
    }
}

impl From<ScenarioNo> for u8 {
    fn from(s: ScenarioNo) -> u8 {
        s.number()
    }
}

impl FromStr for ScenarioNo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.parse::<u8>()
            .map_err(|_| format!("scenario must be 1 or 2, got `{s}`"))
            .and_then(ScenarioNo::try_from)
    }
}

impl fmt::Display for ScenarioNo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Case file; the built-in 39-bus microgrid case when unset.
    pub case_file: Option<PathBuf>,
    pub system: MgSystem,
    pub scenario: ScenarioNo,
    pub dt: f64,
    pub t_end: f64,
    pub pacing: Pacing,
    pub attacker: AttackerMode,
    /// Reserved; runs are deterministic.
    pub seed: u64,
    /// Where traces and metrics are written; nothing is written when unset.
    pub output_dir: Option<PathBuf>,
    /// Telemetry destination (external attacker).
    pub telemetry_addr: SocketAddr,
    /// Command listener bind address.
    pub command_addr: SocketAddr,
    pub publish_every: u64,
    /// Buses published over telemetry; the microgrid bus when empty.
    pub monitored_buses: Vec<BusId>,
    /// Scripted faults from the case file are applied.
    pub faults: bool,
    pub protection: ProtectionConfig,
    /// Lockstep wait for the peer's first hello and for each ack, s.
    pub peer_timeout_s: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let link = LinkConfig::default();
        Self {
            case_file: None,
            system: MgSystem::I,
            scenario: ScenarioNo::One,
            dt: 1e-3,
            t_end: 3.0,
            pacing: Pacing::Lockstep,
            attacker: AttackerMode::Embedded,
            seed: 0,
            output_dir: None,
            telemetry_addr: link.telemetry_to,
            command_addr: link.command_bind,
            publish_every: DEFAULT_PUBLISH_EVERY,
            monitored_buses: Vec::new(),
            faults: true,
            protection: ProtectionConfig::default(),
            peer_timeout_s: 30.0,
        }
    }
}

impl RunConfig {
    pub fn single_case(system: MgSystem, scenario: ScenarioNo) -> Self {
        Self {
            system,
            scenario,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// File stem shared by this run's outputs.
    pub fn stem(&self) -> String {
        format!("system-{}_scenario-{}", self.system.label(), self.scenario)
    }

    pub fn steps(&self) -> u64 {
        (self.t_end / self.dt).round() as u64
    }

    pub fn load_model(&self) -> Result<GridModel, HarnessError> {
        let text = match &self.case_file {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?,
            None => IEEE39_MG_CASE.to_owned(),
        };
        let mut doc = parse_case(&text)?;
        doc.scenario.system = Some(self.system);
        Ok(doc.build()?)
    }

    fn validate(&self, model: &GridModel) -> Result<(), HarnessError> {
        if !(self.dt > 0.0) {
            return Err(HarnessError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.faults {
            if let Some(f) = model.faults.iter().find(|f| self.t_end <= f.t_off) {
                return Err(HarnessError::Config(format!(
                    "t_end {} must exceed fault `{}` clearing time {}",
                    self.t_end, f.id, f.t_off
                )));
            }
        }
        if self.publish_every == 0 {
            return Err(HarnessError::Config("publish_every must be at least 1".into()));
        }
        self.protection.limits.validate(model.f_nominal)?;
        Ok(())
    }
}

/// An event as it was applied at a step boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppliedEvent {
    pub t: f64,
    pub kind: EventKind,
    pub target: EventTarget,
    pub origin: EventOrigin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub config: RunConfig,
    pub f_nominal: f64,
    pub trace: Trace,
    pub events: Vec<AppliedEvent>,
    pub metrics: CaseMetrics,
    pub attack: Option<AttackReport>,
    pub link: Option<LinkStats>,
    pub wall_time: Duration,
}

impl CaseResult {
    pub fn breaker_transitions(&self) -> Vec<AppliedEvent> {
        self.events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::BreakerOpen | EventKind::BreakerClose))
            .copied()
            .collect()
    }

    /// Stored form of the run: everything except the trace and timing.
    pub fn record(&self) -> CaseRecord {
        CaseRecord {
            system: self.config.system,
            scenario: self.config.scenario,
            dt: self.config.dt,
            t_end: self.config.t_end,
            f_nominal: self.f_nominal,
            metrics: self.metrics.clone(),
            events: self.events.clone(),
        }
    }

    pub fn write_outputs(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir)?;
        let stem = self.config.stem();
        let csv = std::fs::File::create(dir.join(format!("{stem}.csv")))?;
        self.trace.write_csv(std::io::BufWriter::new(csv))?;
        let json = serde_json::to_string_pretty(&self.record())?;
        std::fs::write(dir.join(format!("{stem}.metrics.json")), json + "\n")?;
        if let Some(a) = &self.attack {
            a.write(&dir.join(format!("{stem}.attack.json")))?;
        }
        Ok(())
    }
}

/// Per-case results as written next to the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub system: MgSystem,
    pub scenario: ScenarioNo,
    pub dt: f64,
    pub t_end: f64,
    pub f_nominal: f64,
    pub metrics: CaseMetrics,
    pub events: Vec<AppliedEvent>,
}

type AttackerThread = (thread::JoinHandle<Result<AttackReport, AttackError>>, Arc<AtomicBool>);

struct Peer {
    link: SimLink,
    lockstep: bool,
    attacker: Option<AttackerThread>,
}

impl Peer {
    fn start(cfg: &RunConfig, model: &GridModel, target: BreakerId) -> Result<Option<Self>, HarnessError> {
        let timeout = Duration::from_secs_f64(cfg.peer_timeout_s);
        let lockstep = cfg.pacing == Pacing::Lockstep;
        match cfg.attacker {
            AttackerMode::None => Ok(None),
            AttackerMode::External => {
                let link = SimLink::start(&LinkConfig {
                    telemetry_to: cfg.telemetry_addr,
                    command_bind: cfg.command_addr,
                })?;
                if lockstep {
                    info!("waiting up to {timeout:?} for the attacker on {}", link.command_addr());
                    let peer = link.wait_for_peer(timeout)?;
                    info!("attacker connected from {peer}");
                }
                Ok(Some(Self {
                    link,
                    lockstep,
                    attacker: None,
                }))
            }
            AttackerMode::Embedded => {
                let loopback = SocketAddr::from(([127, 0, 0, 1], 0));
                let socket = UdpSocket::bind(loopback)?;
                let link = SimLink::start(&LinkConfig {
                    telemetry_to: socket.local_addr()?,
                    command_bind: loopback,
                })?;
                let stop = Arc::new(AtomicBool::new(false));
                let acfg = AttackerConfig {
                    detector: DetectorConfig {
                        bus_id: model.scenario.mg_bus as u16,
                        f_nominal: model.f_nominal,
                        ..DetectorConfig::default()
                    },
                    contact_timeout: timeout,
                    silence_timeout: timeout,
                    stop: Some(Arc::clone(&stop)),
                };
                let scenario = AttackScenario::new(cfg.scenario.attack_kind(), target);
                let to = link.command_addr();
                let handle = thread::Builder::new()
                    .name("embedded-attacker".into())
                    .spawn(move || run_attacker_on(socket, to, scenario, &acfg))?;
                if lockstep {
                    link.wait_for_peer(timeout)?;
                }
                Ok(Some(Self {
                    link,
                    lockstep,
                    attacker: Some((handle, stop)),
                }))
            }
        }
    }

    fn finish(self) -> Result<(Option<AttackReport>, LinkStats), HarnessError> {
        self.link.flush(Duration::from_secs(1));
        let stats = self.link.stats();
        let report = match self.attacker {
            Some((handle, stop)) => {
                stop.store(true, Ordering::Relaxed);
                let r = handle
                    .join()
                    .map_err(|_| HarnessError::Config("attacker thread panicked".into()))??;
                Some(r)
            }
            None => None,
        };
        Ok((report, stats))
    }
}

/// Runs one case end to end.
pub fn run_case(cfg: &RunConfig) -> Result<CaseResult, HarnessError> {
    let started = Instant::now();
    let model = cfg.load_model()?;
    cfg.validate(&model)?;
    let pf = solve_power_flow(&model, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER)?;
    let mut state = init_dynamics(&model, &pf)?;
    let mut sim = Simulator::new(&model, &state)?;

    let mg_bus = model.scenario.mg_bus;
    let mg_idx = model
        .bus_index(mg_bus)
        .ok_or_else(|| HarnessError::Config(format!("microgrid bus {mg_bus} not in case")))?;
    let pcc = model
        .breaker_by_label(&format!("PCC-{mg_bus}"))
        .or(model.breakers.first())
        .map(|b| b.id)
        .ok_or_else(|| HarnessError::Config("case has no breaker to attack".into()))?;
    let monitored: Vec<BusId> = if cfg.monitored_buses.is_empty() {
        vec![mg_bus]
    } else {
        cfg.monitored_buses.clone()
    };
    for &b in &monitored {
        if model.bus_index(b).is_none() {
            return Err(HarnessError::Config(format!("monitored bus {b} not in case")));
        }
    }

    let mut scripted = if cfg.faults { SimEvent::scripted_faults(&model) } else { Vec::new() };
    let mut queue = ActuationQueue::new(&model);
    let mut live_log = ViolationLog::new();
    let peer = Peer::start(cfg, &model, pcc)?;
    let mut lockstep_alive = peer.as_ref().is_some_and(|p| p.lockstep);
    let ack_timeout = Duration::from_secs_f64(cfg.peer_timeout_s);

    let dt = cfg.dt;
    let s_base = model.s_base;
    let row = |sim: &Simulator, s: &crate::dynamics::DynamicState, t: f64| {
        let b = &s.buses[mg_idx];
        let inj = sim.bus_injection(s, mg_idx) * s_base;
        TraceRow {
            t_s: t,
            f_hz: b.f_est,
            v_pu: b.v.norm(),
            v_ang_rad: b.v.arg(),
            p_mw: inj.re,
            q_mvar: inj.im,
            breaker: s.breakers.is_closed(pcc) as u8,
            fault: s.any_fault_active() as u8,
        }
    };

    let steps = cfg.steps();
    let mut trace = Trace {
        bus: mg_bus,
        dt,
        rows: Vec::with_capacity(steps as usize + 1),
    };
    trace.rows.push(row(&sim, &state, 0.0));
    let mut events = Vec::new();
    let wall0 = Instant::now();

    for k in 0..steps {
        let t = k as f64 * dt;
        if let Some(p) = &peer {
            for (cmd, from) in p.link.drain_commands() {
                let code = match schedule_breaker(&cmd, &mut queue, t) {
                    Ok(Some(_)) => ReplyCode::Accepted,
                    Ok(None) => ReplyCode::NoOp,
                    Err(e) => {
                        warn!("rejected command {}: {e}", cmd.seq);
                        ReplyCode::UnknownBreaker
                    }
                };
                p.link.reply(from, &Ack::command(cmd.seq, code));
            }
        }
        let mut due: Vec<SimEvent> = scripted.iter().copied().filter(|e| e.is_due(t)).collect();
        scripted.retain(|e| !e.is_due(t));
        due.extend(queue.take_due(t));

        let mut next = sim.step(&state, dt, &due)?;
        let t_next = (k + 1) as f64 * dt;
        next.t = t_next;
        events.extend(due.iter().map(|e| AppliedEvent {
            t,
            kind: e.kind,
            target: e.target,
            origin: e.origin,
        }));
        state = next;
        let r = row(&sim, &state, t_next);
        trace.rows.push(r);

        let sample = [BusSample {
            bus: mg_bus,
            f_est: r.f_hz,
            v_mag: r.v_pu,
        }];
        let opened = check_limits(t_next, dt, &sample, &cfg.protection.limits, &mut live_log);
        if let (Some(id), false) = (cfg.protection.trip_breaker, opened.is_empty()) {
            queue.trip(id, t_next);
        }

        if let Some(p) = &peer {
            if publishes_at(k, cfg.publish_every) {
                let mut last_seq = 0;
                for &b in &monitored {
                    let i = model.bus_index(b).unwrap();
                    let bs = &state.buses[i];
                    let inj = sim.bus_injection(&state, i) * s_base;
                    last_seq = p.link.publish(TelemetryFrame {
                        seq: 0,
                        sim_time_us: (t_next * 1e6).round() as u64,
                        bus_id: b as u16,
                        island_id: sim.network().partition.island_of.get(&b).copied().unwrap_or(0) as u16,
                        frequency_hz: bs.f_est,
                        v_mag_pu: bs.v.norm(),
                        v_ang_rad: bs.v.arg(),
                        p_mw: inj.re,
                        q_mvar: inj.im,
                        breaker_state: state.breakers.is_closed(pcc) as u8,
                        fault_flag: state.any_fault_active() as u8,
                    });
                }
                if lockstep_alive {
                    if let Err(e) = p.link.wait_for_ack(last_seq, ack_timeout) {
                        warn!("peer stopped acknowledging ({e}); continuing unpaced");
                        lockstep_alive = false;
                    }
                }
            }
        }
        if cfg.pacing == Pacing::RealTime {
            let target = wall0 + Duration::from_secs_f64(t_next);
            if let Some(wait) = target.checked_duration_since(Instant::now()) {
                thread::sleep(wait);
            }
        }
    }

    let (attack, link) = match peer {
        Some(p) => {
            let (a, s) = p.finish()?;
            (a, Some(s))
        }
        None => (None, None),
    };
    let event_times: Vec<f64> = events.iter().map(|e| e.t).collect();
    let metrics = compute_metrics(&trace, &event_times, &cfg.protection.limits, model.f_nominal);
    let result = CaseResult {
        config: cfg.clone(),
        f_nominal: model.f_nominal,
        trace,
        events,
        metrics,
        attack,
        link,
        wall_time: started.elapsed(),
    };
    if let Some(dir) = &cfg.output_dir {
        result.write_outputs(dir)?;
    }
    Ok(result)
}

/// The four standard cases: each system under each attack scenario.
pub fn standard_cases() -> [(MgSystem, ScenarioNo); 4] {
    [
        (MgSystem::I, ScenarioNo::One),
        (MgSystem::I, ScenarioNo::Two),
        (MgSystem::II, ScenarioNo::One),
        (MgSystem::II, ScenarioNo::Two),
    ]
}

/// Runs the four standard cases concurrently from a common base config and
/// returns them in table order.
pub fn run_suite(base: &RunConfig) -> Result<Vec<CaseResult>, HarnessError> {
    if base.attacker == AttackerMode::External {
        return Err(HarnessError::Config(
            "suite runs need an embedded or absent attacker (one external peer cannot serve four runs)".into(),
        ));
    }
    thread::scope(|scope| {
        let handles: Vec<_> = standard_cases()
            .into_iter()
            .map(|(system, scenario)| {
                let cfg = RunConfig {
                    system,
                    scenario,
                    ..base.clone()
                };
                scope.spawn(move || run_case(&cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| HarnessError::Config("case thread panicked".into()))?)
            .collect()
    })
}

pub const SUMMARY_TEXT: &str = "summary.txt";
pub const SUMMARY_JSON: &str = "summary.json";

/// Reads every `*.metrics.json` record in `dir`, in file-name order.
pub fn load_records(dir: &Path) -> Result<Vec<CaseRecord>, HarnessError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_str().is_some_and(|s| s.ends_with(".metrics.json")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?))
        .collect()
}

/// Writes the text and JSON forms of `summary` into `dir`.
pub fn write_summary(dir: &Path, summary: &Summary) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(SUMMARY_TEXT), summary.to_text())?;
    std::fs::write(dir.join(SUMMARY_JSON), summary.to_json())?;
    Ok(())
}
