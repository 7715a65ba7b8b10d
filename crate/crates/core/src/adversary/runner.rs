use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::{
    align_to_grid, observe, plan_attack, AttackScenario, DetectorConfig, DetectorMode,
    DetectorState,
};
use crate::netio::{
    decode_ack, decode_telemetry, encode_ack, encode_command, Ack, AckKind, BreakerCommand,
    ReplyCode, DEFAULT_COMMAND_PORT, DEFAULT_TELEMETRY_PORT,
};

const POLL: Duration = Duration::from_millis(20);
const HELLO_EVERY: Duration = Duration::from_millis(100);

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("no telemetry received within {0:?}")]
    NoContact(Duration),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("cannot write report: {0}")]
    Report(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttackerEndpoints {
    /// Local address telemetry arrives on.
    pub telemetry_bind: SocketAddr,
    /// Simulator command port.
    pub command_to: SocketAddr,
}

impl Default for AttackerEndpoints {
    fn default() -> Self {
        Self {
            telemetry_bind: SocketAddr::from(([0, 0, 0, 0], DEFAULT_TELEMETRY_PORT)),
            command_to: SocketAddr::from(([127, 0, 0, 1], DEFAULT_COMMAND_PORT)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackerConfig {
    pub detector: DetectorConfig,
    /// Give up if no frame arrives within this long of starting.
    pub contact_timeout: Duration,
    /// After contact, this much silence ends the run.
    pub silence_timeout: Duration,
    /// External stop request (embedded mode).
    pub stop: Option<Arc<AtomicBool>>,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            contact_timeout: Duration::from_secs(30),
            silence_timeout: Duration::from_secs(2),
            stop: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentCommand {
    pub command: BreakerCommand,
    /// Simulation time of the frame that prompted the send, s.
    pub sent_at: f64,
    pub reply: Option<ReplyCode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub scenario: AttackScenario,
    pub frames_seen: u64,
    pub frames_discarded: u64,
    pub malformed: u64,
    pub first_frame_time: Option<f64>,
    pub last_frame_time: Option<f64>,
    pub trigger_time: Option<f64>,
    pub attack_start: Option<f64>,
    pub final_mode: DetectorMode,
    pub commands: Vec<SentCommand>,
}

impl AttackReport {
    pub fn write(&self, path: &Path) -> Result<(), AttackError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

pub fn run_attacker(
    endpoints: AttackerEndpoints,
    scenario: AttackScenario,
    cfg: &AttackerConfig,
) -> Result<AttackReport, AttackError> {
    let socket = UdpSocket::bind(endpoints.telemetry_bind).map_err(|source| AttackError::Bind {
        addr: endpoints.telemetry_bind,
        source,
    })?;
    run_attacker_on(socket, endpoints.command_to, scenario, cfg)
}

/// Runs the kill chain on an already-bound telemetry socket. Commands and
/// lockstep acks leave from the same socket, so the simulator's replies come
/// back to it as well.
pub fn run_attacker_on(
    socket: UdpSocket,
    command_to: SocketAddr,
    scenario: AttackScenario,
    cfg: &AttackerConfig,
) -> Result<AttackReport, AttackError> {
    scenario.validate().map_err(AttackError::Scenario)?;
    socket.set_read_timeout(Some(POLL))?;
    let mut det = DetectorState::default();
    let mut report = AttackReport {
        scenario,
        frames_seen: 0,
        frames_discarded: 0,
        malformed: 0,
        first_frame_time: None,
        last_frame_time: None,
        trigger_time: None,
        attack_start: None,
        final_mode: DetectorMode::Monitor,
        commands: Vec::new(),
    };
    let started = Instant::now();
    let mut last_rx = started;
    let mut last_hello: Option<Instant> = None;
    let mut last_at = 0.0;
    let mut buf = [0u8; 256];

    loop {
        if cfg.stop.as_ref().is_some_and(|s| s.load(Ordering::Relaxed)) {
            break;
        }
        if report.frames_seen == 0 {
            if started.elapsed() > cfg.contact_timeout {
                return Err(AttackError::NoContact(cfg.contact_timeout));
            }
            if last_hello.is_none_or(|h| h.elapsed() >= HELLO_EVERY) {
                send(&socket, &encode_ack(&Ack::hello()), command_to);
                last_hello = Some(Instant::now());
            }
        } else if last_rx.elapsed() > cfg.silence_timeout {
            break;
        }

        let n = match socket.recv_from(&mut buf) {
            Ok((n, _)) => n,
            Err(e)
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::ConnectionReset
                ) =>
            {
                continue
            }
            Err(e) => return Err(e.into()),
        };
        let bytes = &buf[..n];
        if let Ok(ack) = decode_ack(bytes) {
            if ack.kind == AckKind::Command {
                if let Some(c) = report.commands.iter_mut().find(|c| c.command.seq == ack.seq) {
                    c.reply = Some(ack.code);
                }
            }
            continue;
        }
        let frame = match decode_telemetry(bytes) {
            Ok(f) => f,
            Err(e) => {
                report.malformed += 1;
                debug!("ignored datagram: {e}");
                continue;
            }
        };
        last_rx = Instant::now();
        let t = frame.sim_time_us as f64 * 1e-6;
        report.frames_seen += 1;
        report.first_frame_time.get_or_insert(t);
        report.last_frame_time = Some(t);

        det = observe(&frame, det, &cfg.detector);
        if det.mode == DetectorMode::Triggered {
            let trigger = det.trigger_time.expect("trigger time set on transition");
            let t0 = align_to_grid(trigger);
            info!("abnormal condition at t = {trigger:.3} s; attack starts at {t0:.1} s");
            let plan = plan_attack(&scenario, t0);
            for cmd in &plan {
                send(&socket, &encode_command(cmd), command_to);
                report.commands.push(SentCommand {
                    command: *cmd,
                    sent_at: t,
                    reply: None,
                });
            }
            last_at = plan.last().map_or(t0, |c| c.execute_at_us as f64 * 1e-6);
            report.trigger_time = Some(trigger);
            report.attack_start = Some(t0);
            det.advance_to(DetectorMode::Executing);
        } else if det.mode == DetectorMode::Executing && t >= last_at {
            det.advance_to(DetectorMode::Done);
        }
        // Acknowledge after any commands so they arrive first.
        send(&socket, &encode_ack(&Ack::telemetry(frame.seq)), command_to);
    }
    report.frames_discarded = det.discarded;
    report.final_mode = det.mode;
    Ok(report)
}

fn send(socket: &UdpSocket, bytes: &[u8], to: SocketAddr) {
    if let Err(e) = socket.send_to(bytes, to) {
        debug!("send to {to} failed: {e}");
    }
}
