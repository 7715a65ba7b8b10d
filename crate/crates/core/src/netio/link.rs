use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle, Thread};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender};
use crossbeam_queue::ArrayQueue;
use log::{debug, warn};

use super::codec::{
    decode_inbound, encode_ack, encode_telemetry, Ack, AckKind, BreakerCommand, Inbound,
    TelemetryFrame,
};
use super::NetError;

pub const DEFAULT_TELEMETRY_PORT: u16 = 7401;
pub const DEFAULT_COMMAND_PORT: u16 = 7402;
pub const DEFAULT_PUBLISH_EVERY: u64 = 10;
const TELEMETRY_QUEUE: usize = 4096;
const COMMAND_QUEUE: usize = 256;
const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkConfig {
    /// Where telemetry frames are sent.
    pub telemetry_to: SocketAddr,
    /// Local address the command listener binds.
    pub command_bind: SocketAddr,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            telemetry_to: SocketAddr::from(([127, 0, 0, 1], DEFAULT_TELEMETRY_PORT)),
            command_bind: SocketAddr::from(([0, 0, 0, 0], DEFAULT_COMMAND_PORT)),
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    frames_published: AtomicU64,
    frames_sent: AtomicU64,
    frames_dropped: AtomicU64,
    send_errors: AtomicU64,
    commands: AtomicU64,
    acks: AtomicU64,
    malformed: AtomicU64,
}

/// Highest telemetry sequence number acknowledged by the peer.
#[derive(Debug)]
struct AckGate {
    latest: AtomicI64,
    peer: Mutex<Option<SocketAddr>>,
    waiter: Mutex<Option<Thread>>,
}

impl AckGate {
    fn new() -> Self {
        Self {
            latest: AtomicI64::new(-1),
            peer: Mutex::new(None),
            waiter: Mutex::new(None),
        }
    }

    fn record(&self, seq: Option<u32>, from: SocketAddr) {
        self.peer.lock().unwrap().get_or_insert(from);
        if let Some(seq) = seq {
            self.latest.fetch_max(seq as i64, Ordering::AcqRel);
        }
        if let Some(t) = self.waiter.lock().unwrap().as_ref() {
            t.unpark();
        }
    }

    fn wait(&self, pred: impl Fn(&Self) -> bool, timeout: Duration) -> bool {
        *self.waiter.lock().unwrap() = Some(thread::current());
        let deadline = Instant::now() + timeout;
        let ok = loop {
            if pred(self) {
                break true;
            }
            let now = Instant::now();
            if now >= deadline {
                break false;
            }
            thread::park_timeout((deadline - now).min(POLL));
        };
        *self.waiter.lock().unwrap() = None;
        ok
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct LinkStats {
    pub frames_published: u64,
    pub frames_sent: u64,
    /// Displaced from a full outbound queue before they could be sent.
    pub frames_dropped: u64,
    pub send_errors: u64,
    pub commands: u64,
    pub acks: u64,
    pub malformed: u64,
}

/// Simulator end of the UDP link.
///
/// The simulation loop talks to two worker threads through bounded queues:
/// frames go out through a lossy ring (oldest displaced on overflow), commands
/// come in through a channel that blocks the listener when full.
pub struct SimLink {
    frames: Arc<ArrayQueue<TelemetryFrame>>,
    commands: Receiver<(BreakerCommand, SocketAddr)>,
    gate: Arc<AckGate>,
    reply: UdpSocket,
    command_addr: SocketAddr,
    counters: Arc<Counters>,
    next_seq: AtomicU32,
    shutdown: Arc<AtomicBool>,
    publisher: Option<JoinHandle<()>>,
    listener: Option<JoinHandle<()>>,
}

impl SimLink {
    pub fn start(cfg: &LinkConfig) -> Result<Self, NetError> {
        let socket = UdpSocket::bind(cfg.command_bind).map_err(|source| NetError::Bind {
            addr: cfg.command_bind,
            source,
        })?;
        socket.set_read_timeout(Some(POLL))?;
        let command_addr = socket.local_addr()?;
        let out = UdpSocket::bind(SocketAddr::new(unspecified_like(cfg.telemetry_to), 0))
            .map_err(|source| NetError::Bind {
                addr: cfg.telemetry_to,
                source,
            })?;

        let frames = Arc::new(ArrayQueue::new(TELEMETRY_QUEUE));
        let counters = Arc::new(Counters::default());
        let shutdown = Arc::new(AtomicBool::new(false));
        let (cmd_tx, cmd_rx) = bounded(COMMAND_QUEUE);
        let gate = Arc::new(AckGate::new());

        let publisher = {
            let frames = Arc::clone(&frames);
            let counters = Arc::clone(&counters);
            let shutdown = Arc::clone(&shutdown);
            let to = cfg.telemetry_to;
            thread::Builder::new()
                .name("telemetry-publisher".into())
                .spawn(move || publish_loop(out, to, &frames, &counters, &shutdown))?
        };
        let listener = {
            let socket = socket.try_clone()?;
            let counters = Arc::clone(&counters);
            let shutdown = Arc::clone(&shutdown);
            let gate = Arc::clone(&gate);
            thread::Builder::new()
                .name("command-listener".into())
                .spawn(move || listen_loop(socket, cmd_tx, &gate, &counters, &shutdown))?
        };
        Ok(Self {
            frames,
            commands: cmd_rx,
            gate,
            reply: socket,
            command_addr,
            counters,
            next_seq: AtomicU32::new(0),
            shutdown,
            publisher: Some(publisher),
            listener: Some(listener),
        })
    }

    /// Bound address of the command listener.
    pub fn command_addr(&self) -> SocketAddr {
        self.command_addr
    }

    /// Queues a frame for sending, stamping its sequence number. Returns the
    /// assigned sequence number.
    pub fn publish(&self, mut frame: TelemetryFrame) -> u32 {
        frame.seq = self.next_seq.fetch_add(1, Ordering::Relaxed);
        if self.frames.force_push(frame).is_some() {
            self.counters.frames_dropped.fetch_add(1, Ordering::Relaxed);
        }
        self.counters.frames_published.fetch_add(1, Ordering::Relaxed);
        if let Some(p) = &self.publisher {
            p.thread().unpark();
        }
        frame.seq
    }

    /// Commands received since the last call, in arrival order.
    pub fn drain_commands(&self) -> Vec<(BreakerCommand, SocketAddr)> {
        self.commands.try_iter().collect()
    }

    pub fn reply(&self, to: SocketAddr, ack: &Ack) {
        if let Err(e) = self.reply.send_to(&encode_ack(ack), to) {
            debug!("reply to {to} failed: {e}");
        }
    }

    /// Blocks until some peer announces itself (hello or telemetry ack).
    pub fn wait_for_peer(&self, timeout: Duration) -> Result<SocketAddr, NetError> {
        if self.gate.wait(|g| g.peer.lock().unwrap().is_some(), timeout) {
            Ok(self.peer().expect("ack recorded with its sender"))
        } else {
            Err(NetError::PeerTimeout(timeout))
        }
    }

    /// Blocks until the peer has acknowledged frame `seq` or later. Commands
    /// the peer sent before its ack are already queued when this returns.
    pub fn wait_for_ack(&self, seq: u32, timeout: Duration) -> Result<(), NetError> {
        let reached = |g: &AckGate| g.latest.load(Ordering::Acquire) >= seq as i64;
        if self.gate.wait(reached, timeout) {
            Ok(())
        } else {
            Err(NetError::PeerTimeout(timeout))
        }
    }

    pub fn peer(&self) -> Option<SocketAddr> {
        *self.gate.peer.lock().unwrap()
    }

    /// Waits until the outbound queue is empty.
    pub fn flush(&self, timeout: Duration) {
        let deadline = Instant::now() + timeout;
        while !self.frames.is_empty() && Instant::now() < deadline {
            if let Some(p) = &self.publisher {
                p.thread().unpark();
            }
            thread::sleep(Duration::from_micros(200));
        }
    }

    pub fn stats(&self) -> LinkStats {
        let c = &self.counters;
        let ld = |a: &AtomicU64| a.load(Ordering::Relaxed);
        LinkStats {
            frames_published: ld(&c.frames_published),
            frames_sent: ld(&c.frames_sent),
            frames_dropped: ld(&c.frames_dropped),
            send_errors: ld(&c.send_errors),
            commands: ld(&c.commands),
            acks: ld(&c.acks),
            malformed: ld(&c.malformed),
        }
    }
}

impl Drop for SimLink {
    fn drop(&mut self) {
        self.flush(Duration::from_millis(500));
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(p) = self.publisher.take() {
            p.thread().unpark();
            let _ = p.join();
        }
        if let Some(l) = self.listener.take() {
            let _ = l.join();
        }
    }
}

fn unspecified_like(addr: SocketAddr) -> std::net::IpAddr {
    match addr {
        SocketAddr::V4(_) => std::net::Ipv4Addr::UNSPECIFIED.into(),
        SocketAddr::V6(_) => std::net::Ipv6Addr::UNSPECIFIED.into(),
    }
}

fn publish_loop(
    socket: UdpSocket,
    to: SocketAddr,
    frames: &ArrayQueue<TelemetryFrame>,
    counters: &Counters,
    shutdown: &AtomicBool,
) {
    loop {
        while let Some(f) = frames.pop() {
            match socket.send_to(&encode_telemetry(&f), to) {
                Ok(_) => counters.frames_sent.fetch_add(1, Ordering::Relaxed),
                // Nobody listening is normal for fire-and-forget telemetry.
                Err(_) => counters.send_errors.fetch_add(1, Ordering::Relaxed),
            };
        }
        if shutdown.load(Ordering::Relaxed) {
            return;
        }
        thread::park_timeout(POLL);
    }
}

fn listen_loop(
    socket: UdpSocket,
    commands: Sender<(BreakerCommand, SocketAddr)>,
    gate: &AckGate,
    counters: &Counters,
    shutdown: &AtomicBool,
) {
    let mut buf = [0u8; 512];
    while !shutdown.load(Ordering::Relaxed) {
        let (n, from) = match socket.recv_from(&mut buf) {
            Ok(x) => x,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                continue
            }
            // ICMP port-unreachable surfaces here on some platforms.
            Err(e) if e.kind() == io::ErrorKind::ConnectionReset => continue,
            Err(e) => {
                warn!("command listener stopped: {e}");
                return;
            }
        };
        match decode_inbound(&buf[..n]) {
            Ok(Inbound::Command(c)) => {
                counters.commands.fetch_add(1, Ordering::Relaxed);
                // Blocks when the loop falls behind: commands are never dropped.
                if commands.send((c, from)).is_err() {
                    return;
                }
            }
            Ok(Inbound::Ack(a)) => match a.kind {
                AckKind::Telemetry => {
                    counters.acks.fetch_add(1, Ordering::Relaxed);
                    gate.record(Some(a.seq), from);
                }
                AckKind::Hello => gate.record(None, from),
                AckKind::Command => {}
            },
            Err(e) => {
                counters.malformed.fetch_add(1, Ordering::Relaxed);
                debug!("dropped datagram from {from}: {e}");
            }
        }
    }
}
