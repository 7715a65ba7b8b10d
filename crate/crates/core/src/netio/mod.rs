//! UDP telemetry/command protocol between the simulator and a remote peer.
//!
//! The protocol carries no authentication or integrity protection: the
//! unauthenticated breaker interface is the vulnerability being studied.

pub mod codec;
mod link;

use std::net::SocketAddr;
use std::time::Duration;

pub use codec::{
    decode_ack, decode_command, decode_inbound, decode_telemetry, encode_ack, encode_command,
    encode_telemetry, Ack, AckKind, BreakerAction, BreakerCommand, CodecError, Inbound,
    ReplyCode, TelemetryFrame,
};
pub use link::{
    LinkConfig, LinkStats, SimLink, DEFAULT_COMMAND_PORT, DEFAULT_PUBLISH_EVERY,
    DEFAULT_TELEMETRY_PORT,
};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("no peer activity within {0:?}")]
    PeerTimeout(Duration),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Whether the loop publishes after step `k` (0-based).
pub fn publishes_at(k: u64, every: u64) -> bool {
    k.is_multiple_of(every.max(1))
}

/// Frames emitted per monitored bus over `steps` steps.
pub fn frame_count(steps: u64, every: u64) -> u64 {
    steps.div_ceil(every.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::UdpSocket;

    #[test]
    fn one_second_at_one_ms_gives_one_hundred_frames() {
        assert_eq!(frame_count(1000, 10), 100);
        let n = (0..1000).filter(|&k| publishes_at(k, 10)).count() as u64;
        assert_eq!(n, frame_count(1000, 10));
        assert_eq!(frame_count(1001, 10), 101);
    }

    fn loopback() -> SocketAddr {
        SocketAddr::from(([127, 0, 0, 1], 0))
    }

    #[test]
    fn frames_reach_a_listener_in_order() {
        let rx = UdpSocket::bind(loopback()).unwrap();
        rx.set_read_timeout(Some(Duration::from_secs(2))).unwrap();
        let link = SimLink::start(&LinkConfig {
            telemetry_to: rx.local_addr().unwrap(),
            command_bind: loopback(),
        })
        .unwrap();
        for k in 0..20u64 {
            link.publish(TelemetryFrame {
                sim_time_us: k * 10_000,
                bus_id: 24,
                ..Default::default()
            });
        }
        let mut buf = [0u8; 128];
        for k in 0..20u32 {
            let n = rx.recv(&mut buf).unwrap();
            let f = decode_telemetry(&buf[..n]).unwrap();
            assert_eq!(f.seq, k);
        }
        link.flush(Duration::from_secs(1));
        let deadline = std::time::Instant::now() + Duration::from_secs(1);
        while link.stats().frames_sent < 20 && std::time::Instant::now() < deadline {
            std::thread::yield_now();
        }
        assert_eq!(link.stats().frames_sent, 20);
    }

    #[test]
    fn absent_listener_is_tolerated() {
        // Nothing is bound at the telemetry address.
        let free = UdpSocket::bind(loopback()).unwrap().local_addr().unwrap();
        let link = SimLink::start(&LinkConfig {
            telemetry_to: free,
            command_bind: loopback(),
        })
        .unwrap();
        for _ in 0..50 {
            link.publish(TelemetryFrame::default());
        }
        link.flush(Duration::from_secs(1));
        assert_eq!(link.stats().frames_published, 50);
        assert!(link.wait_for_ack(0, Duration::from_millis(30)).is_err());
    }

    #[test]
    fn commands_acks_and_garbage_are_sorted() {
        let link = SimLink::start(&LinkConfig {
            telemetry_to: loopback(),
            command_bind: loopback(),
        })
        .unwrap();
        let peer = UdpSocket::bind(loopback()).unwrap();
        let to = link.command_addr();
        let cmd = BreakerCommand {
            seq: 9,
            breaker_id: 1,
            action: BreakerAction::Open,
            execute_at_us: 1_000_000,
        };
        peer.send_to(&[1, 2, 3], to).unwrap();
        peer.send_to(&encode_ack(&Ack::hello()), to).unwrap();
        peer.send_to(&encode_command(&cmd), to).unwrap();
        peer.send_to(&encode_ack(&Ack::telemetry(4)), to).unwrap();

        assert_eq!(link.wait_for_peer(Duration::from_secs(2)).unwrap(), peer.local_addr().unwrap());
        link.wait_for_ack(4, Duration::from_secs(2)).unwrap();
        let got = link.drain_commands();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].0, cmd);
        let s = link.stats();
        assert_eq!((s.commands, s.acks, s.malformed), (1, 1, 1));
    }
}
