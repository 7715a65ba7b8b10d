//! Fixed-layout little-endian datagrams.
//!
//! Telemetry (64 bytes):
//!
//! | bytes  | field                         |
//! |--------|-------------------------------|
//! | 0..4   | magic `0x4D475431`            |
//! | 4      | version                       |
//! | 5      | breaker_state (header pad)    |
//! | 6      | fault_flag (header pad)       |
//! | 7      | reserved, zero                |
//! | 8..12  | seq                           |
//! | 12..20 | sim_time_us                   |
//! | 20..22 | bus_id                        |
//! | 22..24 | island_id                     |
//! | 24..32 | frequency_hz                  |
//! | 32..40 | v_mag_pu                      |
//! | 40..48 | v_ang_rad                     |
//! | 48..56 | p_mw                          |
//! | 56..64 | q_mvar                        |
//!
//! Command (24 bytes): magic `0x4D474331`, version, 3 reserved, seq u32,
//! breaker_id u16, action u8, reserved u8, execute_at_us u64.
//!
//! Ack (16 bytes): magic `0x4D474131`, version, kind, code, reserved, seq u32,
//! reserved u32.

use serde::{Deserialize, Serialize};

pub const TELEMETRY_MAGIC: u32 = 0x4D47_5431;
pub const COMMAND_MAGIC: u32 = 0x4D47_4331;
pub const ACK_MAGIC: u32 = 0x4D47_4131;
pub const PROTOCOL_VERSION: u8 = 1;

pub const TELEMETRY_LEN: usize = 64;
pub const COMMAND_LEN: usize = 24;
pub const ACK_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("datagram is {got} bytes, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("bad magic {0:#010x}")]
    Magic(u32),
    #[error("unsupported protocol version {0}")]
    Version(u8),
    #[error("field `{field}` has invalid value {value}")]
    Field { field: &'static str, value: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TelemetryFrame {
    pub seq: u32,
    pub sim_time_us: u64,
    pub bus_id: u16,
    pub island_id: u16,
    pub frequency_hz: f64,
    pub v_mag_pu: f64,
    pub v_ang_rad: f64,
    pub p_mw: f64,
    pub q_mvar: f64,
    /// PCC breaker: 0 open, 1 closed.
    pub breaker_state: u8,
    pub fault_flag: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BreakerAction {
    Open = 0,
    Close = 1,
}

impl BreakerAction {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Open),
            1 => Some(Self::Close),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BreakerCommand {
    pub seq: u32,
    pub breaker_id: u16,
    pub action: BreakerAction,
    /// Simulation time to actuate at, µs; 0 means immediately.
    pub execute_at_us: u64,
}

impl BreakerCommand {
    /// Requested actuation time in seconds, if one was given.
    pub fn execute_at(&self) -> Option<f64> {
        (self.execute_at_us != 0).then_some(self.execute_at_us as f64 * 1e-6)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AckKind {
    /// Peer finished processing the telemetry frame `seq` (lockstep gate).
    Telemetry = 0,
    /// Simulator's verdict on command `seq`.
    Command = 1,
    /// Peer announcing itself before the first frame; `seq` is unused.
    Hello = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReplyCode {
    Accepted = 0,
    /// Command matched the breaker's pending state; nothing was scheduled.
    NoOp = 1,
    UnknownBreaker = 2,
}

impl ReplyCode {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Accepted),
            1 => Some(Self::NoOp),
            2 => Some(Self::UnknownBreaker),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ack {
    pub kind: AckKind,
    pub code: ReplyCode,
    pub seq: u32,
}

impl Ack {
    pub fn telemetry(seq: u32) -> Self {
        Self {
            kind: AckKind::Telemetry,
            code: ReplyCode::Accepted,
            seq,
        }
    }

    pub fn hello() -> Self {
        Self {
            kind: AckKind::Hello,
            code: ReplyCode::Accepted,
            seq: 0,
        }
    }

    pub fn command(seq: u32, code: ReplyCode) -> Self {
        Self {
            kind: AckKind::Command,
            code,
            seq,
        }
    }
}

/// Any datagram arriving on the simulator's command port.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Inbound {
    Command(BreakerCommand),
    Ack(Ack),
}

fn header(buf: &mut [u8], magic: u32) {
    buf[0..4].copy_from_slice(&magic.to_le_bytes());
    buf[4] = PROTOCOL_VERSION;
}

fn check_header(buf: &[u8], magic: u32, len: usize) -> Result<(), CodecError> {
    if buf.len() != len {
        return Err(CodecError::Length {
            expected: len,
            got: buf.len(),
        });
    }
    let got = u32_at(buf, 0);
    if got != magic {
        return Err(CodecError::Magic(got));
    }
    if buf[4] != PROTOCOL_VERSION {
        return Err(CodecError::Version(buf[4]));
    }
    Ok(())
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes(b[at..at + 2].try_into().unwrap())
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn f64_at(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

pub fn encode_telemetry(f: &TelemetryFrame) -> [u8; TELEMETRY_LEN] {
    let mut b = [0u8; TELEMETRY_LEN];
    header(&mut b, TELEMETRY_MAGIC);
    b[5] = f.breaker_state;
    b[6] = f.fault_flag;
    b[8..12].copy_from_slice(&f.seq.to_le_bytes());
    b[12..20].copy_from_slice(&f.sim_time_us.to_le_bytes());
    b[20..22].copy_from_slice(&f.bus_id.to_le_bytes());
    b[22..24].copy_from_slice(&f.island_id.to_le_bytes());
    for (k, x) in [f.frequency_hz, f.v_mag_pu, f.v_ang_rad, f.p_mw, f.q_mvar]
        .into_iter()
        .enumerate()
    {
        let at = 24 + 8 * k;
        b[at..at + 8].copy_from_slice(&x.to_le_bytes());
    }
    b
}

pub fn decode_telemetry(b: &[u8]) -> Result<TelemetryFrame, CodecError> {
    check_header(b, TELEMETRY_MAGIC, TELEMETRY_LEN)?;
    Ok(TelemetryFrame {
        breaker_state: b[5],
        fault_flag: b[6],
        seq: u32_at(b, 8),
        sim_time_us: u64_at(b, 12),
        bus_id: u16_at(b, 20),
        island_id: u16_at(b, 22),
        frequency_hz: f64_at(b, 24),
        v_mag_pu: f64_at(b, 32),
        v_ang_rad: f64_at(b, 40),
        p_mw: f64_at(b, 48),
        q_mvar: f64_at(b, 56),
    })
}

pub fn encode_command(c: &BreakerCommand) -> [u8; COMMAND_LEN] {
    let mut b = [0u8; COMMAND_LEN];
    header(&mut b, COMMAND_MAGIC);
    b[8..12].copy_from_slice(&c.seq.to_le_bytes());
    b[12..14].copy_from_slice(&c.breaker_id.to_le_bytes());
    b[14] = c.action as u8;
    b[16..24].copy_from_slice(&c.execute_at_us.to_le_bytes());
    b
}

pub fn decode_command(b: &[u8]) -> Result<BreakerCommand, CodecError> {
    check_header(b, COMMAND_MAGIC, COMMAND_LEN)?;
    let action = BreakerAction::from_u8(b[14]).ok_or(CodecError::Field {
        field: "action",
        value: b[14] as u64,
    })?;
    Ok(BreakerCommand {
        seq: u32_at(b, 8),
        breaker_id: u16_at(b, 12),
        action,
        execute_at_us: u64_at(b, 16),
    })
}

pub fn encode_ack(a: &Ack) -> [u8; ACK_LEN] {
    let mut b = [0u8; ACK_LEN];
    header(&mut b, ACK_MAGIC);
    b[5] = a.kind as u8;
    b[6] = a.code as u8;
    b[8..12].copy_from_slice(&a.seq.to_le_bytes());
    b
}

pub fn decode_ack(b: &[u8]) -> Result<Ack, CodecError> {
    check_header(b, ACK_MAGIC, ACK_LEN)?;
    let kind = match b[5] {
        0 => AckKind::Telemetry,
        1 => AckKind::Command,
        2 => AckKind::Hello,
        v => {
            return Err(CodecError::Field {
                field: "kind",
                value: v as u64,
            })
        }
    };
    let code = ReplyCode::from_u8(b[6]).ok_or(CodecError::Field {
        field: "code",
        value: b[6] as u64,
    })?;
    Ok(Ack {
        kind,
        code,
        seq: u32_at(b, 8),
    })
}

/// Classifies a datagram received on the command port.
pub fn decode_inbound(b: &[u8]) -> Result<Inbound, CodecError> {
    if b.len() >= 4 && u32_at(b, 0) == ACK_MAGIC {
        decode_ack(b).map(Inbound::Ack)
    } else {
        decode_command(b).map(Inbound::Command)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_frame_layout() {
        let b = encode_telemetry(&TelemetryFrame::default());
        assert_eq!(&b[..8], &[0x31, 0x54, 0x47, 0x4D, 0x01, 0x00, 0x00, 0x00]);
        assert!(b[8..].iter().all(|&x| x == 0));
    }

    #[test]
    fn frequency_lands_at_offset_24() {
        let f = TelemetryFrame {
            frequency_hz: 60.0,
            ..Default::default()
        };
        let b = encode_telemetry(&f);
        // IEEE-754 image of 60.0 is 0x404E000000000000.
        assert_eq!(&b[24..32], &[0, 0, 0, 0, 0, 0, 0x4E, 0x40]);
    }

    #[test]
    fn open_command_decodes() {
        let mut b = [0u8; COMMAND_LEN];
        b[..4].copy_from_slice(&[0x31, 0x43, 0x47, 0x4D]);
        b[4] = 1;
        b[8] = 7;
        b[12] = 1;
        let c = decode_command(&b).unwrap();
        assert_eq!(
            c,
            BreakerCommand {
                seq: 7,
                breaker_id: 1,
                action: BreakerAction::Open,
                execute_at_us: 0
            }
        );
        assert_eq!(c.execute_at(), None);
    }

    #[test]
    fn short_and_foreign_datagrams_are_rejected() {
        assert_eq!(
            decode_command(&[0u8; 10]),
            Err(CodecError::Length {
                expected: 24,
                got: 10
            })
        );
        let tele = encode_telemetry(&TelemetryFrame::default());
        assert!(matches!(decode_command(&tele[..24]), Err(CodecError::Magic(TELEMETRY_MAGIC))));
        let mut bad = encode_command(&BreakerCommand {
            seq: 1,
            breaker_id: 1,
            action: BreakerAction::Close,
            execute_at_us: 5,
        });
        bad[4] = 2;
        assert_eq!(decode_command(&bad), Err(CodecError::Version(2)));
        bad[4] = 1;
        bad[14] = 9;
        assert!(matches!(decode_command(&bad), Err(CodecError::Field { field: "action", .. })));
    }

    #[test]
    fn inbound_dispatches_by_magic() {
        let ack = Ack::telemetry(42);
        assert_eq!(decode_inbound(&encode_ack(&ack)), Ok(Inbound::Ack(ack)));
        let cmd = BreakerCommand {
            seq: 3,
            breaker_id: 1,
            action: BreakerAction::Close,
            execute_at_us: 1_500_000,
        };
        assert_eq!(decode_inbound(&encode_command(&cmd)), Ok(Inbound::Command(cmd)));
        assert!(decode_inbound(&[0x31]).is_err());
    }

    fn frame() -> impl Strategy<Value = TelemetryFrame> {
        (
            (any::<u32>(), any::<u64>(), any::<u16>(), any::<u16>()),
            (any::<f64>(), any::<f64>(), any::<f64>(), any::<f64>(), any::<f64>()),
            (any::<u8>(), any::<u8>()),
        )
            .prop_map(|((seq, t, bus, isl), (f, v, a, p, q), (br, fl))| TelemetryFrame {
                seq,
                sim_time_us: t,
                bus_id: bus,
                island_id: isl,
                frequency_hz: f,
                v_mag_pu: v,
                v_ang_rad: a,
                p_mw: p,
                q_mvar: q,
                breaker_state: br,
                fault_flag: fl,
            })
    }

    proptest! {
        #[test]
        fn telemetry_round_trip(f in frame()) {
            let back = decode_telemetry(&encode_telemetry(&f)).unwrap();
            // Bitwise comparison so NaN payloads count as equal.
            prop_assert_eq!(encode_telemetry(&back), encode_telemetry(&f));
        }

        #[test]
        fn command_round_trip(seq: u32, id: u16, close: bool, at: u64) {
            let c = BreakerCommand {
                seq,
                breaker_id: id,
                action: if close { BreakerAction::Close } else { BreakerAction::Open },
                execute_at_us: at,
            };
            prop_assert_eq!(decode_command(&encode_command(&c)), Ok(c));
        }

        #[test]
        fn decoders_are_total(bytes in proptest::collection::vec(any::<u8>(), 0..80)) {
            let _ = decode_telemetry(&bytes);
            let _ = decode_command(&bytes);
            let _ = decode_ack(&bytes);
            let _ = decode_inbound(&bytes);
        }
    }
}
