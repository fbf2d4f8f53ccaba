//! Bit-exact framing for every RF and wired message.
//!
//! ```text
//! AA 55 | type (1) | len (1) | payload (len) | CRC-16/CCITT-FALSE (2, big-endian)
//! ```
//!
//! The CRC covers `type`, `len` and the payload. All multi-byte integers are
//! big-endian. Decoding is strict: the byte count must match `len` exactly
//! and the payload must match the fixed schema of its message type.

use std::fmt;

use thiserror::Error;

use crate::authcrypt::{AuthMessage, Challenge, CHALLENGE_LEN, MAX_SUMS};
use crate::keystore::CarKeyId;

pub const SYNC: [u8; 2] = [0xAA, 0x55];
/// Values carried by one PROG_WRITE block at most.
pub const PROG_BLOCK_VALUES: usize = 100;
const HEADER_LEN: usize = 4;
const CRC_LEN: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("bad sync word")]
    BadSync,
    #[error("frame length mismatch: header implies {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("CRC mismatch: computed {computed:04x}, frame carries {carried:04x}")]
    BadCrc { computed: u16, carried: u16 },
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("payload violates the {msg_type} schema: {reason}")]
    SchemaViolation {
        msg_type: MessageType,
        reason: String,
    },
}

/// CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no final xor.
pub fn crc16_ccitt_false(data: &[u8]) -> u16 {
    let mut crc: u16 = 0xFFFF;
    for &byte in data {
        crc ^= (byte as u16) << 8;
        for _ in 0..8 {
            crc = if crc & 0x8000 != 0 {
                (crc << 1) ^ 0x1021
            } else {
                crc << 1
            };
        }
    }
    crc
}

macro_rules! message_types {
    ($($name:ident = $code:literal, $label:literal;)*) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        #[repr(u8)]
        pub enum MessageType {
            $($name = $code,)*
        }

        impl MessageType {
            pub const ALL: &'static [MessageType] = &[$(MessageType::$name,)*];

            pub fn from_code(code: u8) -> Option<Self> {
                match code {
                    $($code => Some(MessageType::$name),)*
                    _ => None,
                }
            }

            pub fn label(self) -> &'static str {
                match self {
                    $(MessageType::$name => $label,)*
                }
            }

            pub fn from_label(label: &str) -> Option<Self> {
                match label {
                    $($label => Some(MessageType::$name),)*
                    _ => None,
                }
            }
        }
    };
}

message_types! {
    IdAnnounce = 0x01, "ID_ANNOUNCE";
    Challenge = 0x02, "CHALLENGE";
    AuthResponse = 0x03, "AUTH_RESPONSE";
    AuthOk = 0x04, "AUTH_OK";
    Command = 0x05, "COMMAND";
    IdRequest = 0x06, "ID_REQUEST";
    StartInit = 0x07, "START_INIT";
    StartAuth = 0x08, "START_AUTH";
    StartConfirm = 0x09, "START_CONFIRM";
    Ping = 0x0A, "PING";
    PingReply = 0x0B, "PING_REPLY";
    ProgIdRequest = 0x20, "PROG_ID_REQUEST";
    ProgIdResponse = 0x21, "PROG_ID_RESPONSE";
    ProgWrite = 0x22, "PROG_WRITE";
    ProgAck = 0x23, "PROG_ACK";
    ProgNack = 0x24, "PROG_NACK";
    ProgCommit = 0x25, "PROG_COMMIT";
    ProgRollback = 0x26, "PROG_ROLLBACK";
    FixedCode = 0x30, "FIXED_CODE";
    RollingCode = 0x31, "ROLLING_CODE";
    CrChallenge = 0x32, "CR_CHALLENGE";
    CrResponse = 0x33, "CR_RESPONSE";
}

impl MessageType {
    pub fn code(self) -> u8 {
        self as u8
    }

    fn check_payload(self, payload: &[u8]) -> Result<(), String> {
        use MessageType::*;
        let fixed = |n: usize| {
            if payload.len() == n {
                Ok(())
            } else {
                Err(format!("expected {n} payload bytes, got {}", payload.len()))
            }
        };
        match self {
            AuthOk | IdRequest | ProgIdRequest | ProgRollback => fixed(0),
            IdAnnounce | Ping | PingReply | ProgIdResponse | ProgCommit | FixedCode
            | RollingCode | CrChallenge | CrResponse => fixed(4),
            Challenge => fixed(2 * CHALLENGE_LEN),
            AuthResponse | StartConfirm => fixed(2 * MAX_SUMS),
            StartInit => fixed(4 + 2 * CHALLENGE_LEN),
            StartAuth => fixed(2 * MAX_SUMS + 2 * CHALLENGE_LEN),
            ProgAck | ProgNack => fixed(2),
            Command => {
                fixed(1)?;
                Button::from_code(payload[0])
                    .map(|_| ())
                    .ok_or_else(|| format!("unknown command code 0x{:02x}", payload[0]))
            }
            ProgWrite => {
                if payload.len() < 3 {
                    return Err(format!("block header needs 3 bytes, got {}", payload.len()));
                }
                let count = payload[2] as usize;
                if !(1..=PROG_BLOCK_VALUES).contains(&count) {
                    return Err(format!("block value count {count} not in 1..=100"));
                }
                fixed(3 + 2 * count)
            }
        }
    }
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Fob buttons and the matching COMMAND codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Button {
    Lock = 0x01,
    Unlock = 0x02,
    Boot = 0x03,
}

impl Button {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0x01 => Some(Button::Lock),
            0x02 => Some(Button::Unlock),
            0x03 => Some(Button::Boot),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

impl std::str::FromStr for Button {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "LOCK" => Ok(Button::Lock),
            "UNLOCK" => Ok(Button::Unlock),
            "BOOT" => Ok(Button::Boot),
            _ => Err(format!("unknown button `{s}` (expected LOCK|UNLOCK|BOOT)")),
        }
    }
}

/// A schema-valid message: type plus raw payload.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    msg_type: MessageType,
    payload: Vec<u8>,
}

impl Frame {
    /// Builds a frame, checking the payload against the type's schema.
    pub fn new(msg_type: MessageType, payload: Vec<u8>) -> Result<Self, DecodeError> {
        msg_type
            .check_payload(&payload)
            .map_err(|reason| DecodeError::SchemaViolation { msg_type, reason })?;
        Ok(Frame { msg_type, payload })
    }

    pub fn msg_type(&self) -> MessageType {
        self.msg_type
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() + CRC_LEN);
        out.extend_from_slice(&SYNC);
        out.push(self.msg_type.code());
        out.push(self.payload.len() as u8);
        out.extend_from_slice(&self.payload);
        let crc = crc16_ccitt_false(&out[2..]);
        out.extend_from_slice(&crc.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        if !bytes.iter().zip(SYNC.iter()).all(|(a, b)| a == b) {
            return Err(DecodeError::BadSync);
        }
        if bytes.len() < HEADER_LEN + CRC_LEN {
            return Err(DecodeError::Truncated {
                expected: HEADER_LEN + CRC_LEN,
                got: bytes.len(),
            });
        }
        let len = bytes[3] as usize;
        let expected = HEADER_LEN + len + CRC_LEN;
        if bytes.len() != expected {
            return Err(DecodeError::Truncated {
                expected,
                got: bytes.len(),
            });
        }
        let body = &bytes[2..HEADER_LEN + len];
        let computed = crc16_ccitt_false(body);
        let carried = u16::from_be_bytes([bytes[expected - 2], bytes[expected - 1]]);
        if computed != carried {
            return Err(DecodeError::BadCrc { computed, carried });
        }
        let msg_type = MessageType::from_code(bytes[2]).ok_or(DecodeError::UnknownType(bytes[2]))?;
        Frame::new(msg_type, bytes[HEADER_LEN..HEADER_LEN + len].to_vec())
    }
}

impl fmt::Debug for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.msg_type, hex::encode(&self.payload))
    }
}

/// Typed view over a [`Frame`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    IdAnnounce(CarKeyId),
    Challenge(Challenge),
    AuthResponse(AuthMessage),
    AuthOk,
    Command(Button),
    IdRequest,
    StartInit { id: CarKeyId, challenge: Challenge },
    StartAuth { response: AuthMessage, challenge: Challenge },
    StartConfirm(AuthMessage),
    Ping(CarKeyId),
    PingReply(CarKeyId),
    ProgIdRequest,
    ProgIdResponse(CarKeyId),
    ProgWrite { block: u16, values: Vec<u16> },
    ProgAck(u16),
    ProgNack(u16),
    ProgCommit { generation: u32 },
    ProgRollback,
    FixedCode(u32),
    RollingCode(u32),
    CrChallenge(u32),
    CrResponse(u32),
}

fn put_u16s(out: &mut Vec<u8>, values: &[u16]) {
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
}

fn get_u16s<const N: usize>(bytes: &[u8]) -> [u16; N] {
    let mut out = [0u16; N];
    for (i, v) in out.iter_mut().enumerate() {
        *v = u16::from_be_bytes([bytes[2 * i], bytes[2 * i + 1]]);
    }
    out
}

fn get_u32(bytes: &[u8]) -> u32 {
    u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
}

impl Message {
    pub fn msg_type(&self) -> MessageType {
        use Message as M;
        use MessageType as T;
        match self {
            M::IdAnnounce(_) => T::IdAnnounce,
            M::Challenge(_) => T::Challenge,
            M::AuthResponse(_) => T::AuthResponse,
            M::AuthOk => T::AuthOk,
            M::Command(_) => T::Command,
            M::IdRequest => T::IdRequest,
            M::StartInit { .. } => T::StartInit,
            M::StartAuth { .. } => T::StartAuth,
            M::StartConfirm(_) => T::StartConfirm,
            M::Ping(_) => T::Ping,
            M::PingReply(_) => T::PingReply,
            M::ProgIdRequest => T::ProgIdRequest,
            M::ProgIdResponse(_) => T::ProgIdResponse,
            M::ProgWrite { .. } => T::ProgWrite,
            M::ProgAck(_) => T::ProgAck,
            M::ProgNack(_) => T::ProgNack,
            M::ProgCommit { .. } => T::ProgCommit,
            M::ProgRollback => T::ProgRollback,
            M::FixedCode(_) => T::FixedCode,
            M::RollingCode(_) => T::RollingCode,
            M::CrChallenge(_) => T::CrChallenge,
            M::CrResponse(_) => T::CrResponse,
        }
    }

    /// Serializes into a frame. Fails only for PROG_WRITE blocks holding no
    /// values or more than 100.
    pub fn to_frame(&self) -> Result<Frame, DecodeError> {
        let mut p = Vec::new();
        match self {
            Message::IdAnnounce(id)
            | Message::Ping(id)
            | Message::PingReply(id)
            | Message::ProgIdResponse(id) => p.extend_from_slice(&id.value().to_be_bytes()),
            Message::Challenge(c) => put_u16s(&mut p, c.indices()),
            Message::AuthResponse(m) | Message::StartConfirm(m) => put_u16s(&mut p, m.sums()),
            Message::Command(b) => p.push(b.code()),
            Message::StartInit { id, challenge } => {
                p.extend_from_slice(&id.value().to_be_bytes());
                put_u16s(&mut p, challenge.indices());
            }
            Message::StartAuth {
                response,
                challenge,
            } => {
                put_u16s(&mut p, response.sums());
                put_u16s(&mut p, challenge.indices());
            }
            Message::ProgWrite { block, values } => {
                p.extend_from_slice(&block.to_be_bytes());
                p.push(values.len().min(255) as u8);
                put_u16s(&mut p, values);
            }
            Message::ProgAck(seq) | Message::ProgNack(seq) => p.extend_from_slice(&seq.to_be_bytes()),
            Message::ProgCommit { generation } => p.extend_from_slice(&generation.to_be_bytes()),
            Message::FixedCode(v)
            | Message::RollingCode(v)
            | Message::CrChallenge(v)
            | Message::CrResponse(v) => p.extend_from_slice(&v.to_be_bytes()),
            Message::AuthOk | Message::IdRequest | Message::ProgIdRequest | Message::ProgRollback => {}
        }
        Frame::new(self.msg_type(), p)
    }

    pub fn encode(&self) -> Result<Vec<u8>, DecodeError> {
        Ok(self.to_frame()?.encode())
    }
}

impl From<&Frame> for Message {
    fn from(frame: &Frame) -> Self {
        use MessageType as T;
        let p = frame.payload();
        match frame.msg_type() {
            T::IdAnnounce => Message::IdAnnounce(CarKeyId::new(get_u32(p))),
            T::Challenge => Message::Challenge(Challenge::from_raw(get_u16s(p))),
            T::AuthResponse => Message::AuthResponse(AuthMessage::new(get_u16s(p))),
            T::AuthOk => Message::AuthOk,
            T::Command => Message::Command(Button::from_code(p[0]).expect("schema-checked")),
            T::IdRequest => Message::IdRequest,
            T::StartInit => Message::StartInit {
                id: CarKeyId::new(get_u32(p)),
                challenge: Challenge::from_raw(get_u16s(&p[4..])),
            },
            T::StartAuth => Message::StartAuth {
                response: AuthMessage::new(get_u16s(p)),
                challenge: Challenge::from_raw(get_u16s(&p[2 * MAX_SUMS..])),
            },
            T::StartConfirm => Message::StartConfirm(AuthMessage::new(get_u16s(p))),
            T::Ping => Message::Ping(CarKeyId::new(get_u32(p))),
            T::PingReply => Message::PingReply(CarKeyId::new(get_u32(p))),
            T::ProgIdRequest => Message::ProgIdRequest,
            T::ProgIdResponse => Message::ProgIdResponse(CarKeyId::new(get_u32(p))),
            T::ProgWrite => Message::ProgWrite {
                block: u16::from_be_bytes([p[0], p[1]]),
                values: p[3..]
                    .chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]))
                    .collect(),
            },
            T::ProgAck => Message::ProgAck(u16::from_be_bytes([p[0], p[1]])),
            T::ProgNack => Message::ProgNack(u16::from_be_bytes([p[0], p[1]])),
            T::ProgCommit => Message::ProgCommit {
                generation: get_u32(p),
            },
            T::ProgRollback => Message::ProgRollback,
            T::FixedCode => Message::FixedCode(get_u32(p)),
            T::RollingCode => Message::RollingCode(get_u32(p)),
            T::CrChallenge => Message::CrChallenge(get_u32(p)),
            T::CrResponse => Message::CrResponse(get_u32(p)),
        }
    }
}

impl From<Frame> for Message {
    fn from(frame: Frame) -> Self {
        Message::from(&frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc_check_value() {
        assert_eq!(crc16_ccitt_false(b"123456789"), 0x29B1);
        assert_eq!(crc16_ccitt_false(&[]), 0xFFFF);
    }

    #[test]
    fn auth_ok_layout() {
        let bytes = Message::AuthOk.encode().unwrap();
        assert_eq!(&bytes[..4], &[0xAA, 0x55, 0x04, 0x00]);
        assert_eq!(bytes.len(), 6);
    }

    #[test]
    fn id_announce_layout() {
        let bytes = Message::IdAnnounce(CarKeyId::new(1)).encode().unwrap();
        assert_eq!(&bytes[..8], &[0xAA, 0x55, 0x01, 0x04, 0, 0, 0, 1]);
    }

    #[test]
    fn decode_error_kinds_are_distinct() {
        let good = Message::IdAnnounce(CarKeyId::new(9)).encode().unwrap();

        let mut flipped = good.clone();
        *flipped.last_mut().unwrap() ^= 0x01;
        assert!(matches!(Frame::decode(&flipped), Err(DecodeError::BadCrc { .. })));

        let mut bad_sync = good.clone();
        bad_sync[0] = 0xAB;
        assert_eq!(Frame::decode(&bad_sync), Err(DecodeError::BadSync));

        let mut unknown = vec![0xAA, 0x55, 0x7F, 0x00];
        let crc = crc16_ccitt_false(&unknown[2..]);
        unknown.extend_from_slice(&crc.to_be_bytes());
        assert_eq!(Frame::decode(&unknown), Err(DecodeError::UnknownType(0x7F)));

        let mut short = vec![0xAA, 0x55, 0x02, 0x02, 0x00, 0x01];
        let crc = crc16_ccitt_false(&short[2..]);
        short.extend_from_slice(&crc.to_be_bytes());
        assert!(matches!(
            Frame::decode(&short),
            Err(DecodeError::SchemaViolation { msg_type: MessageType::Challenge, .. })
        ));

        assert!(matches!(Frame::decode(&good[..5]), Err(DecodeError::Truncated { .. })));
        assert!(matches!(Frame::decode(&[]), Err(DecodeError::Truncated { .. })));
    }

    #[test]
    fn command_codes_are_checked() {
        assert!(Frame::new(MessageType::Command, vec![0x02]).is_ok());
        assert!(Frame::new(MessageType::Command, vec![0x04]).is_err());
        assert!(Frame::new(MessageType::Command, vec![]).is_err());
    }

    #[test]
    fn prog_write_schema() {
        let ok = Message::ProgWrite {
            block: 19,
            values: vec![1; 100],
        };
        let frame = ok.to_frame().unwrap();
        assert_eq!(frame.payload().len(), 203);
        assert_eq!(Message::from(&frame), ok);

        assert!(Message::ProgWrite {
            block: 0,
            values: vec![]
        }
        .to_frame()
        .is_err());
        assert!(Message::ProgWrite {
            block: 0,
            values: vec![0; 101]
        }
        .to_frame()
        .is_err());
        // count byte disagreeing with the payload length
        assert!(Frame::new(MessageType::ProgWrite, vec![0, 0, 2, 0, 1]).is_err());
    }

    #[test]
    fn labels_round_trip() {
        for &t in MessageType::ALL {
            assert_eq!(MessageType::from_label(t.label()), Some(t));
            assert_eq!(MessageType::from_code(t.code()), Some(t));
        }
    }
}
