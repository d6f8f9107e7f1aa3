// SPDX-License-Identifier: Apache-2.0

//! Datagram framing for the GET/SET exchange with the signal controller.
//!
//! ```text
//! byte 0      version (0x01)
//! byte 1      message type
//! bytes 2..4  request id, big-endian
//! byte 4      object id
//! byte 5      payload length L
//! bytes 6..   payload (L bytes)
//! ```
//!
//! One object per message. Responses echo the request id and object id.

use std::collections::BTreeSet;
use std::fmt;
use std::time::Duration;

use thiserror::Error;

use crate::model::{PhaseId, PhasePair};
use crate::signal::{Color, SignalState};

pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 6;
pub const MAX_PAYLOAD: usize = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MsgType {
    Get,
    Set,
    GetResponse,
    SetResponse,
    Error,
}

impl MsgType {
    pub const fn code(self) -> u8 {
        match self {
            MsgType::Get => 0x01,
            MsgType::Set => 0x02,
            MsgType::GetResponse => 0x81,
            MsgType::SetResponse => 0x82,
            MsgType::Error => 0xFF,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0x01 => MsgType::Get,
            0x02 => MsgType::Set,
            0x81 => MsgType::GetResponse,
            0x82 => MsgType::SetResponse,
            0xFF => MsgType::Error,
            _ => return None,
        })
    }
}

/// Controller objects addressable over the wire. Ids outside the known set
/// still decode, as `Unknown`, and are refused by the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectId {
    StatusRed,
    StatusYellow,
    StatusGreen,
    VehCall,
    Unknown(u8),
}

impl ObjectId {
    pub const STATUS: [ObjectId; 3] = [ObjectId::StatusRed, ObjectId::StatusYellow, ObjectId::StatusGreen];

    pub const fn code(self) -> u8 {
        match self {
            ObjectId::StatusRed => 0x01,
            ObjectId::StatusYellow => 0x02,
            ObjectId::StatusGreen => 0x03,
            ObjectId::VehCall => 0x10,
            ObjectId::Unknown(c) => c,
        }
    }
}

impl From<u8> for ObjectId {
    fn from(code: u8) -> Self {
        match code {
            0x01 => ObjectId::StatusRed,
            0x02 => ObjectId::StatusYellow,
            0x03 => ObjectId::StatusGreen,
            0x10 => ObjectId::VehCall,
            other => ObjectId::Unknown(other),
        }
    }
}

/// Payload byte of an ERROR message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    /// Request frame could not be decoded.
    Malformed,
    UnknownObject,
    /// Phase call names phases that may not be green together.
    ConflictingCall,
    /// Well-framed but not meaningful: wrong payload size, SET on a
    /// read-only object, a response type sent as a request.
    BadRequest,
    /// Controller is refusing phase calls (fault injection).
    CallsRefused,
    Other(u8),
}

impl ErrorCode {
    pub const fn code(self) -> u8 {
        match self {
            ErrorCode::Malformed => 0x01,
            ErrorCode::UnknownObject => 0x02,
            ErrorCode::ConflictingCall => 0x03,
            ErrorCode::BadRequest => 0x04,
            ErrorCode::CallsRefused => 0x05,
            ErrorCode::Other(c) => c,
        }
    }
}

impl From<u8> for ErrorCode {
    fn from(code: u8) -> Self {
        match code {
            0x01 => ErrorCode::Malformed,
            0x02 => ErrorCode::UnknownObject,
            0x03 => ErrorCode::ConflictingCall,
            0x04 => ErrorCode::BadRequest,
            0x05 => ErrorCode::CallsRefused,
            other => ErrorCode::Other(other),
        }
    }
}

/// One byte, bit `n-1` set when phase `n` is asserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct PhaseBitmask(pub u8);

impl PhaseBitmask {
    pub const EMPTY: PhaseBitmask = PhaseBitmask(0);

    pub fn from_phases<I: IntoIterator<Item = PhaseId>>(phases: I) -> Self {
        PhaseBitmask(phases.into_iter().fold(0, |m, p| m | 1 << p.index()))
    }

    pub fn contains(self, p: PhaseId) -> bool {
        self.0 & (1 << p.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }

    pub fn phases(self) -> impl Iterator<Item = PhaseId> {
        PhaseId::all().filter(move |p| self.contains(*p))
    }
}

impl fmt::Display for PhaseBitmask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:02X}", self.0)
    }
}

pub fn pair_to_mask(pair: PhasePair) -> PhaseBitmask {
    PhaseBitmask::from_phases(pair.phases())
}

pub fn mask_to_phases(mask: PhaseBitmask) -> BTreeSet<PhaseId> {
    mask.phases().collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub version: u8,
    pub msg_type: MsgType,
    pub request_id: u16,
    pub object_id: ObjectId,
    pub payload: Vec<u8>,
}

impl WireMessage {
    fn new(msg_type: MsgType, request_id: u16, object_id: ObjectId, payload: Vec<u8>) -> Self {
        WireMessage {
            version: VERSION,
            msg_type,
            request_id,
            object_id,
            payload,
        }
    }

    pub fn get(request_id: u16, object: ObjectId) -> Self {
        Self::new(MsgType::Get, request_id, object, Vec::new())
    }

    pub fn set(request_id: u16, object: ObjectId, mask: PhaseBitmask) -> Self {
        Self::new(MsgType::Set, request_id, object, vec![mask.0])
    }

    pub fn get_response(request_id: u16, object: ObjectId, mask: PhaseBitmask) -> Self {
        Self::new(MsgType::GetResponse, request_id, object, vec![mask.0])
    }

    pub fn set_response(request_id: u16, object: ObjectId, mask: PhaseBitmask) -> Self {
        Self::new(MsgType::SetResponse, request_id, object, vec![mask.0])
    }

    pub fn error(request_id: u16, object: ObjectId, code: ErrorCode) -> Self {
        Self::new(MsgType::Error, request_id, object, vec![code.code()])
    }

    /// The single-byte bitmask payload, if the payload is exactly one byte.
    pub fn mask(&self) -> Option<PhaseBitmask> {
        match self.payload.as_slice() {
            [b] => Some(PhaseBitmask(*b)),
            _ => None,
        }
    }

    pub fn error_code(&self) -> Option<ErrorCode> {
        match (self.msg_type, self.payload.as_slice()) {
            (MsgType::Error, [b]) => Some(ErrorCode::from(*b)),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    PayloadTooLong(usize),
    #[error("unsupported protocol version {0:#04x}")]
    UnsupportedVersion(u8),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("truncated frame: need {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("bad protocol version {0:#04x}")]
    BadVersion(u8),
    #[error("frame declares {declared} payload bytes but carries {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
}

pub fn encode(msg: &WireMessage) -> Result<Vec<u8>, EncodeError> {
    if msg.version != VERSION {
        return Err(EncodeError::UnsupportedVersion(msg.version));
    }
    if msg.payload.len() > MAX_PAYLOAD {
        return Err(EncodeError::PayloadTooLong(msg.payload.len()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + msg.payload.len());
    out.push(msg.version);
    out.push(msg.msg_type.code());
    out.extend_from_slice(&msg.request_id.to_be_bytes());
    out.push(msg.object_id.code());
    out.push(msg.payload.len() as u8);
    out.extend_from_slice(&msg.payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<WireMessage, DecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::Truncated {
            needed: HEADER_LEN,
            got: bytes.len(),
        });
    }
    if bytes[0] != VERSION {
        return Err(DecodeError::BadVersion(bytes[0]));
    }
    let msg_type = MsgType::from_code(bytes[1]).ok_or(DecodeError::UnknownType(bytes[1]))?;
    let declared = bytes[5] as usize;
    let actual = bytes.len() - HEADER_LEN;
    if actual < declared {
        return Err(DecodeError::Truncated {
            needed: HEADER_LEN + declared,
            got: bytes.len(),
        });
    }
    if actual > declared {
        return Err(DecodeError::LengthMismatch { declared, actual });
    }
    Ok(WireMessage {
        version: bytes[0],
        msg_type,
        request_id: u16::from_be_bytes([bytes[2], bytes[3]]),
        object_id: ObjectId::from(bytes[4]),
        payload: bytes[HEADER_LEN..].to_vec(),
    })
}

/// Request id of a frame, if it is long enough to carry one.
pub fn peek_request_id(bytes: &[u8]) -> Option<u16> {
    (bytes.len() >= 4).then(|| u16::from_be_bytes([bytes[2], bytes[3]]))
}

/// Combines the three status groups into one indication per phase. Where
/// bits overlap, green wins over yellow and yellow over red; phases with no
/// bit set read as red, so the red group never changes the outcome.
pub fn assemble_signal_state(
    _red: PhaseBitmask,
    yellow: PhaseBitmask,
    green: PhaseBitmask,
    at: Duration,
) -> SignalState {
    let colors = PhaseId::all()
        .map(|p| {
            let c = if green.contains(p) {
                Color::Green
            } else if yellow.contains(p) {
                Color::Yellow
            } else {
                Color::Red
            };
            (p, c)
        })
        .collect();
    SignalState {
        colors,
        polled_at: at,
        poll_seq: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(a: u8, b: u8) -> PhasePair {
        PhasePair::from_ids(a, b).unwrap()
    }

    #[test]
    fn encode_examples() {
        assert_eq!(
            encode(&WireMessage::get(0x002A, ObjectId::StatusRed)).unwrap(),
            [0x01, 0x01, 0x00, 0x2A, 0x01, 0x00]
        );
        // bit0 | bit4
        let mask = pair_to_mask(pair(1, 5));
        assert_eq!(mask, PhaseBitmask(0x11));
        assert_eq!(
            encode(&WireMessage::set(1, ObjectId::VehCall, mask)).unwrap(),
            [0x01, 0x02, 0x00, 0x01, 0x10, 0x01, 0x11]
        );
        assert_eq!(
            encode(&WireMessage::get_response(7, ObjectId::StatusGreen, PhaseBitmask(0x22))).unwrap(),
            [0x01, 0x81, 0x00, 0x07, 0x03, 0x01, 0x22]
        );
    }

    #[test]
    fn encode_rejects_oversized_payload() {
        let mut m = WireMessage::get(1, ObjectId::StatusRed);
        m.payload = vec![0; 256];
        assert_eq!(encode(&m), Err(EncodeError::PayloadTooLong(256)));
        m.payload = vec![0; 255];
        assert_eq!(encode(&m).unwrap().len(), 261);
    }

    #[test]
    fn decode_errors_are_distinct() {
        assert!(matches!(
            decode(&[0x01, 0x01, 0x00]),
            Err(DecodeError::Truncated { .. })
        ));
        assert_eq!(
            decode(&[0x02, 0x01, 0x00, 0x2A, 0x01, 0x00]),
            Err(DecodeError::BadVersion(0x02))
        );
        assert_eq!(
            decode(&[0x01, 0x01, 0x00, 0x2A, 0x01, 0x00, 0xEE]),
            Err(DecodeError::LengthMismatch { declared: 0, actual: 1 })
        );
        assert!(matches!(
            decode(&[0x01, 0x81, 0x00, 0x07, 0x03, 0x02, 0x22]),
            Err(DecodeError::Truncated { needed: 8, got: 7 })
        ));
        assert_eq!(
            decode(&[0x01, 0x33, 0x00, 0x07, 0x03, 0x00]),
            Err(DecodeError::UnknownType(0x33))
        );
    }

    #[test]
    fn unknown_object_ids_decode() {
        let m = decode(&[0x01, 0x01, 0x00, 0x01, 0x7E, 0x00]).unwrap();
        assert_eq!(m.object_id, ObjectId::Unknown(0x7E));
        assert_eq!(encode(&m).unwrap()[4], 0x7E);
    }

    #[test]
    fn masks() {
        assert_eq!(pair_to_mask(pair(4, 8)), PhaseBitmask(0x88));
        assert!(mask_to_phases(PhaseBitmask(0)).is_empty());
        let phases: Vec<u8> = mask_to_phases(PhaseBitmask(0x22))
            .into_iter()
            .map(PhaseId::get)
            .collect();
        assert_eq!(phases, [2, 6]);
    }

    fn greens(s: &SignalState) -> Vec<u8> {
        s.greens().into_iter().map(PhaseId::get).collect()
    }

    #[test]
    fn assembly_priority() {
        let s = assemble_signal_state(PhaseBitmask(0xEE), PhaseBitmask(0), PhaseBitmask(0x11), Duration::ZERO);
        assert_eq!(greens(&s), [1, 5]);
        assert_eq!(s.phases_with(Color::Red).len(), 6);

        let s = assemble_signal_state(PhaseBitmask(0xFF), PhaseBitmask(0x11), PhaseBitmask(0), Duration::ZERO);
        let yellows: Vec<u8> = s.phases_with(Color::Yellow).into_iter().map(PhaseId::get).collect();
        assert_eq!(yellows, [1, 5]);
        assert!(greens(&s).is_empty());

        let s = assemble_signal_state(PhaseBitmask(0xFF), PhaseBitmask(0), PhaseBitmask(0), Duration::ZERO);
        assert_eq!(s.phases_with(Color::Red).len(), 8);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn message() -> impl Strategy<Value = WireMessage> {
            (
                prop_oneof![
                    Just(MsgType::Get),
                    Just(MsgType::Set),
                    Just(MsgType::GetResponse),
                    Just(MsgType::SetResponse),
                    Just(MsgType::Error)
                ],
                any::<u16>(),
                any::<u8>(),
                proptest::collection::vec(any::<u8>(), 0..=MAX_PAYLOAD),
            )
                .prop_map(|(msg_type, request_id, obj, payload)| WireMessage {
                    version: VERSION,
                    msg_type,
                    request_id,
                    object_id: ObjectId::from(obj),
                    payload,
                })
        }

        proptest! {
            #[test]
            fn round_trip(m in message()) {
                prop_assert_eq!(decode(&encode(&m).unwrap()).unwrap(), m);
            }

            #[test]
            fn decode_total(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
                let _ = decode(&bytes);
            }
        }
    }
}
