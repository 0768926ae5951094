//! Binary framing shared by the host <-> Echo board link and the Echo board <-> force board link.
//!
//! Wire layout, all multi-byte fields little-endian:
//!
//! ```text
//! 0xAA 0x55 | msg_type | len | payload[len] | crc_lo crc_hi
//! ```
//!
//! The CRC is CRC-16/CCITT-FALSE over `msg_type`, `len` and the payload.
//! The full description lives in `docs/protocol.md`.

use thiserror::Error;

use crate::types::{ADC_CHANNELS, ADC_MAX};

pub const PREAMBLE: [u8; 2] = [0xAA, 0x55];
pub const MAX_PAYLOAD: usize = 64;
/// Preamble, type and length.
const HEADER_LEN: usize = 4;
const CRC_LEN: usize = 2;

pub const TYPE_JOINT_REPORT: u8 = 0x01;
pub const TYPE_FORCE_REPORT: u8 = 0x02;
pub const TYPE_MOTOR_COMMAND: u8 = 0x03;
pub const TYPE_LED_COMMAND: u8 = 0x04;
pub const TYPE_HEARTBEAT: u8 = 0x05;

/// Largest motor duty magnitude, in thousandths of full PWM scale.
pub const DUTY_LIMIT: i16 = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    OversizedPayload(usize),
    #[error("crc mismatch: frame carries {received:#06x}, computed {computed:#06x}")]
    CrcError { received: u16, computed: u16 },
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("truncated frame: {buffered} bytes buffered when the stream went quiet")]
    TruncatedFrame { buffered: usize },
    #[error("message type {msg_type:#04x} expects a {expected}-byte payload, got {actual}")]
    PayloadLength {
        msg_type: u8,
        expected: usize,
        actual: usize,
    },
    #[error("field {0} out of range")]
    FieldOutOfRange(&'static str),
}

const CRC_TABLE: [u16; 256] = {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = (i as u16) << 8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x8000 != 0 {
                (crc << 1) ^ 0x1021
            } else {
                crc << 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
};

/// CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no final xor.
pub fn crc16(bytes: &[u8]) -> u16 {
    bytes.iter().fold(0xFFFF, |crc, &b| {
        (crc << 8) ^ CRC_TABLE[usize::from((crc >> 8) as u8 ^ b)]
    })
}

/// A typed message carried in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Message {
    /// Leader sample: six joint channels plus trigger, and the button bits.
    JointReport {
        seq: u16,
        adc: [u16; ADC_CHANNELS],
        buttons: u8,
    },
    /// Linearized force-sensor output, magnitude in millivolts.
    ForceReport { seq: u16, millivolts: u16 },
    /// Trigger motor duty in per mille, within +-1000.
    MotorCommand { duty: i16 },
    /// `mode` carries the sensitivity divisor (1, 2 or 4), `recording` is 0 or 1.
    LedCommand { mode: u8, recording: u8 },
    Heartbeat { uptime_ms: u32 },
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::JointReport { .. } => TYPE_JOINT_REPORT,
            Message::ForceReport { .. } => TYPE_FORCE_REPORT,
            Message::MotorCommand { .. } => TYPE_MOTOR_COMMAND,
            Message::LedCommand { .. } => TYPE_LED_COMMAND,
            Message::Heartbeat { .. } => TYPE_HEARTBEAT,
        }
    }

    fn payload_len(msg_type: u8) -> Option<usize> {
        match msg_type {
            TYPE_JOINT_REPORT => Some(2 + 2 * ADC_CHANNELS + 1),
            TYPE_FORCE_REPORT => Some(4),
            TYPE_MOTOR_COMMAND => Some(2),
            TYPE_LED_COMMAND => Some(2),
            TYPE_HEARTBEAT => Some(4),
            _ => None,
        }
    }

    fn validate(&self) -> Result<(), ProtocolError> {
        match *self {
            Message::JointReport { adc, .. } if adc.iter().any(|&c| c > ADC_MAX) => {
                Err(ProtocolError::FieldOutOfRange("adc"))
            }
            Message::MotorCommand { duty } if !(-DUTY_LIMIT..=DUTY_LIMIT).contains(&duty) => {
                Err(ProtocolError::FieldOutOfRange("duty"))
            }
            _ => Ok(()),
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17);
        match *self {
            Message::JointReport { seq, adc, buttons } => {
                out.extend_from_slice(&seq.to_le_bytes());
                for c in adc {
                    out.extend_from_slice(&c.to_le_bytes());
                }
                out.push(buttons);
            }
            Message::ForceReport { seq, millivolts } => {
                out.extend_from_slice(&seq.to_le_bytes());
                out.extend_from_slice(&millivolts.to_le_bytes());
            }
            Message::MotorCommand { duty } => out.extend_from_slice(&duty.to_le_bytes()),
            Message::LedCommand { mode, recording } => {
                out.push(mode);
                out.push(recording);
            }
            Message::Heartbeat { uptime_ms } => out.extend_from_slice(&uptime_ms.to_le_bytes()),
        }
        out
    }

    /// Decode a CRC-checked payload.
    pub fn decode(msg_type: u8, payload: &[u8]) -> Result<Message, ProtocolError> {
        let expected = Message::payload_len(msg_type).ok_or(ProtocolError::UnknownType(msg_type))?;
        if payload.len() != expected {
            return Err(ProtocolError::PayloadLength {
                msg_type,
                expected,
                actual: payload.len(),
            });
        }
        let u16_at = |i: usize| u16::from_le_bytes([payload[i], payload[i + 1]]);
        let msg = match msg_type {
            TYPE_JOINT_REPORT => Message::JointReport {
                seq: u16_at(0),
                adc: std::array::from_fn(|i| u16_at(2 + 2 * i)),
                buttons: payload[2 + 2 * ADC_CHANNELS],
            },
            TYPE_FORCE_REPORT => Message::ForceReport {
                seq: u16_at(0),
                millivolts: u16_at(2),
            },
            TYPE_MOTOR_COMMAND => Message::MotorCommand {
                duty: i16::from_le_bytes([payload[0], payload[1]]),
            },
            TYPE_LED_COMMAND => Message::LedCommand {
                mode: payload[0],
                recording: payload[1],
            },
            TYPE_HEARTBEAT => Message::Heartbeat {
                uptime_ms: u32::from_le_bytes([payload[0], payload[1], payload[2], payload[3]]),
            },
            other => return Err(ProtocolError::UnknownType(other)),
        };
        msg.validate()?;
        Ok(msg)
    }
}

/// A raw frame: type byte plus payload. The CRC is computed on encode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: u8, payload: Vec<u8>) -> Result<Frame, ProtocolError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(ProtocolError::OversizedPayload(payload.len()));
        }
        Ok(Frame { msg_type, payload })
    }

    pub fn crc(&self) -> u16 {
        let mut body = Vec::with_capacity(2 + self.payload.len());
        body.push(self.msg_type);
        body.push(self.payload.len() as u8);
        body.extend_from_slice(&self.payload);
        crc16(&body)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() + CRC_LEN);
        out.extend_from_slice(&PREAMBLE);
        out.push(self.msg_type);
        out.push(self.payload.len() as u8);
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&self.crc().to_le_bytes());
        out
    }
}

/// Encode a message into its complete wire frame.
pub fn encode_frame(message: &Message) -> Result<Vec<u8>, ProtocolError> {
    message.validate()?;
    Ok(Frame::new(message.msg_type(), message.payload())?.to_bytes())
}

/// Result of pushing bytes through a [`FrameParser`].
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Parsed {
    pub messages: Vec<Message>,
    pub errors: Vec<ProtocolError>,
}

impl Parsed {
    fn extend(&mut self, other: Parsed) {
        self.messages.extend(other.messages);
        self.errors.extend(other.errors);
    }
}

/// Incremental frame parser for one connection.
///
/// Output depends only on the byte stream, never on how it was split into chunks.
/// When a candidate frame fails its CRC the parser drops the leading 0xAA and
/// rescans, so a genuine frame hidden behind a fake preamble is still found.
#[derive(Debug, Default, Clone)]
pub struct FrameParser {
    buf: Vec<u8>,
}

impl FrameParser {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bytes held while waiting for the rest of a frame.
    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    pub fn feed(&mut self, bytes: &[u8]) -> Parsed {
        self.buf.extend_from_slice(bytes);
        self.drain(false)
    }

    /// Called by the transport after a read timeout: any partial frame is
    /// reported as truncated and the bytes behind its preamble are rescanned.
    pub fn flush(&mut self) -> Parsed {
        self.drain(true)
    }

    fn drain(&mut self, flushing: bool) -> Parsed {
        let mut out = Parsed::default();
        let mut start = 0;
        loop {
            let rest = &self.buf[start..];
            match rest.windows(2).position(|w| w == PREAMBLE) {
                Some(i) => start += i,
                None => {
                    // a trailing 0xAA may be the first half of the next preamble
                    let keep = usize::from(!flushing && rest.last() == Some(&PREAMBLE[0]));
                    start = self.buf.len() - keep;
                    break;
                }
            }
            let avail = self.buf.len() - start;
            let total = if avail >= HEADER_LEN {
                HEADER_LEN + usize::from(self.buf[start + 3]) + CRC_LEN
            } else {
                usize::MAX
            };
            if avail < total {
                if flushing {
                    out.errors.push(ProtocolError::TruncatedFrame { buffered: avail });
                    start += 1;
                    continue;
                }
                break;
            }
            let frame = &self.buf[start..start + total];
            let len = usize::from(frame[3]);
            let body = &frame[2..HEADER_LEN + len];
            let computed = crc16(body);
            let received = u16::from_le_bytes([frame[total - 2], frame[total - 1]]);
            if computed != received {
                out.errors.push(ProtocolError::CrcError { received, computed });
                start += 1;
                continue;
            }
            if len > MAX_PAYLOAD {
                out.errors.push(ProtocolError::OversizedPayload(len));
            } else {
                match Message::decode(frame[2], &frame[HEADER_LEN..HEADER_LEN + len]) {
                    Ok(m) => out.messages.push(m),
                    Err(e) => out.errors.push(e),
                }
            }
            start += total;
        }
        self.buf.drain(..start);
        out
    }
}

/// Feed `bytes` in one go and flush; convenient for whole captured streams.
pub fn parse_all(bytes: &[u8]) -> Parsed {
    let mut parser = FrameParser::new();
    let mut out = parser.feed(bytes);
    out.extend(parser.flush());
    out
}
