//! MQTT 3.1.1 packet codec, restricted to the subset a sensor ingestion
//! endpoint needs: CONNECT/CONNACK, PUBLISH/PUBACK at QoS 0 and 1,
//! SUBSCRIBE/SUBACK, PINGREQ/PINGRESP and DISCONNECT.
//!
//! QoS 2 and the packets that only exist for it (PUBREC, PUBREL, PUBCOMP) are
//! rejected as unsupported, as are UNSUBSCRIBE/UNSUBACK.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

pub const MAX_REMAINING_LENGTH: usize = 268_435_455;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MqttError {
    #[error("malformed remaining length")]
    MalformedLength,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("malformed packet: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum QoS {
    AtMostOnce = 0,
    AtLeastOnce = 1,
}

impl QoS {
    fn from_bits(bits: u8) -> Result<Self, MqttError> {
        match bits {
            0 => Ok(QoS::AtMostOnce),
            1 => Ok(QoS::AtLeastOnce),
            2 => Err(MqttError::Unsupported("QoS 2".into())),
            _ => Err(MqttError::Malformed("QoS 3".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Will {
    pub topic: String,
    pub message: Vec<u8>,
    pub qos: QoS,
    pub retain: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connect {
    pub client_id: String,
    pub clean_session: bool,
    pub keep_alive: u16,
    pub will: Option<Will>,
    pub username: Option<String>,
    pub password: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ConnectReturnCode {
    Accepted = 0,
    UnacceptableProtocol = 1,
    IdentifierRejected = 2,
    ServerUnavailable = 3,
    BadCredentials = 4,
    NotAuthorized = 5,
}

impl ConnectReturnCode {
    fn from_byte(b: u8) -> Result<Self, MqttError> {
        use ConnectReturnCode::*;
        Ok(match b {
            0 => Accepted,
            1 => UnacceptableProtocol,
            2 => IdentifierRejected,
            3 => ServerUnavailable,
            4 => BadCredentials,
            5 => NotAuthorized,
            _ => return Err(MqttError::Malformed("connack return code".into())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub dup: bool,
    pub qos: QoS,
    pub retain: bool,
    pub topic: String,
    /// Present exactly when `qos` is at least once.
    pub packet_id: Option<u16>,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscribe {
    pub packet_id: u16,
    /// (topic filter, requested QoS 0..=2)
    pub topics: Vec<(String, u8)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect(Connect),
    Connack { session_present: bool, code: ConnectReturnCode },
    Publish(Publish),
    Puback { packet_id: u16 },
    Subscribe(Subscribe),
    /// Return codes: granted QoS, or 0x80 for failure.
    Suback { packet_id: u16, return_codes: Vec<u8> },
    Pingreq,
    Pingresp,
    Disconnect,
}

impl Packet {
    pub fn type_code(&self) -> u8 {
        match self {
            Packet::Connect(_) => 1,
            Packet::Connack { .. } => 2,
            Packet::Publish(_) => 3,
            Packet::Puback { .. } => 4,
            Packet::Subscribe(_) => 8,
            Packet::Suback { .. } => 9,
            Packet::Pingreq => 12,
            Packet::Pingresp => 13,
            Packet::Disconnect => 14,
        }
    }
}

pub fn encode_remaining_length(mut len: usize, out: &mut Vec<u8>) {
    assert!(len <= MAX_REMAINING_LENGTH, "remaining length too large");
    loop {
        let mut byte = (len % 128) as u8;
        len /= 128;
        if len > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if len == 0 {
            break;
        }
    }
}

/// `Ok(None)` when more bytes are needed; otherwise (length, bytes used).
pub fn decode_remaining_length(bytes: &[u8]) -> Result<Option<(usize, usize)>, MqttError> {
    let mut value = 0usize;
    let mut multiplier = 1usize;
    for (i, &b) in bytes.iter().enumerate() {
        if i == 4 {
            return Err(MqttError::MalformedLength);
        }
        value += (b & 0x7F) as usize * multiplier;
        if b & 0x80 == 0 {
            return Ok(Some((value, i + 1)));
        }
        multiplier *= 128;
    }
    if bytes.len() >= 4 {
        Err(MqttError::MalformedLength)
    } else {
        Ok(None)
    }
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    assert!(b.len() <= u16::MAX as usize, "field longer than 65535 bytes");
    put_u16(out, b.len() as u16);
    out.extend_from_slice(b);
}

pub fn encode(packet: &Packet) -> Vec<u8> {
    let mut body = Vec::new();
    let mut flags = 0u8;
    match packet {
        Packet::Connect(c) => {
            put_bytes(&mut body, b"MQTT");
            body.push(4);
            let mut cf = 0u8;
            if c.username.is_some() {
                cf |= 0x80;
            }
            if c.password.is_some() {
                cf |= 0x40;
            }
            if let Some(w) = &c.will {
                cf |= 0x04 | ((w.qos as u8) << 3);
                if w.retain {
                    cf |= 0x20;
                }
            }
            if c.clean_session {
                cf |= 0x02;
            }
            body.push(cf);
            put_u16(&mut body, c.keep_alive);
            put_bytes(&mut body, c.client_id.as_bytes());
            if let Some(w) = &c.will {
                put_bytes(&mut body, w.topic.as_bytes());
                put_bytes(&mut body, &w.message);
            }
            if let Some(u) = &c.username {
                put_bytes(&mut body, u.as_bytes());
            }
            if let Some(p) = &c.password {
                put_bytes(&mut body, p);
            }
        }
        Packet::Connack { session_present, code } => {
            body.push(*session_present as u8);
            body.push(*code as u8);
        }
        Packet::Publish(p) => {
            flags = ((p.dup as u8) << 3) | ((p.qos as u8) << 1) | p.retain as u8;
            put_bytes(&mut body, p.topic.as_bytes());
            if p.qos == QoS::AtLeastOnce {
                put_u16(&mut body, p.packet_id.expect("QoS 1 publish needs a packet id"));
            }
            body.extend_from_slice(&p.payload);
        }
        Packet::Puback { packet_id } => put_u16(&mut body, *packet_id),
        Packet::Subscribe(s) => {
            flags = 0b0010;
            put_u16(&mut body, s.packet_id);
            for (topic, qos) in &s.topics {
                put_bytes(&mut body, topic.as_bytes());
                body.push(*qos);
            }
        }
        Packet::Suback { packet_id, return_codes } => {
            put_u16(&mut body, *packet_id);
            body.extend_from_slice(return_codes);
        }
        Packet::Pingreq | Packet::Pingresp | Packet::Disconnect => {}
    }
    let mut out = Vec::with_capacity(body.len() + 5);
    out.push((packet.type_code() << 4) | flags);
    encode_remaining_length(body.len(), &mut out);
    out.extend_from_slice(&body);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u8(&mut self) -> Result<u8, MqttError> {
        let b = *self.buf.get(self.pos).ok_or_else(|| short())?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, MqttError> {
        Ok(u16::from_be_bytes([self.u8()?, self.u8()?]))
    }

    fn bytes(&mut self) -> Result<&'a [u8], MqttError> {
        let n = self.u16()? as usize;
        let s = self.buf.get(self.pos..self.pos + n).ok_or_else(|| short())?;
        self.pos += n;
        Ok(s)
    }

    fn string(&mut self) -> Result<String, MqttError> {
        let b = self.bytes()?;
        core::str::from_utf8(b)
            .map(ToString::to_string)
            .map_err(|_| MqttError::Malformed("invalid UTF-8 string".into()))
    }

    fn rest(&mut self) -> &'a [u8] {
        let r = &self.buf[self.pos..];
        self.pos = self.buf.len();
        r
    }

    fn done(&self) -> Result<(), MqttError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(MqttError::Malformed("trailing bytes".into()))
        }
    }
}

fn short() -> MqttError {
    MqttError::Malformed("packet shorter than its fields".into())
}

/// Decodes one packet from the front of `bytes`. `Ok(None)` means the
/// packet is not complete yet; otherwise returns it with the bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<Option<(Packet, usize)>, MqttError> {
    let Some(&first) = bytes.first() else { return Ok(None) };
    let Some((remaining, len_bytes)) = decode_remaining_length(&bytes[1..])? else { return Ok(None) };
    let header = 1 + len_bytes;
    let total = header + remaining;
    if bytes.len() < total {
        return Ok(None);
    }
    let kind = first >> 4;
    let flags = first & 0x0F;
    let mut r = Reader { buf: &bytes[header..total], pos: 0 };
    let expect_flags = |want: u8| {
        if flags == want {
            Ok(())
        } else {
            Err(MqttError::Malformed(alloc::format!("bad flags {flags:#06b} for packet type {kind}")))
        }
    };
    let packet = match kind {
        1 => {
            expect_flags(0)?;
            let name = r.bytes()?;
            let level = r.u8()?;
            if name != b"MQTT" || level != 4 {
                return Err(MqttError::Unsupported("protocol other than MQTT 3.1.1".into()));
            }
            let cf = r.u8()?;
            if cf & 0x01 != 0 {
                return Err(MqttError::Malformed("reserved connect flag set".into()));
            }
            let keep_alive = r.u16()?;
            let client_id = r.string()?;
            let will = if cf & 0x04 != 0 {
                let topic = r.string()?;
                let message = r.bytes()?.to_vec();
                Some(Will { topic, message, qos: QoS::from_bits((cf >> 3) & 0x03)?, retain: cf & 0x20 != 0 })
            } else {
                if cf & 0x38 != 0 {
                    return Err(MqttError::Malformed("will flags without will".into()));
                }
                None
            };
            let username = if cf & 0x80 != 0 { Some(r.string()?) } else { None };
            let password = if cf & 0x40 != 0 { Some(r.bytes()?.to_vec()) } else { None };
            r.done()?;
            Packet::Connect(Connect { client_id, clean_session: cf & 0x02 != 0, keep_alive, will, username, password })
        }
        2 => {
            expect_flags(0)?;
            let ack = r.u8()?;
            if ack & 0xFE != 0 {
                return Err(MqttError::Malformed("connack flags".into()));
            }
            let code = ConnectReturnCode::from_byte(r.u8()?)?;
            r.done()?;
            Packet::Connack { session_present: ack & 1 == 1, code }
        }
        3 => {
            let qos = QoS::from_bits((flags >> 1) & 0x03)?;
            let dup = flags & 0x08 != 0;
            if dup && qos == QoS::AtMostOnce {
                return Err(MqttError::Malformed("DUP set on QoS 0 publish".into()));
            }
            let topic = r.string()?;
            if topic.is_empty() || topic.contains(['+', '#']) {
                return Err(MqttError::Malformed("invalid publish topic".into()));
            }
            let packet_id = match qos {
                QoS::AtMostOnce => None,
                QoS::AtLeastOnce => Some(nonzero(r.u16()?)?),
            };
            Packet::Publish(Publish { dup, qos, retain: flags & 0x01 != 0, topic, packet_id, payload: r.rest().to_vec() })
        }
        4 => {
            expect_flags(0)?;
            let packet_id = r.u16()?;
            r.done()?;
            Packet::Puback { packet_id }
        }
        8 => {
            expect_flags(0b0010)?;
            let packet_id = nonzero(r.u16()?)?;
            let mut topics = Vec::new();
            while r.pos < r.buf.len() {
                let t = r.string()?;
                let q = r.u8()?;
                if q > 2 {
                    return Err(MqttError::Malformed("requested QoS > 2".into()));
                }
                topics.push((t, q));
            }
            if topics.is_empty() {
                return Err(MqttError::Malformed("subscribe without topics".into()));
            }
            Packet::Subscribe(Subscribe { packet_id, topics })
        }
        9 => {
            expect_flags(0)?;
            let packet_id = r.u16()?;
            Packet::Suback { packet_id, return_codes: r.rest().to_vec() }
        }
        12 | 13 | 14 => {
            expect_flags(0)?;
            r.done()?;
            match kind {
                12 => Packet::Pingreq,
                13 => Packet::Pingresp,
                _ => Packet::Disconnect,
            }
        }
        5..=7 | 10 | 11 => return Err(MqttError::Unsupported(alloc::format!("packet type {kind}"))),
        _ => return Err(MqttError::Malformed(alloc::format!("reserved packet type {kind}"))),
    };
    Ok(Some((packet, total)))
}

fn nonzero(id: u16) -> Result<u16, MqttError> {
    if id == 0 {
        Err(MqttError::Malformed("packet id 0".into()))
    } else {
        Ok(id)
    }
}
