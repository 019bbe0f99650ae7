//! MQTT v5 packet codec for the QoS-0 subset: CONNECT, CONNACK, PUBLISH,
//! SUBSCRIBE, SUBACK, PINGREQ, PINGRESP and DISCONNECT.

use thiserror::Error;

use super::topic::TopicName;

/// Largest remaining length a 4-byte variable byte integer can hold.
pub const MAX_REMAINING_LENGTH: usize = 268_435_455;
pub const MAX_CORRELATION_DATA: usize = 64;
pub const PROTOCOL_LEVEL: u8 = 5;

/// Reason codes used by this broker.
pub mod reason {
    pub const SUCCESS: u8 = 0x00;
    pub const GRANTED_QOS0: u8 = 0x00;
    pub const UNSPECIFIED_ERROR: u8 = 0x80;
    pub const MALFORMED_PACKET: u8 = 0x81;
    pub const PROTOCOL_ERROR: u8 = 0x82;
    pub const UNSUPPORTED_PROTOCOL_VERSION: u8 = 0x84;
    pub const CLIENT_ID_NOT_VALID: u8 = 0x85;
    pub const NOT_AUTHORIZED: u8 = 0x87;
    pub const SESSION_TAKEN_OVER: u8 = 0x8E;
    pub const TOPIC_FILTER_INVALID: u8 = 0x8F;
    pub const PACKET_TOO_LARGE: u8 = 0x95;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("remaining length {0} exceeds the 4-byte varint maximum")]
    Oversize(usize),
    #[error("invalid topic {0:?}")]
    InvalidTopic(String),
    #[error("string or binary field exceeds 65535 bytes")]
    FieldTooLong,
    #[error("correlation data is {0} bytes, limit is {MAX_CORRELATION_DATA}")]
    CorrelationTooLong(usize),
}

/// Decode failures. Running out of input is not an error: [`decode_packet`]
/// returns `Ok(None)` for that.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
    #[error("unsupported packet type {0}")]
    UnsupportedPacketType(u8),
    #[error("unsupported protocol level {0}")]
    UnsupportedProtocol(u8),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PropertySet {
    pub response_topic: Option<String>,
    pub correlation_data: Option<Vec<u8>>,
}

impl PropertySet {
    pub fn is_empty(&self) -> bool {
        self.response_topic.is_none() && self.correlation_data.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connect {
    pub client_id: String,
    pub keep_alive: u16,
    pub clean_start: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnAck {
    pub session_present: bool,
    pub reason: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub topic: String,
    pub properties: PropertySet,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscribe {
    pub packet_id: u16,
    /// (filter, requested QoS). Filters are validated by the broker so a
    /// bad one can be refused individually.
    pub filters: Vec<(String, u8)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubAck {
    pub packet_id: u16,
    pub reasons: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Disconnect {
    pub reason: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect(Connect),
    ConnAck(ConnAck),
    Publish(Publish),
    Subscribe(Subscribe),
    SubAck(SubAck),
    PingReq,
    PingResp,
    Disconnect(Disconnect),
}

mod ty {
    pub const CONNECT: u8 = 1;
    pub const CONNACK: u8 = 2;
    pub const PUBLISH: u8 = 3;
    pub const SUBSCRIBE: u8 = 8;
    pub const SUBACK: u8 = 9;
    pub const PINGREQ: u8 = 12;
    pub const PINGRESP: u8 = 13;
    pub const DISCONNECT: u8 = 14;
}

mod prop {
    pub const RESPONSE_TOPIC: u8 = 0x08;
    pub const CORRELATION_DATA: u8 = 0x09;
}

// ---------------------------------------------------------------------------
// Encoding

fn put_varint(out: &mut Vec<u8>, mut value: usize) {
    loop {
        let mut byte = (value % 128) as u8;
        value /= 128;
        if value > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if value == 0 {
            break;
        }
    }
}

fn put_binary(out: &mut Vec<u8>, data: &[u8]) -> Result<(), EncodeError> {
    let len = u16::try_from(data.len()).map_err(|_| EncodeError::FieldTooLong)?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(data);
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), EncodeError> {
    put_binary(out, s.as_bytes())
}

fn put_properties(out: &mut Vec<u8>, props: &PropertySet) -> Result<(), EncodeError> {
    let mut body = Vec::new();
    if let Some(topic) = &props.response_topic {
        TopicName::parse(topic.as_str()).map_err(|_| EncodeError::InvalidTopic(topic.clone()))?;
        body.push(prop::RESPONSE_TOPIC);
        put_str(&mut body, topic)?;
    }
    if let Some(data) = &props.correlation_data {
        if data.len() > MAX_CORRELATION_DATA {
            return Err(EncodeError::CorrelationTooLong(data.len()));
        }
        body.push(prop::CORRELATION_DATA);
        put_binary(&mut body, data)?;
    }
    put_varint(out, body.len());
    out.extend_from_slice(&body);
    Ok(())
}

/// Serializes a packet to MQTT v5 wire bytes.
pub fn encode_packet(packet: &Packet) -> Result<Vec<u8>, EncodeError> {
    let (first, body) = match packet {
        Packet::Connect(c) => {
            let mut b = Vec::with_capacity(16 + c.client_id.len());
            put_str(&mut b, "MQTT")?;
            b.push(PROTOCOL_LEVEL);
            b.push(if c.clean_start { 0x02 } else { 0x00 });
            b.extend_from_slice(&c.keep_alive.to_be_bytes());
            b.push(0); // no properties
            put_str(&mut b, &c.client_id)?;
            (ty::CONNECT << 4, b)
        }
        Packet::ConnAck(a) => (ty::CONNACK << 4, vec![a.session_present as u8, a.reason, 0]),
        Packet::Publish(p) => {
            TopicName::parse(p.topic.as_str()).map_err(|_| EncodeError::InvalidTopic(p.topic.clone()))?;
            let mut b = Vec::with_capacity(p.topic.len() + p.payload.len() + 8);
            put_str(&mut b, &p.topic)?;
            put_properties(&mut b, &p.properties)?;
            b.extend_from_slice(&p.payload);
            (ty::PUBLISH << 4, b)
        }
        Packet::Subscribe(s) => {
            let mut b = Vec::new();
            b.extend_from_slice(&s.packet_id.to_be_bytes());
            b.push(0);
            for (filter, qos) in &s.filters {
                put_str(&mut b, filter)?;
                b.push(qos & 0x03);
            }
            ((ty::SUBSCRIBE << 4) | 0x02, b)
        }
        Packet::SubAck(a) => {
            let mut b = Vec::with_capacity(3 + a.reasons.len());
            b.extend_from_slice(&a.packet_id.to_be_bytes());
            b.push(0);
            b.extend_from_slice(&a.reasons);
            (ty::SUBACK << 4, b)
        }
        Packet::PingReq => (ty::PINGREQ << 4, Vec::new()),
        Packet::PingResp => (ty::PINGRESP << 4, Vec::new()),
        Packet::Disconnect(d) => {
            let b = if d.reason == reason::SUCCESS { Vec::new() } else { vec![d.reason] };
            (ty::DISCONNECT << 4, b)
        }
    };
    if body.len() > MAX_REMAINING_LENGTH {
        return Err(EncodeError::Oversize(body.len()));
    }
    let mut out = Vec::with_capacity(body.len() + 5);
    out.push(first);
    put_varint(&mut out, body.len());
    out.extend_from_slice(&body);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Decoding

/// Parses the fixed header. Returns `(header_len, remaining_length)` or
/// `None` if more bytes are needed.
fn fixed_header(bytes: &[u8]) -> Result<Option<(usize, usize)>, DecodeError> {
    let Some(&first) = bytes.first() else {
        return Ok(None);
    };
    let kind = first >> 4;
    match kind {
        ty::CONNECT
        | ty::CONNACK
        | ty::PUBLISH
        | ty::SUBSCRIBE
        | ty::SUBACK
        | ty::PINGREQ
        | ty::PINGRESP
        | ty::DISCONNECT => {}
        0 => return Err(DecodeError::Malformed("reserved packet type 0")),
        other => return Err(DecodeError::UnsupportedPacketType(other)),
    }
    let mut value = 0usize;
    for i in 0..4 {
        let Some(&b) = bytes.get(1 + i) else {
            return Ok(None);
        };
        value |= ((b & 0x7F) as usize) << (7 * i);
        if b & 0x80 == 0 {
            return Ok(Some((2 + i, value)));
        }
    }
    Err(DecodeError::Malformed("remaining length exceeds four bytes"))
}

/// Total size of the first frame in `bytes`, if its header is complete.
/// Lets a streaming reader reject oversize frames before buffering them.
pub fn frame_length(bytes: &[u8]) -> Result<Option<usize>, DecodeError> {
    Ok(fixed_header(bytes)?.map(|(h, r)| h + r))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

const SHORT: DecodeError = DecodeError::Malformed("field runs past end of packet");

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(SHORT);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn varint(&mut self) -> Result<usize, DecodeError> {
        let mut value = 0usize;
        for i in 0..4 {
            let b = self.u8()?;
            value |= ((b & 0x7F) as usize) << (7 * i);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(DecodeError::Malformed("variable byte integer exceeds four bytes"))
    }

    fn binary(&mut self) -> Result<&'a [u8], DecodeError> {
        let len = self.u16()? as usize;
        self.take(len)
    }

    fn string(&mut self) -> Result<&'a str, DecodeError> {
        let raw = self.binary()?;
        let s = std::str::from_utf8(raw).map_err(|_| DecodeError::Malformed("invalid UTF-8 string"))?;
        if s.contains('\0') {
            return Err(DecodeError::Malformed("NUL in UTF-8 string"));
        }
        Ok(s)
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn finish(&self) -> Result<(), DecodeError> {
        if self.remaining() != 0 {
            return Err(DecodeError::Malformed("trailing bytes in packet"));
        }
        Ok(())
    }

    /// Reads a property block, keeping the two properties we use and
    /// skipping the rest.
    fn properties(&mut self) -> Result<PropertySet, DecodeError> {
        let len = self.varint()?;
        let mut r = Reader::new(self.take(len)?);
        let mut props = PropertySet::default();
        while r.remaining() > 0 {
            let id = r.varint()?;
            match id as u8 {
                _ if id > 0x7F => return Err(DecodeError::Malformed("property identifier out of range")),
                prop::RESPONSE_TOPIC => {
                    let topic = r.string()?;
                    TopicName::parse(topic).map_err(|_| DecodeError::Malformed("invalid response topic"))?;
                    if props.response_topic.replace(topic.to_owned()).is_some() {
                        return Err(DecodeError::Malformed("duplicate response topic"));
                    }
                }
                prop::CORRELATION_DATA => {
                    let data = r.binary()?;
                    if data.len() > MAX_CORRELATION_DATA {
                        return Err(DecodeError::Malformed("correlation data too long"));
                    }
                    if props.correlation_data.replace(data.to_vec()).is_some() {
                        return Err(DecodeError::Malformed("duplicate correlation data"));
                    }
                }
                0x01 | 0x17 | 0x19 | 0x24 | 0x25 | 0x28 | 0x29 | 0x2A => {
                    r.take(1)?;
                }
                0x13 | 0x21 | 0x22 | 0x23 => {
                    r.take(2)?;
                }
                0x02 | 0x11 | 0x18 | 0x27 => {
                    r.take(4)?;
                }
                0x0B => {
                    r.varint()?;
                }
                0x03 | 0x12 | 0x15 | 0x1A | 0x1C | 0x1F => {
                    r.string()?;
                }
                0x16 => {
                    r.binary()?;
                }
                0x26 => {
                    r.string()?;
                    r.string()?;
                }
                // Layout unknown: the rest of the block cannot be parsed,
                // but its extent is known, so drop it.
                _ => break,
            }
        }
        Ok(props)
    }
}

fn decode_body(first: u8, body: &[u8]) -> Result<Packet, DecodeError> {
    let kind = first >> 4;
    let flags = first & 0x0F;
    let mut r = Reader::new(body);

    let expect_flags = |want: u8| {
        if flags == want {
            Ok(())
        } else {
            Err(DecodeError::Malformed("invalid fixed header flags"))
        }
    };

    let packet = match kind {
        ty::CONNECT => {
            expect_flags(0)?;
            if r.string()? != "MQTT" {
                return Err(DecodeError::Malformed("bad protocol name"));
            }
            let level = r.u8()?;
            if level != PROTOCOL_LEVEL {
                return Err(DecodeError::UnsupportedProtocol(level));
            }
            let cflags = r.u8()?;
            if cflags & 0x01 != 0 {
                return Err(DecodeError::Malformed("reserved connect flag set"));
            }
            if cflags & 0x04 != 0 {
                return Err(DecodeError::Malformed("will messages are not supported"));
            }
            if cflags & 0x38 != 0 {
                return Err(DecodeError::Malformed("will QoS/retain without will flag"));
            }
            let keep_alive = r.u16()?;
            r.properties()?;
            let client_id = r.string()?.to_owned();
            if cflags & 0x80 != 0 {
                r.string()?;
            }
            if cflags & 0x40 != 0 {
                r.binary()?;
            }
            r.finish()?;
            Packet::Connect(Connect { client_id, keep_alive, clean_start: cflags & 0x02 != 0 })
        }
        ty::CONNACK => {
            expect_flags(0)?;
            let ack = r.u8()?;
            if ack & 0xFE != 0 {
                return Err(DecodeError::Malformed("reserved connack flags set"));
            }
            let reason = r.u8()?;
            if r.remaining() > 0 {
                r.properties()?;
            }
            r.finish()?;
            Packet::ConnAck(ConnAck { session_present: ack & 1 != 0, reason })
        }
        ty::PUBLISH => {
            let qos = (flags >> 1) & 0x03;
            if qos != 0 {
                return Err(DecodeError::Malformed("QoS > 0 is not supported"));
            }
            if flags & 0x08 != 0 {
                return Err(DecodeError::Malformed("DUP set on QoS 0 publish"));
            }
            // Retain (bit 0) is accepted and ignored.
            let topic = r.string()?;
            TopicName::parse(topic).map_err(|_| DecodeError::Malformed("invalid publish topic"))?;
            let topic = topic.to_owned();
            let properties = r.properties()?;
            let payload = r.rest().to_vec();
            Packet::Publish(Publish { topic, properties, payload })
        }
        ty::SUBSCRIBE => {
            expect_flags(0x02)?;
            let packet_id = r.u16()?;
            r.properties()?;
            let mut filters = Vec::new();
            while r.remaining() > 0 {
                let filter = r.string()?.to_owned();
                let opts = r.u8()?;
                if opts & 0xC0 != 0 || opts & 0x03 == 3 {
                    return Err(DecodeError::Malformed("invalid subscription options"));
                }
                filters.push((filter, opts & 0x03));
            }
            if filters.is_empty() {
                return Err(DecodeError::Malformed("subscribe without filters"));
            }
            Packet::Subscribe(Subscribe { packet_id, filters })
        }
        ty::SUBACK => {
            expect_flags(0)?;
            let packet_id = r.u16()?;
            r.properties()?;
            let reasons = r.rest().to_vec();
            Packet::SubAck(SubAck { packet_id, reasons })
        }
        ty::PINGREQ => {
            expect_flags(0)?;
            r.finish()?;
            Packet::PingReq
        }
        ty::PINGRESP => {
            expect_flags(0)?;
            r.finish()?;
            Packet::PingResp
        }
        ty::DISCONNECT => {
            expect_flags(0)?;
            let reason = if r.remaining() > 0 { r.u8()? } else { reason::SUCCESS };
            if r.remaining() > 0 {
                r.properties()?;
            }
            r.finish()?;
            Packet::Disconnect(Disconnect { reason })
        }
        _ => unreachable!("filtered by fixed_header"),
    };
    Ok(packet)
}

/// Parses one packet from the front of `bytes`.
///
/// `Ok(None)` means the input is a valid prefix so far and more bytes are
/// needed; `Ok(Some((packet, consumed)))` reports how much input was used.
pub fn decode_packet(bytes: &[u8]) -> Result<Option<(Packet, usize)>, DecodeError> {
    let Some((header_len, remaining)) = fixed_header(bytes)? else {
        return Ok(None);
    };
    let total = header_len + remaining;
    if bytes.len() < total {
        return Ok(None);
    }
    let packet = decode_body(bytes[0], &bytes[header_len..total])?;
    Ok(Some((packet, total)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn publish(topic: &str, payload: &[u8]) -> Packet {
        Packet::Publish(Publish { topic: topic.into(), properties: PropertySet::default(), payload: payload.to_vec() })
    }

    #[test]
    fn pingreq_bytes() {
        assert_eq!(encode_packet(&Packet::PingReq).unwrap(), vec![0xC0, 0x00]);
        assert_eq!(decode_packet(&[0xC0, 0x00]).unwrap(), Some((Packet::PingReq, 2)));
        assert_eq!(decode_packet(&[0xC0]).unwrap(), None);
        assert_eq!(decode_packet(&[]).unwrap(), None);
    }

    #[test]
    fn small_publish_bytes() {
        let bytes = encode_packet(&publish("a/b", b"hi")).unwrap();
        assert_eq!(bytes, vec![0x30, 0x08, 0x00, 0x03, b'a', b'/', b'b', 0x00, b'h', b'i']);
    }

    #[test]
    fn two_byte_remaining_length() {
        // topic "t": 2 + 1 + 1 (props) = 4 bytes of header; 317 bytes of payload
        let bytes = encode_packet(&publish("t", &[0u8; 317])).unwrap();
        assert_eq!(&bytes[1..3], &[0xC1, 0x02]);
        assert_eq!(bytes.len(), 1 + 2 + 321);
    }

    #[test]
    fn unsupported_types() {
        assert_eq!(decode_packet(&[0x60]), Err(DecodeError::UnsupportedPacketType(6)));
        assert_eq!(decode_packet(&[0x40, 0x02, 0, 1]), Err(DecodeError::UnsupportedPacketType(4)));
        assert_eq!(decode_packet(&[0xF0, 0x00]), Err(DecodeError::UnsupportedPacketType(15)));
        assert!(matches!(decode_packet(&[0x00, 0x00]), Err(DecodeError::Malformed(_))));
    }

    #[test]
    fn qos1_publish_is_protocol_error() {
        assert!(matches!(decode_packet(&[0x32, 0x05, 0x00, 0x01, b't', 0x00, 0x01]), Err(DecodeError::Malformed(_))));
    }

    #[test]
    fn five_byte_varint_rejected() {
        assert!(matches!(decode_packet(&[0x30, 0xFF, 0xFF, 0xFF, 0xFF, 0x01]), Err(DecodeError::Malformed(_))));
        assert_eq!(frame_length(&[0x30, 0xFF, 0xFF, 0xFF, 0x7F]).unwrap(), Some(5 + MAX_REMAINING_LENGTH));
    }

    #[test]
    fn unknown_properties_skipped() {
        // PUBLISH "t" with properties: payload-format(0x01)=1, user property
        // ("k","v"), response topic "r", content type "x".
        let mut props = vec![0x01, 0x01, 0x26, 0, 1, b'k', 0, 1, b'v', 0x08, 0, 1, b'r', 0x03, 0, 1, b'x'];
        let mut body = vec![0, 1, b't', props.len() as u8];
        body.append(&mut props);
        body.extend_from_slice(b"data");
        let mut bytes = vec![0x30, body.len() as u8];
        bytes.extend_from_slice(&body);
        let (p, n) = decode_packet(&bytes).unwrap().unwrap();
        assert_eq!(n, bytes.len());
        let Packet::Publish(p) = p else { panic!() };
        assert_eq!(p.properties.response_topic.as_deref(), Some("r"));
        assert_eq!(p.payload, b"data");
    }

    #[test]
    fn invalid_topic_on_encode() {
        assert!(matches!(encode_packet(&publish("a/+", b"")), Err(EncodeError::InvalidTopic(_))));
        let p = Packet::Publish(Publish {
            topic: "t".into(),
            properties: PropertySet { response_topic: None, correlation_data: Some(vec![0; 65]) },
            payload: vec![],
        });
        assert_eq!(encode_packet(&p), Err(EncodeError::CorrelationTooLong(65)));
    }

    #[test]
    fn connect_with_credentials_decodes() {
        // CONNECT v5, flags: username + password + clean start, keep alive 60
        let mut body = vec![0, 4, b'M', b'Q', b'T', b'T', 5, 0xC2, 0, 60, 0];
        body.extend_from_slice(&[0, 3, b'p', b'0', b'1']);
        body.extend_from_slice(&[0, 1, b'u', 0, 1, b'p']);
        let mut bytes = vec![0x10, body.len() as u8];
        bytes.extend_from_slice(&body);
        let (p, _) = decode_packet(&bytes).unwrap().unwrap();
        assert_eq!(p, Packet::Connect(Connect { client_id: "p01".into(), keep_alive: 60, clean_start: true }));

        body[6] = 4;
        let mut v4 = vec![0x10, body.len() as u8];
        v4.extend_from_slice(&body);
        assert_eq!(decode_packet(&v4), Err(DecodeError::UnsupportedProtocol(4)));
    }

    #[test]
    fn disconnect_forms() {
        let d = Packet::Disconnect(Disconnect { reason: 0 });
        assert_eq!(encode_packet(&d).unwrap(), vec![0xE0, 0x00]);
        let d = Packet::Disconnect(Disconnect { reason: reason::SESSION_TAKEN_OVER });
        let bytes = encode_packet(&d).unwrap();
        assert_eq!(decode_packet(&bytes).unwrap(), Some((d, 3)));
    }
}
