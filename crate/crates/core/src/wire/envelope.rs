//! Canonical byte layout of an overlay message.
//!
//! ```text
//! version:1 | msg_type:1 | sender:20 | dest:20 | seq:8 | hop_count:1 |
//! auth_kind:1 | payload_len:2 | payload | tag_len:2 | tag
//! ```
//!
//! All integers are big-endian. The authenticated region is every field
//! except `hop_count` and the tag.

use std::fmt;

use thiserror::Error;

use crate::keyspace::{Key, KEY_LEN};

pub const WIRE_VERSION: u8 = 1;

/// Bytes before the payload.
pub const HEADER_LEN: usize = 1 + 1 + KEY_LEN + KEY_LEN + 8 + 1 + 1 + 2;

/// Datagram cap that keeps one envelope under a typical MTU.
pub const MAX_DATAGRAM: usize = 1400;

const HOP_OFFSET: usize = 1 + 1 + KEY_LEN + KEY_LEN + 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated input: need at least {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("length mismatch: declared {declared} bytes, found {actual}")]
    Length { declared: usize, actual: usize },
    #[error("unsupported wire version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    UnknownMsgType(u8),
    #[error("unknown auth kind {0}")]
    UnknownAuthKind(u8),
    #[error("field too large: {0}")]
    FieldTooLarge(&'static str),
    #[error("malformed payload: {0}")]
    Payload(&'static str),
}

macro_rules! msg_types {
    ($($name:ident = $code:expr),* $(,)?) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
        #[repr(u8)]
        pub enum MsgType {
            $($name = $code),*
        }

        impl MsgType {
            pub const ALL: &'static [MsgType] = &[$(MsgType::$name),*];

            pub fn code(self) -> u8 {
                self as u8
            }

            pub fn name(self) -> &'static str {
                match self {
                    $(MsgType::$name => stringify!($name)),*
                }
            }
        }

        impl TryFrom<u8> for MsgType {
            type Error = WireError;

            fn try_from(code: u8) -> Result<Self, WireError> {
                match code {
                    $($code => Ok(MsgType::$name),)*
                    other => Err(WireError::UnknownMsgType(other)),
                }
            }
        }
    };
}

msg_types! {
    FindSucc = 1,
    FindSuccReply = 2,
    GroupQuery = 3,
    GroupReply = 4,
    Heartbeat = 5,
    HeartbeatAck = 6,
    Handshake1 = 7,
    Handshake2 = 8,
    Revocation = 9,
    Ping = 10,
    PingEcho = 11,
    ThroughputReq = 12,
    DataPacket = 13,
    Potato = 14,
    PotatoAck = 15,
    PotatoAck2 = 16,
    AppPayload = 17,
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum AuthKind {
    Signature = 0,
    Mac = 1,
    /// Baseline overlay without message authentication.
    Unauthenticated = 2,
}

impl TryFrom<u8> for AuthKind {
    type Error = WireError;

    fn try_from(code: u8) -> Result<Self, WireError> {
        match code {
            0 => Ok(AuthKind::Signature),
            1 => Ok(AuthKind::Mac),
            2 => Ok(AuthKind::Unauthenticated),
            other => Err(WireError::UnknownAuthKind(other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub version: u8,
    pub msg_type: MsgType,
    /// Originating peer.
    pub sender: Key,
    pub dest: Key,
    pub seq: u64,
    pub hop_count: u8,
    pub auth_kind: AuthKind,
    pub payload: Vec<u8>,
    pub auth_tag: Vec<u8>,
}

impl Envelope {
    pub fn new(msg_type: MsgType, sender: Key, dest: Key, payload: Vec<u8>) -> Self {
        Envelope {
            version: WIRE_VERSION,
            msg_type,
            sender,
            dest,
            seq: 0,
            hop_count: 0,
            auth_kind: AuthKind::Unauthenticated,
            payload,
            auth_tag: Vec::new(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + 2 + self.auth_tag.len()
    }

    /// The bytes covered by the signature or MAC.
    pub fn authenticated_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN - 1 + self.payload.len());
        out.push(self.version);
        out.push(self.msg_type.code());
        out.extend_from_slice(&self.sender.0);
        out.extend_from_slice(&self.dest.0);
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.push(self.auth_kind as u8);
        out.extend_from_slice(&(self.payload.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        if self.payload.len() > u16::MAX as usize {
            return Err(WireError::FieldTooLarge("payload"));
        }
        if self.auth_tag.len() > u16::MAX as usize {
            return Err(WireError::FieldTooLarge("auth_tag"));
        }
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(self.version);
        out.push(self.msg_type.code());
        out.extend_from_slice(&self.sender.0);
        out.extend_from_slice(&self.dest.0);
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.push(self.hop_count);
        out.push(self.auth_kind as u8);
        out.extend_from_slice(&(self.payload.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&(self.auth_tag.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.auth_tag);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Envelope, WireError> {
        if bytes.len() < HEADER_LEN {
            return Err(WireError::Truncated { needed: HEADER_LEN, got: bytes.len() });
        }
        let version = bytes[0];
        if version != WIRE_VERSION {
            return Err(WireError::BadVersion(version));
        }
        let msg_type = MsgType::try_from(bytes[1])?;
        let mut at = 2;
        let sender = Key::from_slice(&bytes[at..at + KEY_LEN]).expect("fixed width");
        at += KEY_LEN;
        let dest = Key::from_slice(&bytes[at..at + KEY_LEN]).expect("fixed width");
        at += KEY_LEN;
        let seq = u64::from_be_bytes(bytes[at..at + 8].try_into().expect("fixed width"));
        at += 8;
        let hop_count = bytes[at];
        at += 1;
        let auth_kind = AuthKind::try_from(bytes[at])?;
        at += 1;
        let payload_len = u16::from_be_bytes([bytes[at], bytes[at + 1]]) as usize;
        at += 2;
        let rest = bytes.len() - at;
        // The payload must leave room for the 2-byte tag length.
        if payload_len + 2 > rest {
            return Err(WireError::Length { declared: payload_len, actual: rest.saturating_sub(2) });
        }
        let payload = bytes[at..at + payload_len].to_vec();
        at += payload_len;
        let tag_len = u16::from_be_bytes([bytes[at], bytes[at + 1]]) as usize;
        at += 2;
        let tag_rest = bytes.len() - at;
        if tag_len != tag_rest {
            return Err(WireError::Length { declared: tag_len, actual: tag_rest });
        }
        let auth_tag = bytes[at..].to_vec();
        Ok(Envelope {
            version,
            msg_type,
            sender,
            dest,
            seq,
            hop_count,
            auth_kind,
            payload,
            auth_tag,
        })
    }
}

/// Reads the message type without decoding the rest.
pub fn peek_msg_type(bytes: &[u8]) -> Option<MsgType> {
    bytes.get(1).and_then(|b| MsgType::try_from(*b).ok())
}

/// Rewrites the hop count of an encoded envelope in place.
pub fn set_hop_count(bytes: &mut [u8], hops: u8) -> Result<(), WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated { needed: HEADER_LEN, got: bytes.len() });
    }
    bytes[HOP_OFFSET] = hops;
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Envelope {
        let mut e = Envelope::new(MsgType::Ping, Key::from_u64(7), Key::from_u64(9), b"hello".to_vec());
        e.seq = 42;
        e.hop_count = 3;
        e.auth_kind = AuthKind::Mac;
        e.auth_tag = vec![0xab; 32];
        e
    }

    #[test]
    fn layout_is_big_endian() {
        let bytes = sample().encode().unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 5 + 2 + 32);
        assert_eq!(bytes[0], WIRE_VERSION);
        assert_eq!(bytes[1], MsgType::Ping.code());
        assert_eq!(&bytes[42..50], &42u64.to_be_bytes());
        assert_eq!(bytes[50], 3);
        assert_eq!(bytes[51], 1);
        assert_eq!(&bytes[52..54], &[0, 5]);
        assert_eq!(&bytes[59..61], &[0, 32]);
    }

    #[test]
    fn short_input_is_truncated() {
        let bytes = sample().encode().unwrap();
        assert_eq!(
            Envelope::decode(&bytes[..HEADER_LEN - 1]),
            Err(WireError::Truncated { needed: HEADER_LEN, got: HEADER_LEN - 1 })
        );
    }

    #[test]
    fn payload_length_disagreement_is_rejected() {
        let mut bytes = sample().encode().unwrap();
        bytes[53] = 200;
        assert!(matches!(Envelope::decode(&bytes), Err(WireError::Length { .. })));
        let mut bytes = sample().encode().unwrap();
        bytes.push(0);
        assert!(matches!(Envelope::decode(&bytes), Err(WireError::Length { .. })));
    }

    #[test]
    fn bad_version_and_type_are_rejected() {
        let mut bytes = sample().encode().unwrap();
        bytes[0] = 9;
        assert_eq!(Envelope::decode(&bytes), Err(WireError::BadVersion(9)));
        let mut bytes = sample().encode().unwrap();
        bytes[1] = 0;
        assert_eq!(Envelope::decode(&bytes), Err(WireError::UnknownMsgType(0)));
        let mut bytes = sample().encode().unwrap();
        bytes[51] = 7;
        assert_eq!(Envelope::decode(&bytes), Err(WireError::UnknownAuthKind(7)));
    }

    #[test]
    fn hop_count_is_outside_authenticated_region() {
        let e = sample();
        let mut bytes = e.encode().unwrap();
        set_hop_count(&mut bytes, 9).unwrap();
        let d = Envelope::decode(&bytes).unwrap();
        assert_eq!(d.hop_count, 9);
        assert_eq!(d.authenticated_bytes(), e.authenticated_bytes());
    }

    pub(crate) fn arb_envelope() -> impl Strategy<Value = Envelope> {
        (
            prop::sample::select(MsgType::ALL.to_vec()),
            prop::array::uniform20(any::<u8>()),
            prop::array::uniform20(any::<u8>()),
            any::<u64>(),
            any::<u8>(),
            prop::sample::select(vec![AuthKind::Signature, AuthKind::Mac, AuthKind::Unauthenticated]),
            prop::collection::vec(any::<u8>(), 0..300),
            prop::collection::vec(any::<u8>(), 0..80),
        )
            .prop_map(|(t, s, d, seq, hops, kind, payload, tag)| Envelope {
                version: WIRE_VERSION,
                msg_type: t,
                sender: Key(s),
                dest: Key(d),
                seq,
                hop_count: hops,
                auth_kind: kind,
                payload,
                auth_tag: tag,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip(e in arb_envelope()) {
            let bytes = e.encode().unwrap();
            prop_assert_eq!(bytes.len(), e.encoded_len());
            prop_assert_eq!(Envelope::decode(&bytes).unwrap(), e);
        }

        #[test]
        fn encoding_is_injective(a in arb_envelope(), b in arb_envelope()) {
            prop_assume!(a != b);
            prop_assert_ne!(a.encode().unwrap(), b.encode().unwrap());
        }
    }
}
