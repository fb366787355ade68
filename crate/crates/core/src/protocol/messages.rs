//! Payload formats for every message type. Big-endian throughout.

use crate::keyspace::{Key, PeerKey, KEY_LEN};
use crate::wire::{MsgType, WireError};

use super::group::GroupList;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum QueryPurpose {
    Lookup,
    Join,
    Finger(u8),
    /// Answer from local knowledge only; never forwarded.
    Verify,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Potato {
    pub id: u64,
    pub originator: PeerKey,
    pub pass_count: u64,
    pub injected_at: u64,
    pub min_residency: u64,
    pub ttl: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    FindSucc { nonce: u64, purpose: QueryPurpose },
    FindSuccReply { nonce: u64, purpose: QueryPurpose, query: Key, answer: Option<GroupList> },
    GroupQuery { nonce: u64 },
    GroupReply { nonce: u64, group: GroupList },
    Heartbeat { nonce: u64 },
    HeartbeatAck { nonce: u64 },
    Revocation { notice: Vec<u8> },
    Ping { burst: u64, seq: u32 },
    PingEcho { burst: u64, seq: u32, forward_hops: u8 },
    ThroughputReq { id: u64, count: u32 },
    DataPacket { id: u64, index: u32 },
    Potato(Potato),
    PotatoAck { id: u64, pass: u64 },
    PotatoAck2 { id: u64, pass: u64 },
    AppPayload { id: u64, trace: bool, route: Vec<PeerKey> },
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let s = self.bytes.get(self.at..self.at + n).ok_or(WireError::Payload("short payload"))?;
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("width")))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("width")))
    }

    fn key(&mut self) -> Result<Key, WireError> {
        Ok(Key::from_slice(self.take(KEY_LEN)?).expect("width"))
    }

    fn peer(&mut self) -> Result<PeerKey, WireError> {
        PeerKey::try_from_key(self.key()?).map_err(|_| WireError::Payload("peer key"))
    }

    fn group(&mut self) -> Result<GroupList, WireError> {
        let (g, used) = GroupList::decode_from(&self.bytes[self.at..])?;
        self.at += used;
        Ok(g)
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.at..];
        self.at = self.bytes.len();
        s
    }

    fn finish(&self) -> Result<(), WireError> {
        if self.at != self.bytes.len() {
            return Err(WireError::Payload("trailing bytes"));
        }
        Ok(())
    }
}

fn purpose_code(p: QueryPurpose) -> [u8; 2] {
    match p {
        QueryPurpose::Lookup => [0, 0],
        QueryPurpose::Join => [1, 0],
        QueryPurpose::Finger(i) => [2, i],
        QueryPurpose::Verify => [3, 0],
    }
}

fn purpose_from(r: &mut Reader<'_>) -> Result<QueryPurpose, WireError> {
    let (kind, arg) = (r.u8()?, r.u8()?);
    match kind {
        0 => Ok(QueryPurpose::Lookup),
        1 => Ok(QueryPurpose::Join),
        2 => Ok(QueryPurpose::Finger(arg)),
        3 => Ok(QueryPurpose::Verify),
        _ => Err(WireError::Payload("query purpose")),
    }
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::FindSucc { .. } => MsgType::FindSucc,
            Message::FindSuccReply { .. } => MsgType::FindSuccReply,
            Message::GroupQuery { .. } => MsgType::GroupQuery,
            Message::GroupReply { .. } => MsgType::GroupReply,
            Message::Heartbeat { .. } => MsgType::Heartbeat,
            Message::HeartbeatAck { .. } => MsgType::HeartbeatAck,
            Message::Revocation { .. } => MsgType::Revocation,
            Message::Ping { .. } => MsgType::Ping,
            Message::PingEcho { .. } => MsgType::PingEcho,
            Message::ThroughputReq { .. } => MsgType::ThroughputReq,
            Message::DataPacket { .. } => MsgType::DataPacket,
            Message::Potato(_) => MsgType::Potato,
            Message::PotatoAck { .. } => MsgType::PotatoAck,
            Message::PotatoAck2 { .. } => MsgType::PotatoAck2,
            Message::AppPayload { .. } => MsgType::AppPayload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Message::FindSucc { nonce, purpose } => {
                out.extend_from_slice(&nonce.to_be_bytes());
                out.extend_from_slice(&purpose_code(*purpose));
            }
            Message::FindSuccReply { nonce, purpose, query, answer } => {
                out.extend_from_slice(&nonce.to_be_bytes());
                out.extend_from_slice(&purpose_code(*purpose));
                out.extend_from_slice(&query.0);
                match answer {
                    Some(g) => {
                        out.push(1);
                        g.encode_into(&mut out);
                    }
                    None => out.push(0),
                }
            }
            Message::GroupQuery { nonce } | Message::Heartbeat { nonce } | Message::HeartbeatAck { nonce } => {
                out.extend_from_slice(&nonce.to_be_bytes());
            }
            Message::GroupReply { nonce, group } => {
                out.extend_from_slice(&nonce.to_be_bytes());
                group.encode_into(&mut out);
            }
            Message::Revocation { notice } => out.extend_from_slice(notice),
            Message::Ping { burst, seq } => {
                out.extend_from_slice(&burst.to_be_bytes());
                out.extend_from_slice(&seq.to_be_bytes());
            }
            Message::PingEcho { burst, seq, forward_hops } => {
                out.extend_from_slice(&burst.to_be_bytes());
                out.extend_from_slice(&seq.to_be_bytes());
                out.push(*forward_hops);
            }
            Message::ThroughputReq { id, count } => {
                out.extend_from_slice(&id.to_be_bytes());
                out.extend_from_slice(&count.to_be_bytes());
            }
            Message::DataPacket { id, index } => {
                out.extend_from_slice(&id.to_be_bytes());
                out.extend_from_slice(&index.to_be_bytes());
            }
            Message::Potato(p) => {
                out.extend_from_slice(&p.id.to_be_bytes());
                out.extend_from_slice(&p.originator.key().0);
                out.extend_from_slice(&p.pass_count.to_be_bytes());
                out.extend_from_slice(&p.injected_at.to_be_bytes());
                out.extend_from_slice(&p.min_residency.to_be_bytes());
                out.extend_from_slice(&p.ttl.to_be_bytes());
            }
            Message::PotatoAck { id, pass } | Message::PotatoAck2 { id, pass } => {
                out.extend_from_slice(&id.to_be_bytes());
                out.extend_from_slice(&pass.to_be_bytes());
            }
            Message::AppPayload { id, trace, route } => {
                out.extend_from_slice(&id.to_be_bytes());
                out.push(*trace as u8);
                out.push(route.len() as u8);
                for p in route {
                    out.extend_from_slice(&p.key().0);
                }
            }
        }
        out
    }

    pub fn decode(msg_type: MsgType, payload: &[u8]) -> Result<Message, WireError> {
        let mut r = Reader::new(payload);
        let m = match msg_type {
            MsgType::FindSucc => Message::FindSucc { nonce: r.u64()?, purpose: purpose_from(&mut r)? },
            MsgType::FindSuccReply => {
                let nonce = r.u64()?;
                let purpose = purpose_from(&mut r)?;
                let query = r.key()?;
                let answer = match r.u8()? {
                    0 => None,
                    1 => Some(r.group()?),
                    _ => return Err(WireError::Payload("answer flag")),
                };
                Message::FindSuccReply { nonce, purpose, query, answer }
            }
            MsgType::GroupQuery => Message::GroupQuery { nonce: r.u64()? },
            MsgType::GroupReply => Message::GroupReply { nonce: r.u64()?, group: r.group()? },
            MsgType::Heartbeat => Message::Heartbeat { nonce: r.u64()? },
            MsgType::HeartbeatAck => Message::HeartbeatAck { nonce: r.u64()? },
            MsgType::Revocation => Message::Revocation { notice: r.rest().to_vec() },
            MsgType::Ping => Message::Ping { burst: r.u64()?, seq: r.u32()? },
            MsgType::PingEcho => Message::PingEcho { burst: r.u64()?, seq: r.u32()?, forward_hops: r.u8()? },
            MsgType::ThroughputReq => Message::ThroughputReq { id: r.u64()?, count: r.u32()? },
            MsgType::DataPacket => Message::DataPacket { id: r.u64()?, index: r.u32()? },
            MsgType::Potato => Message::Potato(Potato {
                id: r.u64()?,
                originator: r.peer()?,
                pass_count: r.u64()?,
                injected_at: r.u64()?,
                min_residency: r.u64()?,
                ttl: r.u32()?,
            }),
            MsgType::PotatoAck => Message::PotatoAck { id: r.u64()?, pass: r.u64()? },
            MsgType::PotatoAck2 => Message::PotatoAck2 { id: r.u64()?, pass: r.u64()? },
            MsgType::AppPayload => {
                let id = r.u64()?;
                let trace = r.u8()? != 0;
                let n = r.u8()? as usize;
                let route = (0..n).map(|_| r.peer()).collect::<Result<Vec<_>, _>>()?;
                Message::AppPayload { id, trace, route }
            }
            MsgType::Handshake1 | MsgType::Handshake2 => {
                return Err(WireError::Payload("handshakes are handled by the auth layer"))
            }
        };
        r.finish()?;
        Ok(m)
    }
}
