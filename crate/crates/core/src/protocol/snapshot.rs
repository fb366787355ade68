//! Plain-text dump of a node's routing state.
//!
//! ```text
//! self 65fbd529540bb1d4f5cc15d961280a0000011388
//! addr 10.0.0.1:5000
//! joined true
//! predecessor <key or ->
//! successor <key or ->
//! group <leader index> <key>,<key>,...
//! finger <index> <target> <leader index> <key>,<key>,...
//! blacklist <key> <key> ...
//! ```

use std::fmt::Write as _;

use thiserror::Error;

use crate::keyspace::{Key, NetAddr, PeerKey};

use super::group::GroupList;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SnapshotError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("missing `{0}` line")]
    Missing(&'static str),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FingerLine {
    pub index: usize,
    pub target: Key,
    pub group: GroupList,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub key: PeerKey,
    pub addr: NetAddr,
    pub joined: bool,
    pub predecessor: Option<PeerKey>,
    pub successor: Option<PeerKey>,
    pub group: GroupList,
    pub fingers: Vec<FingerLine>,
    pub blacklist: Vec<PeerKey>,
}

fn opt(k: &Option<PeerKey>) -> String {
    k.map_or_else(|| "-".to_string(), |k| k.to_string())
}

fn list(g: &GroupList) -> String {
    let keys: Vec<String> = g.members().iter().map(|m| m.to_string()).collect();
    format!("{} {}", g.leader_index(), keys.join(","))
}

impl Snapshot {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "self {}", self.key);
        let _ = writeln!(s, "addr {}", self.addr);
        let _ = writeln!(s, "joined {}", self.joined);
        let _ = writeln!(s, "predecessor {}", opt(&self.predecessor));
        let _ = writeln!(s, "successor {}", opt(&self.successor));
        let _ = writeln!(s, "group {}", list(&self.group));
        for f in &self.fingers {
            let _ = writeln!(s, "finger {} {} {}", f.index, f.target, list(&f.group));
        }
        let bl: Vec<String> = self.blacklist.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(s, "blacklist {}", bl.join(" "));
        s
    }

    pub fn parse(text: &str) -> Result<Snapshot, SnapshotError> {
        let mut key = None;
        let mut addr = None;
        let mut joined = None;
        let mut predecessor = None;
        let mut successor = None;
        let mut group = None;
        let mut fingers = Vec::new();
        let mut blacklist = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |reason: &str| SnapshotError::Parse { line, reason: reason.to_string() };
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let (tag, rest) = raw.split_once(' ').unwrap_or((raw, ""));
            let rest = rest.trim();
            match tag {
                "self" => key = Some(peer(rest).map_err(|e| err(&e))?),
                "addr" => addr = Some(rest.parse::<NetAddr>().map_err(|e| err(&e.to_string()))?),
                "joined" => joined = Some(rest.parse::<bool>().map_err(|e| err(&e.to_string()))?),
                "predecessor" => predecessor = Some(opt_peer(rest).map_err(|e| err(&e))?),
                "successor" => successor = Some(opt_peer(rest).map_err(|e| err(&e))?),
                "group" => group = Some(parse_list(rest).map_err(|e| err(&e))?),
                "finger" => {
                    let mut parts = rest.splitn(3, ' ');
                    let index = parts.next().and_then(|p| p.parse().ok()).ok_or_else(|| err("bad finger index"))?;
                    let target =
                        parts.next().and_then(|p| p.parse::<Key>().ok()).ok_or_else(|| err("bad finger target"))?;
                    let group = parse_list(parts.next().unwrap_or("")).map_err(|e| err(&e))?;
                    fingers.push(FingerLine { index, target, group });
                }
                "blacklist" => {
                    for k in rest.split_whitespace() {
                        blacklist.push(peer(k).map_err(|e| err(&e))?);
                    }
                }
                other => return Err(err(&format!("unknown line `{other}`"))),
            }
        }
        Ok(Snapshot {
            key: key.ok_or(SnapshotError::Missing("self"))?,
            addr: addr.ok_or(SnapshotError::Missing("addr"))?,
            joined: joined.ok_or(SnapshotError::Missing("joined"))?,
            predecessor: predecessor.ok_or(SnapshotError::Missing("predecessor"))?,
            successor: successor.ok_or(SnapshotError::Missing("successor"))?,
            group: group.ok_or(SnapshotError::Missing("group"))?,
            fingers,
            blacklist,
        })
    }
}

fn peer(s: &str) -> Result<PeerKey, String> {
    let k: Key = s.parse().map_err(|e: crate::keyspace::KeyspaceError| e.to_string())?;
    Ok(PeerKey::new_unchecked(k))
}

fn opt_peer(s: &str) -> Result<Option<PeerKey>, String> {
    if s == "-" {
        Ok(None)
    } else {
        peer(s).map(Some)
    }
}

fn parse_list(s: &str) -> Result<GroupList, String> {
    let (idx, keys) = s.trim().split_once(' ').ok_or("expected `<leader index> <keys>`")?;
    let idx: usize = idx.parse().map_err(|_| "bad leader index")?;
    let members = keys.split(',').map(peer).collect::<Result<Vec<_>, _>>()?;
    GroupList::new(members, idx).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyspace::derive_key;
    use std::collections::BTreeSet;

    #[test]
    fn render_parse_round_trip() {
        let peers: BTreeSet<PeerKey> =
            (1..=7).map(|i| derive_key(&NetAddr::new([10, 0, 0, i].into(), 4000))).collect();
        let me = *peers.iter().next().unwrap();
        let group = super::super::group::window_around(&peers, &me, 5);
        let snap = Snapshot {
            key: me,
            addr: me.addr(),
            joined: true,
            predecessor: group.neighbours_of_leader().0,
            successor: None,
            group: group.clone(),
            fingers: vec![FingerLine { index: 3, target: Key::from_u64(99), group }],
            blacklist: peers.iter().skip(6).copied().collect(),
        };
        let text = snap.render();
        assert_eq!(Snapshot::parse(&text).unwrap(), snap);
        assert!(Snapshot::parse("self zz").is_err());
        assert_eq!(Snapshot::parse(""), Err(SnapshotError::Missing("self")));
    }
}
