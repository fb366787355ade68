//! Peer groups: windows of ring-contiguous peers centered on a leader.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::keyspace::{dist_cw, in_range_open_closed, Key, PeerKey, KEY_LEN};
use crate::wire::WireError;

pub const DEFAULT_GROUP_SIZE: usize = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GroupError {
    #[error("group list is empty")]
    Empty,
    #[error("group list has {len} members, more than the group size {g}")]
    TooLarge { len: usize, g: usize },
    #[error("group list has {len} members where {g} are expected")]
    WrongSize { len: usize, g: usize },
    #[error("group list repeats a member")]
    Duplicate,
    #[error("group list is not in clockwise order")]
    Unordered,
    #[error("leader is not at the center of the list")]
    LeaderIndex,
    #[error("claimant {0:?} is not the leader of its list")]
    NotCentral(PeerKey),
    #[error("group size must be odd and at least 3")]
    BadGroupSize,
}

/// Checks a configured group size.
pub fn validate_group_size(g: usize) -> Result<(), GroupError> {
    if g < 3 || g % 2 == 0 || g > 255 {
        return Err(GroupError::BadGroupSize);
    }
    Ok(())
}

/// Members in clockwise order with the leader at `(len - 1) / 2`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GroupList {
    members: Vec<PeerKey>,
    leader_index: usize,
}

impl GroupList {
    /// Builds a list and checks it is structurally sound.
    pub fn new(members: Vec<PeerKey>, leader_index: usize) -> Result<Self, GroupError> {
        let list = GroupList { members, leader_index };
        list.check_shape()?;
        Ok(list)
    }

    pub fn singleton(leader: PeerKey) -> Self {
        GroupList { members: vec![leader], leader_index: 0 }
    }

    /// Centre index for a list of `len` members.
    pub fn center(len: usize) -> usize {
        len.saturating_sub(1) / 2
    }

    fn check_shape(&self) -> Result<(), GroupError> {
        let n = self.members.len();
        if n == 0 {
            return Err(GroupError::Empty);
        }
        if self.leader_index != Self::center(n) {
            return Err(GroupError::LeaderIndex);
        }
        let first = self.members[0].key();
        let mut last = Key::ZERO;
        for (i, m) in self.members.iter().enumerate().skip(1) {
            let d = dist_cw(first, m.key());
            if d == Key::ZERO {
                return Err(GroupError::Duplicate);
            }
            if i > 1 && d <= last {
                if self.members[..i].contains(m) {
                    return Err(GroupError::Duplicate);
                }
                return Err(GroupError::Unordered);
            }
            last = d;
        }
        Ok(())
    }

    /// Full structural check of a list claimed by `claimant` in a ring
    /// using group size `g`. When `expect_full`, the list must have exactly
    /// `g` members.
    pub fn validate_claim(&self, claimant: &PeerKey, g: usize, expect_full: bool) -> Result<(), GroupError> {
        self.check_shape()?;
        let n = self.members.len();
        if n > g {
            return Err(GroupError::TooLarge { len: n, g });
        }
        if expect_full && n != g {
            return Err(GroupError::WrongSize { len: n, g });
        }
        if self.leader() != *claimant {
            return Err(GroupError::NotCentral(*claimant));
        }
        Ok(())
    }

    pub fn members(&self) -> &[PeerKey] {
        &self.members
    }

    pub fn leader(&self) -> PeerKey {
        self.members[self.leader_index]
    }

    pub fn leader_index(&self) -> usize {
        self.leader_index
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, peer: &PeerKey) -> bool {
        self.members.contains(peer)
    }

    pub fn position(&self, peer: &PeerKey) -> Option<usize> {
        self.members.iter().position(|m| m == peer)
    }

    /// Members that sit immediately before and after the leader.
    pub fn neighbours_of_leader(&self) -> (Option<PeerKey>, Option<PeerKey>) {
        let i = self.leader_index;
        let before = i.checked_sub(1).map(|j| self.members[j]);
        let after = self.members.get(i + 1).copied();
        (before, after)
    }

    /// The member responsible for `key` according to this list, if the key
    /// falls between two listed members.
    pub fn responsible_for(&self, key: &Key) -> Option<PeerKey> {
        self.members
            .windows(2)
            .find(|w| in_range_open_closed(key, w[0].key(), w[1].key()))
            .map(|w| w[1])
    }

    /// True when `key` lies on the arc from the first to the last member.
    pub fn spans(&self, key: &Key) -> bool {
        let first = self.members[0].key();
        let last = self.members[self.members.len() - 1].key();
        key == first || in_range_open_closed(key, first, last)
    }

    pub fn overlap(&self, other: &GroupList) -> usize {
        self.members.iter().filter(|m| other.contains(m)).count()
    }

    /// Drops `peer` from the list. The leader cannot be removed.
    pub fn without(&self, peer: &PeerKey) -> Option<GroupList> {
        if *peer == self.leader() {
            return None;
        }
        let members: Vec<PeerKey> = self.members.iter().filter(|m| *m != peer).copied().collect();
        let leader = self.leader();
        let leader_index = members.iter().position(|m| *m == leader).expect("leader kept");
        Some(GroupList { members, leader_index })
    }

    /// `count:1 | leader_index:1 | members: count * 20`.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.members.len() as u8);
        out.push(self.leader_index as u8);
        for m in &self.members {
            out.extend_from_slice(&m.key().0);
        }
    }

    /// Decodes one list from the front of `bytes`; returns it and the bytes
    /// consumed. Only the per-key derivation is checked here; shape checks
    /// are left to the receiver so malformed claims can be reported.
    pub fn decode_from(bytes: &[u8]) -> Result<(GroupList, usize), WireError> {
        if bytes.len() < 2 {
            return Err(WireError::Payload("group list header"));
        }
        let n = bytes[0] as usize;
        let leader_index = bytes[1] as usize;
        let need = 2 + n * KEY_LEN;
        if bytes.len() < need || n == 0 || leader_index >= n {
            return Err(WireError::Payload("group list"));
        }
        let mut members = Vec::with_capacity(n);
        for i in 0..n {
            let at = 2 + i * KEY_LEN;
            let key = Key::from_slice(&bytes[at..at + KEY_LEN]).expect("fixed width");
            members.push(PeerKey::try_from_key(key).map_err(|_| WireError::Payload("group member key"))?);
        }
        Ok((GroupList { members, leader_index }, need))
    }
}

/// Walks the ring represented by `peers` from `center`.
/// Returns up to `n` peers clockwise after `center`, closest first.
pub fn successors_in(peers: &BTreeSet<PeerKey>, center: &PeerKey, n: usize) -> Vec<PeerKey> {
    peers
        .range((std::ops::Bound::Excluded(*center), std::ops::Bound::Unbounded))
        .chain(peers.range(..*center))
        .take(n)
        .copied()
        .collect()
}

/// Up to `n` peers counter-clockwise before `center`, closest first.
pub fn predecessors_in(peers: &BTreeSet<PeerKey>, center: &PeerKey, n: usize) -> Vec<PeerKey> {
    peers
        .range(..*center)
        .rev()
        .chain(peers.range((std::ops::Bound::Excluded(*center), std::ops::Bound::Unbounded)).rev())
        .take(n)
        .copied()
        .collect()
}

/// The group window around `center` drawn from `peers` (which must
/// contain `center`). With fewer than `g` peers the window holds all of them.
pub fn window_around(peers: &BTreeSet<PeerKey>, center: &PeerKey, g: usize) -> GroupList {
    let m = peers.len().max(1);
    let others = m - 1;
    let (n_pred, n_succ) = if m >= g {
        ((g - 1) / 2, (g - 1) / 2)
    } else {
        (others / 2, others - others / 2)
    };
    let mut preds = predecessors_in(peers, center, n_pred);
    preds.reverse();
    let succs = successors_in(peers, center, n_succ);
    let leader_index = preds.len();
    let mut members = preds;
    members.push(*center);
    members.extend(succs);
    GroupList { members, leader_index }
}
