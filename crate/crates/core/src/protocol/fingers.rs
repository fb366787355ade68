//! Expanded finger table: each entry stores the whole group of the
//! target's successor.

use crate::clock::Time;
use crate::keyspace::{dist_cw, finger_target, Key, PeerKey, KEY_BITS};

use super::group::GroupList;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FingerEntry {
    pub index: usize,
    pub target: Key,
    pub group: GroupList,
    pub refreshed_at: Time,
}

impl FingerEntry {
    pub fn leader(&self) -> PeerKey {
        self.group.leader()
    }
}

#[derive(Clone, Debug)]
pub struct FingerTable {
    owner: Key,
    entries: Vec<Option<FingerEntry>>,
}

impl FingerTable {
    pub fn new(owner: Key) -> Self {
        FingerTable { owner, entries: vec![None; KEY_BITS] }
    }

    pub fn target(&self, index: usize) -> Key {
        finger_target(&self.owner, index).expect("index below key width")
    }

    pub fn get(&self, index: usize) -> Option<&FingerEntry> {
        self.entries.get(index).and_then(|e| e.as_ref())
    }

    pub fn entries(&self) -> impl Iterator<Item = &FingerEntry> {
        self.entries.iter().flatten()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.iter().all(|e| e.is_none())
    }

    /// Entries with distinct leaders, in index order.
    pub fn distinct(&self) -> Vec<&FingerEntry> {
        let mut out: Vec<&FingerEntry> = Vec::new();
        for e in self.entries() {
            if out.last().is_none_or(|l| l.leader() != e.leader()) {
                out.push(e);
            }
        }
        out
    }

    pub fn leaders(&self) -> Vec<PeerKey> {
        let mut v: Vec<PeerKey> = self.entries().map(|e| e.leader()).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Stores `group` (the successor group of `target(start)`) at `start`
    /// and every later index whose target has the same successor. Returns
    /// the next index to refresh, wrapping to 0.
    pub fn apply(&mut self, start: usize, group: &GroupList, now: Time) -> usize {
        let leader = group.leader();
        let reach = dist_cw(&self.owner, leader.key());
        let mut i = start;
        while i < KEY_BITS {
            let d = dist_cw(&self.owner, &self.target(i));
            // A zero reach means the owner itself is the successor, which
            // covers every later target as well.
            if i > start && reach != Key::ZERO && d > reach {
                break;
            }
            if leader.key() == &self.owner {
                self.entries[i] = None;
            } else {
                self.entries[i] =
                    Some(FingerEntry { index: i, target: self.target(i), group: group.clone(), refreshed_at: now });
            }
            i += 1;
        }
        if i >= KEY_BITS {
            0
        } else {
            i
        }
    }

    /// Forgets `peer`: entries it leads are cleared, other entries drop it
    /// from their member lists.
    pub fn remove_peer(&mut self, peer: &PeerKey) -> bool {
        let mut changed = false;
        for slot in self.entries.iter_mut() {
            let Some(e) = slot else { continue };
            if e.leader() == *peer {
                *slot = None;
                changed = true;
            } else if e.group.contains(peer) {
                e.group = e.group.without(peer).expect("not the leader");
                changed = true;
            }
        }
        changed
    }

    pub fn mentions(&self, peer: &PeerKey) -> bool {
        self.entries().any(|e| e.group.contains(peer))
    }

    pub fn clear(&mut self) {
        self.entries.iter_mut().for_each(|e| *e = None);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyspace::{derive_key, NetAddr};
    use std::collections::BTreeSet;

    use super::super::group::window_around;

    #[test]
    fn apply_covers_indices_with_same_successor() {
        let peers: BTreeSet<PeerKey> =
            (0..16).map(|i| derive_key(&NetAddr::new([10, 2, 0, i].into(), 1))).collect();
        let sorted: Vec<PeerKey> = peers.iter().copied().collect();
        let owner = sorted[0];
        let mut t = FingerTable::new(*owner.key());
        let succ_group = window_around(&peers, &sorted[1], 5);
        let next = t.apply(0, &succ_group, Time::ZERO);
        assert!(next > 0);
        for i in 0..next {
            assert_eq!(t.get(i).unwrap().leader(), sorted[1]);
        }
        // The first uncovered target lies beyond the successor.
        assert!(dist_cw(owner.key(), &t.target(next)) > dist_cw(owner.key(), sorted[1].key()));
        assert_eq!(t.distinct().len(), 1);
        assert!(t.remove_peer(&sorted[2]));
        assert!(!t.get(0).unwrap().group.contains(&sorted[2]));
        assert!(t.remove_peer(&sorted[1]));
        assert!(t.is_empty());
    }

    #[test]
    fn owner_as_successor_fills_the_rest() {
        let owner = derive_key(&NetAddr::new([10, 2, 0, 1].into(), 1));
        let mut t = FingerTable::new(*owner.key());
        assert_eq!(t.apply(150, &GroupList::singleton(owner), Time::ZERO), 0);
        assert!(t.is_empty());
    }
}
