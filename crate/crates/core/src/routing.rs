//! Forwarding policy over a node's tables.
//!
//! Destinations are classified as local, near (owned by a member of the
//! node's own group) or far. Far traffic goes to a finger group, either to
//! its leader or to a member drawn uniformly from those that still precede
//! the destination.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::keyspace::{in_range_open, in_range_open_closed, Key, PeerKey};
use crate::protocol::fingers::FingerTable;
use crate::protocol::group::GroupList;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouteClass {
    Local,
    Near(PeerKey),
    Far,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RoutingMode {
    #[default]
    Deterministic,
    Randomized,
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoutingMode::Deterministic => "deterministic",
            RoutingMode::Randomized => "randomized",
        })
    }
}

impl FromStr for RoutingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "deterministic" => Ok(RoutingMode::Deterministic),
            "randomized" => Ok(RoutingMode::Randomized),
            other => Err(format!("unknown routing mode `{other}`")),
        }
    }
}

/// The parts of a node's state that routing decisions read.
#[derive(Clone, Copy)]
pub struct RouteView<'a> {
    pub me: PeerKey,
    pub predecessor: Option<PeerKey>,
    pub successor: Option<PeerKey>,
    pub group: &'a GroupList,
    pub fingers: &'a FingerTable,
    pub blacklist: &'a BTreeSet<PeerKey>,
}

impl RouteView<'_> {
    pub fn classify(&self, dest: &Key) -> RouteClass {
        let Some(pred) = self.predecessor else {
            return RouteClass::Local;
        };
        if dest == self.me.key() || in_range_open_closed(dest, pred.key(), self.me.key()) {
            return RouteClass::Local;
        }
        let exact = self.group.members().iter().find(|m| m.key() == dest).copied();
        match exact.or_else(|| self.group.responsible_for(dest)) {
            Some(m) if m == self.me => RouteClass::Local,
            Some(m) if !self.blacklist.contains(&m) => RouteClass::Near(m),
            _ => RouteClass::Far,
        }
    }

    /// Finger leaders strictly between this node and `dest`, closest to
    /// `dest` first.
    fn preceding_leaders(&self, dest: &Key) -> Vec<PeerKey> {
        let mut leaders: Vec<PeerKey> = self
            .fingers
            .leaders()
            .into_iter()
            .filter(|l| *l != self.me && !self.blacklist.contains(l) && in_range_open(l.key(), self.me.key(), dest))
            .collect();
        leaders.sort_by_key(|l| std::cmp::Reverse(crate::keyspace::dist_cw(self.me.key(), l.key())));
        leaders
    }

    /// Next hop for a far destination. `None` only when the node has no
    /// usable successor either.
    pub fn next_hop(&self, dest: &Key, mode: RoutingMode, rng: &mut dyn RngCore) -> Option<PeerKey> {
        let leaders = self.preceding_leaders(dest);
        match mode {
            RoutingMode::Deterministic => {
                if let Some(l) = leaders.first() {
                    return Some(*l);
                }
            }
            RoutingMode::Randomized => {
                if let Some(leader) = leaders.first() {
                    let entry = self.fingers.entries().find(|e| e.leader() == *leader).expect("leader has an entry");
                    let eligible = self.eligible(&entry.group, dest);
                    return Some(*eligible.choose(rng).unwrap_or(leader));
                }
            }
        }
        self.successor.filter(|s| !self.blacklist.contains(s) && *s != self.me)
    }

    /// Members of `group` that lie strictly between this node and `dest`.
    pub fn eligible(&self, group: &GroupList, dest: &Key) -> Vec<PeerKey> {
        group
            .members()
            .iter()
            .filter(|m| **m != self.me && !self.blacklist.contains(m) && in_range_open(m.key(), self.me.key(), dest))
            .copied()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::Time;
    use crate::keyspace::{derive_key, dist_cw, NetAddr};
    use crate::protocol::group::window_around;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    struct Ring {
        peers: Vec<PeerKey>,
        set: BTreeSet<PeerKey>,
    }

    impl Ring {
        fn new(n: usize) -> Self {
            let set: BTreeSet<PeerKey> =
                (0..n).map(|i| derive_key(&NetAddr::new([10, 7, (i / 200) as u8, (i % 200) as u8].into(), 9))).collect();
            Ring { peers: set.iter().copied().collect(), set }
        }

        fn oracle_successor(&self, k: &Key) -> PeerKey {
            *self.peers.iter().find(|p| p.key() >= k).unwrap_or(&self.peers[0])
        }

        fn tables(&self, i: usize) -> (GroupList, FingerTable) {
            let me = self.peers[i];
            let group = window_around(&self.set, &me, 5);
            let mut fingers = FingerTable::new(*me.key());
            let mut at = 0;
            loop {
                let succ = self.oracle_successor(&fingers.target(at));
                at = fingers.apply(at, &window_around(&self.set, &succ, 5), Time::ZERO);
                if at == 0 {
                    break;
                }
            }
            (group, fingers)
        }
    }

    fn view<'a>(ring: &Ring, i: usize, group: &'a GroupList, fingers: &'a FingerTable, bl: &'a BTreeSet<PeerKey>) -> RouteView<'a> {
        let n = ring.peers.len();
        RouteView {
            me: ring.peers[i],
            predecessor: Some(ring.peers[(i + n - 1) % n]),
            successor: Some(ring.peers[(i + 1) % n]),
            group,
            fingers,
            blacklist: bl,
        }
    }

    #[test]
    fn classification() {
        let ring = Ring::new(64);
        let (g, f) = ring.tables(10);
        let bl = BTreeSet::new();
        let v = view(&ring, 10, &g, &f, &bl);
        assert_eq!(v.classify(ring.peers[10].key()), RouteClass::Local);
        assert_eq!(v.classify(ring.peers[11].key()), RouteClass::Near(ring.peers[11]));
        assert_eq!(v.classify(ring.peers[9].key()), RouteClass::Near(ring.peers[9]));
        assert_eq!(v.classify(ring.peers[8].key()), RouteClass::Near(ring.peers[8]));
        let inside_first = ring.peers[8].key().wrapping_sub(&Key::from_u64(1));
        assert_eq!(v.classify(&inside_first), RouteClass::Far);
        assert_eq!(v.classify(ring.peers[42].key()), RouteClass::Far);
    }

    #[test]
    fn routes_reach_the_responsible_peer_with_strict_progress() {
        let ring = Ring::new(64);
        let tables: Vec<_> = (0..64).map(|i| ring.tables(i)).collect();
        let bl = BTreeSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mode in [RoutingMode::Deterministic, RoutingMode::Randomized] {
            for t in 0..300u64 {
                let dest = Key::from_u64(t.wrapping_mul(0x9e37_79b9_7f4a_7c15)).wrapping_add(&Key::pow2(150).unwrap());
                let mut at = (t as usize * 7) % 64;
                let mut hops = 0;
                loop {
                    let v = view(&ring, at, &tables[at].0, &tables[at].1, &bl);
                    match v.classify(&dest) {
                        RouteClass::Local => break,
                        RouteClass::Near(m) => at = ring.peers.iter().position(|p| *p == m).unwrap(),
                        RouteClass::Far => {
                            let hop = v.next_hop(&dest, mode, &mut rng).unwrap();
                            assert!(dist_cw(hop.key(), &dest) < dist_cw(v.me.key(), &dest));
                            at = ring.peers.iter().position(|p| *p == hop).unwrap();
                        }
                    }
                    hops += 1;
                    assert!(hops < 20);
                }
                assert_eq!(ring.peers[at], ring.oracle_successor(&dest));
            }
        }
    }

    #[test]
    fn randomized_draws_are_uniform_over_eligible_members() {
        let ring = Ring::new(128);
        let (g, f) = ring.tables(0);
        let bl = BTreeSet::new();
        let v = view(&ring, 0, &g, &f, &bl);
        // Aim just past a far finger leader so all but the last member precede.
        let leader = v.fingers.get(159).unwrap().leader();
        let entry = v.fingers.entries().find(|e| e.leader() == leader).unwrap().clone();
        let last = *entry.group.members().last().unwrap();
        let dest = last.key().wrapping_sub(&Key::from_u64(1));
        let eligible = v.eligible(&entry.group, &dest);
        assert!(eligible.len() >= 3, "{eligible:?}");
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts: BTreeMap<PeerKey, u64> = BTreeMap::new();
        let draws = 10_000u64;
        for _ in 0..draws {
            let leaders = v.preceding_leaders(&dest);
            assert_eq!(leaders[0], leader);
            *counts.entry(v.next_hop(&dest, RoutingMode::Randomized, &mut rng).unwrap()).or_default() += 1;
        }
        assert_eq!(counts.len(), eligible.len());
        let k = eligible.len() as f64;
        let expected = draws as f64 / k;
        let sigma = (draws as f64 * (1.0 / k) * (1.0 - 1.0 / k)).sqrt();
        for c in counts.values() {
            assert!((*c as f64 - expected).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn blacklisted_leader_is_skipped() {
        let ring = Ring::new(64);
        let (g, f) = ring.tables(0);
        let dest = ring.peers[40].key().wrapping_add(&Key::from_u64(1));
        let empty = BTreeSet::new();
        let first = view(&ring, 0, &g, &f, &empty).next_hop(&dest, RoutingMode::Deterministic, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let bl: BTreeSet<PeerKey> = [first].into();
        let v = view(&ring, 0, &g, &f, &bl);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [RoutingMode::Deterministic, RoutingMode::Randomized] {
            let hop = v.next_hop(&dest, mode, &mut rng).unwrap();
            assert_ne!(hop, first);
            assert!(dist_cw(hop.key(), &dest) < dist_cw(v.me.key(), &dest));
        }
    }

    #[test]
    fn group_of_one_degenerates_to_deterministic() {
        let ring = Ring::new(64);
        let me = ring.peers[0];
        let mut f = FingerTable::new(*me.key());
        let mut at = 0;
        loop {
            let succ = ring.oracle_successor(&f.target(at));
            at = f.apply(at, &GroupList::singleton(succ), Time::ZERO);
            if at == 0 {
                break;
            }
        }
        let g = GroupList::singleton(me);
        let bl = BTreeSet::new();
        let v = view(&ring, 0, &g, &f, &bl);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 1..64 {
            let dest = ring.peers[i].key();
            assert_eq!(
                v.next_hop(dest, RoutingMode::Randomized, &mut rng),
                v.next_hop(dest, RoutingMode::Deterministic, &mut rng)
            );
        }
    }
}
