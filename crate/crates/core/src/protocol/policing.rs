//! Consistency checks on claims made by other peers, and the strike ledger
//! that turns repeated contradictions into a verdict.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use crate::clock::Time;
use crate::directory::EvidenceKind;
use crate::keyspace::PeerKey;

use super::group::{GroupError, GroupList};

/// Independent witnesses needed for a `Malicious` verdict.
pub const MALICIOUS_WITNESSES: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Evidence {
    pub kind: EvidenceKind,
    /// Distinct peers whose observations contradict the accused.
    pub witnesses: Vec<PeerKey>,
    /// The accused's claim followed by the contradicting lists.
    pub lists: Vec<GroupList>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SuspicionVerdict {
    Consistent,
    Suspect(Evidence),
    Malicious(Evidence),
}

impl SuspicionVerdict {
    pub fn is_malicious(&self) -> bool {
        matches!(self, SuspicionVerdict::Malicious(_))
    }
}

/// Result of comparing a claimed group list with the local view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GroupCheck {
    Consistent,
    /// The list is malformed on its face.
    Structural(GroupError),
    /// The list names peers the local view does not know; each must be
    /// checked against the directory before a verdict.
    Unverified(Vec<PeerKey>),
}

/// Compares `claimed` (the group `claimant` reports for itself) with the
/// local `view`, the set of live peers known here including self.
///
/// Members missing from the claim are tolerated: the claimant may have seen
/// a departure first. Members absent from the view are returned for checking.
pub fn check_group_consistency(
    view: &BTreeSet<PeerKey>,
    claimant: &PeerKey,
    claimed: &GroupList,
    g: usize,
) -> GroupCheck {
    let expect_full = view.len() >= g;
    if let Err(e) = claimed.validate_claim(claimant, g, expect_full) {
        return GroupCheck::Structural(e);
    }
    let unknown: Vec<PeerKey> = claimed.members().iter().filter(|m| !view.contains(m)).copied().collect();
    if unknown.is_empty() {
        GroupCheck::Consistent
    } else {
        GroupCheck::Unverified(unknown)
    }
}

/// Whether a verifier's answer corroborates a find-successor reply.
///
/// `answer` is the group the verifier believes is responsible for the key,
/// or `None` when the key is outside its neighbourhood.
pub fn corroborates(claimed: &GroupList, answer: Option<&GroupList>, g: usize) -> bool {
    let Some(answer) = answer else { return false };
    let leader = claimed.leader();
    let theirs = answer.leader();
    let (before, after) = claimed.neighbours_of_leader();
    let (a_before, a_after) = answer.neighbours_of_leader();
    let same_or_adjacent = theirs == leader
        || Some(theirs) == before
        || Some(theirs) == after
        || Some(leader) == a_before
        || Some(leader) == a_after;
    let need = g.div_ceil(2).min(claimed.len()).min(answer.len());
    same_or_adjacent && claimed.overlap(answer) >= need
}

#[derive(Clone, Debug)]
struct Case {
    kind: EvidenceKind,
    witnesses: BTreeSet<PeerKey>,
    lists: Vec<GroupList>,
    opened_at: Time,
}

/// Open cases against peers.
#[derive(Clone, Debug, Default)]
pub struct SuspicionLedger {
    cases: BTreeMap<PeerKey, Case>,
}

impl SuspicionLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a contradiction observed by `witness`.
    pub fn strike(
        &mut self,
        accused: PeerKey,
        witness: PeerKey,
        kind: EvidenceKind,
        lists: Vec<GroupList>,
        now: Time,
    ) -> SuspicionVerdict {
        let case = self.cases.entry(accused).or_insert_with(|| Case {
            kind,
            witnesses: BTreeSet::new(),
            lists: Vec::new(),
            opened_at: now,
        });
        if witness != accused {
            case.witnesses.insert(witness);
        }
        case.lists.extend(lists);
        let evidence =
            Evidence { kind: case.kind, witnesses: case.witnesses.iter().copied().collect(), lists: case.lists.clone() };
        if case.witnesses.len() >= MALICIOUS_WITNESSES {
            SuspicionVerdict::Malicious(evidence)
        } else {
            SuspicionVerdict::Suspect(evidence)
        }
    }

    pub fn witnesses(&self, accused: &PeerKey) -> Vec<PeerKey> {
        self.cases.get(accused).map(|c| c.witnesses.iter().copied().collect()).unwrap_or_default()
    }

    pub fn strikes(&self, accused: &PeerKey) -> usize {
        self.cases.get(accused).map_or(0, |c| c.witnesses.len())
    }

    pub fn is_suspect(&self, accused: &PeerKey) -> bool {
        self.cases.contains_key(accused)
    }

    pub fn clear(&mut self, accused: &PeerKey) {
        self.cases.remove(accused);
    }

    /// Drops cases that did not escalate within `ttl`.
    pub fn expire(&mut self, now: Time, ttl: Duration) {
        self.cases.retain(|_, c| now.saturating_sub(c.opened_at) < ttl);
    }

    pub fn accused(&self) -> impl Iterator<Item = &PeerKey> {
        self.cases.keys()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyspace::{derive_key, NetAddr};
    use super::super::group::window_around;

    fn ring(n: usize) -> Vec<PeerKey> {
        let mut v: Vec<PeerKey> = (0..n).map(|i| derive_key(&NetAddr::new([10, 4, 0, i as u8].into(), 1))).collect();
        v.sort();
        v
    }

    #[test]
    fn shifted_window_is_consistent_and_worked_example_holds() {
        // Peers n..s are indices 0..5; p's group (n,o,p,q,r), q's (o,p,q,r,s).
        let s = ring(8);
        let view: BTreeSet<PeerKey> = s.iter().copied().collect();
        let q_group = window_around(&view, &s[3], 5);
        let p_group = window_around(&view, &s[2], 5);
        assert_eq!(&p_group.members()[1..], &q_group.members()[..4]);
        let p_view: BTreeSet<PeerKey> = s[0..7].iter().copied().collect();
        assert_eq!(check_group_consistency(&p_view, &s[3], &q_group, 5), GroupCheck::Consistent);
    }

    #[test]
    fn fabricated_member_needs_checking_and_omissions_are_tolerated() {
        let s = ring(9);
        let view: BTreeSet<PeerKey> = s[..8].iter().copied().collect();
        let stranger = derive_key(&NetAddr::new([172, 16, 0, 1].into(), 1));
        let mut members = window_around(&view, &s[4], 5).members().to_vec();
        members[3] = stranger;
        members.sort_by_key(|m| crate::keyspace::dist_cw(s[2].key(), m.key()));
        if let Ok(claim) = GroupList::new(members.clone(), 2) {
            if claim.leader() == s[4] {
                assert_eq!(
                    check_group_consistency(&view, &s[4], &claim, 5),
                    GroupCheck::Unverified(vec![stranger])
                );
            }
        }
        // A list that omits a member the view knows about is not a conflict.
        let fewer: BTreeSet<PeerKey> = view.iter().filter(|p| **p != s[5]).copied().collect();
        let claim = window_around(&fewer, &s[4], 5);
        assert_eq!(check_group_consistency(&view, &s[4], &claim, 5), GroupCheck::Consistent);
    }

    #[test]
    fn even_length_list_is_structural() {
        let s = ring(9);
        let view: BTreeSet<PeerKey> = s.iter().copied().collect();
        let even = GroupList::new(s[1..5].to_vec(), 1).unwrap();
        assert!(matches!(check_group_consistency(&view, &s[2], &even, 5), GroupCheck::Structural(_)));
    }

    #[test]
    fn corroboration_rules() {
        let s = ring(12);
        let view: BTreeSet<PeerKey> = s.iter().copied().collect();
        let claim = window_around(&view, &s[5], 5);
        assert!(corroborates(&claim, Some(&claim), 5));
        assert!(corroborates(&claim, Some(&window_around(&view, &s[6], 5)), 5));
        assert!(!corroborates(&claim, Some(&window_around(&view, &s[9], 5)), 5));
        assert!(!corroborates(&claim, None, 5));
    }

    #[test]
    fn two_distinct_witnesses_make_a_verdict() {
        let s = ring(4);
        let mut l = SuspicionLedger::new();
        let k = EvidenceKind::FraudulentFindSuccessor;
        assert!(matches!(l.strike(s[0], s[1], k, vec![], Time::ZERO), SuspicionVerdict::Suspect(_)));
        assert!(matches!(l.strike(s[0], s[1], k, vec![], Time::ZERO), SuspicionVerdict::Suspect(_)));
        assert!(matches!(l.strike(s[0], s[0], k, vec![], Time::ZERO), SuspicionVerdict::Suspect(_)));
        let v = l.strike(s[0], s[2], k, vec![], Time::ZERO);
        let SuspicionVerdict::Malicious(e) = v else { panic!("{v:?}") };
        assert_eq!(e.witnesses.len(), 2);
        l.expire(Time::from_secs(31), Duration::from_secs(30));
        assert!(!l.is_suspect(&s[0]));
    }
}
