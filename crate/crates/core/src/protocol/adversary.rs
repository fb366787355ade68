//! Scripted misbehaviour for simulated peers.

use std::fmt;
use std::str::FromStr;

use crate::keyspace::{Key, PeerKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MisrouteStrategy {
    /// Forward to the predecessor instead of toward the destination.
    Backward,
    /// Forward to a random known peer.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fabrication {
    /// Claim to be responsible and answer with the adversary's own group.
    SelfGroup,
    /// Answer with the group stored in the adversary's farthest finger.
    FarGroup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// Replace the immediate successor with an unregistered key that sits
    /// between the adversary and that successor.
    Fabricate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Behavior {
    #[default]
    Honest,
    /// Silently discards application traffic it should forward.
    DropAll,
    Misroute(MisrouteStrategy),
    FraudulentFindSucc(Fabrication),
    InconsistentGroupList(Mutation),
    /// Sends forged MAC envelopes that claim to come from `victim`.
    Spoof { victim: PeerKey, per_tick: u32 },
}

impl Behavior {
    pub fn is_honest(&self) -> bool {
        matches!(self, Behavior::Honest)
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Behavior::Honest => f.write_str("honest"),
            Behavior::DropAll => f.write_str("drop_all"),
            Behavior::Misroute(MisrouteStrategy::Backward) => f.write_str("misroute:backward"),
            Behavior::Misroute(MisrouteStrategy::Random) => f.write_str("misroute:random"),
            Behavior::FraudulentFindSucc(Fabrication::SelfGroup) => f.write_str("fraudulent_find_succ:self_group"),
            Behavior::FraudulentFindSucc(Fabrication::FarGroup) => f.write_str("fraudulent_find_succ:far_group"),
            Behavior::InconsistentGroupList(Mutation::Fabricate) => f.write_str("inconsistent_group_list:fabricate"),
            Behavior::Spoof { victim, per_tick } => write!(f, "spoof:{victim}:{per_tick}"),
        }
    }
}

impl FromStr for Behavior {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let bad = || format!("unknown behavior `{s}`");
        Ok(match (name, arg) {
            ("honest", None) => Behavior::Honest,
            ("drop_all", None) => Behavior::DropAll,
            ("misroute", None | Some("backward")) => Behavior::Misroute(MisrouteStrategy::Backward),
            ("misroute", Some("random")) => Behavior::Misroute(MisrouteStrategy::Random),
            ("fraudulent_find_succ", None | Some("far_group")) => Behavior::FraudulentFindSucc(Fabrication::FarGroup),
            ("fraudulent_find_succ", Some("self_group")) => Behavior::FraudulentFindSucc(Fabrication::SelfGroup),
            ("inconsistent_group_list", None | Some("fabricate")) => Behavior::InconsistentGroupList(Mutation::Fabricate),
            ("spoof", Some(rest)) => {
                let (victim, rate) = match rest.split_once(':') {
                    Some((v, r)) => (v, r.parse::<u32>().map_err(|_| bad())?),
                    None => (rest, 100),
                };
                let key: Key = victim.parse().map_err(|_| bad())?;
                let victim = PeerKey::try_from_key(key).map_err(|e| e.to_string())?;
                Behavior::Spoof { victim, per_tick: rate }
            }
            _ => return Err(bad()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyspace::{derive_key, NetAddr};

    #[test]
    fn text_round_trip() {
        let victim = derive_key(&NetAddr::new([10, 0, 0, 3].into(), 4000));
        let all = [
            Behavior::Honest,
            Behavior::DropAll,
            Behavior::Misroute(MisrouteStrategy::Backward),
            Behavior::Misroute(MisrouteStrategy::Random),
            Behavior::FraudulentFindSucc(Fabrication::SelfGroup),
            Behavior::FraudulentFindSucc(Fabrication::FarGroup),
            Behavior::InconsistentGroupList(Mutation::Fabricate),
            Behavior::Spoof { victim, per_tick: 7 },
        ];
        for b in all {
            assert_eq!(b.to_string().parse::<Behavior>().unwrap(), b);
        }
        assert_eq!("inconsistent_group_list".parse::<Behavior>().unwrap(), Behavior::InconsistentGroupList(Mutation::Fabricate));
        assert!("teleport".parse::<Behavior>().is_err());
        assert!("spoof:nothex".parse::<Behavior>().is_err());
    }
}
