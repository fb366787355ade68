//! Attaching and checking authentication tags.

use thiserror::Error;

use super::envelope::{AuthKind, Envelope, MsgType, WireError};
use crate::auth::{CryptoSuite, KeyPair, MacCheck, MacKey};
use crate::keyspace::{derive_key, NetAddr, PeerKey};

/// What the sender authenticates with.
pub enum Credentials<'a> {
    Signature { suite: &'a dyn CryptoSuite, keypair: &'a KeyPair },
    Mac(&'a MacKey),
    Unauthenticated,
}

/// Sets the auth kind and tag on `env`, then encodes it.
pub fn seal(env: &mut Envelope, creds: Credentials<'_>) -> Result<Vec<u8>, WireError> {
    match creds {
        Credentials::Signature { suite, keypair } => {
            env.auth_kind = AuthKind::Signature;
            env.auth_tag = suite.sign(keypair, &env.authenticated_bytes());
        }
        Credentials::Mac(key) => {
            env.auth_kind = AuthKind::Mac;
            env.auth_tag = key.tag(&env.authenticated_bytes()).to_vec();
        }
        Credentials::Unauthenticated => {
            env.auth_kind = AuthKind::Unauthenticated;
            env.auth_tag.clear();
        }
    }
    env.encode()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Rejection {
    #[error("authentication tag does not verify")]
    Tamper,
    #[error("sender is not authorized")]
    Unauthorized,
    #[error("sequence number already seen")]
    Replay,
    #[error("sender certificate is not cached; lookup needed for {0}")]
    Pending(PeerKey),
    #[error(transparent)]
    Malformed(#[from] WireError),
}

/// Outcome of asking the receiver for a sender's verification key.
pub enum KeyLookup {
    Known(Vec<u8>),
    Refused,
    Unknown,
}

/// Receiver-side state consulted by [`open`].
pub trait AuthContext {
    fn is_blocked(&self, peer: &PeerKey) -> bool;
    fn allow_unauthenticated(&self) -> bool;
    fn public_key(&mut self, peer: &PeerKey) -> KeyLookup;
    fn verify_signature(&self, public: &[u8], msg: &[u8], sig: &[u8]) -> bool;
    /// Records `seq` for signed traffic from `peer`; false on replay.
    fn accept_signed_seq(&mut self, peer: &PeerKey, seq: u64) -> bool;
    fn check_mac(&mut self, link: &PeerKey, msg: &[u8], tag: &[u8], seq: u64) -> MacCheck;
}

/// Decodes and authenticates a datagram received from `link`.
///
/// MAC tags are checked against the session with the link peer, so routed
/// messages authenticate hop by hop. Signed messages must come directly
/// from their sender.
pub fn open(bytes: &[u8], link: NetAddr, ctx: &mut dyn AuthContext) -> Result<Envelope, Rejection> {
    let env = Envelope::decode(bytes)?;
    let link_key = derive_key(&link);
    if ctx.is_blocked(&link_key) {
        return Err(Rejection::Unauthorized);
    }
    let Ok(sender) = PeerKey::try_from_key(env.sender) else {
        return Err(Rejection::Tamper);
    };
    if ctx.is_blocked(&sender) {
        return Err(Rejection::Unauthorized);
    }
    match env.auth_kind {
        AuthKind::Unauthenticated => {
            if ctx.allow_unauthenticated() {
                Ok(env)
            } else {
                Err(Rejection::Tamper)
            }
        }
        AuthKind::Signature => {
            if !matches!(env.msg_type, MsgType::Handshake1 | MsgType::Handshake2) || env.sender != *link_key.key() {
                return Err(Rejection::Tamper);
            }
            let public = match ctx.public_key(&link_key) {
                KeyLookup::Known(p) => p,
                KeyLookup::Refused => return Err(Rejection::Unauthorized),
                KeyLookup::Unknown => return Err(Rejection::Pending(link_key)),
            };
            if !ctx.verify_signature(&public, &env.authenticated_bytes(), &env.auth_tag) {
                return Err(Rejection::Tamper);
            }
            if !ctx.accept_signed_seq(&link_key, env.seq) {
                return Err(Rejection::Replay);
            }
            Ok(env)
        }
        AuthKind::Mac => match ctx.check_mac(&link_key, &env.authenticated_bytes(), &env.auth_tag, env.seq) {
            MacCheck::Ok => Ok(env),
            MacCheck::Tamper => Err(Rejection::Tamper),
            MacCheck::Replay => Err(Rejection::Replay),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::{mac, SessionKey, SessionTable, StandardSuite};
    use crate::clock::Time;
    use crate::keyspace::Key;
    use std::collections::{BTreeMap, BTreeSet};

    struct Ctx {
        sessions: SessionTable,
        keys: BTreeMap<PeerKey, Vec<u8>>,
        refused: BTreeSet<PeerKey>,
        blocked: BTreeSet<PeerKey>,
        signed: BTreeMap<PeerKey, u64>,
        insecure: bool,
    }

    impl AuthContext for Ctx {
        fn is_blocked(&self, peer: &PeerKey) -> bool {
            self.blocked.contains(peer)
        }
        fn allow_unauthenticated(&self) -> bool {
            self.insecure
        }
        fn public_key(&mut self, peer: &PeerKey) -> KeyLookup {
            if self.refused.contains(peer) {
                return KeyLookup::Refused;
            }
            self.keys.get(peer).cloned().map_or(KeyLookup::Unknown, KeyLookup::Known)
        }
        fn verify_signature(&self, public: &[u8], msg: &[u8], sig: &[u8]) -> bool {
            StandardSuite.verify(public, msg, sig)
        }
        fn accept_signed_seq(&mut self, peer: &PeerKey, seq: u64) -> bool {
            let last = self.signed.entry(*peer).or_insert(0);
            if seq <= *last {
                return false;
            }
            *last = seq;
            true
        }
        fn check_mac(&mut self, link: &PeerKey, msg: &[u8], tag: &[u8], seq: u64) -> MacCheck {
            self.sessions.check_inbound(link, msg, tag, seq, Time::ZERO)
        }
    }

    fn addr(s: &str) -> NetAddr {
        s.parse().unwrap()
    }

    fn ctx_with_session(peer: PeerKey, secret: [u8; 32]) -> Ctx {
        let mut sessions = SessionTable::new();
        sessions.install(
            SessionKey { peer, secret, established_at: Time::ZERO, expires_at: Time::from_secs(300) },
            false,
        );
        Ctx {
            sessions,
            keys: BTreeMap::new(),
            refused: BTreeSet::new(),
            blocked: BTreeSet::new(),
            signed: BTreeMap::new(),
            insecure: false,
        }
    }

    fn mac_env(from: PeerKey, seq: u64, secret: &[u8; 32]) -> Vec<u8> {
        let mut env = Envelope::new(MsgType::Heartbeat, *from.key(), Key::from_u64(9), b"hb".to_vec());
        env.seq = seq;
        seal(&mut env, Credentials::Mac(&MacKey::new(secret))).unwrap()
    }

    #[test]
    fn mac_round_trip_and_hop_count_exclusion() {
        let a = addr("10.0.0.1:1");
        let pk = derive_key(&a);
        let mut ctx = ctx_with_session(pk, [3; 32]);
        let mut bytes = mac_env(pk, 1, &[3; 32]);
        super::super::set_hop_count(&mut bytes, 7).unwrap();
        let env = open(&bytes, a, &mut ctx).unwrap();
        assert_eq!(env.hop_count, 7);
        assert_eq!(env.auth_tag, mac(&[3; 32], &env.authenticated_bytes()).to_vec());
    }

    #[test]
    fn replay_is_rejected() {
        let a = addr("10.0.0.1:1");
        let pk = derive_key(&a);
        let mut ctx = ctx_with_session(pk, [3; 32]);
        let bytes = mac_env(pk, 5, &[3; 32]);
        assert!(open(&bytes, a, &mut ctx).is_ok());
        assert_eq!(open(&bytes, a, &mut ctx).unwrap_err(), Rejection::Replay);
        assert_eq!(open(&mac_env(pk, 4, &[3; 32]), a, &mut ctx).unwrap_err(), Rejection::Replay);
        assert!(open(&mac_env(pk, 6, &[3; 32]), a, &mut ctx).is_ok());
    }

    #[test]
    fn forged_sender_and_tampered_payload_are_rejected() {
        let victim = addr("10.0.0.1:1");
        let vk = derive_key(&victim);
        let mut ctx = ctx_with_session(vk, [3; 32]);
        // Attacker knows the layout but not the secret.
        let forged = mac_env(vk, 1, &[4; 32]);
        assert_eq!(open(&forged, victim, &mut ctx).unwrap_err(), Rejection::Tamper);
        let mut tampered = mac_env(vk, 2, &[3; 32]);
        let payload_at = super::super::HEADER_LEN;
        tampered[payload_at] ^= 1;
        assert_eq!(open(&tampered, victim, &mut ctx).unwrap_err(), Rejection::Tamper);
        // A peer with no session cannot produce a valid tag at all.
        let other = addr("10.0.0.2:1");
        let ok = mac_env(derive_key(&other), 1, &[3; 32]);
        assert_eq!(open(&ok, other, &mut ctx).unwrap_err(), Rejection::Tamper);
    }

    #[test]
    fn signatures_need_a_known_key_and_direct_sender() {
        let suite = StandardSuite;
        let kp = suite.keypair_from_seed(&[1; 32]);
        let a = addr("10.0.0.1:1");
        let pk = derive_key(&a);
        let mut ctx = ctx_with_session(derive_key(&addr("10.0.0.3:1")), [0; 32]);
        let mut env = Envelope::new(MsgType::Handshake1, *pk.key(), Key::from_u64(1), vec![1, 2]);
        env.seq = 1;
        let bytes = seal(&mut env, Credentials::Signature { suite: &suite, keypair: &kp }).unwrap();
        assert_eq!(open(&bytes, a, &mut ctx).unwrap_err(), Rejection::Pending(pk));
        ctx.keys.insert(pk, kp.public.clone());
        assert!(open(&bytes, a, &mut ctx).is_ok());
        assert_eq!(open(&bytes, a, &mut ctx).unwrap_err(), Rejection::Replay);
        // Relayed signed traffic is refused.
        let relay = addr("10.0.0.2:1");
        assert_eq!(open(&bytes, relay, &mut ctx).unwrap_err(), Rejection::Tamper);
        ctx.refused.insert(pk);
        assert_eq!(open(&bytes, a, &mut ctx).unwrap_err(), Rejection::Unauthorized);
    }

    #[test]
    fn unauthenticated_only_in_insecure_mode() {
        let a = addr("10.0.0.1:1");
        let mut ctx = ctx_with_session(derive_key(&a), [0; 32]);
        let mut env = Envelope::new(MsgType::Ping, *derive_key(&a).key(), Key::ZERO, vec![]);
        let bytes = seal(&mut env, Credentials::Unauthenticated).unwrap();
        assert_eq!(open(&bytes, a, &mut ctx).unwrap_err(), Rejection::Tamper);
        ctx.insecure = true;
        assert!(open(&bytes, a, &mut ctx).is_ok());
        ctx.blocked.insert(derive_key(&a));
        assert_eq!(open(&bytes, a, &mut ctx).unwrap_err(), Rejection::Unauthorized);
    }

    #[test]
    fn garbage_is_malformed() {
        let a = addr("10.0.0.1:1");
        let mut ctx = ctx_with_session(derive_key(&a), [0; 32]);
        assert!(matches!(open(&[1, 2, 3], a, &mut ctx), Err(Rejection::Malformed(_))));
    }
}
