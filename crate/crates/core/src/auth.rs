//! Peer identity, certificates, and message authentication.
//!
//! Peers bootstrap with public-key signatures and then switch to per-pair
//! HMAC sessions. The handshake is a signed offer carrying a fresh secret
//! sealed to the recipient's public key, followed by a signed confirm that
//! echoes a digest of the offer.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Nonce};
use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey as DhPublic, StaticSecret};

use crate::clock::Time;
use crate::keyspace::{Key, PeerKey, KEY_LEN};
use crate::wire::{AuthKind, Envelope, MsgType, WireError};

pub const SESSION_SECRET_LEN: usize = 32;
pub const MAC_TAG_LEN: usize = 32;

/// Default lifetime of a session secret.
pub const DEFAULT_SESSION_LIFETIME: Duration = Duration::from_secs(300);

/// Fraction of the lifetime after which the initiator regenerates.
pub const REGENERATE_AT: f64 = 0.8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuthError {
    #[error("certificate does not verify under the ring authority key")]
    InvalidCertificate,
    #[error("malformed certificate: {0}")]
    MalformedCertificate(&'static str),
    #[error("malformed key material")]
    MalformedKey,
    #[error("sealed secret could not be opened")]
    Decrypt,
    #[error("handshake is stale")]
    Stale,
    #[error("handshake confirm does not match a pending offer")]
    UnexpectedConfirm,
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Opaque signing material. The layout is private to the suite that made it.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub public: Vec<u8>,
    pub private: Vec<u8>,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyPair(public={})", hex::encode(&self.public[..8.min(self.public.len())]))
    }
}

/// Signature and public-key encryption provider, fixed per ring.
///
/// Signatures must be deterministic; sealing must be IND-CCA.
pub trait CryptoSuite: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn keypair_from_seed(&self, seed: &[u8; 32]) -> KeyPair;
    fn sign(&self, kp: &KeyPair, msg: &[u8]) -> Vec<u8>;
    fn verify(&self, public: &[u8], msg: &[u8], sig: &[u8]) -> bool;
    /// Encrypts `plaintext` to the holder of `recipient_public`. Randomness
    /// comes from `ephemeral_seed` so callers control reproducibility.
    fn seal_to(
        &self,
        recipient_public: &[u8],
        plaintext: &[u8],
        ephemeral_seed: &[u8; 32],
    ) -> Result<Vec<u8>, AuthError>;
    fn open_sealed(&self, kp: &KeyPair, sealed: &[u8]) -> Result<Vec<u8>, AuthError>;

    fn generate_keypair(&self, rng: &mut dyn RngCore) -> KeyPair {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        self.keypair_from_seed(&seed)
    }
}

/// Ed25519 signatures; X25519 + HKDF-SHA256 + ChaCha20-Poly1305 sealing.
///
/// Public keys are `ed25519 verifying key || x25519 public key`.
#[derive(Debug, Default, Clone, Copy)]
pub struct StandardSuite;

impl StandardSuite {
    pub fn shared() -> Arc<dyn CryptoSuite> {
        Arc::new(StandardSuite)
    }

    fn split_public(public: &[u8]) -> Option<([u8; 32], [u8; 32])> {
        if public.len() != 64 {
            return None;
        }
        Some((public[..32].try_into().ok()?, public[32..].try_into().ok()?))
    }

    fn seal_key(shared: &[u8; 32], eph: &[u8; 32], recipient: &[u8; 32]) -> ChaCha20Poly1305 {
        let mut salt = [0u8; 64];
        salt[..32].copy_from_slice(eph);
        salt[32..].copy_from_slice(recipient);
        let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
        let mut okm = [0u8; 32];
        hk.expand(b"keeperring session seal", &mut okm).expect("32 bytes is a valid length");
        ChaCha20Poly1305::new(&okm.into())
    }
}

impl CryptoSuite for StandardSuite {
    fn name(&self) -> &'static str {
        "ed25519-x25519-chacha20poly1305"
    }

    fn keypair_from_seed(&self, seed: &[u8; 32]) -> KeyPair {
        let sign_seed: [u8; 32] = Sha256::new().chain_update(b"sign").chain_update(seed).finalize().into();
        let dh_seed: [u8; 32] = Sha256::new().chain_update(b"seal").chain_update(seed).finalize().into();
        let sk = SigningKey::from_bytes(&sign_seed);
        let dh = StaticSecret::from(dh_seed);
        let mut public = sk.verifying_key().to_bytes().to_vec();
        public.extend_from_slice(DhPublic::from(&dh).as_bytes());
        let mut private = sign_seed.to_vec();
        private.extend_from_slice(&dh_seed);
        KeyPair { public, private }
    }

    fn sign(&self, kp: &KeyPair, msg: &[u8]) -> Vec<u8> {
        let seed: [u8; 32] = kp.private[..32].try_into().expect("suite-made keypair");
        SigningKey::from_bytes(&seed).sign(msg).to_bytes().to_vec()
    }

    fn verify(&self, public: &[u8], msg: &[u8], sig: &[u8]) -> bool {
        let Some((vk, _)) = Self::split_public(public) else {
            return false;
        };
        let Ok(vk) = VerifyingKey::from_bytes(&vk) else {
            return false;
        };
        let Ok(sig) = ed25519_dalek::Signature::from_slice(sig) else {
            return false;
        };
        vk.verify(msg, &sig).is_ok()
    }

    fn seal_to(
        &self,
        recipient_public: &[u8],
        plaintext: &[u8],
        ephemeral_seed: &[u8; 32],
    ) -> Result<Vec<u8>, AuthError> {
        let (_, recipient) = Self::split_public(recipient_public).ok_or(AuthError::MalformedKey)?;
        let eph = StaticSecret::from(*ephemeral_seed);
        let eph_pub = DhPublic::from(&eph);
        let shared = eph.diffie_hellman(&DhPublic::from(recipient));
        let cipher = Self::seal_key(shared.as_bytes(), eph_pub.as_bytes(), &recipient);
        // The key is unique per ephemeral secret, so a fixed nonce is safe.
        let ct = cipher
            .encrypt(&Nonce::default(), plaintext)
            .map_err(|_| AuthError::Decrypt)?;
        let mut out = eph_pub.as_bytes().to_vec();
        out.extend_from_slice(&ct);
        Ok(out)
    }

    fn open_sealed(&self, kp: &KeyPair, sealed: &[u8]) -> Result<Vec<u8>, AuthError> {
        if sealed.len() < 32 + 16 || kp.private.len() != 64 {
            return Err(AuthError::Decrypt);
        }
        let dh_seed: [u8; 32] = kp.private[32..].try_into().map_err(|_| AuthError::MalformedKey)?;
        let dh = StaticSecret::from(dh_seed);
        let recipient = DhPublic::from(&dh);
        let eph: [u8; 32] = sealed[..32].try_into().expect("checked length");
        let shared = dh.diffie_hellman(&DhPublic::from(eph));
        let cipher = Self::seal_key(shared.as_bytes(), &eph, recipient.as_bytes());
        cipher
            .decrypt(&Nonce::default(), &sealed[32..])
            .map_err(|_| AuthError::Decrypt)
    }
}

type HmacSha256 = Hmac<Sha256>;

/// A keyed HMAC state, prepared once per session.
#[derive(Clone)]
pub struct MacKey(HmacSha256);

impl MacKey {
    pub fn new(secret: &[u8; SESSION_SECRET_LEN]) -> Self {
        MacKey(<HmacSha256 as Mac>::new_from_slice(secret).expect("hmac accepts any key length"))
    }

    pub fn tag(&self, msg: &[u8]) -> [u8; MAC_TAG_LEN] {
        let mut m = self.0.clone();
        m.update(msg);
        m.finalize().into_bytes().into()
    }

    /// Constant-time comparison.
    pub fn verify(&self, msg: &[u8], tag: &[u8]) -> bool {
        let mut m = self.0.clone();
        m.update(msg);
        m.verify_slice(tag).is_ok()
    }
}

impl fmt::Debug for MacKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("MacKey(..)")
    }
}

pub fn mac(secret: &[u8; SESSION_SECRET_LEN], msg: &[u8]) -> [u8; MAC_TAG_LEN] {
    MacKey::new(secret).tag(msg)
}

pub fn verify_mac(secret: &[u8; SESSION_SECRET_LEN], msg: &[u8], tag: &[u8]) -> bool {
    MacKey::new(secret).verify(msg, tag)
}

/// Authority-signed binding of a peer key to its public key.
#[derive(Clone, PartialEq, Eq)]
pub struct Certificate {
    pub peer_key: PeerKey,
    pub public_key: Vec<u8>,
    pub serial: u64,
    pub authority_sig: Vec<u8>,
}

impl fmt::Debug for Certificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Certificate")
            .field("peer_key", &self.peer_key)
            .field("serial", &self.serial)
            .finish()
    }
}

fn put_field(out: &mut Vec<u8>, field: &[u8]) {
    out.extend_from_slice(&(field.len() as u16).to_be_bytes());
    out.extend_from_slice(field);
}

fn take_field<'a>(bytes: &'a [u8], at: &mut usize) -> Result<&'a [u8], AuthError> {
    let hdr = bytes
        .get(*at..*at + 2)
        .ok_or(AuthError::MalformedCertificate("truncated length"))?;
    let len = u16::from_be_bytes([hdr[0], hdr[1]]) as usize;
    *at += 2;
    let field = bytes
        .get(*at..*at + len)
        .ok_or(AuthError::MalformedCertificate("truncated field"))?;
    *at += len;
    Ok(field)
}

impl Certificate {
    /// `peer_key || public_key || serial`, the bytes the authority signs.
    pub fn signed_bytes(peer_key: &PeerKey, public_key: &[u8], serial: u64) -> Vec<u8> {
        let mut out = Vec::with_capacity(KEY_LEN + public_key.len() + 8);
        out.extend_from_slice(&peer_key.key().0);
        out.extend_from_slice(public_key);
        out.extend_from_slice(&serial.to_be_bytes());
        out
    }

    pub fn verify(&self, suite: &dyn CryptoSuite, authority_public: &[u8]) -> bool {
        let msg = Self::signed_bytes(&self.peer_key, &self.public_key, self.serial);
        suite.verify(authority_public, &msg, &self.authority_sig)
    }

    /// Binary file form: each field prefixed by a 2-byte big-endian length,
    /// in the order peer key, public key, serial, authority signature.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_field(&mut out, &self.peer_key.key().0);
        put_field(&mut out, &self.public_key);
        put_field(&mut out, &self.serial.to_be_bytes());
        put_field(&mut out, &self.authority_sig);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Certificate, AuthError> {
        let mut at = 0;
        let key = take_field(bytes, &mut at)?;
        let key = Key::from_slice(key).map_err(|_| AuthError::MalformedCertificate("peer key width"))?;
        let peer_key =
            PeerKey::try_from_key(key).map_err(|_| AuthError::MalformedCertificate("peer key not derived"))?;
        let public_key = take_field(bytes, &mut at)?.to_vec();
        let serial = take_field(bytes, &mut at)?;
        let serial: [u8; 8] = serial
            .try_into()
            .map_err(|_| AuthError::MalformedCertificate("serial width"))?;
        let authority_sig = take_field(bytes, &mut at)?.to_vec();
        if at != bytes.len() {
            return Err(AuthError::MalformedCertificate("trailing bytes"));
        }
        Ok(Certificate {
            peer_key,
            public_key,
            serial: u64::from_be_bytes(serial),
            authority_sig,
        })
    }
}

/// The ring authority: signs certificates and revocation notices.
#[derive(Debug, Clone)]
pub struct Authority {
    suite: Arc<dyn CryptoSuite>,
    keypair: KeyPair,
    next_serial: u64,
}

impl Authority {
    pub fn new(suite: Arc<dyn CryptoSuite>, keypair: KeyPair) -> Self {
        Authority { suite, keypair, next_serial: 1 }
    }

    pub fn public_key(&self) -> &[u8] {
        &self.keypair.public
    }

    pub fn keypair(&self) -> &KeyPair {
        &self.keypair
    }

    pub fn suite(&self) -> &Arc<dyn CryptoSuite> {
        &self.suite
    }

    pub fn issue(&mut self, peer_key: PeerKey, public_key: Vec<u8>) -> Certificate {
        let serial = self.next_serial;
        self.next_serial += 1;
        let msg = Certificate::signed_bytes(&peer_key, &public_key, serial);
        let authority_sig = self.suite.sign(&self.keypair, &msg);
        Certificate { peer_key, public_key, serial, authority_sig }
    }

    pub fn sign(&self, msg: &[u8]) -> Vec<u8> {
        self.suite.sign(&self.keypair, msg)
    }
}

/// A peer's own credentials.
#[derive(Debug, Clone)]
pub struct Identity {
    pub peer_key: PeerKey,
    pub keypair: KeyPair,
    pub certificate: Certificate,
}

#[derive(Clone, PartialEq, Eq)]
pub struct SessionKey {
    pub peer: PeerKey,
    pub secret: [u8; SESSION_SECRET_LEN],
    pub established_at: Time,
    pub expires_at: Time,
}

impl fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionKey")
            .field("peer", &self.peer)
            .field("established_at", &self.established_at)
            .field("expires_at", &self.expires_at)
            .finish_non_exhaustive()
    }
}

impl SessionKey {
    pub fn regenerate_at(&self) -> Time {
        let life = self.expires_at.0.saturating_sub(self.established_at.0);
        Time(self.established_at.0 + (life as f64 * REGENERATE_AT) as u64)
    }
}

/// Payload of a `Handshake1` message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandshakeOffer {
    pub established_at: Time,
    pub expires_at: Time,
    pub sealed_secret: Vec<u8>,
}

impl HandshakeOffer {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + self.sealed_secret.len());
        out.extend_from_slice(&self.established_at.0.to_be_bytes());
        out.extend_from_slice(&self.expires_at.0.to_be_bytes());
        put_field(&mut out, &self.sealed_secret);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() < 18 {
            return Err(WireError::Payload("handshake offer"));
        }
        let established_at = Time(u64::from_be_bytes(bytes[..8].try_into().unwrap()));
        let expires_at = Time(u64::from_be_bytes(bytes[8..16].try_into().unwrap()));
        let mut at = 16;
        let sealed = take_field(bytes, &mut at).map_err(|_| WireError::Payload("handshake offer"))?;
        if at != bytes.len() {
            return Err(WireError::Payload("handshake offer"));
        }
        Ok(HandshakeOffer { established_at, expires_at, sealed_secret: sealed.to_vec() })
    }
}

/// Payload of a `Handshake2` message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandshakeConfirm {
    pub offer_digest: [u8; 32],
}

impl HandshakeConfirm {
    pub fn encode(&self) -> Vec<u8> {
        self.offer_digest.to_vec()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let offer_digest = bytes.try_into().map_err(|_| WireError::Payload("handshake confirm"))?;
        Ok(HandshakeConfirm { offer_digest })
    }
}

pub fn offer_digest(offer: &Envelope) -> [u8; 32] {
    Sha256::digest(offer.authenticated_bytes()).into()
}

/// Signs `env` in place with the sender's key pair.
pub fn sign_envelope(suite: &dyn CryptoSuite, kp: &KeyPair, env: &mut Envelope) {
    env.auth_kind = AuthKind::Signature;
    env.auth_tag = suite.sign(kp, &env.authenticated_bytes());
}

/// Starts a session with the holder of `peer`.
///
/// Returns the new session key and a signed `Handshake1` envelope whose
/// payload carries the secret sealed to the peer's public key.
pub fn establish_session(
    suite: &dyn CryptoSuite,
    me: &Identity,
    peer: &Certificate,
    authority_public: &[u8],
    now: Time,
    lifetime: Duration,
    seq: u64,
    rng: &mut dyn RngCore,
) -> Result<(SessionKey, Envelope), AuthError> {
    if !peer.verify(suite, authority_public) {
        return Err(AuthError::InvalidCertificate);
    }
    let mut secret = [0u8; SESSION_SECRET_LEN];
    rng.fill_bytes(&mut secret);
    let mut eph = [0u8; 32];
    rng.fill_bytes(&mut eph);
    let sealed_secret = suite.seal_to(&peer.public_key, &secret, &eph)?;
    let key = SessionKey {
        peer: peer.peer_key,
        secret,
        established_at: now,
        expires_at: now + lifetime,
    };
    let offer = HandshakeOffer { established_at: now, expires_at: key.expires_at, sealed_secret };
    let mut env = Envelope::new(MsgType::Handshake1, *me.peer_key.key(), *peer.peer_key.key(), offer.encode());
    env.seq = seq;
    sign_envelope(suite, &me.keypair, &mut env);
    Ok((key, env))
}

/// Responder side: opens a verified `Handshake1` and produces the confirm.
pub fn accept_offer(
    suite: &dyn CryptoSuite,
    me: &Identity,
    offer_env: &Envelope,
    now: Time,
    max_lifetime: Duration,
    seq: u64,
) -> Result<(SessionKey, Envelope), AuthError> {
    let offer = HandshakeOffer::decode(&offer_env.payload)?;
    if now >= offer.expires_at || offer.established_at > now || offer.expires_at - offer.established_at > max_lifetime {
        return Err(AuthError::Stale);
    }
    let plain = suite.open_sealed(&me.keypair, &offer.sealed_secret)?;
    let secret: [u8; SESSION_SECRET_LEN] = plain.as_slice().try_into().map_err(|_| AuthError::Decrypt)?;
    let peer = PeerKey::try_from_key(offer_env.sender).map_err(|_| AuthError::MalformedKey)?;
    let key = SessionKey { peer, secret, established_at: offer.established_at, expires_at: offer.expires_at };
    let confirm = HandshakeConfirm { offer_digest: offer_digest(offer_env) };
    let mut env = Envelope::new(MsgType::Handshake2, *me.peer_key.key(), offer_env.sender, confirm.encode());
    env.seq = seq;
    sign_envelope(suite, &me.keypair, &mut env);
    Ok((key, env))
}

/// One direction-pair of MAC state under a single secret.
#[derive(Debug, Clone)]
pub struct Session {
    pub key: SessionKey,
    mac: MacKey,
    send_seq: u64,
    recv_seq: u64,
}

impl Session {
    pub fn new(key: SessionKey) -> Self {
        let mac = MacKey::new(&key.secret);
        Session { key, mac, send_seq: 0, recv_seq: 0 }
    }

    pub fn mac_key(&self) -> &MacKey {
        &self.mac
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacCheck {
    Ok,
    Tamper,
    Replay,
}

#[derive(Debug, Clone)]
pub struct SessionEntry {
    pub current: Session,
    pub previous: Option<Session>,
    pub initiated_by_me: bool,
}

#[derive(Debug, Clone)]
pub struct PendingOffer {
    pub key: SessionKey,
    pub digest: [u8; 32],
    pub sent_at: Time,
}

/// Session state for every peer this node talks to directly.
#[derive(Debug, Default, Clone)]
pub struct SessionTable {
    entries: BTreeMap<PeerKey, SessionEntry>,
    pending: BTreeMap<PeerKey, PendingOffer>,
}

impl SessionTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, peer: &PeerKey) -> Option<&SessionEntry> {
        self.entries.get(peer)
    }

    pub fn has_session(&self, peer: &PeerKey) -> bool {
        self.entries.contains_key(peer)
    }

    pub fn pending(&self, peer: &PeerKey) -> Option<&PendingOffer> {
        self.pending.get(peer)
    }

    pub fn set_pending(&mut self, peer: PeerKey, offer: PendingOffer) {
        self.pending.insert(peer, offer);
    }

    pub fn clear_pending(&mut self, peer: &PeerKey) -> Option<PendingOffer> {
        self.pending.remove(peer)
    }

    pub fn peers(&self) -> impl Iterator<Item = &PeerKey> {
        self.entries.keys()
    }

    pub fn pending_offers(&self) -> impl Iterator<Item = (&PeerKey, &PendingOffer)> {
        self.pending.iter()
    }

    /// Installs a fresh secret; the old one stays valid for inbound traffic
    /// until it expires. Sequence numbers restart.
    pub fn install(&mut self, key: SessionKey, initiated_by_me: bool) {
        let peer = key.peer;
        let fresh = Session::new(key);
        match self.entries.remove(&peer) {
            Some(old) => {
                self.entries.insert(
                    peer,
                    SessionEntry { current: fresh, previous: Some(old.current), initiated_by_me },
                );
            }
            None => {
                self.entries.insert(peer, SessionEntry { current: fresh, previous: None, initiated_by_me });
            }
        }
    }

    pub fn remove(&mut self, peer: &PeerKey) {
        self.entries.remove(peer);
        self.pending.remove(peer);
    }

    /// Next outbound sequence number and MAC state for `peer`.
    pub fn next_send(&mut self, peer: &PeerKey) -> Option<(u64, &MacKey)> {
        let entry = self.entries.get_mut(peer)?;
        entry.current.send_seq += 1;
        Some((entry.current.send_seq, &entry.current.mac))
    }

    /// Verifies an inbound tag against the current then the previous secret
    /// and enforces strictly increasing sequence numbers per secret.
    pub fn check_inbound(&mut self, peer: &PeerKey, msg: &[u8], tag: &[u8], seq: u64, now: Time) -> MacCheck {
        let Some(entry) = self.entries.get_mut(peer) else {
            return MacCheck::Tamper;
        };
        let mut candidates = vec![&mut entry.current];
        if let Some(prev) = entry.previous.as_mut() {
            if prev.key.expires_at > now {
                candidates.push(prev);
            }
        }
        for s in candidates {
            if s.mac.verify(msg, tag) {
                if seq <= s.recv_seq {
                    return MacCheck::Replay;
                }
                s.recv_seq = seq;
                return MacCheck::Ok;
            }
        }
        MacCheck::Tamper
    }

    /// Drops expired secrets. Returns peers whose current session expired.
    pub fn expire(&mut self, now: Time) -> Vec<PeerKey> {
        let mut dead = Vec::new();
        for (peer, entry) in self.entries.iter_mut() {
            if entry.previous.as_ref().is_some_and(|p| p.key.expires_at <= now) {
                entry.previous = None;
            }
            if entry.current.key.expires_at <= now {
                dead.push(*peer);
            }
        }
        for p in &dead {
            self.entries.remove(p);
        }
        dead
    }

    /// Sessions this node initiated that have passed their regeneration point.
    pub fn due_for_regeneration(&self, now: Time) -> Vec<PeerKey> {
        self.entries
            .iter()
            .filter(|(p, e)| e.initiated_by_me && e.current.key.regenerate_at() <= now && !self.pending.contains_key(p))
            .map(|(p, _)| *p)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyspace::{derive_key, NetAddr};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Arc<dyn CryptoSuite>, Authority, Identity, Identity, ChaCha8Rng) {
        let suite = StandardSuite::shared();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut authority = Authority::new(suite.clone(), suite.generate_keypair(&mut rng));
        let mut ident = |addr: &str| {
            let pk = derive_key(&addr.parse::<NetAddr>().unwrap());
            let kp = suite.generate_keypair(&mut rng);
            let cert = authority.issue(pk, kp.public.clone());
            Identity { peer_key: pk, keypair: kp, certificate: cert }
        };
        let a = ident("10.0.0.1:4000");
        let b = ident("10.0.0.2:4000");
        (suite, authority, a, b, ChaCha8Rng::seed_from_u64(2))
    }

    #[test]
    fn signatures_bind_key_and_message() {
        let suite = StandardSuite;
        let k1 = suite.keypair_from_seed(&[1; 32]);
        let k2 = suite.keypair_from_seed(&[2; 32]);
        let m = b"find successor";
        let sig = suite.sign(&k1, m);
        assert!(suite.verify(&k1.public, m, &sig));
        assert!(!suite.verify(&k1.public, b"find successos", &sig));
        assert!(!suite.verify(&k2.public, m, &sig));
        assert_eq!(sig, suite.sign(&k1, m), "deterministic");
    }

    #[test]
    fn sealing_round_trips_and_rejects_wrong_key() {
        let suite = StandardSuite;
        let k1 = suite.keypair_from_seed(&[1; 32]);
        let k2 = suite.keypair_from_seed(&[2; 32]);
        let sealed = suite.seal_to(&k1.public, b"secret", &[9; 32]).unwrap();
        assert_eq!(suite.open_sealed(&k1, &sealed).unwrap(), b"secret");
        assert_eq!(suite.open_sealed(&k2, &sealed), Err(AuthError::Decrypt));
        let mut bad = sealed.clone();
        *bad.last_mut().unwrap() ^= 1;
        assert_eq!(suite.open_sealed(&k1, &bad), Err(AuthError::Decrypt));
    }

    #[test]
    fn mac_examples() {
        let s = [7u8; 32];
        let m = b"payload bytes".to_vec();
        let t = mac(&s, &m);
        assert!(verify_mac(&s, &m, &t));
        let mut flipped = m.clone();
        flipped[3] ^= 0x10;
        assert!(!verify_mac(&s, &flipped, &t));
        assert!(!verify_mac(&[8u8; 32], &m, &t));
        assert!(!verify_mac(&s, &m, &t[..16]));
    }

    #[test]
    fn certificate_file_form() {
        let (suite, authority, a, _, _) = setup();
        let bytes = a.certificate.encode();
        assert_eq!(&bytes[..2], &[0, 20]);
        assert_eq!(&bytes[2..22], &a.peer_key.key().0);
        let back = Certificate::decode(&bytes).unwrap();
        assert_eq!(back, a.certificate);
        assert!(back.verify(suite.as_ref(), authority.public_key()));
        let mut forged = back.clone();
        forged.serial += 1;
        assert!(!forged.verify(suite.as_ref(), authority.public_key()));
        assert!(Certificate::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn handshake_gives_both_sides_the_same_secret() {
        let (suite, authority, a, b, mut rng) = setup();
        let now = Time::from_secs(10);
        let (ka, offer) = establish_session(
            suite.as_ref(), &a, &b.certificate, authority.public_key(), now, DEFAULT_SESSION_LIFETIME, 1, &mut rng,
        )
        .unwrap();
        assert!(suite.verify(&a.keypair.public, &offer.authenticated_bytes(), &offer.auth_tag));
        // The secret never appears in cleartext on the wire.
        let wire = offer.encode().unwrap();
        assert!(!wire.windows(32).any(|w| w == ka.secret));

        let (kb, confirm) =
            accept_offer(suite.as_ref(), &b, &offer, now + Duration::from_millis(1), DEFAULT_SESSION_LIFETIME, 1)
                .unwrap();
        assert_eq!(ka.secret, kb.secret);
        assert_eq!(kb.peer, a.peer_key);
        let c = HandshakeConfirm::decode(&confirm.payload).unwrap();
        assert_eq!(c.offer_digest, offer_digest(&offer));
        assert!(suite.verify(&b.keypair.public, &confirm.authenticated_bytes(), &confirm.auth_tag));
    }

    #[test]
    fn stale_offer_is_discarded() {
        let (suite, authority, a, b, mut rng) = setup();
        let now = Time::from_secs(10);
        let (_, offer) = establish_session(
            suite.as_ref(), &a, &b.certificate, authority.public_key(), now, DEFAULT_SESSION_LIFETIME, 1, &mut rng,
        )
        .unwrap();
        let later = now + DEFAULT_SESSION_LIFETIME + Duration::from_secs(1);
        assert_eq!(
            accept_offer(suite.as_ref(), &b, &offer, later, DEFAULT_SESSION_LIFETIME, 2).unwrap_err(),
            AuthError::Stale
        );
    }

    #[test]
    fn uncertified_peer_is_refused() {
        let (suite, authority, a, mut b, mut rng) = setup();
        b.certificate.authority_sig[0] ^= 1;
        let err = establish_session(
            suite.as_ref(), &a, &b.certificate, authority.public_key(), Time::ZERO, DEFAULT_SESSION_LIFETIME, 1, &mut rng,
        )
        .unwrap_err();
        assert_eq!(err, AuthError::InvalidCertificate);
    }

    #[test]
    fn session_table_enforces_monotonic_seq_and_keeps_previous_secret() {
        let peer = derive_key(&"10.0.0.9:1".parse().unwrap());
        let k1 = SessionKey { peer, secret: [1; 32], established_at: Time::ZERO, expires_at: Time::from_secs(300) };
        let mut t = SessionTable::new();
        t.install(k1.clone(), true);
        let msg = b"m";
        let tag = mac(&k1.secret, msg);
        assert_eq!(t.check_inbound(&peer, msg, &tag, 1, Time::ZERO), MacCheck::Ok);
        assert_eq!(t.check_inbound(&peer, msg, &tag, 1, Time::ZERO), MacCheck::Replay);
        assert_eq!(t.check_inbound(&peer, msg, &tag, 2, Time::ZERO), MacCheck::Ok);

        let k2 = SessionKey { secret: [2; 32], ..k1.clone() };
        t.install(k2.clone(), true);
        // Old secret still accepted until it expires.
        assert_eq!(t.check_inbound(&peer, msg, &tag, 3, Time::from_secs(1)), MacCheck::Ok);
        let tag2 = mac(&k2.secret, msg);
        assert_eq!(t.check_inbound(&peer, msg, &tag2, 1, Time::from_secs(1)), MacCheck::Ok);
        assert_eq!(t.check_inbound(&peer, msg, &[0; 32], 9, Time::from_secs(1)), MacCheck::Tamper);
        assert_eq!(t.due_for_regeneration(Time::from_secs(239)), vec![]);
        assert_eq!(t.due_for_regeneration(Time::from_secs(240)), vec![peer]);
        assert_eq!(t.expire(Time::from_secs(300)), vec![peer]);
        assert!(!t.has_session(&peer));
    }
}
