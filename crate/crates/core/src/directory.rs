//! Authorization directory: who may participate in a ring.
//!
//! A ring domain lists one certificate per authorized peer key. Peers keep
//! a cache with positive entries (kept until revocation) and negative entries
//! (kept for a fixed TTL) so unknown senders cost at most one lookup per TTL.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use thiserror::Error;

use crate::auth::{Authority, Certificate, CryptoSuite};
use crate::clock::Time;
use crate::keyspace::{Key, PeerKey, KEY_LEN};

pub const DEFAULT_NEGATIVE_TTL: Duration = Duration::from_secs(60);

/// Distinct witnesses the authority needs before it revokes a peer.
pub const REVOCATION_WITNESSES: usize = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DirectoryError {
    #[error("no record for {0} in the ring domain")]
    UnknownKey(PeerKey),
    #[error("a record for {0} already exists")]
    Duplicate(PeerKey),
    #[error("certificate is for a different peer key")]
    KeyMismatch,
    #[error("seed file line {line}: {reason}")]
    SeedFile { line: usize, reason: String },
    #[error("evidence for {0} lacks enough independent witnesses")]
    InsufficientEvidence(PeerKey),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectoryRecord {
    pub ring_domain: String,
    pub peer_key: PeerKey,
    pub certificate: Certificate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LookupResult {
    Found(Certificate),
    Absent,
    Unreachable,
}

pub trait Directory: fmt::Debug {
    fn lookup(&self, ring_domain: &str, peer_key: &PeerKey) -> LookupResult;
}

/// Map-backed directory for simulation and tests.
#[derive(Debug, Clone, Default)]
pub struct InMemoryDirectory {
    records: BTreeMap<(String, PeerKey), DirectoryRecord>,
    unreachable: bool,
}

impl InMemoryDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, record: DirectoryRecord) -> Result<(), DirectoryError> {
        if record.certificate.peer_key != record.peer_key {
            return Err(DirectoryError::KeyMismatch);
        }
        let k = (record.ring_domain.clone(), record.peer_key);
        if self.records.contains_key(&k) {
            return Err(DirectoryError::Duplicate(record.peer_key));
        }
        self.records.insert(k, record);
        Ok(())
    }

    pub fn remove(&mut self, ring_domain: &str, peer_key: &PeerKey) -> Option<DirectoryRecord> {
        self.records.remove(&(ring_domain.to_string(), *peer_key))
    }

    pub fn set_reachable(&mut self, reachable: bool) {
        self.unreachable = !reachable;
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &DirectoryRecord> {
        self.records.values()
    }

    /// Parses `<ring_domain> <hex peer key> <base64 certificate>` lines.
    /// Blank lines and `#` comments are skipped.
    pub fn from_seed_file(text: &str) -> Result<Self, DirectoryError> {
        let mut dir = InMemoryDirectory::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| DirectoryError::SeedFile { line: i + 1, reason: reason.to_string() };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(bad("expected 3 fields"));
            }
            let key: Key = fields[1].parse().map_err(|_| bad("bad hex key"))?;
            let peer_key = PeerKey::try_from_key(key).map_err(|_| bad("key is not address-derived"))?;
            let der = B64.decode(fields[2]).map_err(|_| bad("bad base64"))?;
            let certificate = Certificate::decode(&der).map_err(|e| bad(&e.to_string()))?;
            dir.register(DirectoryRecord { ring_domain: fields[0].to_string(), peer_key, certificate })
                .map_err(|e| bad(&e.to_string()))?;
        }
        Ok(dir)
    }

    pub fn to_seed_file(&self) -> String {
        let mut out = String::new();
        for r in self.records.values() {
            out.push_str(&format!("{} {} {}\n", r.ring_domain, r.peer_key, B64.encode(r.certificate.encode())));
        }
        out
    }
}

impl Directory for InMemoryDirectory {
    fn lookup(&self, ring_domain: &str, peer_key: &PeerKey) -> LookupResult {
        if self.unreachable {
            return LookupResult::Unreachable;
        }
        match self.records.get(&(ring_domain.to_string(), *peer_key)) {
            Some(r) => LookupResult::Found(r.certificate.clone()),
            None => LookupResult::Absent,
        }
    }
}

/// TXT-record source for [`ResolverDirectory`].
pub trait TxtResolver: fmt::Debug {
    /// `Ok(records)` for an answered query (possibly empty), `Err` when the
    /// name server cannot be reached.
    fn txt(&self, name: &str) -> Result<Vec<String>, String>;
}

/// Looks up `<hex key>.<ring domain>` and expects a base64 certificate.
#[derive(Debug)]
pub struct ResolverDirectory<R: TxtResolver> {
    resolver: R,
}

impl<R: TxtResolver> ResolverDirectory<R> {
    pub fn new(resolver: R) -> Self {
        ResolverDirectory { resolver }
    }

    pub fn record_name(ring_domain: &str, peer_key: &PeerKey) -> String {
        format!("{}.{}", peer_key, ring_domain)
    }
}

impl<R: TxtResolver> Directory for ResolverDirectory<R> {
    fn lookup(&self, ring_domain: &str, peer_key: &PeerKey) -> LookupResult {
        let records = match self.resolver.txt(&Self::record_name(ring_domain, peer_key)) {
            Ok(r) => r,
            Err(_) => return LookupResult::Unreachable,
        };
        records
            .iter()
            .filter_map(|txt| B64.decode(txt.trim()).ok())
            .filter_map(|der| Certificate::decode(&der).ok())
            .find(|c| c.peer_key == *peer_key)
            .map_or(LookupResult::Absent, LookupResult::Found)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheStatus<'a> {
    Hit(&'a Certificate),
    Refused,
    Miss,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Authorization {
    Authorized(Certificate),
    Refused,
}

#[derive(Debug, Clone)]
pub struct AuthCache {
    positive: BTreeMap<PeerKey, (Certificate, Time)>,
    negative: BTreeMap<PeerKey, Time>,
    negative_ttl: Duration,
}

impl Default for AuthCache {
    fn default() -> Self {
        AuthCache::new(DEFAULT_NEGATIVE_TTL)
    }
}

impl AuthCache {
    pub fn new(negative_ttl: Duration) -> Self {
        AuthCache { positive: BTreeMap::new(), negative: BTreeMap::new(), negative_ttl }
    }

    pub fn check(&self, peer: &PeerKey, now: Time) -> CacheStatus<'_> {
        if let Some((cert, _)) = self.positive.get(peer) {
            return CacheStatus::Hit(cert);
        }
        match self.negative.get(peer) {
            Some(exp) if *exp > now => CacheStatus::Refused,
            _ => CacheStatus::Miss,
        }
    }

    /// Stores a lookup outcome. Unreachable results leave the cache as is.
    pub fn record(&mut self, peer: PeerKey, result: &LookupResult, now: Time) {
        match result {
            LookupResult::Found(cert) => {
                self.negative.remove(&peer);
                self.positive.insert(peer, (cert.clone(), now));
            }
            LookupResult::Absent => {
                self.positive.remove(&peer);
                self.negative.insert(peer, now + self.negative_ttl);
            }
            LookupResult::Unreachable => {}
        }
    }

    pub fn add_negative(&mut self, peer: PeerKey, now: Time) {
        self.record(peer, &LookupResult::Absent, now);
    }

    /// Applies a revocation: the key is dropped and refused from now on.
    pub fn revoke(&mut self, peer: &PeerKey, now: Time) {
        self.positive.remove(peer);
        self.negative.insert(*peer, now + self.negative_ttl);
    }

    pub fn certificate(&self, peer: &PeerKey) -> Option<&Certificate> {
        self.positive.get(peer).map(|(c, _)| c)
    }

    pub fn contains_positive(&self, peer: &PeerKey) -> bool {
        self.positive.contains_key(peer)
    }

    pub fn contains_negative(&self, peer: &PeerKey, now: Time) -> bool {
        matches!(self.negative.get(peer), Some(e) if *e > now)
    }

    pub fn positive_keys(&self) -> impl Iterator<Item = &PeerKey> {
        self.positive.keys()
    }

    pub fn purge_expired(&mut self, now: Time) {
        self.negative.retain(|_, exp| *exp > now);
    }
}

/// Cache-first authorization. `lookup_fn` runs only on a cache miss.
pub fn authorize_sender(
    cache: &mut AuthCache,
    peer: &PeerKey,
    now: Time,
    mut lookup_fn: impl FnMut(&PeerKey) -> LookupResult,
) -> Authorization {
    match cache.check(peer, now) {
        CacheStatus::Hit(c) => return Authorization::Authorized(c.clone()),
        CacheStatus::Refused => return Authorization::Refused,
        CacheStatus::Miss => {}
    }
    let result = lookup_fn(peer);
    cache.record(*peer, &result, now);
    match result {
        LookupResult::Found(c) => Authorization::Authorized(c),
        LookupResult::Absent | LookupResult::Unreachable => Authorization::Refused,
    }
}

/// Authority-signed statement that a peer key is no longer authorized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevocationNotice {
    pub peer_key: PeerKey,
    pub serial: u64,
    pub authority_sig: Vec<u8>,
}

impl RevocationNotice {
    pub fn signed_bytes(peer_key: &PeerKey, serial: u64) -> Vec<u8> {
        let mut out = b"revoke".to_vec();
        out.extend_from_slice(&peer_key.key().0);
        out.extend_from_slice(&serial.to_be_bytes());
        out
    }

    pub fn verify(&self, suite: &dyn CryptoSuite, authority_public: &[u8]) -> bool {
        suite.verify(authority_public, &Self::signed_bytes(&self.peer_key, self.serial), &self.authority_sig)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(KEY_LEN + 10 + self.authority_sig.len());
        out.extend_from_slice(&self.peer_key.key().0);
        out.extend_from_slice(&self.serial.to_be_bytes());
        out.extend_from_slice(&(self.authority_sig.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.authority_sig);
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < KEY_LEN + 10 {
            return None;
        }
        let key = Key::from_slice(&bytes[..KEY_LEN]).ok()?;
        let peer_key = PeerKey::try_from_key(key).ok()?;
        let serial = u64::from_be_bytes(bytes[KEY_LEN..KEY_LEN + 8].try_into().ok()?);
        let len = u16::from_be_bytes([bytes[KEY_LEN + 8], bytes[KEY_LEN + 9]]) as usize;
        let sig = bytes.get(KEY_LEN + 10..)?;
        if sig.len() != len {
            return None;
        }
        Some(RevocationNotice { peer_key, serial, authority_sig: sig.to_vec() })
    }

    /// Flood deduplication key.
    pub fn id(&self) -> (PeerKey, u64) {
        (self.peer_key, self.serial)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvidenceKind {
    InconsistentGroup,
    FraudulentFindSuccessor,
    Structural,
}

/// A peer's case against another peer, sent to the authority.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvidenceReport {
    pub accused: PeerKey,
    pub reporter: PeerKey,
    pub kind: EvidenceKind,
    /// Peers whose observations contradict the accused.
    pub witnesses: Vec<PeerKey>,
}

impl EvidenceReport {
    pub fn independent_witnesses(&self) -> usize {
        let mut w: Vec<&PeerKey> = self.witnesses.iter().filter(|w| **w != self.accused).collect();
        w.sort();
        w.dedup();
        w.len()
    }
}

/// The ring's certificate authority together with its directory zone.
#[derive(Debug, Clone)]
pub struct RingAuthority {
    pub ring_domain: String,
    authority: Authority,
    directory: InMemoryDirectory,
}

impl RingAuthority {
    pub fn new(ring_domain: impl Into<String>, authority: Authority) -> Self {
        RingAuthority { ring_domain: ring_domain.into(), authority, directory: InMemoryDirectory::new() }
    }

    pub fn authority(&self) -> &Authority {
        &self.authority
    }

    pub fn directory(&self) -> &InMemoryDirectory {
        &self.directory
    }

    pub fn directory_mut(&mut self) -> &mut InMemoryDirectory {
        &mut self.directory
    }

    /// Issues a certificate and publishes it in the ring domain.
    pub fn enroll(&mut self, peer_key: PeerKey, public_key: Vec<u8>) -> Result<Certificate, DirectoryError> {
        let certificate = self.authority.issue(peer_key, public_key);
        self.directory.register(DirectoryRecord {
            ring_domain: self.ring_domain.clone(),
            peer_key,
            certificate: certificate.clone(),
        })?;
        Ok(certificate)
    }

    pub fn lookup(&self, peer_key: &PeerKey) -> LookupResult {
        self.directory.lookup(&self.ring_domain, peer_key)
    }

    pub fn revoke(&mut self, peer_key: &PeerKey) -> Result<RevocationNotice, DirectoryError> {
        let record = self
            .directory
            .remove(&self.ring_domain, peer_key)
            .ok_or(DirectoryError::UnknownKey(*peer_key))?;
        let serial = record.certificate.serial;
        let authority_sig = self.authority.sign(&RevocationNotice::signed_bytes(peer_key, serial));
        Ok(RevocationNotice { peer_key: *peer_key, serial, authority_sig })
    }

    /// Revokes the accused when the report carries enough witnesses.
    pub fn consider(&mut self, report: &EvidenceReport) -> Result<RevocationNotice, DirectoryError> {
        if report.independent_witnesses() < REVOCATION_WITNESSES {
            return Err(DirectoryError::InsufficientEvidence(report.accused));
        }
        self.revoke(&report.accused)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::StandardSuite;
    use crate::keyspace::{derive_key, NetAddr};
    use std::cell::Cell;

    fn pk(i: u8) -> PeerKey {
        derive_key(&NetAddr::new([10, 0, 0, i].into(), 4000))
    }

    fn authority() -> RingAuthority {
        let suite = StandardSuite::shared();
        let kp = suite.keypair_from_seed(&[42; 32]);
        let mut ra = RingAuthority::new("ring.test", Authority::new(suite.clone(), kp));
        for i in 1..=3 {
            let kp = suite.keypair_from_seed(&[i; 32]);
            ra.enroll(pk(i), kp.public).unwrap();
        }
        ra
    }

    #[test]
    fn lookup_registered_absent_and_revoked() {
        let mut ra = authority();
        assert!(matches!(ra.lookup(&pk(1)), LookupResult::Found(c) if c.peer_key == pk(1)));
        assert_eq!(ra.lookup(&pk(9)), LookupResult::Absent);
        ra.revoke(&pk(1)).unwrap();
        assert_eq!(ra.lookup(&pk(1)), LookupResult::Absent);
        assert_eq!(ra.revoke(&pk(1)), Err(DirectoryError::UnknownKey(pk(1))));
    }

    #[test]
    fn unreachable_directory_is_distinct() {
        let mut ra = authority();
        ra.directory_mut().set_reachable(false);
        assert_eq!(ra.lookup(&pk(1)), LookupResult::Unreachable);
    }

    #[test]
    fn negative_entry_suppresses_lookups_until_expiry() {
        let mut ra = authority();
        let mut cache = AuthCache::new(Duration::from_secs(60));
        let n = Cell::new(0);
        let mut look = |k: &PeerKey| {
            n.set(n.get() + 1);
            ra.lookup(k)
        };
        let t0 = Time::from_secs(1);
        assert_eq!(authorize_sender(&mut cache, &pk(9), t0, &mut look), Authorization::Refused);
        assert_eq!(n.get(), 1);
        assert_eq!(authorize_sender(&mut cache, &pk(9), Time::from_secs(30), &mut look), Authorization::Refused);
        assert_eq!(n.get(), 1, "negative hit performs no lookup");

        let suite = StandardSuite::shared();
        ra.enroll(pk(9), suite.keypair_from_seed(&[9; 32]).public).unwrap();
        let mut look = |k: &PeerKey| {
            n.set(n.get() + 1);
            ra.lookup(k)
        };
        let later = Time::from_secs(62);
        assert!(matches!(authorize_sender(&mut cache, &pk(9), later, &mut look), Authorization::Authorized(_)));
        assert_eq!(n.get(), 2);
        assert!(matches!(authorize_sender(&mut cache, &pk(9), later, &mut look), Authorization::Authorized(_)));
        assert_eq!(n.get(), 2, "positive hit performs no lookup");
        assert!(cache.contains_positive(&pk(9)) && !cache.contains_negative(&pk(9), later));
    }

    #[test]
    fn unreachable_lookup_creates_no_negative_entry() {
        let mut cache = AuthCache::default();
        let r = authorize_sender(&mut cache, &pk(1), Time::ZERO, |_| LookupResult::Unreachable);
        assert_eq!(r, Authorization::Refused);
        assert_eq!(cache.check(&pk(1), Time::ZERO), CacheStatus::Miss);
    }

    #[test]
    fn revocation_notice_verifies_and_round_trips() {
        let mut ra = authority();
        let suite = StandardSuite;
        let notice = ra.revoke(&pk(2)).unwrap();
        assert!(notice.verify(&suite, ra.authority().public_key()));
        let back = RevocationNotice::decode(&notice.encode()).unwrap();
        assert_eq!(back, notice);
        let mut forged = notice.clone();
        forged.peer_key = pk(3);
        assert!(!forged.verify(&suite, ra.authority().public_key()));
    }

    #[test]
    fn single_witness_evidence_is_refused() {
        let mut ra = authority();
        let mut report = EvidenceReport {
            accused: pk(1),
            reporter: pk(2),
            kind: EvidenceKind::InconsistentGroup,
            witnesses: vec![pk(2), pk(2), pk(1)],
        };
        assert_eq!(ra.consider(&report), Err(DirectoryError::InsufficientEvidence(pk(1))));
        report.witnesses.push(pk(3));
        assert!(ra.consider(&report).is_ok());
        assert_eq!(ra.lookup(&pk(1)), LookupResult::Absent);
    }

    #[test]
    fn seed_file_round_trip() {
        let ra = authority();
        let text = ra.directory().to_seed_file();
        assert_eq!(text.lines().count(), 3);
        let back = InMemoryDirectory::from_seed_file(&format!("# comment\n\n{text}")).unwrap();
        assert_eq!(back.lookup("ring.test", &pk(1)), ra.lookup(&pk(1)));
        let err = InMemoryDirectory::from_seed_file("ring.test zz abc").unwrap_err();
        assert!(matches!(err, DirectoryError::SeedFile { line: 1, .. }));
    }

    #[derive(Debug)]
    struct FakeTxt(BTreeMap<String, Vec<String>>, bool);

    impl TxtResolver for FakeTxt {
        fn txt(&self, name: &str) -> Result<Vec<String>, String> {
            if !self.1 {
                return Err("timeout".into());
            }
            Ok(self.0.get(name).cloned().unwrap_or_default())
        }
    }

    #[test]
    fn resolver_directory_reads_txt_records() {
        let ra = authority();
        let LookupResult::Found(cert) = ra.lookup(&pk(1)) else { panic!() };
        let mut zone = BTreeMap::new();
        zone.insert(
            ResolverDirectory::<FakeTxt>::record_name("ring.test", &pk(1)),
            vec!["not base64!".into(), B64.encode(cert.encode())],
        );
        let dir = ResolverDirectory::new(FakeTxt(zone.clone(), true));
        assert_eq!(dir.lookup("ring.test", &pk(1)), LookupResult::Found(cert));
        assert_eq!(dir.lookup("ring.test", &pk(2)), LookupResult::Absent);
        let down = ResolverDirectory::new(FakeTxt(zone, false));
        assert_eq!(down.lookup("ring.test", &pk(1)), LookupResult::Unreachable);
    }
}
