//! One peer's protocol state machine.
//!
//! A node is driven entirely through [`Node::handle`]: the host feeds it
//! datagrams, timer expiries, directory answers and application commands,
//! and carries out the returned [`Output`]. The simulator and the UDP
//! daemon are both hosts, so neither has a side door into the handlers:
//! every datagram goes through [`open`] first.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};
use std::mem;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::auth::{
    accept_offer, establish_session, offer_digest, Certificate, CryptoSuite, HandshakeConfirm, Identity, MacCheck,
    PendingOffer, SessionTable, DEFAULT_SESSION_LIFETIME,
};
use crate::clock::Time;
use crate::directory::{
    AuthCache, CacheStatus, EvidenceKind, EvidenceReport, LookupResult, RevocationNotice, DEFAULT_NEGATIVE_TTL,
};
use crate::keyspace::{derive_key, dist_cw, in_range_open, in_range_open_closed, Key, NetAddr, PeerKey};
use crate::routing::{RouteClass, RouteView, RoutingMode};
use crate::wire::{open, seal, AuthContext, Credentials, Envelope, KeyLookup, MsgType, Rejection, MAX_DATAGRAM};

use super::adversary::{Behavior, Fabrication, MisrouteStrategy, Mutation};
use super::fingers::FingerTable;
use super::group::{predecessors_in, successors_in, validate_group_size, window_around, GroupList, DEFAULT_GROUP_SIZE};
use super::messages::{Message, Potato, QueryPurpose};
use super::policing::{check_group_consistency, corroborates, Evidence, GroupCheck, SuspicionLedger, SuspicionVerdict};
use super::snapshot::{FingerLine, Snapshot};

/// Verifiers asked about one find-successor reply.
const VERIFIERS_PER_CLAIM: usize = 2;

#[derive(Clone, Debug)]
pub struct NodeConfig {
    pub group_size: usize,
    pub secure: bool,
    pub routing_mode: RoutingMode,
    pub tick: Duration,
    pub probe_timeout: Duration,
    pub max_misses: u32,
    pub hop_limit: u8,
    pub session_lifetime: Duration,
    pub negative_ttl: Duration,
    /// Probability that a finger-refresh reply is cross-checked.
    pub verify_probability: f64,
    /// How long an unconfirmed strike is remembered.
    pub strike_ttl: Duration,
    pub query_timeout: Duration,
    pub join_backoff: Duration,
    pub join_attempts: u32,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            group_size: DEFAULT_GROUP_SIZE,
            secure: true,
            routing_mode: RoutingMode::Deterministic,
            tick: Duration::from_secs(1),
            probe_timeout: Duration::from_millis(250),
            max_misses: 3,
            hop_limit: 32,
            session_lifetime: DEFAULT_SESSION_LIFETIME,
            negative_ttl: DEFAULT_NEGATIVE_TTL,
            verify_probability: 1.0,
            strike_ttl: Duration::from_secs(30),
            query_timeout: Duration::from_millis(500),
            join_backoff: Duration::from_secs(1),
            join_attempts: 5,
        }
    }
}

/// Secure-mode credentials.
#[derive(Clone, Debug)]
pub struct NodeCredentials {
    pub identity: Identity,
    pub authority_public: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TimerKind {
    Tick,
    ProbeCheck,
    JoinRetry,
    VerifyTimeout(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AppCommand {
    /// Sends `count` pings to the peer responsible for `target`, one after
    /// another, each waiting for the previous echo.
    Ping { burst: u64, target: Key, count: u32 },
    /// Asks the peer responsible for `target` to stream `count` packets back.
    Throughput { id: u64, target: Key, count: u32 },
    InjectPotato { id: u64, min_residency: Duration, ttl: u32 },
    Send { id: u64, dest: Key, trace: bool },
    Lookup { key: Key },
}

#[derive(Clone, Debug)]
pub enum Input {
    Start { bootstrap: Option<NetAddr> },
    Datagram { from: NetAddr, bytes: Vec<u8>, token: u64 },
    Timer(TimerKind),
    Directory { peer: PeerKey, result: LookupResult },
    /// A revocation issued by the authority in answer to this node's report.
    Revoked(RevocationNotice),
    App(AppCommand),
    /// Suspends periodic maintenance (benchmarks run on a frozen ring).
    SetQuiet(bool),
    Leave,
}

/// Cryptographic work performed, for CPU cost accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CryptoOps {
    pub sign: u32,
    pub verify: u32,
    pub mac: u32,
    pub pke: u32,
}

impl CryptoOps {
    pub fn add(&mut self, o: CryptoOps) {
        self.sign += o.sign;
        self.verify += o.verify;
        self.mac += o.mac;
        self.pke += o.pke;
    }
}

#[derive(Clone, Debug)]
pub struct Send {
    pub to: NetAddr,
    pub bytes: Vec<u8>,
    pub msg_type: MsgType,
    /// Set when the datagram forges another peer's address.
    pub spoofed_from: Option<NetAddr>,
    /// Work done since the previous send, including sealing this one.
    pub ops: CryptoOps,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectKind {
    Tamper,
    Unauthorized,
    Replay,
    Malformed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Receipt {
    Delivered,
    Rejected(RejectKind),
    HopLimit,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeEvent {
    Joined,
    /// The initial finger schedule finished.
    JoinComplete,
    JoinFailed,
    TableChanged,
    FingerCycle { count: u64 },
    PeerRemoved { peer: PeerKey },
    Suspected { accused: PeerKey, kind: EvidenceKind },
    Convicted { accused: PeerKey, kind: EvidenceKind, witnesses: Vec<PeerKey> },
    RevocationApplied { peer: PeerKey },
    PingBurstDone { burst: u64, elapsed: Duration, count: u32, hops: u32 },
    ThroughputDone { id: u64, first: Time, last: Time, received: u32 },
    PotatoMeasured { id: u64, passes: u64, residency: Duration },
    AppDelivered { id: u64, route: Vec<PeerKey>, hops: u8 },
    LookupDone { key: Key, group: Option<GroupList> },
}

#[derive(Debug, Default)]
pub struct Output {
    pub sends: Vec<Send>,
    pub lookups: Vec<PeerKey>,
    pub timers: Vec<(Duration, TimerKind)>,
    pub reports: Vec<EvidenceReport>,
    pub events: Vec<NodeEvent>,
    pub receipts: Vec<(u64, Receipt)>,
    /// Work done after the last send.
    pub tail_ops: CryptoOps,
}

#[derive(Clone, Debug)]
enum Query {
    Join,
    Finger { index: usize, rechallenge: bool },
    Lookup,
}

#[derive(Clone, Debug)]
enum GroupQueryPurpose {
    /// Routine exchange, join notification or confirmation of a new peer.
    Exchange,
    /// Asking `w` whether `fabricated` belongs between its neighbours.
    Witness { accused: PeerKey, fabricated: PeerKey, remaining: Vec<PeerKey> },
}

#[derive(Clone, Debug)]
struct Verification {
    index: usize,
    rechallenge: bool,
    query: Key,
    responder: PeerKey,
    claimed: GroupList,
    tried: Vec<PeerKey>,
}

#[derive(Clone, Debug)]
struct Probe {
    nonce: Option<u64>,
    misses: u32,
}

#[derive(Clone, Debug)]
struct Burst {
    target: Key,
    count: u32,
    done: u32,
    started: Time,
}

#[derive(Clone, Debug)]
struct Stream {
    expected: u32,
    received: u32,
    first: Time,
    last: Time,
}

#[derive(Clone, Debug)]
struct Inbound {
    from: NetAddr,
    bytes: Vec<u8>,
    token: u64,
}

#[derive(Clone, Debug)]
pub struct Node {
    cfg: NodeConfig,
    me: PeerKey,
    addr: NetAddr,
    creds: Option<NodeCredentials>,
    suite: Arc<dyn CryptoSuite>,
    behavior: Behavior,
    rng: ChaCha8Rng,
    now: Time,
    ops: CryptoOps,

    started: bool,
    joined: bool,
    join_complete: bool,
    left: bool,
    quiet: bool,
    bootstrap: Option<NetAddr>,
    join_attempt: u32,
    join_waiting: BTreeSet<PeerKey>,

    view: BTreeSet<PeerKey>,
    group: GroupList,
    predecessor: Option<PeerKey>,
    successor: Option<PeerKey>,
    fingers: FingerTable,
    finger_cursor: usize,
    finger_inflight: Option<(u64, Time)>,
    cycle_started: Time,
    cycles: u64,
    last_full_cycle: Option<(Time, Time)>,
    member_groups: BTreeMap<PeerKey, GroupList>,
    exchange_cursor: usize,
    probes: BTreeMap<PeerKey, Probe>,
    confirming: BTreeMap<PeerKey, Time>,

    sessions: SessionTable,
    signed_seen: BTreeMap<PeerKey, u64>,
    signed_seq: u64,
    cache: AuthCache,
    blacklist: BTreeSet<PeerKey>,
    ledger: SuspicionLedger,
    outbox: BTreeMap<PeerKey, Vec<Envelope>>,
    inbox: BTreeMap<PeerKey, Vec<Inbound>>,
    lookups_inflight: BTreeSet<PeerKey>,
    group_checks: BTreeMap<PeerKey, Vec<(PeerKey, GroupList)>>,
    seen_revocations: BTreeSet<(PeerKey, u64)>,

    next_nonce: u64,
    queries: BTreeMap<u64, Query>,
    group_queries: BTreeMap<u64, GroupQueryPurpose>,
    verifications: BTreeMap<u64, Verification>,
    rechallenges: Vec<(PeerKey, usize, Key)>,
    fabricated: BTreeMap<PeerKey, PeerKey>,

    bursts: BTreeMap<u64, Burst>,
    streams: BTreeMap<u64, Stream>,
    potatoes_held: BTreeMap<u64, Potato>,
    potatoes_incoming: BTreeMap<u64, (Potato, PeerKey)>,

    fingerprint: u64,
    tables_dirty: bool,
    last_table_change: Time,
}

/// Receiver-side view used by [`open`].
struct Gate<'a> {
    secure: bool,
    now: Time,
    suite: &'a dyn CryptoSuite,
    sessions: &'a mut SessionTable,
    cache: &'a AuthCache,
    blacklist: &'a BTreeSet<PeerKey>,
    signed_seen: &'a mut BTreeMap<PeerKey, u64>,
    ops: &'a mut CryptoOps,
}

impl AuthContext for Gate<'_> {
    fn is_blocked(&self, peer: &PeerKey) -> bool {
        self.blacklist.contains(peer)
    }

    fn allow_unauthenticated(&self) -> bool {
        !self.secure
    }

    fn public_key(&mut self, peer: &PeerKey) -> KeyLookup {
        match self.cache.check(peer, self.now) {
            CacheStatus::Hit(cert) => KeyLookup::Known(cert.public_key.clone()),
            CacheStatus::Refused => KeyLookup::Refused,
            CacheStatus::Miss => KeyLookup::Unknown,
        }
    }

    fn verify_signature(&self, public: &[u8], msg: &[u8], sig: &[u8]) -> bool {
        self.suite.verify(public, msg, sig)
    }

    fn accept_signed_seq(&mut self, peer: &PeerKey, seq: u64) -> bool {
        self.ops.verify += 1;
        let last = self.signed_seen.entry(*peer).or_insert(0);
        if seq <= *last {
            return false;
        }
        *last = seq;
        true
    }

    fn check_mac(&mut self, link: &PeerKey, msg: &[u8], tag: &[u8], seq: u64) -> MacCheck {
        self.ops.mac += 1;
        self.sessions.check_inbound(link, msg, tag, seq, self.now)
    }
}

fn is_direct(t: MsgType) -> bool {
    !matches!(
        t,
        MsgType::FindSucc
            | MsgType::Ping
            | MsgType::PingEcho
            | MsgType::ThroughputReq
            | MsgType::DataPacket
            | MsgType::Potato
            | MsgType::AppPayload
    )
}

fn is_app(t: MsgType) -> bool {
    matches!(
        t,
        MsgType::Ping
            | MsgType::PingEcho
            | MsgType::ThroughputReq
            | MsgType::DataPacket
            | MsgType::Potato
            | MsgType::AppPayload
    )
}

impl Node {
    pub fn new(
        cfg: NodeConfig,
        addr: NetAddr,
        creds: Option<NodeCredentials>,
        suite: Arc<dyn CryptoSuite>,
        rng_seed: [u8; 32],
    ) -> Self {
        validate_group_size(cfg.group_size).expect("group size must be odd, at least 3");
        assert_eq!(cfg.secure, creds.is_some(), "secure mode needs credentials");
        let me = derive_key(&addr);
        if let Some(c) = &creds {
            assert_eq!(c.identity.peer_key, me, "identity does not match address");
        }
        let cache = AuthCache::new(cfg.negative_ttl);
        Node {
            me,
            addr,
            creds,
            suite,
            behavior: Behavior::Honest,
            rng: ChaCha8Rng::from_seed(rng_seed),
            now: Time::ZERO,
            ops: CryptoOps::default(),
            started: false,
            joined: false,
            join_complete: false,
            left: false,
            quiet: false,
            bootstrap: None,
            join_attempt: 0,
            join_waiting: BTreeSet::new(),
            view: BTreeSet::new(),
            group: GroupList::singleton(me),
            predecessor: None,
            successor: None,
            fingers: FingerTable::new(*me.key()),
            finger_cursor: 0,
            finger_inflight: None,
            cycle_started: Time::ZERO,
            cycles: 0,
            last_full_cycle: None,
            member_groups: BTreeMap::new(),
            exchange_cursor: 0,
            probes: BTreeMap::new(),
            confirming: BTreeMap::new(),
            sessions: SessionTable::new(),
            signed_seen: BTreeMap::new(),
            signed_seq: 0,
            cache,
            blacklist: BTreeSet::new(),
            ledger: SuspicionLedger::new(),
            outbox: BTreeMap::new(),
            inbox: BTreeMap::new(),
            lookups_inflight: BTreeSet::new(),
            group_checks: BTreeMap::new(),
            seen_revocations: BTreeSet::new(),
            next_nonce: 1,
            queries: BTreeMap::new(),
            group_queries: BTreeMap::new(),
            verifications: BTreeMap::new(),
            rechallenges: Vec::new(),
            fabricated: BTreeMap::new(),
            bursts: BTreeMap::new(),
            streams: BTreeMap::new(),
            potatoes_held: BTreeMap::new(),
            potatoes_incoming: BTreeMap::new(),
            fingerprint: 0,
            tables_dirty: true,
            last_table_change: Time::ZERO,
            cfg,
        }
    }

    // ----- accessors -----

    pub fn key(&self) -> PeerKey {
        self.me
    }

    pub fn addr(&self) -> NetAddr {
        self.addr
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn is_joined(&self) -> bool {
        self.joined
    }

    pub fn join_complete(&self) -> bool {
        self.join_complete
    }

    pub fn has_left(&self) -> bool {
        self.left
    }

    pub fn predecessor(&self) -> Option<PeerKey> {
        self.predecessor
    }

    pub fn successor(&self) -> Option<PeerKey> {
        self.successor
    }

    pub fn group(&self) -> &GroupList {
        &self.group
    }

    pub fn fingers(&self) -> &FingerTable {
        &self.fingers
    }

    pub fn view(&self) -> &BTreeSet<PeerKey> {
        &self.view
    }

    pub fn blacklist(&self) -> &BTreeSet<PeerKey> {
        &self.blacklist
    }

    pub fn behavior(&self) -> Behavior {
        self.behavior
    }

    pub fn set_behavior(&mut self, b: Behavior) {
        self.behavior = b;
    }

    pub fn set_routing_mode(&mut self, mode: RoutingMode) {
        self.cfg.routing_mode = mode;
    }

    pub fn ledger(&self) -> &SuspicionLedger {
        &self.ledger
    }

    pub fn has_session(&self, peer: &PeerKey) -> bool {
        self.sessions.has_session(peer)
    }

    pub fn finger_cycles(&self) -> u64 {
        self.cycles
    }

    /// Start and end of the most recent complete finger cycle.
    pub fn last_full_cycle(&self) -> Option<(Time, Time)> {
        self.last_full_cycle
    }

    pub fn last_table_change(&self) -> Time {
        self.last_table_change
    }

    /// Datagrams held until a sender's certificate arrives.
    pub fn buffered_inbound(&self) -> usize {
        self.inbox.values().map(Vec::len).sum()
    }

    /// Whether `peer` appears anywhere in this node's routing state.
    pub fn mentions(&self, peer: &PeerKey) -> bool {
        self.view.contains(peer)
            || self.group.contains(peer)
            || self.predecessor == Some(*peer)
            || self.successor == Some(*peer)
            || self.fingers.mentions(peer)
            || self.member_groups.contains_key(peer)
            || self.sessions.has_session(peer)
    }

    pub fn route_view(&self) -> RouteView<'_> {
        RouteView {
            me: self.me,
            predecessor: self.predecessor,
            successor: self.successor,
            group: &self.group,
            fingers: &self.fingers,
            blacklist: &self.blacklist,
        }
    }

    fn next_hop(&mut self, dest: &Key) -> Option<PeerKey> {
        let view = RouteView {
            me: self.me,
            predecessor: self.predecessor,
            successor: self.successor,
            group: &self.group,
            fingers: &self.fingers,
            blacklist: &self.blacklist,
        };
        view.next_hop(dest, self.cfg.routing_mode, &mut self.rng)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            key: self.me,
            addr: self.addr,
            joined: self.joined,
            predecessor: self.predecessor,
            successor: self.successor,
            group: self.group.clone(),
            fingers: self
                .fingers
                .entries()
                .map(|e| FingerLine { index: e.index, target: e.target, group: e.group.clone() })
                .collect(),
            blacklist: self.blacklist.iter().copied().collect(),
        }
    }

    // ----- entry point -----

    pub fn handle(&mut self, now: Time, input: Input) -> Output {
        let mut out = Output::default();
        self.now = now;
        if self.left {
            if let Input::Datagram { token, .. } = input {
                out.receipts.push((token, Receipt::Delivered));
            }
            return out;
        }
        match input {
            Input::Start { bootstrap } => self.start(&mut out, bootstrap),
            Input::Datagram { from, bytes, token } => self.on_datagram(&mut out, from, bytes, token),
            Input::Timer(kind) => self.on_timer(&mut out, kind),
            Input::Directory { peer, result } => self.on_directory(&mut out, peer, result),
            Input::Revoked(notice) => self.on_revocation(&mut out, notice, None),
            Input::App(cmd) => self.on_app(&mut out, cmd),
            Input::SetQuiet(q) => self.quiet = q,
            Input::Leave => self.left = true,
        }
        self.note_table_change(&mut out);
        out.tail_ops = mem::take(&mut self.ops);
        out
    }

    fn nonce(&mut self) -> u64 {
        let n = self.next_nonce;
        self.next_nonce += 1;
        n
    }

    fn g(&self) -> usize {
        self.cfg.group_size
    }

    fn policing(&self) -> bool {
        self.cfg.secure
    }

    /// A full-size claim is expected once the ring is clearly larger than
    /// one group.
    fn expect_full(&self) -> bool {
        self.view.len() >= 2 * (self.g() - 1)
    }

    fn note_table_change(&mut self, out: &mut Output) {
        if !self.tables_dirty {
            return;
        }
        self.tables_dirty = false;
        let mut h = DefaultHasher::new();
        self.predecessor.hash(&mut h);
        self.successor.hash(&mut h);
        self.group.hash(&mut h);
        for e in self.fingers.entries() {
            (e.index, e.leader()).hash(&mut h);
        }
        let fp = h.finish();
        if fp != self.fingerprint {
            self.fingerprint = fp;
            self.last_table_change = self.now;
            out.events.push(NodeEvent::TableChanged);
        }
    }

    // ----- lifecycle -----

    fn start(&mut self, out: &mut Output, bootstrap: Option<NetAddr>) {
        if self.started {
            return;
        }
        self.started = true;
        let tick_ns = self.cfg.tick.as_nanos() as u64;
        let offset = self.rng.gen_range(0..tick_ns.max(1));
        out.timers.push((Duration::from_nanos(offset), TimerKind::Tick));
        match bootstrap {
            None => {
                self.joined = true;
                self.join_complete = true;
                self.cycle_started = self.now;
                out.events.push(NodeEvent::Joined);
                out.events.push(NodeEvent::JoinComplete);
            }
            Some(b) => {
                self.bootstrap = Some(b);
                self.send_join(out);
            }
        }
    }

    fn send_join(&mut self, out: &mut Output) {
        let Some(b) = self.bootstrap else { return };
        let nonce = self.nonce();
        self.queries.insert(nonce, Query::Join);
        let msg = Message::FindSucc { nonce, purpose: QueryPurpose::Join };
        let env = self.envelope(&msg, *self.me.key());
        self.send_env(out, derive_key(&b), env);
        let backoff = self.cfg.join_backoff * 2u32.saturating_pow(self.join_attempt);
        out.timers.push((backoff, TimerKind::JoinRetry));
    }

    fn on_join_timer(&mut self, out: &mut Output) {
        if self.joined {
            return;
        }
        if !self.view.is_empty() {
            self.become_joined(out);
            return;
        }
        self.join_attempt += 1;
        if self.join_attempt >= self.cfg.join_attempts {
            out.events.push(NodeEvent::JoinFailed);
            return;
        }
        self.send_join(out);
    }

    fn become_joined(&mut self, out: &mut Output) {
        if self.joined {
            return;
        }
        self.joined = true;
        self.join_waiting.clear();
        out.events.push(NodeEvent::Joined);
        self.cycle_started = self.now;
        self.finger_cursor = 0;
        self.refresh_finger(out);
    }

    // ----- timers -----

    fn on_timer(&mut self, out: &mut Output, kind: TimerKind) {
        match kind {
            TimerKind::Tick => {
                out.timers.push((self.cfg.tick, TimerKind::Tick));
                if !self.quiet {
                    self.tick(out);
                }
            }
            TimerKind::ProbeCheck => self.probe_check(out),
            TimerKind::JoinRetry => self.on_join_timer(out),
            TimerKind::VerifyTimeout(nonce) => self.verify_timeout(out, nonce),
        }
    }

    fn tick(&mut self, out: &mut Output) {
        let now = self.now;
        if self.cfg.secure {
            for peer in self.sessions.expire(now) {
                if self.outbox.contains_key(&peer) {
                    self.ensure_handshake(out, peer);
                }
            }
            let stale: Vec<PeerKey> = self
                .sessions
                .pending_offers()
                .filter(|(_, p)| now.saturating_sub(p.sent_at) >= self.cfg.tick * 2)
                .map(|(k, _)| *k)
                .collect();
            for peer in stale {
                self.sessions.clear_pending(&peer);
                if self.outbox.contains_key(&peer) {
                    self.ensure_handshake(out, peer);
                }
            }
            for peer in self.sessions.due_for_regeneration(now) {
                if let CacheStatus::Hit(cert) = self.cache.check(&peer, now) {
                    let cert = cert.clone();
                    self.start_handshake(out, cert);
                }
            }
            self.cache.purge_expired(now);
            self.ledger.expire(now, self.cfg.strike_ttl);
        }
        self.confirming.retain(|_, at| now.saturating_sub(*at) < self.cfg.tick * 2);
        if let Behavior::Spoof { victim, per_tick } = self.behavior {
            self.spoof(out, victim, per_tick);
        }
        if !self.joined {
            return;
        }
        // Liveness probes.
        let members: Vec<PeerKey> = self.group.members().iter().filter(|m| **m != self.me).copied().collect();
        for m in &members {
            let nonce = self.nonce();
            self.probes.entry(*m).or_insert(Probe { nonce: None, misses: 0 }).nonce = Some(nonce);
            self.send_direct(out, *m, Message::Heartbeat { nonce });
        }
        if !members.is_empty() {
            out.timers.push((self.cfg.probe_timeout, TimerKind::ProbeCheck));
            // Group exchange with one member, round robin.
            let m = members[self.exchange_cursor % members.len()];
            self.exchange_cursor = self.exchange_cursor.wrapping_add(1);
            self.group_query(out, m, GroupQueryPurpose::Exchange);
        }
        for (peer, index, q) in mem::take(&mut self.rechallenges) {
            if self.blacklist.contains(&peer) {
                continue;
            }
            let nonce = self.nonce();
            self.queries.insert(nonce, Query::Finger { index, rechallenge: true });
            let env = self.envelope(&Message::FindSucc { nonce, purpose: QueryPurpose::Finger(index as u8) }, q);
            self.send_env(out, peer, env);
        }
        match self.finger_inflight {
            Some((nonce, sent)) if now.saturating_sub(sent) >= self.cfg.tick * 2 => {
                self.queries.remove(&nonce);
                self.verifications.retain(|_, v| v.rechallenge || v.index != self.finger_cursor);
                self.finger_inflight = None;
                self.refresh_finger(out);
            }
            Some(_) => {}
            None => self.refresh_finger(out),
        }
    }

    fn probe_check(&mut self, out: &mut Output) {
        let mut dead = Vec::new();
        for (peer, p) in self.probes.iter_mut() {
            if p.nonce.take().is_some() {
                p.misses += 1;
                if p.misses >= self.cfg.max_misses {
                    dead.push(*peer);
                }
            }
        }
        for peer in dead {
            self.forget(peer);
            out.events.push(NodeEvent::PeerRemoved { peer });
        }
    }

    // ----- view and group -----

    fn is_relevant(&self, c: &PeerKey) -> bool {
        if *c == self.me || self.blacklist.contains(c) {
            return false;
        }
        let mut all = self.view.clone();
        all.insert(self.me);
        all.insert(*c);
        let reach = self.g() - 1;
        successors_in(&all, &self.me, reach).contains(c) || predecessors_in(&all, &self.me, reach).contains(c)
    }

    fn add_to_view(&mut self, c: PeerKey) {
        if self.view.contains(&c) || !self.is_relevant(&c) {
            return;
        }
        self.view.insert(c);
        self.confirming.remove(&c);
        let mut all = self.view.clone();
        all.insert(self.me);
        let reach = self.g() - 1;
        let keep: BTreeSet<PeerKey> = successors_in(&all, &self.me, reach)
            .into_iter()
            .chain(predecessors_in(&all, &self.me, reach))
            .collect();
        let dropped: Vec<PeerKey> = self.view.iter().filter(|p| !keep.contains(p)).copied().collect();
        for p in dropped {
            self.view.remove(&p);
            self.member_groups.remove(&p);
        }
        self.recompute();
    }

    /// Removes `peer` from every table.
    fn forget(&mut self, peer: PeerKey) {
        self.view.remove(&peer);
        self.probes.remove(&peer);
        self.member_groups.remove(&peer);
        self.confirming.remove(&peer);
        self.join_waiting.remove(&peer);
        if self.fingers.remove_peer(&peer) {
            self.tables_dirty = true;
        }
        self.recompute();
    }

    fn recompute(&mut self) {
        let mut all = self.view.clone();
        all.insert(self.me);
        self.group = window_around(&all, &self.me, self.g());
        self.successor = successors_in(&self.view, &self.me, 1).first().copied();
        self.predecessor = predecessors_in(&self.view, &self.me, 1).first().copied();
        let members: BTreeSet<PeerKey> = self.group.members().iter().copied().collect();
        self.probes.retain(|p, _| members.contains(p));
        self.tables_dirty = true;
    }

    fn all_known(&self) -> BTreeSet<PeerKey> {
        let mut all = self.view.clone();
        all.insert(self.me);
        all
    }

    /// The group this node reports about itself.
    fn claimed_group(&mut self) -> GroupList {
        let Behavior::InconsistentGroupList(Mutation::Fabricate) = self.behavior else {
            return self.group.clone();
        };
        let li = self.group.leader_index();
        let Some(s1) = self.group.members().get(li + 1).copied() else {
            return self.group.clone();
        };
        let x = match self.fabricated.get(&s1) {
            Some(x) => *x,
            None => {
                let Some(x) = fabricate_between(&self.me, &s1) else {
                    return self.group.clone();
                };
                self.fabricated.insert(s1, x);
                x
            }
        };
        let mut members = self.group.members().to_vec();
        members[li + 1] = x;
        GroupList::new(members, li).unwrap_or_else(|_| self.group.clone())
    }

    fn group_query(&mut self, out: &mut Output, to: PeerKey, purpose: GroupQueryPurpose) {
        let nonce = self.nonce();
        self.group_queries.insert(nonce, purpose);
        self.send_direct(out, to, Message::GroupQuery { nonce });
    }

    /// Sends a confirmation query to `c` unless one is already out.
    fn confirm(&mut self, out: &mut Output, c: PeerKey) {
        if self.view.contains(&c) || self.confirming.contains_key(&c) || !self.is_relevant(&c) {
            return;
        }
        self.confirming.insert(c, self.now);
        if !self.joined {
            self.join_waiting.insert(c);
        }
        self.group_query(out, c, GroupQueryPurpose::Exchange);
    }

    fn on_group_query(&mut self, out: &mut Output, from: PeerKey, nonce: u64) {
        self.add_to_view(from);
        if self.joined {
            let group = self.claimed_group();
            self.send_direct(out, from, Message::GroupReply { nonce, group });
        }
    }

    fn on_group_reply(&mut self, out: &mut Output, from: PeerKey, nonce: u64, list: GroupList) {
        let purpose = self.group_queries.remove(&nonce);
        if let Some(GroupQueryPurpose::Witness { accused, fabricated, remaining }) = purpose.clone() {
            self.on_witness_reply(out, from, accused, fabricated, remaining, &list);
        }
        self.add_to_view(from);
        self.join_waiting.remove(&from);
        if self.policing() && self.joined {
            let all = self.all_known();
            let check = check_group_consistency(&all, &from, &list, self.g());
            match check {
                GroupCheck::Structural(_) if self.expect_full() => {
                    let evidence = Evidence { kind: EvidenceKind::Structural, witnesses: vec![self.me], lists: vec![list] };
                    self.excommunicate(out, from, evidence);
                    return;
                }
                GroupCheck::Structural(_) => {}
                GroupCheck::Consistent => {
                    self.member_groups.insert(from, list);
                }
                GroupCheck::Unverified(unknown) => {
                    self.member_groups.insert(from, list.clone());
                    for u in unknown {
                        self.vet_member(out, from, &list, u);
                    }
                }
            }
        } else if list.validate_claim(&from, self.g(), false).is_ok() {
            for m in list.members().to_vec() {
                if !self.blacklist.contains(&m) {
                    self.confirm(out, m);
                }
            }
            self.member_groups.insert(from, list);
        }
        if !self.joined && self.join_waiting.is_empty() && !self.view.is_empty() {
            self.become_joined(out);
        }
    }

    /// A claimed member this node has not seen: authorize, then confirm.
    fn vet_member(&mut self, out: &mut Output, claimant: PeerKey, list: &GroupList, member: PeerKey) {
        if self.blacklist.contains(&member) {
            return;
        }
        match self.cache.check(&member, self.now) {
            CacheStatus::Hit(_) => self.confirm(out, member),
            CacheStatus::Refused => self.fabricated_member(out, claimant, list.clone(), member),
            CacheStatus::Miss => {
                self.group_checks.entry(member).or_default().push((claimant, list.clone()));
                self.request_lookup(out, member);
            }
        }
    }

    fn fabricated_member(&mut self, out: &mut Output, claimant: PeerKey, list: GroupList, fabricated: PeerKey) {
        if self.blacklist.contains(&claimant) {
            return;
        }
        let verdict =
            self.ledger.strike(claimant, self.me, EvidenceKind::InconsistentGroup, vec![list.clone()], self.now);
        if self.apply_verdict(out, claimant, verdict) {
            return;
        }
        // Ask the members closest to the fabricated key for their lists.
        let mut candidates: Vec<PeerKey> = list
            .members()
            .iter()
            .filter(|m| **m != claimant && **m != fabricated && **m != self.me && self.view.contains(m))
            .copied()
            .collect();
        candidates.sort_by_key(|m| {
            let a = dist_cw(m.key(), fabricated.key());
            let b = dist_cw(fabricated.key(), m.key());
            a.min(b)
        });
        self.next_witness(out, claimant, fabricated, candidates);
    }

    fn next_witness(&mut self, out: &mut Output, accused: PeerKey, fabricated: PeerKey, mut remaining: Vec<PeerKey>) {
        if remaining.is_empty() {
            return;
        }
        let w = remaining.remove(0);
        self.group_query(out, w, GroupQueryPurpose::Witness { accused, fabricated, remaining });
    }

    fn on_witness_reply(
        &mut self,
        out: &mut Output,
        witness: PeerKey,
        accused: PeerKey,
        fabricated: PeerKey,
        remaining: Vec<PeerKey>,
        list: &GroupList,
    ) {
        if self.blacklist.contains(&accused) {
            return;
        }
        let sound = list.validate_claim(&witness, self.g(), false).is_ok();
        if sound && list.spans(fabricated.key()) && !list.contains(&fabricated) {
            let verdict =
                self.ledger.strike(accused, witness, EvidenceKind::InconsistentGroup, vec![list.clone()], self.now);
            self.apply_verdict(out, accused, verdict);
        } else {
            self.next_witness(out, accused, fabricated, remaining);
        }
    }

    /// Acts on a verdict. Returns true if the peer was excommunicated.
    fn apply_verdict(&mut self, out: &mut Output, accused: PeerKey, verdict: SuspicionVerdict) -> bool {
        match verdict {
            SuspicionVerdict::Consistent => false,
            SuspicionVerdict::Suspect(e) => {
                out.events.push(NodeEvent::Suspected { accused, kind: e.kind });
                false
            }
            SuspicionVerdict::Malicious(e) => {
                self.excommunicate(out, accused, e);
                true
            }
        }
    }

    fn excommunicate(&mut self, out: &mut Output, peer: PeerKey, evidence: Evidence) {
        if !self.blacklist.insert(peer) {
            return;
        }
        self.purge(peer);
        out.events.push(NodeEvent::Convicted {
            accused: peer,
            kind: evidence.kind,
            witnesses: evidence.witnesses.clone(),
        });
        out.reports.push(EvidenceReport {
            accused: peer,
            reporter: self.me,
            kind: evidence.kind,
            witnesses: evidence.witnesses,
        });
    }

    fn purge(&mut self, peer: PeerKey) {
        self.ledger.clear(&peer);
        self.sessions.remove(&peer);
        self.outbox.remove(&peer);
        self.rechallenges.retain(|(p, _, _)| *p != peer);
        for g in self.member_groups.values_mut() {
            if let Some(smaller) = g.without(&peer) {
                *g = smaller;
            }
        }
        self.member_groups.retain(|_, g| !g.contains(&peer));
        self.forget(peer);
    }

    // ----- revocation -----

    fn on_revocation(&mut self, out: &mut Output, notice: RevocationNotice, from: Option<PeerKey>) {
        let Some(creds) = &self.creds else { return };
        if self.seen_revocations.contains(&notice.id()) {
            return;
        }
        self.ops.verify += 1;
        if !notice.verify(self.suite.as_ref(), &creds.authority_public) {
            return;
        }
        self.seen_revocations.insert(notice.id());
        let peer = notice.peer_key;
        self.cache.revoke(&peer, self.now);
        self.blacklist.insert(peer);
        self.purge(peer);
        out.events.push(NodeEvent::RevocationApplied { peer });
        let mut targets: BTreeSet<PeerKey> = self.group.members().iter().copied().collect();
        targets.extend(self.fingers.leaders());
        targets.remove(&self.me);
        targets.remove(&peer);
        if let Some(f) = from {
            targets.remove(&f);
        }
        let bytes = notice.encode();
        for t in targets {
            self.send_direct(out, t, Message::Revocation { notice: bytes.clone() });
        }
    }

    // ----- finger maintenance -----

    fn refresh_finger(&mut self, out: &mut Output) {
        if self.finger_inflight.is_some() {
            return;
        }
        let index = self.finger_cursor;
        let q = self.fingers.target(index);
        match self.resolve(&q) {
            Resolution::Answer(list) => self.apply_finger(out, index, &list),
            Resolution::Forward(hop) => {
                let nonce = self.nonce();
                self.queries.insert(nonce, Query::Finger { index, rechallenge: false });
                self.finger_inflight = Some((nonce, self.now));
                let env =
                    self.envelope(&Message::FindSucc { nonce, purpose: QueryPurpose::Finger(index as u8) }, q);
                self.send_env(out, hop, env);
            }
            Resolution::Unknown => self.skip_finger(out, index),
        }
    }

    fn apply_finger(&mut self, out: &mut Output, index: usize, list: &GroupList) {
        let next = self.fingers.apply(index, list, self.now);
        self.tables_dirty = true;
        self.advance_cursor(out, next);
    }

    fn skip_finger(&mut self, out: &mut Output, index: usize) {
        let next = if index + 1 >= crate::keyspace::KEY_BITS { 0 } else { index + 1 };
        self.advance_cursor(out, next);
    }

    fn advance_cursor(&mut self, out: &mut Output, next: usize) {
        self.finger_inflight = None;
        self.finger_cursor = next;
        if next == 0 {
            self.cycles += 1;
            self.last_full_cycle = Some((self.cycle_started, self.now));
            self.cycle_started = self.now;
            out.events.push(NodeEvent::FingerCycle { count: self.cycles });
            if !self.join_complete {
                self.join_complete = true;
                out.events.push(NodeEvent::JoinComplete);
            }
        } else if !self.join_complete {
            self.refresh_finger(out);
        }
    }

    fn on_finger_reply(
        &mut self,
        out: &mut Output,
        responder: PeerKey,
        nonce: u64,
        index: usize,
        rechallenge: bool,
        query: Key,
        answer: Option<GroupList>,
    ) {
        let owns_cursor = !rechallenge && self.finger_inflight.map(|(n, _)| n) == Some(nonce);
        let Some(mut list) = answer else {
            if owns_cursor {
                self.skip_finger(out, index);
            }
            return;
        };
        for m in list.members().to_vec() {
            if self.blacklist.contains(&m) {
                match list.without(&m) {
                    Some(l) => list = l,
                    None => {
                        if owns_cursor {
                            self.skip_finger(out, index);
                        }
                        return;
                    }
                }
            }
        }
        let verify = self.policing() && responder != self.me && self.rng.gen_bool(self.cfg.verify_probability);
        if verify {
            if list.validate_claim(&list.leader(), self.g(), self.expect_full()).is_err() {
                let evidence =
                    Evidence { kind: EvidenceKind::Structural, witnesses: vec![self.me], lists: vec![list] };
                self.excommunicate(out, responder, evidence);
                if owns_cursor {
                    self.skip_finger(out, index);
                }
                return;
            }
            let v = Verification { index, rechallenge: !owns_cursor, query, responder, claimed: list, tried: Vec::new() };
            if !self.send_verification(out, v) && owns_cursor {
                self.skip_finger(out, index);
            }
        } else if owns_cursor {
            self.apply_finger(out, index, &list);
        } else {
            self.fingers.apply(index, &list, self.now);
            self.tables_dirty = true;
        }
    }

    /// Picks a verifier and sends the check. Applies the entry unverified
    /// when no verifier is left. Returns false only if nothing was applied
    /// and nothing is pending.
    fn send_verification(&mut self, out: &mut Output, mut v: Verification) -> bool {
        let prior = self.ledger.witnesses(&v.responder);
        let li = v.claimed.leader_index();
        let candidates: Vec<(usize, PeerKey)> = v
            .claimed
            .members()
            .iter()
            .enumerate()
            .filter(|(_, m)| {
                **m != v.responder && **m != self.me && !v.tried.contains(m) && !prior.contains(m) && !self.blacklist.contains(m)
            })
            .map(|(i, m)| (i.abs_diff(li), *m))
            .collect();
        if candidates.is_empty() || v.tried.len() >= VERIFIERS_PER_CLAIM {
            self.finish_unverified(out, v);
            return true;
        }
        // Members nearest the claimed leader know its neighbourhood best.
        let nearest = candidates.iter().map(|(d, _)| *d).min().expect("nonempty");
        let pool: Vec<PeerKey> = candidates.iter().filter(|(d, _)| *d == nearest).map(|(_, m)| *m).collect();
        let verifier = pool[self.rng.gen_range(0..pool.len())];
        v.tried.push(verifier);
        let nonce = self.nonce();
        let env = self.envelope(&Message::FindSucc { nonce, purpose: QueryPurpose::Verify }, v.query);
        self.verifications.insert(nonce, v);
        self.send_env(out, verifier, env);
        out.timers.push((self.cfg.query_timeout, TimerKind::VerifyTimeout(nonce)));
        true
    }

    fn finish_unverified(&mut self, out: &mut Output, v: Verification) {
        if v.rechallenge {
            self.fingers.apply(v.index, &v.claimed, self.now);
            self.tables_dirty = true;
        } else if self.finger_cursor == v.index {
            self.apply_finger(out, v.index, &v.claimed);
        }
    }

    fn verify_timeout(&mut self, out: &mut Output, nonce: u64) {
        if let Some(v) = self.verifications.remove(&nonce) {
            self.send_verification(out, v);
        }
    }

    fn on_verification_reply(&mut self, out: &mut Output, from: PeerKey, nonce: u64, answer: Option<GroupList>) {
        let Some(v) = self.verifications.remove(&nonce) else { return };
        if v.tried.last() != Some(&from) {
            return;
        }
        let cursor_owned = !v.rechallenge && self.finger_cursor == v.index;
        if self.blacklist.contains(&v.responder) {
            if cursor_owned {
                self.skip_finger(out, v.index);
            }
            return;
        }
        if corroborates(&v.claimed, answer.as_ref(), self.g()) {
            self.ledger.clear(&v.responder);
            self.finish_unverified(out, v);
            return;
        }
        if answer.is_none() && v.tried.len() < VERIFIERS_PER_CLAIM {
            // The verifier may simply not see that far; ask another.
            self.send_verification(out, v);
            return;
        }
        let mut lists = vec![v.claimed.clone()];
        lists.extend(answer);
        let verdict = self.ledger.strike(v.responder, from, EvidenceKind::FraudulentFindSuccessor, lists, self.now);
        if !verdict.is_malicious() {
            self.rechallenges.push((v.responder, v.index, v.query));
        }
        self.apply_verdict(out, v.responder, verdict);
        if cursor_owned {
            self.skip_finger(out, v.index);
        }
    }

    // ----- find successor -----

    /// How this node would answer a find-successor for `q` on its own.
    fn resolve(&mut self, q: &Key) -> Resolution {
        let view = self.route_view();
        match view.classify(q) {
            RouteClass::Local => Resolution::Answer(self.group.clone()),
            RouteClass::Near(m) => Resolution::Answer(window_around(&self.all_known(), &m, self.g())),
            RouteClass::Far => {
                if let Some(s) = self.successor {
                    if in_range_open_closed(q, self.me.key(), s.key()) {
                        return Resolution::Answer(window_around(&self.all_known(), &s, self.g()));
                    }
                }
                match self.next_hop(q) {
                    Some(hop) => Resolution::Forward(hop),
                    None => Resolution::Unknown,
                }
            }
        }
    }

    /// Answer from the local neighbourhood only, for verification.
    fn local_answer(&self, q: &Key) -> Option<GroupList> {
        let all = self.all_known();
        let reach = self.g() - 1;
        if self.view.len() >= 2 * reach {
            let first = predecessors_in(&self.view, &self.me, reach).last().copied()?;
            let last = successors_in(&self.view, &self.me, reach).last().copied()?;
            if !in_range_open_closed(q, first.key(), last.key()) {
                return None;
            }
        }
        let r = all.range(PeerKey::new_unchecked(*q)..).next().or_else(|| all.iter().next()).copied()?;
        Some(window_around(&all, &r, self.g()))
    }

    fn fabricated_answer(&self, f: Fabrication) -> GroupList {
        match f {
            Fabrication::SelfGroup => self.group.clone(),
            Fabrication::FarGroup => {
                self.fingers.entries().last().map(|e| e.group.clone()).unwrap_or_else(|| self.group.clone())
            }
        }
    }

    fn on_find_succ(&mut self, out: &mut Output, env: Envelope, nonce: u64, purpose: QueryPurpose) -> Receipt {
        let origin = PeerKey::new_unchecked(env.sender);
        let q = env.dest;
        if let Behavior::FraudulentFindSucc(f) = self.behavior {
            let answer = Some(self.fabricated_answer(f));
            self.reply_find_succ(out, origin, nonce, purpose, q, answer);
            return Receipt::Delivered;
        }
        if !self.joined {
            return Receipt::Delivered;
        }
        if purpose == QueryPurpose::Verify {
            let answer = self.local_answer(&q);
            self.reply_find_succ(out, origin, nonce, purpose, q, answer);
            return Receipt::Delivered;
        }
        match self.resolve(&q) {
            Resolution::Answer(list) => {
                self.reply_find_succ(out, origin, nonce, purpose, q, Some(list));
                Receipt::Delivered
            }
            Resolution::Forward(hop) => self.forward(out, env, Some(hop)),
            Resolution::Unknown => {
                self.reply_find_succ(out, origin, nonce, purpose, q, None);
                Receipt::Delivered
            }
        }
    }

    fn reply_find_succ(
        &mut self,
        out: &mut Output,
        origin: PeerKey,
        nonce: u64,
        purpose: QueryPurpose,
        query: Key,
        answer: Option<GroupList>,
    ) {
        let msg = Message::FindSuccReply { nonce, purpose, query, answer };
        if origin == self.me {
            if let Message::FindSuccReply { nonce, purpose, query, answer } = msg {
                self.on_find_succ_reply(out, self.me, nonce, purpose, query, answer);
            }
            return;
        }
        self.send_direct(out, origin, msg);
    }

    fn on_find_succ_reply(
        &mut self,
        out: &mut Output,
        from: PeerKey,
        nonce: u64,
        purpose: QueryPurpose,
        query: Key,
        answer: Option<GroupList>,
    ) {
        if purpose == QueryPurpose::Verify {
            self.on_verification_reply(out, from, nonce, answer);
            return;
        }
        let Some(pending) = self.queries.remove(&nonce) else { return };
        match pending {
            Query::Join => {
                if self.joined {
                    return;
                }
                let Some(list) = answer else { return };
                for m in list.members().to_vec() {
                    if m != self.me && !self.blacklist.contains(&m) {
                        self.confirm(out, m);
                    }
                }
            }
            Query::Finger { index, rechallenge } => {
                self.on_finger_reply(out, from, nonce, index, rechallenge, query, answer);
            }
            Query::Lookup => out.events.push(NodeEvent::LookupDone { key: query, group: answer }),
        }
    }

    // ----- routing -----

    /// Sends a routed message that originates here.
    fn originate(&mut self, out: &mut Output, dest: Key, msg: Message) {
        let env = self.envelope(&msg, dest);
        let view = self.route_view();
        match view.classify(&dest) {
            RouteClass::Local => self.deliver(out, env, msg, 0),
            RouteClass::Near(m) => self.send_env(out, m, env),
            RouteClass::Far => {
                if let Some(hop) = self.next_hop(&dest) {
                    self.send_env(out, hop, env);
                }
            }
        }
    }

    /// Passes a routed message on. `hop` overrides the routing decision.
    fn forward(&mut self, out: &mut Output, mut env: Envelope, hop: Option<PeerKey>) -> Receipt {
        if is_app(env.msg_type) && self.behavior == Behavior::DropAll {
            return Receipt::Delivered;
        }
        let next = match self.behavior {
            Behavior::Misroute(strategy) => self.misroute(strategy),
            _ => hop.or_else(|| {
                let view = self.route_view();
                match view.classify(&env.dest) {
                    RouteClass::Near(m) => Some(m),
                    _ => self.next_hop(&env.dest),
                }
            }),
        };
        let Some(next) = next else { return Receipt::Delivered };
        if env.hop_count as u32 + 1 >= self.cfg.hop_limit as u32 {
            return Receipt::HopLimit;
        }
        env.hop_count += 1;
        if env.msg_type == MsgType::AppPayload {
            if let Ok(Message::AppPayload { id, trace: true, mut route }) = Message::decode(env.msg_type, &env.payload) {
                route.push(self.me);
                env.payload = Message::AppPayload { id, trace: true, route }.encode();
            }
        }
        self.send_env(out, next, env);
        Receipt::Delivered
    }

    fn misroute(&mut self, strategy: MisrouteStrategy) -> Option<PeerKey> {
        match strategy {
            MisrouteStrategy::Backward => self.predecessor,
            MisrouteStrategy::Random => {
                let mut pool: Vec<PeerKey> = self.view.iter().copied().collect();
                pool.extend(self.fingers.leaders());
                pool.sort();
                pool.dedup();
                if pool.is_empty() {
                    None
                } else {
                    Some(pool[self.rng.gen_range(0..pool.len())])
                }
            }
        }
    }

    fn on_routed(&mut self, out: &mut Output, env: Envelope, msg: Message) -> Receipt {
        if let Message::FindSucc { nonce, purpose } = msg {
            return self.on_find_succ(out, env, nonce, purpose);
        }
        let view = self.route_view();
        match view.classify(&env.dest) {
            RouteClass::Local => {
                let hops = env.hop_count.saturating_add(1);
                self.deliver(out, env, msg, hops);
                Receipt::Delivered
            }
            _ => self.forward(out, env, None),
        }
    }

    // ----- application -----

    fn on_app(&mut self, out: &mut Output, cmd: AppCommand) {
        match cmd {
            AppCommand::Ping { burst, target, count } => {
                if count == 0 {
                    return;
                }
                self.bursts.insert(burst, Burst { target, count, done: 0, started: self.now });
                self.originate(out, target, Message::Ping { burst, seq: 0 });
            }
            AppCommand::Throughput { id, target, count } => {
                self.streams.insert(id, Stream { expected: count, received: 0, first: Time::ZERO, last: Time::ZERO });
                self.originate(out, target, Message::ThroughputReq { id, count });
            }
            AppCommand::InjectPotato { id, min_residency, ttl } => {
                let p = Potato {
                    id,
                    originator: self.me,
                    pass_count: 0,
                    injected_at: self.now.as_nanos(),
                    min_residency: min_residency.as_nanos() as u64,
                    ttl,
                };
                self.pass_potato(out, p);
            }
            AppCommand::Send { id, dest, trace } => {
                let route = if trace { vec![self.me] } else { Vec::new() };
                self.originate(out, dest, Message::AppPayload { id, trace, route });
            }
            AppCommand::Lookup { key } => match self.resolve(&key) {
                Resolution::Answer(list) => out.events.push(NodeEvent::LookupDone { key, group: Some(list) }),
                Resolution::Unknown => out.events.push(NodeEvent::LookupDone { key, group: None }),
                Resolution::Forward(hop) => {
                    let nonce = self.nonce();
                    self.queries.insert(nonce, Query::Lookup);
                    let env = self.envelope(&Message::FindSucc { nonce, purpose: QueryPurpose::Lookup }, key);
                    self.send_env(out, hop, env);
                }
            },
        }
    }

    /// Handles a routed message addressed to a key this node owns.
    fn deliver(&mut self, out: &mut Output, env: Envelope, msg: Message, hops: u8) {
        let origin = PeerKey::new_unchecked(env.sender);
        match msg {
            Message::Ping { burst, seq } => {
                self.originate(out, *origin.key(), Message::PingEcho { burst, seq, forward_hops: hops });
            }
            Message::PingEcho { burst, seq, forward_hops } => {
                let Some(b) = self.bursts.get_mut(&burst) else { return };
                if seq != b.done {
                    return;
                }
                b.done += 1;
                if b.done == b.count {
                    let b = self.bursts.remove(&burst).expect("present");
                    out.events.push(NodeEvent::PingBurstDone {
                        burst,
                        elapsed: self.now.saturating_sub(b.started),
                        count: b.count,
                        hops: forward_hops as u32 + hops as u32,
                    });
                } else {
                    let (target, next) = (b.target, b.done);
                    self.originate(out, target, Message::Ping { burst, seq: next });
                }
            }
            Message::ThroughputReq { id, count } => {
                for index in 0..count {
                    self.originate(out, *origin.key(), Message::DataPacket { id, index });
                }
            }
            Message::DataPacket { id, .. } => {
                let now = self.now;
                let Some(s) = self.streams.get_mut(&id) else { return };
                if s.received == 0 {
                    s.first = now;
                }
                s.last = now;
                s.received += 1;
                if s.received == s.expected {
                    out.events.push(NodeEvent::ThroughputDone { id, first: s.first, last: s.last, received: s.received });
                }
            }
            Message::Potato(p) => {
                if origin == self.me {
                    // Routed to a key this node owns after all; keep it.
                    self.hold_potato(out, p);
                    return;
                }
                let (id, pass) = (p.id, p.pass_count);
                self.potatoes_incoming.insert(id, (p, origin));
                self.send_direct(out, origin, Message::PotatoAck { id, pass });
            }
            Message::AppPayload { id, trace, mut route } => {
                if trace {
                    route.push(self.me);
                }
                out.events.push(NodeEvent::AppDelivered { id, route, hops });
            }
            _ => {}
        }
    }

    pub fn throughput_progress(&self, id: u64) -> Option<(Time, Time, u32)> {
        self.streams.get(&id).map(|s| (s.first, s.last, s.received))
    }

    fn on_potato_ack(&mut self, out: &mut Output, from: PeerKey, id: u64, pass: u64) {
        let Some(p) = self.potatoes_held.get(&id) else { return };
        if p.pass_count != pass {
            return;
        }
        self.potatoes_held.remove(&id);
        self.send_direct(out, from, Message::PotatoAck2 { id, pass });
    }

    fn on_potato_ack2(&mut self, out: &mut Output, from: PeerKey, id: u64, pass: u64) {
        let Some((p, holder)) = self.potatoes_incoming.get(&id) else { return };
        if *holder != from || p.pass_count != pass {
            return;
        }
        let (mut p, _) = self.potatoes_incoming.remove(&id).expect("present");
        p.pass_count += 1;
        self.hold_potato(out, p);
    }

    /// This node now holds the potato.
    fn hold_potato(&mut self, out: &mut Output, mut p: Potato) {
        if p.originator == self.me {
            let residency = self.now.as_nanos().saturating_sub(p.injected_at);
            if residency >= p.min_residency && p.pass_count > 0 {
                out.events.push(NodeEvent::PotatoMeasured {
                    id: p.id,
                    passes: p.pass_count,
                    residency: Duration::from_nanos(residency),
                });
                if p.ttl == 0 {
                    return;
                }
                p.ttl -= 1;
                p.pass_count = 0;
                p.injected_at = self.now.as_nanos();
            }
        }
        self.pass_potato(out, p);
    }

    fn pass_potato(&mut self, out: &mut Output, p: Potato) {
        if self.predecessor.is_none() {
            return;
        }
        for _ in 0..64 {
            let mut k = [0u8; 20];
            self.rng.fill_bytes(&mut k);
            let dest = Key::from_bytes(k);
            if self.route_view().classify(&dest) == RouteClass::Local {
                continue;
            }
            self.potatoes_held.insert(p.id, p.clone());
            self.originate(out, dest, Message::Potato(p));
            return;
        }
    }

    // ----- adversary -----

    fn spoof(&mut self, out: &mut Output, victim: PeerKey, per_tick: u32) {
        let targets: Vec<PeerKey> = self.view.iter().filter(|p| **p != victim).copied().collect();
        if targets.is_empty() {
            return;
        }
        for _ in 0..per_tick {
            let to = targets[self.rng.gen_range(0..targets.len())];
            let nonce = self.rng.gen();
            let mut env =
                Envelope::new(MsgType::Heartbeat, *victim.key(), *to.key(), Message::Heartbeat { nonce }.encode());
            env.auth_kind = crate::wire::AuthKind::Mac;
            env.seq = self.rng.gen();
            let mut tag = vec![0u8; crate::auth::MAC_TAG_LEN];
            self.rng.fill_bytes(&mut tag);
            env.auth_tag = tag;
            let bytes = env.encode().expect("fits");
            out.sends.push(Send {
                to: to.addr(),
                bytes,
                msg_type: MsgType::Heartbeat,
                spoofed_from: Some(victim.addr()),
                ops: mem::take(&mut self.ops),
            });
        }
    }

    // ----- sending -----

    fn envelope(&self, msg: &Message, dest: Key) -> Envelope {
        Envelope::new(msg.msg_type(), *self.me.key(), dest, msg.encode())
    }

    fn send_direct(&mut self, out: &mut Output, to: PeerKey, msg: Message) {
        let env = self.envelope(&msg, *to.key());
        self.send_env(out, to, env);
    }

    fn push_send(&mut self, out: &mut Output, to: PeerKey, msg_type: MsgType, bytes: Vec<u8>) {
        if bytes.len() > MAX_DATAGRAM {
            return;
        }
        out.sends.push(Send { to: to.addr(), bytes, msg_type, spoofed_from: None, ops: mem::take(&mut self.ops) });
    }

    fn send_env(&mut self, out: &mut Output, to: PeerKey, mut env: Envelope) {
        if to == self.me || self.blacklist.contains(&to) {
            return;
        }
        let msg_type = env.msg_type;
        if !self.cfg.secure {
            if let Ok(bytes) = seal(&mut env, Credentials::Unauthenticated) {
                self.push_send(out, to, msg_type, bytes);
            }
            return;
        }
        let sealed = match self.sessions.next_send(&to) {
            Some((seq, key)) => {
                env.seq = seq;
                Some(seal(&mut env, Credentials::Mac(key)))
            }
            None => None,
        };
        match sealed {
            Some(Ok(bytes)) => {
                self.ops.mac += 1;
                self.push_send(out, to, msg_type, bytes);
            }
            Some(Err(_)) => {}
            None => {
                self.outbox.entry(to).or_default().push(env);
                self.ensure_handshake(out, to);
            }
        }
    }

    fn ensure_handshake(&mut self, out: &mut Output, to: PeerKey) {
        if self.sessions.pending(&to).is_some() || self.lookups_inflight.contains(&to) {
            return;
        }
        match self.cache.check(&to, self.now) {
            CacheStatus::Hit(cert) => {
                let cert = cert.clone();
                self.start_handshake(out, cert);
            }
            CacheStatus::Refused => {
                self.outbox.remove(&to);
            }
            CacheStatus::Miss => self.request_lookup(out, to),
        }
    }

    fn start_handshake(&mut self, out: &mut Output, cert: Certificate) {
        let Some(creds) = &self.creds else { return };
        self.signed_seq += 1;
        let result = establish_session(
            self.suite.as_ref(),
            &creds.identity,
            &cert,
            &creds.authority_public,
            self.now,
            self.cfg.session_lifetime,
            self.signed_seq,
            &mut self.rng,
        );
        self.ops.verify += 1;
        let Ok((key, env)) = result else { return };
        self.ops.pke += 1;
        self.ops.sign += 1;
        let peer = key.peer;
        self.sessions.set_pending(peer, PendingOffer { key, digest: offer_digest(&env), sent_at: self.now });
        if let Ok(bytes) = env.encode() {
            self.push_send(out, peer, MsgType::Handshake1, bytes);
        }
    }

    fn request_lookup(&mut self, out: &mut Output, peer: PeerKey) {
        if self.lookups_inflight.insert(peer) {
            out.lookups.push(peer);
        }
    }

    fn flush_outbox(&mut self, out: &mut Output, peer: PeerKey) {
        for env in self.outbox.remove(&peer).unwrap_or_default() {
            self.send_env(out, peer, env);
        }
    }

    fn on_handshake1(&mut self, out: &mut Output, env: &Envelope) {
        let Some(creds) = &self.creds else { return };
        let peer = PeerKey::new_unchecked(env.sender);
        if self.sessions.pending(&peer).is_some() {
            if self.me < peer {
                return;
            }
            self.sessions.clear_pending(&peer);
        }
        self.signed_seq += 1;
        let result = accept_offer(
            self.suite.as_ref(),
            &creds.identity,
            env,
            self.now,
            self.cfg.session_lifetime,
            self.signed_seq,
        );
        self.ops.pke += 1;
        let Ok((key, reply)) = result else { return };
        self.ops.sign += 1;
        self.sessions.install(key, false);
        if let Ok(bytes) = reply.encode() {
            self.push_send(out, peer, MsgType::Handshake2, bytes);
        }
        self.flush_outbox(out, peer);
    }

    fn on_handshake2(&mut self, out: &mut Output, env: &Envelope) {
        let peer = PeerKey::new_unchecked(env.sender);
        let Ok(confirm) = HandshakeConfirm::decode(&env.payload) else { return };
        let matches = self.sessions.pending(&peer).is_some_and(|p| p.digest == confirm.offer_digest);
        if !matches {
            return;
        }
        let pending = self.sessions.clear_pending(&peer).expect("checked");
        self.sessions.install(pending.key, true);
        self.flush_outbox(out, peer);
    }

    // ----- receiving -----

    fn on_datagram(&mut self, out: &mut Output, from: NetAddr, bytes: Vec<u8>, token: u64) {
        let link = derive_key(&from);
        let result = {
            let mut gate = Gate {
                secure: self.cfg.secure,
                now: self.now,
                suite: self.suite.as_ref(),
                sessions: &mut self.sessions,
                cache: &self.cache,
                blacklist: &self.blacklist,
                signed_seen: &mut self.signed_seen,
                ops: &mut self.ops,
            };
            open(&bytes, from, &mut gate)
        };
        let receipt = match result {
            Err(Rejection::Pending(peer)) => {
                self.inbox.entry(peer).or_default().push(Inbound { from, bytes, token });
                self.request_lookup(out, peer);
                return;
            }
            Err(Rejection::Tamper) => Receipt::Rejected(RejectKind::Tamper),
            Err(Rejection::Unauthorized) => Receipt::Rejected(RejectKind::Unauthorized),
            Err(Rejection::Replay) => Receipt::Rejected(RejectKind::Replay),
            Err(Rejection::Malformed(_)) => Receipt::Rejected(RejectKind::Malformed),
            Ok(env) => self.dispatch(out, link, env),
        };
        out.receipts.push((token, receipt));
    }

    fn dispatch(&mut self, out: &mut Output, link: PeerKey, env: Envelope) -> Receipt {
        if is_direct(env.msg_type) && env.sender != *link.key() {
            return Receipt::Rejected(RejectKind::Tamper);
        }
        match env.msg_type {
            MsgType::Handshake1 => {
                self.on_handshake1(out, &env);
                return Receipt::Delivered;
            }
            MsgType::Handshake2 => {
                self.on_handshake2(out, &env);
                return Receipt::Delivered;
            }
            _ => {}
        }
        let Ok(msg) = Message::decode(env.msg_type, &env.payload) else {
            return Receipt::Rejected(RejectKind::Malformed);
        };
        if !is_direct(env.msg_type) {
            return self.on_routed(out, env, msg);
        }
        match msg {
            Message::FindSuccReply { nonce, purpose, query, answer } => {
                self.on_find_succ_reply(out, link, nonce, purpose, query, answer)
            }
            Message::GroupQuery { nonce } => self.on_group_query(out, link, nonce),
            Message::GroupReply { nonce, group } => self.on_group_reply(out, link, nonce, group),
            Message::Heartbeat { nonce } => {
                self.add_to_view(link);
                self.send_direct(out, link, Message::HeartbeatAck { nonce });
            }
            Message::HeartbeatAck { nonce } => {
                if let Some(p) = self.probes.get_mut(&link) {
                    if p.nonce == Some(nonce) {
                        p.nonce = None;
                        p.misses = 0;
                    }
                }
            }
            Message::Revocation { notice } => {
                if let Some(n) = RevocationNotice::decode(&notice) {
                    self.on_revocation(out, n, Some(link));
                }
            }
            Message::PotatoAck { id, pass } => self.on_potato_ack(out, link, id, pass),
            Message::PotatoAck2 { id, pass } => self.on_potato_ack2(out, link, id, pass),
            _ => {}
        }
        Receipt::Delivered
    }

    fn on_directory(&mut self, out: &mut Output, peer: PeerKey, result: LookupResult) {
        self.lookups_inflight.remove(&peer);
        let result = match result {
            LookupResult::Found(cert) => {
                self.ops.verify += 1;
                let ok = cert.peer_key == peer
                    && self.creds.as_ref().is_some_and(|c| cert.verify(self.suite.as_ref(), &c.authority_public));
                if ok {
                    LookupResult::Found(cert)
                } else {
                    LookupResult::Absent
                }
            }
            other => other,
        };
        if result == LookupResult::Unreachable {
            for held in self.inbox.remove(&peer).unwrap_or_default() {
                out.receipts.push((held.token, Receipt::Rejected(RejectKind::Unauthorized)));
            }
            self.group_checks.remove(&peer);
            return;
        }
        self.cache.record(peer, &result, self.now);
        for held in self.inbox.remove(&peer).unwrap_or_default() {
            self.on_datagram(out, held.from, held.bytes, held.token);
        }
        if self.outbox.contains_key(&peer) {
            self.ensure_handshake(out, peer);
        }
        let found = matches!(result, LookupResult::Found(_));
        for (claimant, list) in self.group_checks.remove(&peer).unwrap_or_default() {
            if found {
                self.confirm(out, peer);
            } else {
                self.fabricated_member(out, claimant, list, peer);
            }
        }
    }
}

enum Resolution {
    Answer(GroupList),
    Forward(PeerKey),
    Unknown,
}

/// Searches a private address block for a key strictly between `a` and `b`.
fn fabricate_between(a: &PeerKey, b: &PeerKey) -> Option<PeerKey> {
    for port in [4000u16, 4001, 4002, 4003] {
        for n in 0..=u16::MAX {
            let addr = NetAddr::new([172, 16, (n >> 8) as u8, (n & 0xff) as u8].into(), port);
            let k = derive_key(&addr);
            if in_range_open(k.key(), a.key(), b.key()) {
                return Some(k);
            }
        }
    }
    None
}
