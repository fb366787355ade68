//! Deterministic discrete-event host for many nodes.
//!
//! Events are ordered by `(time, insertion sequence)`. Each node draws from
//! its own RNG stream seeded by `(seed, peer key)`, link jitter comes from
//! per-link streams and losses from a dedicated stream, so the same
//! [`Scenario`] always yields the same trace.
//!
//! Nodes are grouped onto hosts that each have one CPU. Handling an input
//! occupies the host for the modelled cost of the work it did, and every
//! datagram leaves when the work preceding it is finished.

mod scenario;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::auth::{Authority, CryptoSuite, Identity, StandardSuite};
use crate::clock::Time;
use crate::directory::{EvidenceKind, EvidenceReport, RingAuthority};
use crate::keyspace::{derive_key, Key, NetAddr, PeerKey};
use crate::protocol::adversary::Behavior;
use crate::protocol::group::{successors_in, window_around};
use crate::protocol::node::{AppCommand, Input, Node, NodeConfig, NodeCredentials, NodeEvent, Receipt, Send, TimerKind};
use crate::routing::{RouteClass, RoutingMode};
use crate::wire::MsgType;

pub use scenario::{synthetic_addr, CostModel, LatencyModel, Scenario, ScenarioError};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("peer {0} failed to join")]
    JoinFailed(PeerKey),
    #[error("ring did not settle within {0:?} of simulated time")]
    NotQuiescent(Duration),
    #[error("unknown peer {0}")]
    UnknownPeer(PeerKey),
}

/// Fate of every datagram handed to the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub sent: u64,
    pub delivered: u64,
    pub dropped_model: u64,
    pub dropped_hop_limit: u64,
    pub rejected_auth: u64,
    /// Queued in the network or held by a node awaiting a certificate.
    pub in_flight: u64,
}

impl Counters {
    pub fn balanced(&self) -> bool {
        self.sent == self.delivered + self.dropped_model + self.dropped_hop_limit + self.rejected_auth + self.in_flight
    }
}

/// Outcome of datagrams sent with a forged source address.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForgeryStats {
    pub attempts: u64,
    pub accepted: u64,
    pub rejected: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimEvent {
    pub time: Time,
    pub peer: PeerKey,
    pub event: NodeEvent,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conviction {
    pub time: Time,
    pub by: PeerKey,
    pub accused: PeerKey,
    pub kind: EvidenceKind,
}

/// A datagram copied off the wire.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Captured {
    pub from: NetAddr,
    pub to: PeerKey,
    pub msg_type: MsgType,
    pub bytes: Vec<u8>,
}

/// A route computed from the nodes' current tables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Route {
    /// Source first, responsible peer last.
    pub path: Vec<PeerKey>,
    pub complete: bool,
}

impl Route {
    pub fn hops(&self) -> usize {
        self.path.len() - 1
    }

    pub fn responsible(&self) -> PeerKey {
        *self.path.last().expect("nonempty")
    }
}

#[derive(Clone, Debug)]
enum EventKind {
    Deliver { to: usize, from: NetAddr, bytes: Vec<u8>, token: u64 },
    Timer { node: usize, kind: TimerKind },
    Control { node: usize, input: Input },
    DirectoryQuery { node: usize, peer: PeerKey },
    Report { node: usize, report: EvidenceReport },
}

#[derive(Clone, Debug)]
struct Scheduled {
    time: Time,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, o: &Self) -> bool {
        (self.time, self.seq) == (o.time, o.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, o: &Self) -> Ordering {
        (o.time, o.seq).cmp(&(self.time, self.seq))
    }
}

#[derive(Clone, Debug)]
struct Link {
    rng: ChaCha8Rng,
    last_arrival: Time,
}

#[derive(Clone, Debug)]
struct TokenInfo {
    src: NetAddr,
    dst: usize,
    msg_type: MsgType,
    spoofed: bool,
}

fn sub_seed(seed: u64, label: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(label);
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

#[derive(Clone, Debug)]
pub struct Simulation {
    scenario: Scenario,
    authority: RingAuthority,
    nodes: Vec<Node>,
    by_addr: BTreeMap<NetAddr, usize>,
    by_key: BTreeMap<PeerKey, usize>,
    host_free: Vec<Time>,
    queue: BinaryHeap<Scheduled>,
    seq: u64,
    now: Time,
    links: BTreeMap<(usize, usize), Link>,
    jitter_epoch: u64,
    drop_rng: ChaCha8Rng,
    next_token: u64,
    outstanding: BTreeMap<u64, TokenInfo>,
    counters: Counters,
    forgeries: ForgeryStats,
    watched: BTreeMap<u64, Option<Receipt>>,
    capture: Option<(Option<PeerKey>, Option<PeerKey>, Option<MsgType>)>,
    captured: Vec<Captured>,
    trace: Sha256,
    trace_lines: Option<Vec<String>>,
    events: Vec<SimEvent>,
    convictions: Vec<Conviction>,
    revocations_issued: Vec<PeerKey>,
}

impl Simulation {
    /// Creates every node and enrols it with the ring authority, without
    /// starting any of them.
    pub fn new(scenario: Scenario) -> Result<Simulation, SimError> {
        scenario.validate()?;
        let suite: Arc<dyn CryptoSuite> = StandardSuite::shared();
        let seed = scenario.seed;
        let authority_kp = suite.keypair_from_seed(&sub_seed(seed, b"authority", &[]));
        let mut authority = RingAuthority::new(scenario.domain.clone(), Authority::new(suite.clone(), authority_kp));
        let authority_public = authority.authority().public_key().to_vec();
        let cfg = NodeConfig {
            group_size: scenario.group_size,
            secure: scenario.secure,
            routing_mode: scenario.routing_mode,
            tick: scenario.tick,
            hop_limit: scenario.hop_limit,
            verify_probability: scenario.verify_probability,
            ..NodeConfig::default()
        };
        let mut nodes = Vec::with_capacity(scenario.n_peers);
        let mut by_addr = BTreeMap::new();
        let mut by_key = BTreeMap::new();
        for i in 0..scenario.n_peers {
            let addr = synthetic_addr(i);
            let key = derive_key(&addr);
            assert!(by_key.insert(key, i).is_none(), "duplicate synthetic address");
            by_addr.insert(addr, i);
            let kp = suite.keypair_from_seed(&sub_seed(seed, b"peer", &[key.key().as_bytes()]));
            let certificate = authority.enroll(key, kp.public.clone()).expect("fresh key");
            let creds = scenario.secure.then(|| NodeCredentials {
                identity: Identity { peer_key: key, keypair: kp, certificate },
                authority_public: authority_public.clone(),
            });
            let rng_seed = sub_seed(seed, b"node", &[key.key().as_bytes()]);
            nodes.push(Node::new(cfg.clone(), addr, creds, suite.clone(), rng_seed));
        }
        let hosts = scenario.n_peers.div_ceil(scenario.peers_per_host);
        Ok(Simulation {
            drop_rng: ChaCha8Rng::from_seed(sub_seed(seed, b"drop", &[])),
            authority,
            nodes,
            by_addr,
            by_key,
            host_free: vec![Time::ZERO; hosts],
            queue: BinaryHeap::new(),
            seq: 0,
            now: Time::ZERO,
            links: BTreeMap::new(),
            jitter_epoch: 0,
            next_token: 1,
            outstanding: BTreeMap::new(),
            counters: Counters::default(),
            forgeries: ForgeryStats::default(),
            watched: BTreeMap::new(),
            capture: None,
            captured: Vec::new(),
            trace: Sha256::new(),
            trace_lines: None,
            events: Vec::new(),
            convictions: Vec::new(),
            revocations_issued: Vec::new(),
            scenario,
        })
    }

    /// Joins every peer through the first one, one at a time, runs until
    /// the tables settle, then switches on the scenario's adversaries.
    pub fn build_ring(scenario: Scenario) -> Result<Simulation, SimError> {
        Simulation::new(scenario)?.build()
    }

    /// [`Simulation::build_ring`] on an already created simulation, for
    /// callers that want to record the trace of the build itself.
    pub fn build(mut self) -> Result<Simulation, SimError> {
        self.join_all()?;
        self.settle(Duration::from_secs(900))?;
        let adversaries: Vec<(PeerKey, Behavior)> =
            self.scenario.adversaries.iter().map(|(k, b)| (*k, *b)).collect();
        for (k, b) in adversaries {
            self.set_behavior(&k, b)?;
        }
        Ok(self)
    }

    fn join_all(&mut self) -> Result<(), SimError> {
        let bootstrap = self.nodes[0].addr();
        self.schedule(self.now, EventKind::Control { node: 0, input: Input::Start { bootstrap: None } });
        self.run_until(self.now);
        for i in 1..self.nodes.len() {
            self.schedule(self.now, EventKind::Control { node: i, input: Input::Start { bootstrap: Some(bootstrap) } });
            let key = self.nodes[i].key();
            let deadline = self.now + Duration::from_secs(120);
            let found = self.run_until_event(deadline, |e| {
                e.peer == key && matches!(e.event, NodeEvent::JoinComplete | NodeEvent::JoinFailed)
            });
            match found {
                Some(SimEvent { event: NodeEvent::JoinComplete, .. }) => {}
                _ => return Err(SimError::JoinFailed(key)),
            }
        }
        Ok(())
    }

    /// Runs until no table has changed for five ticks and every live node
    /// has completed a finger cycle that began after the last change.
    pub fn settle(&mut self, limit: Duration) -> Result<(), SimError> {
        let deadline = self.now + limit;
        let tick = self.scenario.tick;
        loop {
            let live: Vec<&Node> = self.nodes.iter().filter(|n| !n.has_left()).collect();
            let last_change = live.iter().map(|n| n.last_table_change()).max().unwrap_or(Time::ZERO);
            let quiet_for = self.now.saturating_sub(last_change);
            let cycled = live.iter().all(|n| n.last_full_cycle().is_some_and(|(start, _)| start >= last_change));
            if quiet_for >= tick * 5 && cycled {
                return Ok(());
            }
            if self.now >= deadline {
                return Err(SimError::NotQuiescent(limit));
            }
            self.run_for(tick);
        }
    }

    // ----- accessors -----

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, key: &PeerKey) -> Option<&Node> {
        self.by_key.get(key).map(|i| &self.nodes[*i])
    }

    pub fn keys(&self) -> Vec<PeerKey> {
        self.by_key.keys().copied().collect()
    }

    /// Keys of peers that have not left, sorted.
    pub fn live_keys(&self) -> BTreeSet<PeerKey> {
        self.nodes.iter().filter(|n| !n.has_left()).map(|n| n.key()).collect()
    }

    pub fn authority(&self) -> &RingAuthority {
        &self.authority
    }

    pub fn authority_mut(&mut self) -> &mut RingAuthority {
        &mut self.authority
    }

    pub fn counters(&self) -> Counters {
        let mut c = self.counters;
        c.in_flight = self.outstanding.len() as u64;
        c
    }

    pub fn forgeries(&self) -> ForgeryStats {
        self.forgeries
    }

    pub fn events(&self) -> &[SimEvent] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<SimEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn convictions(&self) -> &[Conviction] {
        &self.convictions
    }

    pub fn revocations_issued(&self) -> &[PeerKey] {
        &self.revocations_issued
    }

    pub fn trace_hash(&self) -> String {
        hex::encode(self.trace.clone().finalize())
    }

    /// Starts keeping trace lines in memory as well as hashing them.
    pub fn record_trace(&mut self) {
        self.trace_lines.get_or_insert_with(Vec::new);
    }

    pub fn trace_lines(&self) -> &[String] {
        self.trace_lines.as_deref().unwrap_or(&[])
    }

    // ----- control -----

    pub fn set_behavior(&mut self, key: &PeerKey, b: Behavior) -> Result<(), SimError> {
        let i = *self.by_key.get(key).ok_or(SimError::UnknownPeer(*key))?;
        self.nodes[i].set_behavior(b);
        Ok(())
    }

    /// Wraps `peer` in an adversarial behavior from now on.
    pub fn inject_adversary(&mut self, key: &PeerKey, b: Behavior) -> Result<(), SimError> {
        self.set_behavior(key, b)
    }

    pub fn set_routing_mode(&mut self, mode: RoutingMode) {
        for n in &mut self.nodes {
            n.set_routing_mode(mode);
        }
    }

    /// Delivers an input to a node at the current time.
    pub fn input(&mut self, key: &PeerKey, input: Input) -> Result<(), SimError> {
        let node = *self.by_key.get(key).ok_or(SimError::UnknownPeer(*key))?;
        self.schedule(self.now, EventKind::Control { node, input });
        Ok(())
    }

    pub fn command(&mut self, key: &PeerKey, cmd: AppCommand) -> Result<(), SimError> {
        self.input(key, Input::App(cmd))
    }

    /// Suspends or resumes periodic maintenance everywhere.
    pub fn set_quiet(&mut self, quiet: bool) {
        for node in 0..self.nodes.len() {
            self.schedule(self.now, EventKind::Control { node, input: Input::SetQuiet(quiet) });
        }
        self.run_until(self.now);
    }

    /// Restarts every link's jitter stream from a fresh, seed-derived state.
    pub fn reseed_jitter(&mut self, epoch: u64) {
        self.jitter_epoch = epoch;
        self.links.clear();
    }

    /// Copies matching datagrams into [`Simulation::captured`].
    pub fn capture(&mut self, from: Option<PeerKey>, to: Option<PeerKey>, msg_type: Option<MsgType>) {
        self.capture = Some((from, to, msg_type));
    }

    pub fn captured(&self) -> &[Captured] {
        &self.captured
    }

    /// Puts raw bytes on the wire to `to`, claiming to come from `from`.
    /// The receipt is available through [`Simulation::receipt`].
    pub fn inject(&mut self, to: &PeerKey, from: NetAddr, bytes: Vec<u8>) -> Result<u64, SimError> {
        let dst = *self.by_key.get(to).ok_or(SimError::UnknownPeer(*to))?;
        let token = self.next_token;
        self.next_token += 1;
        self.counters.sent += 1;
        self.watched.insert(token, None);
        let msg_type = crate::wire::peek_msg_type(&bytes).unwrap_or(MsgType::Heartbeat);
        self.outstanding_insert(token, TokenInfo { src: from, dst, msg_type, spoofed: false });
        let at = self.now + self.scenario.latency.base;
        self.schedule(at, EventKind::Deliver { to: dst, from, bytes, token });
        Ok(token)
    }

    pub fn receipt(&self, token: u64) -> Option<Receipt> {
        self.watched.get(&token).copied().flatten()
    }

    // ----- event loop -----

    fn schedule(&mut self, time: Time, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Scheduled { time, seq: self.seq, kind });
    }

    fn trace_line(&mut self, line: String) {
        self.trace.update(line.as_bytes());
        self.trace.update(b"\n");
        if let Some(lines) = &mut self.trace_lines {
            lines.push(line);
        }
    }

    /// Processes the next event. Returns false when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(ev) = self.queue.pop() else { return false };
        debug_assert!(ev.time >= self.now);
        self.now = ev.time;
        match ev.kind {
            EventKind::Deliver { to, from, bytes, token } => {
                if self.nodes[to].has_left() {
                    let info = self.outstanding.remove(&token).expect("tracked");
                    self.counters.dropped_model += 1;
                    self.finish_watch(token, None);
                    self.trace_line(format!(
                        "{}\tdrop\t{}\t{}\t{}\tdead",
                        self.now.as_nanos(),
                        info.src,
                        self.nodes[to].addr(),
                        info.msg_type
                    ));
                } else {
                    self.run_node(to, Input::Datagram { from, bytes, token });
                }
            }
            EventKind::Timer { node, kind } => self.run_node(node, Input::Timer(kind)),
            EventKind::Control { node, input } => self.run_node(node, input),
            EventKind::DirectoryQuery { node, peer } => {
                let result = self.authority.lookup(&peer);
                let at = self.now + self.scenario.latency.base;
                self.schedule(at, EventKind::Control { node, input: Input::Directory { peer, result } });
            }
            EventKind::Report { node, report } => {
                if let Ok(notice) = self.authority.consider(&report) {
                    self.revocations_issued.push(notice.peer_key);
                    let line = format!("{}\trevoke\tauthority\t{}\t-\tissued", self.now.as_nanos(), notice.peer_key);
                    self.trace_line(line);
                    let at = self.now + self.scenario.latency.base;
                    self.schedule(at, EventKind::Control { node, input: Input::Revoked(notice) });
                }
            }
        }
        true
    }

    pub fn run_until(&mut self, t: Time) {
        while self.queue.peek().is_some_and(|e| e.time <= t) {
            self.step();
        }
        if t > self.now {
            self.now = t;
        }
    }

    pub fn run_for(&mut self, d: Duration) {
        let t = self.now + d;
        self.run_until(t);
    }

    /// Runs until an event matching `pred` is logged or `deadline` passes.
    pub fn run_until_event(&mut self, deadline: Time, mut pred: impl FnMut(&SimEvent) -> bool) -> Option<SimEvent> {
        loop {
            let before = self.events.len();
            match self.queue.peek() {
                Some(e) if e.time <= deadline => {
                    self.step();
                }
                _ => {
                    self.run_until(deadline);
                    return None;
                }
            }
            if let Some(e) = self.events[before..].iter().find(|e| pred(e)) {
                return Some(e.clone());
            }
        }
    }

    fn run_node(&mut self, idx: usize, input: Input) {
        let costs = self.scenario.costs;
        let host = idx / self.scenario.peers_per_host;
        let start = self.now.max(self.host_free[host]);
        let out = self.nodes[idx].handle(start, input);
        let mut cursor = start + costs.recv;
        for send in out.sends {
            cursor += costs.crypto(&send.ops) + costs.send;
            self.transmit(idx, send, cursor);
        }
        cursor += costs.crypto(&out.tail_ops);
        self.host_free[host] = cursor;
        for (delay, kind) in out.timers {
            self.schedule(start + delay, EventKind::Timer { node: idx, kind });
        }
        for peer in out.lookups {
            self.schedule(cursor + self.scenario.latency.base, EventKind::DirectoryQuery { node: idx, peer });
        }
        for report in out.reports {
            self.schedule(cursor + self.scenario.latency.base, EventKind::Report { node: idx, report });
        }
        for (token, receipt) in out.receipts {
            self.settle_receipt(token, receipt);
        }
        let me = self.nodes[idx].key();
        for event in out.events {
            if let NodeEvent::Convicted { accused, kind, .. } = &event {
                self.convictions.push(Conviction { time: start, by: me, accused: *accused, kind: *kind });
            }
            let line = format!("{}\tevent\t{}\t-\t-\t{:?}", start.as_nanos(), me, event);
            self.trace_line(line);
            if event != NodeEvent::TableChanged {
                self.events.push(SimEvent { time: start, peer: me, event });
            }
        }
    }

    fn outstanding_insert(&mut self, token: u64, info: TokenInfo) {
        self.outstanding.insert(token, info);
    }

    fn finish_watch(&mut self, token: u64, receipt: Option<Receipt>) {
        if let Some(slot) = self.watched.get_mut(&token) {
            *slot = receipt;
        }
    }

    fn settle_receipt(&mut self, token: u64, receipt: Receipt) {
        let Some(info) = self.outstanding.remove(&token) else { return };
        let outcome = match receipt {
            Receipt::Delivered => {
                self.counters.delivered += 1;
                if info.spoofed {
                    self.forgeries.accepted += 1;
                }
                "delivered".to_string()
            }
            Receipt::HopLimit => {
                self.counters.dropped_hop_limit += 1;
                "hop_limit".to_string()
            }
            Receipt::Rejected(kind) => {
                self.counters.rejected_auth += 1;
                if info.spoofed {
                    self.forgeries.rejected += 1;
                }
                format!("rejected:{kind:?}")
            }
        };
        self.finish_watch(token, Some(receipt));
        let line = format!(
            "{}\tdeliver\t{}\t{}\t{}\t{}",
            self.now.as_nanos(),
            info.src,
            self.nodes[info.dst].addr(),
            info.msg_type,
            outcome
        );
        self.trace_line(line);
    }

    fn latency(&mut self, src: usize, dst: usize) -> Duration {
        let model = self.scenario.latency;
        if model.jitter.is_zero() {
            return model.base;
        }
        let (seed, epoch) = (self.scenario.seed, self.jitter_epoch);
        let keys = (self.nodes[src].key(), self.nodes[dst].key());
        let link = self.links.entry((src, dst)).or_insert_with(|| Link {
            rng: ChaCha8Rng::from_seed(sub_seed(
                seed,
                b"link",
                &[&epoch.to_be_bytes(), keys.0.key().as_bytes(), keys.1.key().as_bytes()],
            )),
            last_arrival: Time::ZERO,
        });
        let j = model.jitter.as_nanos() as u64;
        let offset = link.rng.gen_range(0..=2 * j);
        Duration::from_nanos(model.base.as_nanos() as u64 - j + offset)
    }

    fn transmit(&mut self, src: usize, send: Send, depart: Time) {
        let token = self.next_token;
        self.next_token += 1;
        self.counters.sent += 1;
        let from = send.spoofed_from.unwrap_or(self.nodes[src].addr());
        let spoofed = send.spoofed_from.is_some();
        if spoofed {
            self.forgeries.attempts += 1;
        }
        let dst = self.by_addr.get(&send.to).copied();
        if let Some((cf, ct, cm)) = self.capture {
            let src_key = self.nodes[src].key();
            let to_key = derive_key(&send.to);
            if cf.is_none_or(|k| k == src_key) && ct.is_none_or(|k| k == to_key) && cm.is_none_or(|m| m == send.msg_type) {
                self.captured.push(Captured { from, to: to_key, msg_type: send.msg_type, bytes: send.bytes.clone() });
            }
        }
        let lost = match dst {
            None => true,
            Some(_) => self.scenario.drop_rate > 0.0 && self.drop_rng.gen_bool(self.scenario.drop_rate),
        };
        if lost {
            self.counters.dropped_model += 1;
            let line = format!("{}\tdrop\t{}\t{}\t{}\tlost", depart.as_nanos(), from, send.to, send.msg_type);
            self.trace_line(line);
            return;
        }
        let dst = dst.expect("checked");
        let lat = self.latency(src, dst);
        let mut arrival = depart + lat;
        if let Some(link) = self.links.get_mut(&(src, dst)) {
            arrival = arrival.max(link.last_arrival);
            link.last_arrival = arrival;
        }
        let line = format!("{}\tsend\t{}\t{}\t{}\tqueued", depart.as_nanos(), from, send.to, send.msg_type);
        self.trace_line(line);
        self.outstanding_insert(token, TokenInfo { src: from, dst, msg_type: send.msg_type, spoofed });
        self.schedule(arrival, EventKind::Deliver { to: dst, from, bytes: send.bytes, token });
    }

    // ----- analysis -----

    /// Follows the nodes' tables from `src` toward `dest` without sending.
    pub fn trace_route(&self, src: &PeerKey, dest: &Key, mode: RoutingMode, rng: &mut dyn RngCore) -> Route {
        let mut path = vec![*src];
        let mut at = *src;
        for _ in 0..64 {
            let Some(node) = self.node(&at) else { break };
            let view = node.route_view();
            let next = match view.classify(dest) {
                RouteClass::Local => return Route { path, complete: true },
                RouteClass::Near(m) => Some(m),
                RouteClass::Far => view.next_hop(dest, mode, rng),
            };
            match next {
                Some(n) => {
                    path.push(n);
                    at = n;
                }
                None => break,
            }
        }
        Route { path, complete: false }
    }

    /// Differences between each live node's tables and those computed from
    /// the sorted set of live keys. Revoked peers are neither expected in
    /// tables nor checked themselves.
    pub fn oracle_mismatches(&self) -> Vec<String> {
        let revoked: BTreeSet<PeerKey> = self.revocations_issued.iter().copied().collect();
        let live: BTreeSet<PeerKey> = self.live_keys().difference(&revoked).copied().collect();
        let g = self.scenario.group_size;
        let ring: Vec<PeerKey> = live.iter().copied().collect();
        let successor_of = |k: &Key| *ring.iter().find(|p| p.key() >= k).unwrap_or(&ring[0]);
        let mut out = Vec::new();
        for n in self.nodes.iter().filter(|n| !n.has_left() && !revoked.contains(&n.key())) {
            let me = n.key();
            let succ = successors_in(&live, &me, 1).first().copied();
            let pred = crate::protocol::group::predecessors_in(&live, &me, 1).first().copied();
            if n.successor() != succ {
                out.push(format!("{me}: successor {:?}, expected {:?}", n.successor(), succ));
            }
            if n.predecessor() != pred {
                out.push(format!("{me}: predecessor {:?}, expected {:?}", n.predecessor(), pred));
            }
            let group = window_around(&live, &me, g);
            if n.group() != &group {
                out.push(format!("{me}: group differs"));
            }
            for i in 0..crate::keyspace::KEY_BITS {
                let target = n.fingers().target(i);
                let want = successor_of(&target);
                let have = n.fingers().get(i).map(|e| e.leader());
                let ok = if want == me { have.is_none() } else { have == Some(want) };
                if !ok {
                    out.push(format!("{me}: finger {i} leader {have:?}, expected {want}"));
                }
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let c = self.counters();
        let mut s = String::new();
        let _ = writeln!(s, "time\t{:.6}", self.now.as_secs_f64());
        let _ = writeln!(s, "peers\t{}", self.live_keys().len());
        let _ = writeln!(s, "sent\t{}", c.sent);
        let _ = writeln!(s, "delivered\t{}", c.delivered);
        let _ = writeln!(s, "dropped_model\t{}", c.dropped_model);
        let _ = writeln!(s, "dropped_hop_limit\t{}", c.dropped_hop_limit);
        let _ = writeln!(s, "rejected_auth\t{}", c.rejected_auth);
        let _ = writeln!(s, "in_flight\t{}", c.in_flight);
        let _ = writeln!(s, "convictions\t{}", self.convictions.len());
        let _ = writeln!(s, "revocations\t{}", self.revocations_issued.len());
        let _ = writeln!(s, "trace_hash\t{}", self.trace_hash());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, secure: bool, seed: u64) -> Scenario {
        Scenario { n_peers: n, secure, seed, ..Scenario::default() }
    }

    #[test]
    fn two_peers_point_at_each_other() {
        let sim = Simulation::build_ring(small(2, true, 1)).unwrap();
        let k = sim.keys();
        assert_eq!(sim.node(&k[0]).unwrap().successor(), Some(k[1]));
        assert_eq!(sim.node(&k[0]).unwrap().predecessor(), Some(k[1]));
        assert_eq!(sim.node(&k[1]).unwrap().successor(), Some(k[0]));
        assert!(sim.oracle_mismatches().is_empty(), "{:?}", sim.oracle_mismatches());
    }

    #[test]
    fn small_secure_ring_matches_oracle_and_balances() {
        let mut sim = Simulation::build_ring(small(24, true, 3)).unwrap();
        assert!(sim.oracle_mismatches().is_empty(), "{:#?}", sim.oracle_mismatches());
        assert!(sim.convictions().is_empty());
        sim.run_for(Duration::from_secs(5));
        assert!(sim.counters().balanced(), "{:?}", sim.counters());
    }

    #[test]
    fn same_seed_same_trace_and_steps_compose() {
        let a = Simulation::build_ring(small(10, false, 9)).unwrap();
        let b = Simulation::build_ring(small(10, false, 9)).unwrap();
        assert_eq!(a.trace_hash(), b.trace_hash());
        let mut one = a.clone();
        let mut two = a.clone();
        one.run_for(Duration::from_secs(4));
        two.run_for(Duration::from_secs(1));
        two.run_for(Duration::from_secs(3));
        two.run_until(two.now());
        assert_eq!(one.trace_hash(), two.trace_hash());
        let c = Simulation::build_ring(small(10, false, 10)).unwrap();
        assert_ne!(a.trace_hash(), c.trace_hash());
    }

    #[test]
    fn lossy_links_stay_deterministic_and_balanced() {
        let s = Scenario { drop_rate: 0.1, ..small(8, false, 4) };
        let mut a = Simulation::new(s.clone()).unwrap();
        let mut b = Simulation::new(s).unwrap();
        for sim in [&mut a, &mut b] {
            let _ = sim.join_all();
            sim.run_for(Duration::from_secs(10));
        }
        assert_eq!(a.counters(), b.counters());
        assert!(a.counters().dropped_model > 0);
        assert!(a.counters().balanced());
    }

    #[test]
    fn trace_route_reaches_the_owner() {
        let sim = Simulation::build_ring(small(32, false, 5)).unwrap();
        let keys = sim.keys();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in 0..50u64 {
            let dest = Key::from_u64(t.wrapping_mul(0x9e37_79b9_7f4a_7c15)).wrapping_add(&Key::pow2(155).unwrap());
            let owner = *keys.iter().find(|k| k.key() >= &dest).unwrap_or(&keys[0]);
            for mode in [RoutingMode::Deterministic, RoutingMode::Randomized] {
                let r = sim.trace_route(&keys[t as usize % 32], &dest, mode, &mut rng);
                assert!(r.complete);
                assert_eq!(r.responsible(), owner);
            }
        }
    }
}
