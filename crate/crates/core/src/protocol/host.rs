//! Runs one [`Node`] over a datagram [`Transport`] against the wall clock.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::time::{Duration, Instant};

use crate::clock::Time;
use crate::directory::{Directory, EvidenceReport};
use crate::keyspace::NetAddr;
use crate::wire::{Transport, TransportError};

use super::node::{Input, Node, NodeEvent, Output, Receipt};

/// Longest single wait on the socket, so timers stay responsive.
const MAX_WAIT: Duration = Duration::from_millis(50);

pub struct Host<T: Transport> {
    node: Node,
    transport: T,
    directory: Box<dyn Directory>,
    ring_domain: String,
    epoch: Instant,
    timers: BinaryHeap<Reverse<(Time, u64, super::node::TimerKind)>>,
    timer_seq: u64,
    inputs: VecDeque<Input>,
    next_token: u64,
    events: Vec<NodeEvent>,
    reports: Vec<EvidenceReport>,
    rejected: u64,
    send_failures: u64,
}

impl<T: Transport> Host<T> {
    pub fn new(node: Node, transport: T, directory: Box<dyn Directory>, ring_domain: impl Into<String>) -> Self {
        Host {
            node,
            transport,
            directory,
            ring_domain: ring_domain.into(),
            epoch: Instant::now(),
            timers: BinaryHeap::new(),
            timer_seq: 0,
            inputs: VecDeque::new(),
            next_token: 0,
            events: Vec::new(),
            reports: Vec::new(),
            rejected: 0,
            send_failures: 0,
        }
    }

    pub fn now(&self) -> Time {
        Time::from_nanos(self.epoch.elapsed().as_nanos() as u64)
    }

    pub fn node(&self) -> &Node {
        &self.node
    }

    pub fn local_addr(&self) -> NetAddr {
        self.transport.local_addr()
    }

    /// Queues an input for the next [`Host::run_for`].
    pub fn push(&mut self, input: Input) {
        self.inputs.push_back(input);
    }

    pub fn take_events(&mut self) -> Vec<NodeEvent> {
        std::mem::take(&mut self.events)
    }

    /// Evidence the node wanted to send to the ring authority.
    pub fn take_reports(&mut self) -> Vec<EvidenceReport> {
        std::mem::take(&mut self.reports)
    }

    /// Datagrams refused by the authentication layer so far.
    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    /// Datagrams the transport refused to send.
    pub fn send_failures(&self) -> u64 {
        self.send_failures
    }

    /// Handles queued inputs, due timers and arriving datagrams until `d`
    /// has elapsed.
    pub fn run_for(&mut self, d: Duration) -> Result<(), TransportError> {
        let deadline = self.now() + d;
        loop {
            while let Some(input) = self.inputs.pop_front() {
                self.handle(input);
            }
            let now = self.now();
            while self.timers.peek().is_some_and(|t| t.0 .0 <= now) {
                let Reverse((_, _, kind)) = self.timers.pop().expect("peeked");
                self.handle(Input::Timer(kind));
            }
            if !self.inputs.is_empty() {
                continue;
            }
            let now = self.now();
            if now >= deadline {
                return Ok(());
            }
            let next = self.timers.peek().map_or(deadline, |t| t.0 .0.min(deadline));
            let wait = next.saturating_sub(now).min(MAX_WAIT);
            if let Some((from, bytes)) = self.transport.recv_timeout(wait)? {
                let token = self.next_token;
                self.next_token += 1;
                self.handle(Input::Datagram { from, bytes, token });
            }
        }
    }

    fn handle(&mut self, input: Input) {
        let now = self.now();
        let out = self.node.handle(now, input);
        self.apply(now, out);
    }

    fn apply(&mut self, now: Time, out: Output) {
        for s in out.sends {
            if self.transport.send(s.to, &s.bytes).is_err() {
                self.send_failures += 1;
            }
        }
        for (delay, kind) in out.timers {
            self.timer_seq += 1;
            self.timers.push(Reverse((now + delay, self.timer_seq, kind)));
        }
        for peer in out.lookups {
            let result = self.directory.lookup(&self.ring_domain, &peer);
            self.inputs.push_back(Input::Directory { peer, result });
        }
        self.rejected += out.receipts.iter().filter(|(_, r)| matches!(r, Receipt::Rejected(_))).count() as u64;
        self.reports.extend(out.reports);
        self.events.extend(out.events);
    }
}
