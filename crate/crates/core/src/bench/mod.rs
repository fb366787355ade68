//! Latency, throughput and hot-potato capacity experiments driven through a
//! [`Simulation`].

pub mod report;
pub mod stats;

use std::collections::BTreeMap;
use std::time::Duration;

use thiserror::Error;

use crate::keyspace::PeerKey;
use crate::protocol::node::{AppCommand, NodeEvent};
use crate::routing::RoutingMode;
use crate::simnet::{CostModel, LatencyModel, SimError, Simulation};

pub use stats::{latency_penalty, mean_of_minima, summarize, throughput_penalty, SummaryStats};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BenchError {
    #[error("no values to summarize")]
    Empty,
    #[error("non-finite value")]
    NotFinite,
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyPlan {
    pub series: usize,
    pub runs_per_series: usize,
    pub pings_per_test: u32,
    pub initiator: PeerKey,
    pub responders: Vec<PeerKey>,
    /// Budget for one ping test before the responder is marked absent.
    pub timeout: Duration,
}

impl LatencyPlan {
    /// Reduced counts suitable for a quick run.
    pub fn desk(initiator: PeerKey, responders: Vec<PeerKey>) -> LatencyPlan {
        LatencyPlan {
            series: 4,
            runs_per_series: 4,
            pings_per_test: 10,
            initiator,
            responders,
            timeout: Duration::from_secs(5),
        }
    }

    /// The full published counts.
    pub fn full(initiator: PeerKey, responders: Vec<PeerKey>) -> LatencyPlan {
        LatencyPlan { series: 12, runs_per_series: 10, ..LatencyPlan::desk(initiator, responders) }
    }

    fn validate(&self) -> Result<(), BenchError> {
        if self.series == 0 || self.runs_per_series == 0 || self.pings_per_test == 0 {
            return Err(BenchError::Plan("counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeerLatency {
    pub peer: PeerKey,
    /// Round-trip hop count, both directions included.
    pub hops: Option<u32>,
    /// Seconds per ping; `None` when the responder never answered.
    pub rtt: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub peers: Vec<PeerLatency>,
    pub stats: Option<SummaryStats>,
}

impl LatencyReport {
    pub fn get(&self, peer: &PeerKey) -> Option<&PeerLatency> {
        self.peers.iter().find(|p| p.peer == *peer)
    }
}

/// Uses a fresh id space per experiment so ids never collide with earlier
/// runs on the same simulation.
fn id_base(sim: &Simulation) -> u64 {
    sim.now().as_nanos().wrapping_mul(1 << 12)
}

/// Runs one ping test and returns `(seconds per ping, round-trip hops)`.
fn ping_test(
    sim: &mut Simulation,
    initiator: PeerKey,
    target: PeerKey,
    count: u32,
    burst: u64,
    timeout: Duration,
) -> Result<Option<(f64, u32)>, BenchError> {
    sim.command(&initiator, AppCommand::Ping { burst, target: *target.key(), count })?;
    let deadline = sim.now() + timeout;
    let ev = sim.run_until_event(deadline, |e| {
        e.peer == initiator && matches!(e.event, NodeEvent::PingBurstDone { burst: b, .. } if b == burst)
    });
    Ok(ev.and_then(|e| match e.event {
        NodeEvent::PingBurstDone { elapsed, count, hops, .. } => Some((elapsed.as_secs_f64() / count as f64, hops)),
        _ => None,
    }))
}

/// Pings every responder through the overlay and reports the mean over
/// series of the fastest run in each series.
///
/// Maintenance is suspended and routing is deterministic for the duration.
/// Each series restarts the link jitter streams from the same states, so
/// two simulations of the same ring see the same jitter draws.
pub fn run_latency(sim: &mut Simulation, plan: &LatencyPlan) -> Result<LatencyReport, BenchError> {
    plan.validate()?;
    sim.set_quiet(true);
    sim.set_routing_mode(RoutingMode::Deterministic);
    let mut id = id_base(sim);
    let responders: Vec<PeerKey> = plan.responders.iter().copied().filter(|r| *r != plan.initiator).collect();

    // One unmeasured ping per pair sets up sessions and caches.
    let mut reachable = BTreeMap::new();
    for r in &responders {
        id += 1;
        let ok = ping_test(sim, plan.initiator, *r, 1, id, plan.timeout)?.is_some();
        reachable.insert(*r, ok);
    }

    let mut series: BTreeMap<PeerKey, Vec<Vec<f64>>> = BTreeMap::new();
    let mut hops: BTreeMap<PeerKey, u32> = BTreeMap::new();
    for s in 0..plan.series {
        sim.reseed_jitter(s as u64 + 1);
        for r in &responders {
            let mut runs = Vec::new();
            if reachable[r] {
                for _ in 0..plan.runs_per_series {
                    id += 1;
                    if let Some((rtt, h)) = ping_test(sim, plan.initiator, *r, plan.pings_per_test, id, plan.timeout)? {
                        runs.push(rtt);
                        hops.insert(*r, h);
                    }
                }
            }
            series.entry(*r).or_default().push(runs);
        }
    }

    let peers: Vec<PeerLatency> = responders
        .iter()
        .map(|r| PeerLatency { peer: *r, hops: hops.get(r).copied(), rtt: mean_of_minima(&series[r]) })
        .collect();
    let values: Vec<f64> = peers.iter().filter_map(|p| p.rtt).collect();
    let stats = summarize(&values).ok();
    Ok(LatencyReport { peers, stats })
}

/// Packets per second from `responder` back to `initiator`, computed as
/// `(received - 1) / (t_last - t_first)`. A run in which fewer than two
/// packets arrive is retried once.
pub fn run_throughput(
    sim: &mut Simulation,
    initiator: PeerKey,
    responder: PeerKey,
    n_packets: u32,
    timeout: Duration,
) -> Result<Option<f64>, BenchError> {
    if n_packets < 2 {
        return Err(BenchError::Plan("at least two packets are needed".into()));
    }
    let mut id = id_base(sim);
    for _attempt in 0..2 {
        id += 1;
        sim.command(&initiator, AppCommand::Throughput { id, target: *responder.key(), count: n_packets })?;
        let deadline = sim.now() + timeout;
        sim.run_until_event(deadline, |e| {
            e.peer == initiator && matches!(e.event, NodeEvent::ThroughputDone { id: i, .. } if i == id)
        });
        let progress = sim.node(&initiator).and_then(|n| n.throughput_progress(id));
        if let Some((first, last, received)) = progress {
            if received >= 2 && last > first {
                return Ok(Some((received - 1) as f64 / last.saturating_sub(first).as_secs_f64()));
            }
        }
    }
    Ok(None)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThroughputReport {
    /// `(responder, packets per second)`.
    pub peers: Vec<(PeerKey, Option<f64>)>,
    pub stats: Option<SummaryStats>,
}

/// [`run_throughput`] for each responder in turn, with maintenance
/// suspended and deterministic routing.
pub fn run_throughput_all(
    sim: &mut Simulation,
    initiator: PeerKey,
    responders: &[PeerKey],
    n_packets: u32,
    timeout: Duration,
) -> Result<ThroughputReport, BenchError> {
    sim.set_quiet(true);
    sim.set_routing_mode(RoutingMode::Deterministic);
    let mut peers = Vec::new();
    for (i, r) in responders.iter().filter(|r| **r != initiator).enumerate() {
        sim.reseed_jitter(1_000 + i as u64);
        peers.push((*r, run_throughput(sim, initiator, *r, n_packets, timeout)?));
    }
    let values: Vec<f64> = peers.iter().filter_map(|p| p.1).collect();
    let stats = summarize(&values).ok();
    Ok(ThroughputReport { peers, stats })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PotatoPlan {
    /// Numbers of potatoes in play, one experiment each.
    pub loads: Vec<usize>,
    pub min_residency: Duration,
    /// Measurements taken per load level.
    pub measurements: usize,
    /// Simulated time allowed per load level.
    pub timeout: Duration,
}

impl Default for PotatoPlan {
    fn default() -> Self {
        PotatoPlan {
            loads: vec![2, 4, 8, 16, 32, 64],
            min_residency: Duration::from_millis(250),
            measurements: 75,
            timeout: Duration::from_secs(120),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadResult {
    pub load: usize,
    /// Passes per second seen by individual potatoes.
    pub stats: SummaryStats,
    /// Mean passes per second times the number of potatoes.
    pub capacity: f64,
    /// Potatoes that never reported back before the deadline.
    pub lost: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CapacityReport {
    pub levels: Vec<LoadResult>,
}

/// Fraction of peak capacity at which the system counts as saturated.
pub const SATURATION_FRACTION: f64 = 0.95;

impl CapacityReport {
    pub fn peak(&self) -> f64 {
        self.levels.iter().map(|l| l.capacity).fold(0.0, f64::max)
    }

    /// The smallest load whose capacity reaches [`SATURATION_FRACTION`] of
    /// the peak.
    pub fn saturation(&self) -> Option<usize> {
        let peak = self.peak();
        self.levels.iter().find(|l| l.capacity >= SATURATION_FRACTION * peak).map(|l| l.load)
    }

    pub fn capacity_at(&self, load: usize) -> Option<f64> {
        self.levels.iter().find(|l| l.load == load).map(|l| l.capacity)
    }

    /// Capacity never falls between consecutive loads up to saturation.
    pub fn rises_to_saturation(&self) -> bool {
        let Some(sat) = self.saturation() else { return false };
        let pre: Vec<f64> = self.levels.iter().filter(|l| l.load <= sat).map(|l| l.capacity).collect();
        pre.windows(2).all(|w| w[0] <= w[1])
    }

    /// Relative change from saturation to the first load at least twice as
    /// large, if the sweep reaches that far.
    pub fn plateau_drift(&self) -> Option<f64> {
        let sat = self.saturation()?;
        let at_sat = self.capacity_at(sat)?;
        let later = self.levels.iter().find(|l| l.load >= 2 * sat)?;
        Some((later.capacity - at_sat).abs() / at_sat)
    }
}

/// Plays hot potato at each load level on a copy of `ring`.
///
/// Potatoes start at distinct peers. Each load level collects the first
/// `measurements` reports, and every potato is reinjected often enough for
/// that many to arrive.
pub fn run_hot_potato(ring: &Simulation, plan: &PotatoPlan) -> Result<CapacityReport, BenchError> {
    if plan.loads.iter().any(|l| *l == 0) || plan.measurements == 0 {
        return Err(BenchError::Plan("loads and measurement count must be positive".into()));
    }
    let mut levels = Vec::new();
    for &load in &plan.loads {
        let mut sim = ring.clone();
        levels.push(potato_level(&mut sim, load, plan)?);
    }
    Ok(CapacityReport { levels })
}

fn potato_level(sim: &mut Simulation, load: usize, plan: &PotatoPlan) -> Result<LoadResult, BenchError> {
    sim.set_quiet(true);
    let keys: Vec<PeerKey> = sim.live_keys().into_iter().collect();
    let ttl = plan.measurements.div_ceil(load) as u32;
    let base = id_base(sim);
    let mut pending: BTreeMap<u64, bool> = BTreeMap::new();
    for i in 0..load {
        let id = base + i as u64;
        let origin = keys[i * keys.len() / load.max(1) % keys.len()];
        sim.command(&origin, AppCommand::InjectPotato { id, min_residency: plan.min_residency, ttl })?;
        pending.insert(id, false);
    }
    let mut rates = Vec::new();
    let deadline = sim.now() + plan.timeout;
    sim.take_events();
    while rates.len() < plan.measurements {
        let hit = sim.run_until_event(deadline, |e| matches!(e.event, NodeEvent::PotatoMeasured { .. }));
        let Some(_) = hit else { break };
        for e in sim.take_events() {
            if let NodeEvent::PotatoMeasured { id, passes, residency } = e.event {
                if let Some(seen) = pending.get_mut(&id) {
                    *seen = true;
                    if rates.len() < plan.measurements {
                        rates.push(passes as f64 / residency.as_secs_f64());
                    }
                }
            }
        }
    }
    let lost = if rates.len() < plan.measurements { pending.values().filter(|s| !**s).count().max(1) } else { 0 };
    let stats = summarize(&rates)?;
    Ok(LoadResult { load, capacity: stats.mean * load as f64, stats, lost })
}

/// Passes per second of a single potato between two peers on separate
/// hosts, with a fixed one-way latency and no cryptographic cost: each pass
/// is three one-way messages, each received and answered.
pub fn two_peer_passes_per_sec(latency: &LatencyModel, costs: &CostModel) -> f64 {
    let per_message = latency.base + costs.recv + costs.send;
    1.0 / (3.0 * per_message.as_secs_f64())
}
