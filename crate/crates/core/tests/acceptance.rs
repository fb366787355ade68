//! End-to-end acceptance checks. Each criterion prints one PASS or FAIL
//! line; the process exits nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use keeperring_core::auth::{CryptoSuite, MacKey, StandardSuite};
use keeperring_core::bench::{
    latency_penalty, run_hot_potato, run_latency, run_throughput_all, summarize, throughput_penalty,
    two_peer_passes_per_sec, LatencyPlan, PotatoPlan,
};
use keeperring_core::keyspace::{derive_key, validate_key, Key, NetAddr, PeerKey};
use keeperring_core::protocol::adversary::{Behavior, Fabrication, Mutation};
use keeperring_core::protocol::node::{AppCommand, NodeEvent, Receipt, RejectKind};
use keeperring_core::routing::{RouteClass, RoutingMode};
use keeperring_core::simnet::{LatencyModel, Scenario, Simulation};
use keeperring_core::wire::{AuthKind, Envelope, MsgType};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(ok)
    }
}

fn ring_255() -> &'static Simulation {
    use std::sync::OnceLock;
    static RING: OnceLock<Simulation> = OnceLock::new();
    RING.get_or_init(|| Simulation::build_ring(Scenario { n_peers: 255, seed: 11, ..Scenario::default() }).unwrap())
}

fn ring_correctness() -> Outcome {
    let sim = ring_255();
    let mismatches = sim.oracle_mismatches();
    let c = sim.counters();
    check(
        mismatches.is_empty() && c.balanced() && sim.live_keys().len() == 255,
        format!("255 peers, {} table mismatches, counters balanced: {}", mismatches.len(), c.balanced()),
    )
}

fn key_uniformity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut addrs = BTreeSet::new();
    while addrs.len() < 10_000 {
        addrs.insert(NetAddr::new(rng.gen::<u32>().into(), rng.gen_range(1024..u16::MAX)));
    }
    let mut buckets = [0u64; 256];
    let mut round_trip = 0;
    let mut survived = 0;
    for a in &addrs {
        let k = derive_key(a);
        buckets[k.key().0[0] as usize] += 1;
        if validate_key(k.key()) && k.addr() == *a {
            round_trip += 1;
        }
        for bit in 0..112 {
            let mut m = *k.key();
            m.0[bit / 8] ^= 0x80 >> (bit % 8);
            if validate_key(&m) {
                survived += 1;
            }
        }
    }
    let expected = addrs.len() as f64 / 256.0;
    let chi2: f64 = buckets.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new(255.0).unwrap().inverse_cdf(0.99);
    check(
        chi2 < critical && round_trip == addrs.len() && survived == 0,
        format!(
            "chi2 {chi2:.1} < {critical:.1}, {round_trip}/10000 validate, {survived} of 1120000 mutations accepted"
        ),
    )
}

fn hop_bounds() -> Outcome {
    let sim = ring_255();
    let keys = sim.keys();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut det_max, mut rnd_max, mut disagree, mut wrong, mut incomplete) = (0, 0, 0, 0, 0);
    let mut det_total = 0;
    for _ in 0..10_000 {
        let src = *keys.choose(&mut rng).unwrap();
        let dest = Key::from_bytes(rng.gen());
        let d = sim.trace_route(&src, &dest, RoutingMode::Deterministic, &mut rng);
        let r = sim.trace_route(&src, &dest, RoutingMode::Randomized, &mut rng);
        if !d.complete || !r.complete {
            incomplete += 1;
            continue;
        }
        det_max = det_max.max(d.hops());
        rnd_max = rnd_max.max(r.hops());
        det_total += d.hops();
        if d.responsible() != r.responsible() {
            disagree += 1;
        }
        let owner = *keys.iter().find(|k| k.key() >= &dest).unwrap_or(&keys[0]);
        if d.responsible() != owner {
            wrong += 1;
        }
    }
    check(
        det_max <= 8 && rnd_max <= 11 && disagree == 0 && wrong == 0 && incomplete == 0,
        format!(
            "max hops deterministic {det_max} (mean {:.2}), randomized {rnd_max}; {disagree} disagreements, {wrong} wrong owners",
            det_total as f64 / 10_000.0
        ),
    )
}

/// Eligible next hops at every forwarding step of the deterministic path.
fn min_fan_out(sim: &Simulation, path: &[PeerKey], dest: &Key) -> usize {
    let mut min = usize::MAX;
    for w in path.windows(2) {
        let view = sim.node(&w[0]).unwrap().route_view();
        if view.classify(dest) != RouteClass::Far {
            continue;
        }
        let fan = sim
            .node(&w[0])
            .unwrap()
            .fingers()
            .entries()
            .find(|e| e.leader() == w[1])
            .map_or(0, |e| view.eligible(&e.group, dest).len());
        min = min.min(fan);
    }
    min
}

fn send_traced(sim: &mut Simulation, src: PeerKey, dest: PeerKey, count: u64, base: u64) -> Vec<Vec<PeerKey>> {
    for i in 0..count {
        sim.command(&src, AppCommand::Send { id: base + i, dest: *dest.key(), trace: true }).unwrap();
        sim.run_for(Duration::from_millis(20));
    }
    sim.run_for(Duration::from_secs(1));
    sim.take_events()
        .into_iter()
        .filter(|e| e.peer == dest)
        .filter_map(|e| match e.event {
            NodeEvent::AppDelivered { id, route, .. } if (base..base + count).contains(&id) => Some(route),
            _ => None,
        })
        .collect()
}

fn choke_points() -> Outcome {
    let mut sim = ring_255().clone();
    sim.set_quiet(true);
    sim.set_routing_mode(RoutingMode::Randomized);
    sim.take_events();
    let keys = sim.keys();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pairs = Vec::new();
    while pairs.len() < 20 {
        let (s, d) = (*keys.choose(&mut rng).unwrap(), *keys.choose(&mut rng).unwrap());
        let path = sim.trace_route(&s, d.key(), RoutingMode::Deterministic, &mut rng).path;
        if path.len() > 3 && min_fan_out(&sim, &path, d.key()) >= 2 {
            pairs.push((s, d, path));
        }
    }
    let mut worst_share: f64 = 0.0;
    let mut undelivered = 0;
    for (i, (s, d, _)) in pairs.iter().enumerate() {
        let routes = send_traced(&mut sim, *s, *d, 200, 1_000_000 * (i as u64 + 1));
        undelivered += 200 - routes.len();
        let mut seen: BTreeMap<PeerKey, usize> = BTreeMap::new();
        for r in &routes {
            let inner: BTreeSet<PeerKey> = r[1..r.len() - 1].iter().copied().collect();
            for p in inner {
                *seen.entry(p).or_default() += 1;
            }
        }
        let top = seen.values().copied().max().unwrap_or(0);
        worst_share = worst_share.max(top as f64 / routes.len().max(1) as f64);
    }

    let (s, d, path) = &pairs[0];
    let adversary = path[path.len() / 2];
    let mut sim = ring_255().clone();
    sim.set_quiet(true);
    sim.set_routing_mode(RoutingMode::Randomized);
    sim.inject_adversary(&adversary, Behavior::DropAll).unwrap();
    sim.take_events();
    let delivered = send_traced(&mut sim, *s, *d, 200, 50_000_000).len();
    let ratio = delivered as f64 / 200.0;
    check(
        worst_share < 1.0 && undelivered == 0 && ratio >= 0.5,
        format!(
            "busiest relay on {:.0}% of a pair's routes, {undelivered} lost; delivery past a dropper {:.0}%",
            worst_share * 100.0,
            ratio * 100.0
        ),
    )
}

fn policing() -> Outcome {
    let n = 40;
    let mut honest_verdicts = 0;
    let mut igl = Vec::new();
    let mut ffs = Vec::new();
    let mut lingering = 0;
    for seed in 1..=10u64 {
        let scenario =
            Scenario { n_peers: n, seed, routing_mode: RoutingMode::Randomized, ..Scenario::default() };
        let ring = Simulation::build_ring(scenario).unwrap();
        let tick = ring.scenario().tick;

        let mut sim = ring.clone();
        sim.run_for(Duration::from_secs(20));
        honest_verdicts += sim.convictions().len();

        let keys = ring.keys();
        let adversary = keys[(seed as usize * 7) % n];
        let mut sim = ring.clone();
        let t0 = sim.now();
        sim.inject_adversary(&adversary, Behavior::InconsistentGroupList(Mutation::Fabricate)).unwrap();
        let ev = sim.run_until_event(t0 + Duration::from_secs(30), |e| {
            matches!(&e.event, NodeEvent::Convicted { accused, .. } if *accused == adversary)
        });
        let ok = ev.as_ref().is_some_and(|e| e.time.saturating_sub(t0) <= tick * 2 && e.peer != adversary);
        igl.push(ok);
        if ok {
            // One flood and one maintenance tick after the authority acts.
            let deadline = sim.now() + Duration::from_secs(30);
            while !sim.revocations_issued().contains(&adversary) && sim.now() < deadline {
                sim.step();
            }
            sim.run_for(tick + Duration::from_millis(100));
            lingering += sim
                .nodes()
                .iter()
                .filter(|node| node.key() != adversary && !node.has_left() && node.mentions(&adversary))
                .count();
        }

        for fabrication in [Fabrication::FarGroup, Fabrication::SelfGroup] {
            let mut sim = ring.clone();
            let before: BTreeMap<PeerKey, u64> = sim.nodes().iter().map(|n| (n.key(), n.finger_cycles())).collect();
            let t0 = sim.now();
            sim.inject_adversary(&adversary, Behavior::FraudulentFindSucc(fabrication)).unwrap();
            let ev = sim.run_until_event(t0 + Duration::from_secs(60), |e| {
                matches!(&e.event, NodeEvent::Convicted { accused, .. } if *accused == adversary)
            });
            let cycles = ev.map(|e| sim.node(&e.peer).unwrap().finger_cycles() - before[&e.peer]);
            ffs.push(cycles.is_some_and(|c| c <= 2));
        }
    }
    let igl_ok = igl.iter().filter(|b| **b).count();
    let ffs_ok = ffs.iter().filter(|b| **b).count();
    check(
        honest_verdicts == 0 && igl_ok == 10 && ffs_ok == 20 && lingering == 0,
        format!(
            "honest verdicts {honest_verdicts}; group-list liar convicted within 2 exchanges {igl_ok}/10; \
             lookup liar convicted within 2 refresh cycles {ffs_ok}/20; stale references after eviction {lingering}"
        ),
    )
}

fn authentication() -> Outcome {
    let ring = Simulation::build_ring(Scenario { n_peers: 24, seed: 6, ..Scenario::default() }).unwrap();
    let keys = ring.keys();

    let mut sim = ring.clone();
    sim.inject_adversary(&keys[3], Behavior::Spoof { victim: keys[9], per_tick: 500 }).unwrap();
    sim.run_for(Duration::from_secs(21));
    sim.run_for(Duration::from_secs(1));
    let f = sim.forgeries();

    let mut sim = ring.clone();
    let (a, b) = (keys[0], ring.node(&keys[0]).unwrap().successor().unwrap());
    sim.capture(Some(a), Some(b), None);
    sim.run_for(Duration::from_secs(5));
    let mac: Vec<Vec<u8>> = sim
        .captured()
        .iter()
        .filter(|c| Envelope::decode(&c.bytes).is_ok_and(|e| e.auth_kind == AuthKind::Mac))
        .map(|c| c.bytes.clone())
        .take(50)
        .collect();
    let mut tokens = Vec::new();
    for bytes in &mac {
        let replay = sim.inject(&b, a.addr(), bytes.clone()).unwrap();
        let mut env = Envelope::decode(bytes).unwrap();
        if env.payload.is_empty() {
            env.seq += 1_000_000;
        } else {
            env.payload[0] ^= 1;
        }
        let tamper = sim.inject(&b, a.addr(), env.encode().unwrap()).unwrap();
        tokens.push((replay, tamper));
    }
    sim.run_for(Duration::from_millis(100));
    let replays = tokens.iter().filter(|t| sim.receipt(t.0) == Some(Receipt::Rejected(RejectKind::Replay))).count();
    let tampers = tokens.iter().filter(|t| sim.receipt(t.1) == Some(Receipt::Rejected(RejectKind::Tamper))).count();

    let suite = StandardSuite;
    let kp = suite.keypair_from_seed(&[7; 32]);
    let mac_key = MacKey::new(&[9; 32]);
    let mut env = Envelope::new(MsgType::Ping, Key::from_u64(1), Key::from_u64(2), vec![0x5a; 48]);
    let (sig_n, mac_n) = (1_000u64, 100_000u64);
    let t = Instant::now();
    for i in 0..sig_n {
        env.seq = i;
        let bytes = env.authenticated_bytes();
        let sig = suite.sign(&kp, &bytes);
        assert!(suite.verify(&kp.public, &bytes, &sig));
    }
    let sig_rate = sig_n as f64 / t.elapsed().as_secs_f64();
    let t = Instant::now();
    for i in 0..mac_n {
        env.seq = i;
        let bytes = env.authenticated_bytes();
        let tag = mac_key.tag(&bytes);
        assert!(mac_key.verify(&bytes, &tag));
    }
    let mac_rate = mac_n as f64 / t.elapsed().as_secs_f64();
    let ratio = mac_rate / sig_rate;

    check(
        f.attempts >= 10_000
            && f.accepted == 0
            && f.rejected == f.attempts
            && mac.len() >= 10
            && replays == mac.len()
            && tampers == mac.len()
            && ratio >= 50.0,
        format!(
            "{} forgeries, {} accepted; replays rejected {replays}/{}; tampered rejected {tampers}/{}; \
             MAC {mac_rate:.0}/s vs signatures {sig_rate:.0}/s ({ratio:.0}x)",
            f.attempts,
            f.accepted,
            mac.len(),
            mac.len()
        ),
    )
}

fn overhead_shape() -> Outcome {
    let mut secure = ring_255().clone();
    let mut insecure = Simulation::build_ring(Scenario { secure: false, ..ring_255().scenario().clone() }).unwrap();
    let keys = secure.keys();
    let initiator = keys[0];
    let plan = LatencyPlan::desk(initiator, keys.clone());
    let ls = run_latency(&mut secure, &plan).unwrap();
    let li = run_latency(&mut insecure, &plan).unwrap();

    let mut buckets: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut pairs = Vec::new();
    for p in &li.peers {
        let q = ls.get(&p.peer).unwrap();
        if let (Some(i), Some(s), Some(h)) = (p.rtt, q.rtt, p.hops) {
            buckets.entry(h).or_default().push((s - i) / h as f64);
            pairs.push((i, s));
        }
    }
    let per_bucket: Vec<f64> = buckets.values().map(|v| summarize(v).unwrap().mean).collect();
    let s = summarize(&per_bucket).unwrap();
    let spread = (s.max - s.min) / s.mean;
    let latency_gap = summarize(&pairs.iter().map(|&(i, s)| latency_penalty(i, s)).collect::<Vec<_>>()).unwrap();

    let ts = run_throughput_all(&mut secure, initiator, &keys, 200, Duration::from_secs(10)).unwrap();
    let ti = run_throughput_all(&mut insecure, initiator, &keys, 200, Duration::from_secs(10)).unwrap();
    let mut slower = 0;
    let mut missing = 0;
    let mut gaps = Vec::new();
    for ((p, i), (q, s)) in ti.peers.iter().zip(&ts.peers) {
        assert_eq!(p, q);
        match (i, s) {
            (Some(i), Some(s)) => {
                if s < i {
                    slower += 1;
                }
                gaps.push(throughput_penalty(*i, *s));
            }
            _ => missing += 1,
        }
    }
    let throughput_gap = summarize(&gaps).unwrap();
    check(
        spread <= 0.10 && missing == 0 && slower == ti.peers.len() && pairs.len() == keys.len() - 1,
        format!(
            "per-hop overhead {:.1}us, spread {:.1}% over {} hop buckets; secure slower for {slower}/{} responders; \
             mean latency penalty {:.1}%, throughput penalty {:.1}%",
            s.mean * 1e6,
            spread * 100.0,
            per_bucket.len(),
            ti.peers.len(),
            latency_gap.mean * 100.0,
            throughput_gap.mean * 100.0
        ),
    )
}

fn capacity_shape() -> Outcome {
    let plan = PotatoPlan::default();
    let mut summary = Vec::new();
    let mut ok = true;
    let mut reports = Vec::new();
    for secure in [false, true] {
        let ring = Simulation::build_ring(Scenario { n_peers: 64, peers_per_host: 16, seed: 5, secure, ..Scenario::default() })
            .unwrap();
        let r = run_hot_potato(&ring, &plan).unwrap();
        let drift = r.plateau_drift();
        let lost: usize = r.levels.iter().map(|l| l.lost).sum();
        ok &= r.rises_to_saturation() && drift.is_some_and(|d| d <= 0.15) && lost == 0;
        summary.push(format!(
            "{}: peak {:.0}/s, saturated at {:?}, drift {:.1}%",
            if secure { "secure" } else { "insecure" },
            r.peak(),
            r.saturation(),
            drift.unwrap_or(f64::NAN) * 100.0
        ));
        reports.push(r);
    }
    let sat = reports[0].saturation().unwrap_or(usize::MAX);
    let below = reports[0]
        .levels
        .iter()
        .zip(&reports[1].levels)
        .filter(|(i, _)| i.load >= sat)
        .all(|(i, s)| s.capacity < i.capacity);
    ok &= below;

    let scenario = Scenario {
        n_peers: 2,
        secure: false,
        latency: LatencyModel { base: Duration::from_micros(500), jitter: Duration::ZERO },
        ..Scenario::default()
    };
    let ring = Simulation::build_ring(scenario.clone()).unwrap();
    let one = run_hot_potato(&ring, &PotatoPlan { loads: vec![1], measurements: 5, ..PotatoPlan::default() }).unwrap();
    let analytic = two_peer_passes_per_sec(&scenario.latency, &scenario.costs);
    let measured = &one.levels[0].stats;
    let exact = (measured.max - analytic).abs() / analytic < 1e-9 && (measured.min - analytic).abs() / analytic < 1e-9;
    ok &= exact;
    summary.push(format!("two-peer closed form {analytic:.3}/s, measured {:.3}/s", measured.mean));
    check(ok, summary.join("; "))
}

fn determinism_and_codec() -> Outcome {
    let mut same = 0;
    let mut balanced = 0;
    let mut hashes = BTreeSet::new();
    for i in 0..10u64 {
        let scenario = Scenario {
            n_peers: 8 + 2 * i as usize,
            seed: 100 + i,
            secure: i % 2 == 0,
            routing_mode: if i % 3 == 0 { RoutingMode::Randomized } else { RoutingMode::Deterministic },
            drop_rate: if i % 4 == 1 { 0.02 } else { 0.0 },
            duration: Duration::from_secs(5),
            ..Scenario::default()
        };
        let run = || {
            let mut sim = Simulation::build_ring(scenario.clone()).unwrap();
            sim.run_for(scenario.duration);
            (sim.trace_hash(), sim.counters().balanced())
        };
        let (h1, b1) = run();
        let (h2, b2) = run();
        same += usize::from(h1 == h2);
        balanced += usize::from(b1) + usize::from(b2);
        hashes.insert(h1);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let types = [MsgType::Ping, MsgType::PingEcho, MsgType::AppPayload, MsgType::Heartbeat, MsgType::FindSucc];
    let mut codec_ok = 0;
    for _ in 0..1_000 {
        let mut env = Envelope::new(
            *types.choose(&mut rng).unwrap(),
            Key::from_bytes(rng.gen()),
            Key::from_bytes(rng.gen()),
            (0..rng.gen_range(0..512)).map(|_| rng.gen()).collect(),
        );
        env.seq = rng.gen();
        env.hop_count = rng.gen();
        env.auth_kind = *[AuthKind::Signature, AuthKind::Mac, AuthKind::Unauthenticated].choose(&mut rng).unwrap();
        env.auth_tag = (0..rng.gen_range(0..96)).map(|_| rng.gen()).collect();
        if Envelope::decode(&env.encode().unwrap()).as_ref() == Ok(&env) {
            codec_ok += 1;
        }
    }
    check(
        same == 10 && hashes.len() == 10 && balanced == 20 && codec_ok == 1_000,
        format!("{same}/10 scenarios reproduce their trace hash, {balanced}/20 runs balanced, {codec_ok}/1000 envelopes round-trip"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Outcome); 9] = [
        ("ring correctness", Duration::from_secs(60), ring_correctness),
        ("key uniformity", Duration::from_secs(10), key_uniformity),
        ("hop bounds", Duration::from_secs(60), hop_bounds),
        ("choke-point dispersion", Duration::from_secs(120), choke_points),
        ("policing", Duration::from_secs(180), policing),
        ("authentication", Duration::from_secs(60), authentication),
        ("secure-mode overhead shape", Duration::from_secs(120), overhead_shape),
        ("capacity shape", Duration::from_secs(300), capacity_shape),
        ("determinism and codec", Duration::from_secs(60), determinism_and_codec),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = run();
        let elapsed = t.elapsed();
        let (pass, detail) = match outcome {
            Ok(d) => (elapsed <= *budget, d),
            Err(d) => (false, d),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {}: {} {name} ({:.1}s of {}s) {detail}",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
