//! `bench latency|throughput|capacity`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use keeperring_core::bench::report::{
    capacity_table, capacity_tsv, fmt_rate, fmt_rtt, latency_peers_tsv, latency_table, latency_tsv, summary_tsv,
    throughput_peers_tsv, throughput_table, throughput_tsv, Comparison,
};
use keeperring_core::bench::{
    latency_penalty, run_hot_potato, run_latency, run_throughput_all, summarize, throughput_penalty, CapacityReport,
    LatencyPlan, LatencyReport, PotatoPlan, ThroughputReport,
};
use keeperring_core::simnet::{Scenario, Simulation};

use crate::{write_file, CliError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modes {
    Both,
    SecureOnly,
    InsecureOnly,
}

impl Modes {
    fn list(self) -> Vec<bool> {
        match self {
            Modes::Both => vec![false, true],
            Modes::SecureOnly => vec![true],
            Modes::InsecureOnly => vec![false],
        }
    }
}

fn label(secure: bool) -> &'static str {
    if secure {
        "secure"
    } else {
        "insecure"
    }
}

fn build(scenario: &Scenario, secure: bool) -> Result<Simulation, CliError> {
    let s = Scenario { secure, ..scenario.clone() };
    Simulation::build_ring(s).map_err(|e| CliError::Failed(format!("ring build failed: {e}")))
}

fn bench_err(e: keeperring_core::bench::BenchError) -> CliError {
    CliError::Failed(e.to_string())
}

/// Outcome of the properties a run checks on itself.
#[derive(Default)]
pub struct Checks(Vec<(String, bool)>);

impl Checks {
    fn add(&mut self, name: impl Into<String>, ok: bool) {
        self.0.push((name.into(), ok));
    }

    pub fn render(&self) -> String {
        let mut o = String::new();
        for (name, ok) in &self.0 {
            let _ = writeln!(o, "check\t{}\t{name}", if *ok { "pass" } else { "FAIL" });
        }
        o
    }

    pub fn all_pass(&self) -> bool {
        self.0.iter().all(|c| c.1)
    }
}

fn single_mode_peers(header: &str, rows: Vec<(String, Option<u32>, f64)>, fmt: fn(f64) -> String) -> String {
    let mut rows = rows;
    rows.sort_by(|a, b| a.2.total_cmp(&b.2).then_with(|| a.0.cmp(&b.0)));
    let mut o = format!("Peer\tHops\t{header}\n");
    for (peer, hops, v) in rows {
        let hops = hops.map_or_else(|| "-".to_string(), |h| h.to_string());
        let _ = writeln!(o, "{peer}\t{hops}\t{}", fmt(v));
    }
    o
}

pub fn latency(scenario: &Scenario, modes: Modes, full: bool, out: &Path) -> Result<(String, Checks), CliError> {
    let mut reports: BTreeMap<bool, LatencyReport> = BTreeMap::new();
    for secure in modes.list() {
        let mut sim = build(scenario, secure)?;
        let keys = sim.keys();
        let plan =
            if full { LatencyPlan::full(keys[0], keys.clone()) } else { LatencyPlan::desk(keys[0], keys.clone()) };
        reports.insert(secure, run_latency(&mut sim, &plan).map_err(bench_err)?);
    }
    let mut checks = Checks::default();
    for (secure, r) in &reports {
        let absent = r.peers.iter().filter(|p| p.rtt.is_none()).count();
        checks.add(format!("{} responders all answered ({absent} absent)", label(*secure)), absent == 0);
    }
    let text = if let (Some(i), Some(s)) = (reports.get(&false), reports.get(&true)) {
        let mut rows = Vec::new();
        let mut pairs = Vec::new();
        let mut buckets: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for p in &i.peers {
            let Some(q) = s.get(&p.peer) else { continue };
            if let (Some(a), Some(b)) = (p.rtt, q.rtt) {
                rows.push((p.peer.to_string(), p.hops, a, b));
                pairs.push((a, b));
                if let Some(h) = p.hops {
                    buckets.entry(h).or_default().push((b - a) / h as f64);
                }
            }
        }
        let c = Comparison::from_pairs(&pairs, latency_penalty).map_err(bench_err)?;
        let per_hop: Vec<f64> = buckets.values().filter_map(|v| summarize(v).ok()).map(|s| s.mean).collect();
        if let Ok(h) = summarize(&per_hop) {
            let spread = (h.max - h.min) / h.mean;
            checks.add(
                format!("per-hop secure overhead {:.1}us varies by {:.1}% across hop counts", h.mean * 1e6, spread * 100.0),
                spread <= 0.10,
            );
        }
        write_file(&out.join("latency.tsv"), &latency_tsv(&c))?;
        write_file(&out.join("latency_peers.tsv"), &latency_peers_tsv(rows))?;
        latency_table(&c)
    } else {
        let (secure, r) = reports.iter().next().expect("one mode");
        let stats = r.stats.ok_or_else(|| CliError::Failed("no responder answered".into()))?;
        let column = format!("{} RTT (sec)", if *secure { "Secure" } else { "Insecure" });
        let rows = r.peers.iter().filter_map(|p| p.rtt.map(|v| (p.peer.to_string(), p.hops, v))).collect();
        write_file(&out.join("latency.tsv"), &summary_tsv(&column, &stats, fmt_rtt))?;
        write_file(&out.join("latency_peers.tsv"), &single_mode_peers(&column, rows, fmt_rtt))?;
        summary_tsv(&column, &stats, fmt_rtt)
    };
    Ok((text, checks))
}

pub fn throughput(scenario: &Scenario, modes: Modes, packets: u32, out: &Path) -> Result<(String, Checks), CliError> {
    let mut reports: BTreeMap<bool, ThroughputReport> = BTreeMap::new();
    for secure in modes.list() {
        let mut sim = build(scenario, secure)?;
        let keys = sim.keys();
        let r = run_throughput_all(&mut sim, keys[0], &keys, packets, Duration::from_secs(60)).map_err(bench_err)?;
        reports.insert(secure, r);
    }
    let mut checks = Checks::default();
    for (secure, r) in &reports {
        let absent = r.peers.iter().filter(|p| p.1.is_none()).count();
        checks.add(format!("{} responders all measured ({absent} missing)", label(*secure)), absent == 0);
    }
    let text = if let (Some(i), Some(s)) = (reports.get(&false), reports.get(&true)) {
        let mut rows = Vec::new();
        let mut pairs = Vec::new();
        let mut slower = 0;
        for ((peer, a), (_, b)) in i.peers.iter().zip(&s.peers) {
            if let (Some(a), Some(b)) = (a, b) {
                rows.push((peer.to_string(), None, *a, *b));
                pairs.push((*a, *b));
                slower += usize::from(b < a);
            }
        }
        checks.add(format!("secure slower for {slower}/{} responders", pairs.len()), slower == pairs.len());
        let c = Comparison::from_pairs(&pairs, throughput_penalty).map_err(bench_err)?;
        write_file(&out.join("throughput.tsv"), &throughput_tsv(&c))?;
        write_file(&out.join("throughput_peers.tsv"), &throughput_peers_tsv(rows))?;
        throughput_table(&c)
    } else {
        let (secure, r) = reports.iter().next().expect("one mode");
        let stats = r.stats.ok_or_else(|| CliError::Failed("no responder measured".into()))?;
        let column = format!("{} Pkts/sec", if *secure { "Secure" } else { "Insecure" });
        let rows = r.peers.iter().filter_map(|p| p.1.map(|v| (p.0.to_string(), None, v))).collect();
        write_file(&out.join("throughput.tsv"), &summary_tsv(&column, &stats, fmt_rate))?;
        write_file(&out.join("throughput_peers.tsv"), &single_mode_peers(&column, rows, fmt_rate))?;
        summary_tsv(&column, &stats, fmt_rate)
    };
    Ok((text, checks))
}

pub fn capacity(scenario: &Scenario, modes: Modes, plan: &PotatoPlan, out: &Path) -> Result<(String, Checks), CliError> {
    let mut reports: Vec<(bool, CapacityReport)> = Vec::new();
    for secure in modes.list() {
        let ring = build(scenario, secure)?;
        reports.push((secure, run_hot_potato(&ring, plan).map_err(bench_err)?));
    }
    let mut checks = Checks::default();
    let mut text = String::new();
    for (secure, r) in &reports {
        let name = label(*secure);
        let lost: usize = r.levels.iter().map(|l| l.lost).sum();
        checks.add(format!("{name}: no potato lost ({lost})"), lost == 0);
        checks.add(format!("{name}: capacity rises to saturation at {:?}", r.saturation()), r.rises_to_saturation());
        if let Some(d) = r.plateau_drift() {
            checks.add(format!("{name}: capacity at twice saturation within {:.1}% of saturation", d * 100.0), d <= 0.15);
        }
        let title = if *secure { "Secure Mode Operation" } else { "Insecure Mode Operation" };
        text.push_str(&capacity_table(title, &r.levels));
        text.push('\n');
    }
    let named: Vec<(&str, &CapacityReport)> = reports.iter().map(|(s, r)| (label(*s), r)).collect();
    write_file(&out.join("capacity.tsv"), &capacity_tsv(&named))?;
    Ok((text, checks))
}
