//! Scenario description and its `key = value` file format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::net::Ipv4Addr;
use std::time::Duration;

use thiserror::Error;

use crate::keyspace::{derive_key, Key, NetAddr, PeerKey};
use crate::protocol::adversary::Behavior;
use crate::protocol::group::validate_group_size;
use crate::routing::RoutingMode;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyModel {
    pub base: Duration,
    /// Half-width of the uniform jitter around `base`.
    pub jitter: Duration,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel { base: Duration::from_micros(500), jitter: Duration::from_micros(100) }
    }
}

/// CPU time charged to a host for each unit of work.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostModel {
    pub mac: Duration,
    pub sign: Duration,
    pub verify: Duration,
    pub pke: Duration,
    /// Per received datagram or other input.
    pub recv: Duration,
    /// Per transmitted datagram.
    pub send: Duration,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            mac: Duration::from_micros(30),
            sign: Duration::from_millis(1),
            verify: Duration::from_millis(1),
            pke: Duration::from_millis(1),
            recv: Duration::from_micros(100),
            send: Duration::from_micros(25),
        }
    }
}

impl CostModel {
    pub fn zero() -> Self {
        CostModel {
            mac: Duration::ZERO,
            sign: Duration::ZERO,
            verify: Duration::ZERO,
            pke: Duration::ZERO,
            recv: Duration::ZERO,
            send: Duration::ZERO,
        }
    }

    pub fn crypto(&self, ops: &crate::protocol::node::CryptoOps) -> Duration {
        self.mac * ops.mac + self.sign * ops.sign + self.verify * ops.verify + self.pke * ops.pke
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub n_peers: usize,
    pub group_size: usize,
    pub seed: u64,
    pub latency: LatencyModel,
    pub drop_rate: f64,
    pub adversaries: BTreeMap<PeerKey, Behavior>,
    /// How long `sim run` continues after the ring is built.
    pub duration: Duration,
    pub routing_mode: RoutingMode,
    pub secure: bool,
    pub domain: String,
    pub costs: CostModel,
    /// Peers sharing one CPU.
    pub peers_per_host: usize,
    pub tick: Duration,
    pub hop_limit: u8,
    pub verify_probability: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            n_peers: 16,
            group_size: 5,
            seed: 1,
            latency: LatencyModel::default(),
            drop_rate: 0.0,
            adversaries: BTreeMap::new(),
            duration: Duration::from_secs(30),
            routing_mode: RoutingMode::Deterministic,
            secure: true,
            domain: "ring.sim".to_string(),
            costs: CostModel::default(),
            peers_per_host: 1,
            tick: Duration::from_secs(1),
            hop_limit: 32,
            verify_probability: 1.0,
        }
    }
}

/// Address of the `i`-th synthetic peer.
pub fn synthetic_addr(i: usize) -> NetAddr {
    let ip = u32::from(Ipv4Addr::new(10, 0, 0, 0)) + i as u32 + 1;
    NetAddr::new(Ipv4Addr::from(ip), 4000)
}

fn parse_duration_ms(v: &str) -> Result<Duration, String> {
    let ms: f64 = v.parse().map_err(|_| format!("bad number `{v}`"))?;
    if !(ms >= 0.0 && ms.is_finite()) {
        return Err(format!("bad duration `{v}`"));
    }
    Ok(Duration::from_nanos((ms * 1e6).round() as u64))
}

fn parse_peer(s: &str) -> Result<PeerKey, String> {
    if s.contains(':') {
        let addr: NetAddr = s.parse().map_err(|e: crate::keyspace::KeyspaceError| e.to_string())?;
        return Ok(derive_key(&addr));
    }
    let key: Key = s.parse().map_err(|e: crate::keyspace::KeyspaceError| e.to_string())?;
    PeerKey::try_from_key(key).map_err(|e| e.to_string())
}

fn ms(d: Duration) -> String {
    format!("{}", d.as_nanos() as f64 / 1e6)
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Invalid(m.to_string()));
        if self.n_peers < 2 {
            return bad("n_peers must be at least 2");
        }
        if self.n_peers > 60_000 {
            return bad("n_peers too large");
        }
        if validate_group_size(self.group_size).is_err() {
            return bad("group_size must be odd and at least 3");
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return bad("drop_rate must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.verify_probability) {
            return bad("verify_probability must be in [0, 1]");
        }
        if self.peers_per_host == 0 {
            return bad("peers_per_host must be positive");
        }
        if self.tick.is_zero() {
            return bad("tick must be positive");
        }
        if self.latency.jitter > self.latency.base {
            return bad("jitter must not exceed base latency");
        }
        let addrs: Vec<PeerKey> = (0..self.n_peers).map(|i| derive_key(&synthetic_addr(i))).collect();
        for k in self.adversaries.keys() {
            if !addrs.contains(k) {
                return Err(ScenarioError::Invalid(format!("adversary {k} is not a scenario peer")));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let mut s = Scenario::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |reason: String| ScenarioError::Parse { line, reason };
            let raw = raw.split('#').next().unwrap_or("").trim();
            if raw.is_empty() {
                continue;
            }
            let (k, v) = raw.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
            let (k, v) = (k.trim(), v.trim());
            s.set(k, v).map_err(err)?;
        }
        s.validate()?;
        Ok(s)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, k: &str, v: &str) -> Result<(), String> {
        let num = |v: &str| v.parse::<f64>().map_err(|_| format!("bad number `{v}`"));
        let int = |v: &str| v.parse::<u64>().map_err(|_| format!("bad integer `{v}`"));
        let flag = |v: &str| v.parse::<bool>().map_err(|_| format!("bad boolean `{v}`"));
        if let Some(peer) = k.strip_prefix("adversary.") {
            let key = parse_peer(peer)?;
            let b: Behavior = v.parse()?;
            self.adversaries.insert(key, b);
            return Ok(());
        }
        if let Some(c) = k.strip_prefix("cost.") {
            let d = Duration::from_nanos((num(v)? * 1e3).round() as u64);
            match c {
                "mac_us" => self.costs.mac = d,
                "sign_us" => self.costs.sign = d,
                "verify_us" => self.costs.verify = d,
                "pke_us" => self.costs.pke = d,
                "recv_us" => self.costs.recv = d,
                "send_us" => self.costs.send = d,
                _ => return Err(format!("unknown key `{k}`")),
            }
            return Ok(());
        }
        match k {
            "n_peers" => self.n_peers = int(v)? as usize,
            "group_size" => self.group_size = int(v)? as usize,
            "seed" => self.seed = int(v)?,
            "latency_base_ms" => self.latency.base = parse_duration_ms(v)?,
            "latency_jitter_ms" => self.latency.jitter = parse_duration_ms(v)?,
            "drop_rate" => self.drop_rate = num(v)?,
            "duration_s" => {
                self.duration = Duration::try_from_secs_f64(num(v)?).map_err(|_| format!("bad duration `{v}`"))?
            }
            "routing_mode" => self.routing_mode = v.parse()?,
            "secure" => self.secure = flag(v)?,
            "domain" => self.domain = v.to_string(),
            "peers_per_host" => self.peers_per_host = int(v)? as usize,
            "tick_ms" => self.tick = parse_duration_ms(v)?,
            "hop_limit" => self.hop_limit = u8::try_from(int(v)?).map_err(|_| "hop_limit too large".to_string())?,
            "verify_probability" => self.verify_probability = num(v)?,
            _ => return Err(format!("unknown key `{k}`")),
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut o = String::new();
        let _ = writeln!(o, "n_peers = {}", self.n_peers);
        let _ = writeln!(o, "group_size = {}", self.group_size);
        let _ = writeln!(o, "seed = {}", self.seed);
        let _ = writeln!(o, "latency_base_ms = {}", ms(self.latency.base));
        let _ = writeln!(o, "latency_jitter_ms = {}", ms(self.latency.jitter));
        let _ = writeln!(o, "drop_rate = {}", self.drop_rate);
        let _ = writeln!(o, "duration_s = {}", self.duration.as_secs_f64());
        let _ = writeln!(o, "routing_mode = {}", self.routing_mode);
        let _ = writeln!(o, "secure = {}", self.secure);
        let _ = writeln!(o, "domain = {}", self.domain);
        let _ = writeln!(o, "peers_per_host = {}", self.peers_per_host);
        let _ = writeln!(o, "tick_ms = {}", ms(self.tick));
        let _ = writeln!(o, "hop_limit = {}", self.hop_limit);
        let _ = writeln!(o, "verify_probability = {}", self.verify_probability);
        let us = |d: Duration| d.as_nanos() as f64 / 1e3;
        let c = &self.costs;
        for (name, d) in
            [("mac", c.mac), ("sign", c.sign), ("verify", c.verify), ("pke", c.pke), ("recv", c.recv), ("send", c.send)]
        {
            let _ = writeln!(o, "cost.{name}_us = {}", us(d));
        }
        for (k, b) in &self.adversaries {
            let _ = writeln!(o, "adversary.{k} = {b}");
        }
        o
    }
}
