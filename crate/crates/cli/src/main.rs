//! `keeperring`: build and exercise secure rings in simulation, run a node
//! over UDP, and manage keys.
//!
//! Exit codes: 0 on success, 1 when a run violates one of its invariants or
//! checks, 2 on usage errors and unreadable inputs.

mod bench;
mod keys;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use clap::{Args, Parser, Subcommand};
use rand::rngs::{OsRng, StdRng};
use rand::{RngCore, SeedableRng};
use thiserror::Error;

use keeperring_core::auth::{Authority, Certificate, Identity, StandardSuite};
use keeperring_core::bench::PotatoPlan;
use keeperring_core::directory::{DirectoryRecord, InMemoryDirectory};
use keeperring_core::keyspace::{derive_key, validate_key, Key, NetAddr};
use keeperring_core::protocol::host::Host;
use keeperring_core::protocol::node::{Input, Node, NodeConfig, NodeCredentials};
use keeperring_core::protocol::snapshot::Snapshot;
use keeperring_core::simnet::{Scenario, Simulation};
use keeperring_core::wire::UdpTransport;

use crate::bench::Modes;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or unreadable input files.
    #[error("{0}")]
    Input(String),
    /// The run itself went wrong or failed one of its checks.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "keeperring", version, about = "Secure ring overlay simulator and tools")]
struct Cli {
    /// Overrides the scenario seed (falls back to KEEPERRING_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulated rings.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Latency, throughput and capacity experiments.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Summarize and check a node snapshot file.
    Inspect { snapshot: PathBuf },
    /// A single node over UDP.
    #[command(subcommand)]
    Node(NodeCmd),
    /// Peer keys, authorities and certificates.
    #[command(subcommand)]
    Keytool(KeyCmd),
}

#[derive(Subcommand)]
enum SimCmd {
    /// Build the ring described by a scenario file and run it.
    Run(SimRun),
}

#[derive(Args)]
struct SimRun {
    scenario: PathBuf,
    /// Overrides the scenario's run duration.
    #[arg(long)]
    duration_s: Option<f64>,
    /// Writes the delivery trace to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Writes one `<key>.snap` per node into this directory.
    #[arg(long)]
    snapshot_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BenchCmd {
    Latency(BenchArgs),
    Throughput(BenchArgs),
    Capacity(BenchArgs),
}

#[derive(Args)]
struct BenchArgs {
    scenario: PathBuf,
    /// Only the secure ring.
    #[arg(long, conflicts_with = "insecure")]
    secure: bool,
    /// Only the insecure ring.
    #[arg(long)]
    insecure: bool,
    /// Directory for the TSV reports.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Full-size latency plan instead of the desk-scale one.
    #[arg(long)]
    full: bool,
    /// Packets per throughput stream.
    #[arg(long, default_value_t = 1000)]
    packets: u32,
    /// Potato counts for the capacity sweep.
    #[arg(long, value_delimiter = ',')]
    loads: Option<Vec<usize>>,
    /// Shortest time a potato stays at a peer.
    #[arg(long)]
    min_residency_ms: Option<u64>,
}

impl BenchArgs {
    fn modes(&self) -> Modes {
        match (self.secure, self.insecure) {
            (true, _) => Modes::SecureOnly,
            (_, true) => Modes::InsecureOnly,
            _ => Modes::Both,
        }
    }
}

#[derive(Subcommand)]
enum NodeCmd {
    Run(NodeRun),
}

#[derive(Args)]
struct NodeRun {
    #[arg(long)]
    addr: NetAddr,
    /// Existing member to join through; omit to start a new ring.
    #[arg(long)]
    bootstrap: Option<NetAddr>,
    #[arg(long)]
    ring: String,
    /// Base64 certificate issued by the ring authority.
    #[arg(long)]
    cert: PathBuf,
    /// Peer key file written by `keytool issue`.
    #[arg(long)]
    key: PathBuf,
    /// Directory seed file: `<ring> <key> <base64 cert>` lines.
    #[arg(long)]
    directory: PathBuf,
    #[arg(long, default_value_t = 30)]
    duration_s: u64,
    #[arg(long, default_value_t = 1000)]
    tick_ms: u64,
}

#[derive(Subcommand)]
enum KeyCmd {
    /// Print the ring key of an address.
    Derive { addr: NetAddr },
    /// Check that a key is address-derived.
    Validate { hex: String },
    /// Create a ring authority key file.
    Authority {
        #[arg(long)]
        out: PathBuf,
    },
    /// Create a peer key pair and certificate.
    Issue {
        #[arg(long)]
        authority: PathBuf,
        #[arg(long)]
        addr: NetAddr,
        #[arg(long)]
        ring: String,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn seed_override(flag: Option<u64>) -> Result<Option<u64>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("KEEPERRING_SEED") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| CliError::Input(format!("KEEPERRING_SEED: not a number: {v}"))),
        Err(_) => Ok(None),
    }
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario, CliError> {
    let mut s = Scenario::parse(&read_file(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if let Some(seed) = seed_override(seed)? {
        s.seed = seed;
    }
    Ok(s)
}

fn rng(seed: Option<u64>, salt: &[u8]) -> Result<Box<dyn RngCore>, CliError> {
    Ok(match seed_override(seed)? {
        Some(s) => {
            let mut bytes = [0u8; 32];
            bytes[..8].copy_from_slice(&s.to_le_bytes());
            for (b, x) in bytes[8..].iter_mut().zip(salt) {
                *b = *x;
            }
            Box::new(StdRng::from_seed(bytes))
        }
        None => Box::new(OsRng),
    })
}

fn sim_run(args: SimRun, seed: Option<u64>) -> Result<(), CliError> {
    let mut scenario = load_scenario(&args.scenario, seed)?;
    if let Some(d) = args.duration_s {
        scenario.duration =
            Duration::try_from_secs_f64(d).map_err(|_| CliError::Input(format!("bad --duration-s: {d}")))?;
    }
    let clean = scenario.adversaries.is_empty() && scenario.drop_rate == 0.0;
    let mut sim = Simulation::new(scenario.clone()).map_err(|e| CliError::Input(e.to_string()))?;
    if args.trace.is_some() {
        sim.record_trace();
    }
    let mut sim = sim.build().map_err(|e| CliError::Failed(format!("ring build failed: {e}")))?;
    sim.run_for(scenario.duration);

    let mismatches = sim.oracle_mismatches();
    print!("{}", sim.summary());
    println!("table_mismatches\t{}", mismatches.len());
    if let Some(path) = &args.trace {
        let mut text = sim.trace_lines().join("\n");
        text.push('\n');
        write_file(path, &text)?;
    }
    if let Some(dir) = &args.snapshot_dir {
        for node in sim.nodes() {
            let snap = node.snapshot();
            write_file(&dir.join(format!("{}.snap", snap.key)), &snap.render())?;
        }
    }

    if !sim.counters().balanced() {
        return Err(CliError::Failed("message counters do not balance".into()));
    }
    if clean && !mismatches.is_empty() {
        return Err(CliError::Failed(format!("{} routing tables disagree with the ring", mismatches.len())));
    }
    if clean && !sim.convictions().is_empty() {
        return Err(CliError::Failed(format!("{} honest peers convicted", sim.convictions().len())));
    }
    Ok(())
}

fn bench_run(cmd: BenchCmd, seed: Option<u64>) -> Result<(), CliError> {
    let (text, checks) = match cmd {
        BenchCmd::Latency(a) => bench::latency(&load_scenario(&a.scenario, seed)?, a.modes(), a.full, &a.out)?,
        BenchCmd::Throughput(a) => {
            if a.packets < 2 {
                return Err(CliError::Input("--packets must be at least 2".into()));
            }
            bench::throughput(&load_scenario(&a.scenario, seed)?, a.modes(), a.packets, &a.out)?
        }
        BenchCmd::Capacity(a) => {
            let mut plan = PotatoPlan::default();
            if let Some(loads) = &a.loads {
                if loads.is_empty() || loads.contains(&0) {
                    return Err(CliError::Input("--loads must be positive".into()));
                }
                plan.loads = loads.clone();
            }
            if let Some(ms) = a.min_residency_ms {
                plan.min_residency = Duration::from_millis(ms);
            }
            bench::capacity(&load_scenario(&a.scenario, seed)?, a.modes(), &plan, &a.out)?
        }
    };
    print!("{text}");
    print!("{}", checks.render());
    if checks.all_pass() {
        Ok(())
    } else {
        Err(CliError::Failed("benchmark checks failed".into()))
    }
}

fn inspect(path: &Path) -> Result<(), CliError> {
    let snap = Snapshot::parse(&read_file(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let opt = |k: Option<_>| k.map_or_else(|| "-".to_string(), |k: keeperring_core::keyspace::PeerKey| k.to_string());
    println!("key\t{}", snap.key);
    println!("addr\t{}", snap.addr);
    println!("joined\t{}", snap.joined);
    println!("predecessor\t{}", opt(snap.predecessor));
    println!("successor\t{}", opt(snap.successor));
    println!("group\t{}", snap.group.members().len());
    println!("fingers\t{}", snap.fingers.len());
    println!("blacklist\t{}", snap.blacklist.len());

    let mut problems = Vec::new();
    if derive_key(&snap.addr) != snap.key {
        problems.push(format!("key does not match address {}", snap.addr));
    }
    let referenced = snap
        .predecessor
        .iter()
        .chain(&snap.successor)
        .chain(snap.group.members())
        .chain(snap.fingers.iter().flat_map(|f| f.group.members()));
    for k in referenced {
        if !validate_key(k.key()) {
            problems.push(format!("{k} is not address-derived"));
        }
    }
    for p in &problems {
        println!("problem\t{p}");
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("{} problems in snapshot", problems.len())))
    }
}

fn node_run(args: NodeRun, seed: Option<u64>) -> Result<(), CliError> {
    let suite = StandardSuite::shared();
    let keyfile = keys::parse_peer(&read_file(&args.key)?)?;
    let cert_text = read_file(&args.cert)?;
    let der = B64.decode(cert_text.trim()).map_err(|_| CliError::Input("certificate is not base64".into()))?;
    let certificate = Certificate::decode(&der).map_err(|e| CliError::Input(format!("certificate: {e}")))?;
    let directory = InMemoryDirectory::from_seed_file(&read_file(&args.directory)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.directory.display())))?;

    if derive_key(&args.addr) != keyfile.peer {
        return Err(CliError::Input(format!("key file belongs to {}, not {}", keyfile.peer.addr(), args.addr)));
    }
    if certificate.peer_key != keyfile.peer || certificate.public_key != keyfile.keypair.public {
        return Err(CliError::Input("certificate does not match the key file".into()));
    }
    if !certificate.verify(suite.as_ref(), &keyfile.authority_public) {
        return Err(CliError::Input("certificate is not signed by the trusted authority".into()));
    }

    let mut node_seed = [0u8; 32];
    rng(seed, keyfile.peer.key().as_bytes())?.fill_bytes(&mut node_seed);
    let creds = NodeCredentials {
        identity: Identity { peer_key: keyfile.peer, keypair: keyfile.keypair, certificate },
        authority_public: keyfile.authority_public,
    };
    let cfg = NodeConfig { tick: Duration::from_millis(args.tick_ms.max(1)), ..NodeConfig::default() };
    let node = Node::new(cfg, args.addr, Some(creds), suite, node_seed);
    let transport = UdpTransport::bind(args.addr).map_err(|e| CliError::Failed(format!("bind {}: {e}", args.addr)))?;
    let mut host = Host::new(node, transport, Box::new(directory), args.ring);
    host.push(Input::Start { bootstrap: args.bootstrap });

    let until = Instant::now() + Duration::from_secs(args.duration_s);
    while Instant::now() < until {
        let step = until.saturating_duration_since(Instant::now()).min(Duration::from_secs(1));
        host.run_for(step).map_err(|e| CliError::Failed(format!("transport: {e}")))?;
        for ev in host.take_events() {
            println!("event\t{:.3}\t{ev:?}", host.now().as_secs_f64());
        }
        for r in host.take_reports() {
            println!("evidence\t{:.3}\t{r:?}", host.now().as_secs_f64());
        }
    }
    println!("rejected\t{}", host.rejected());
    println!("send_failures\t{}", host.send_failures());
    print!("{}", host.node().snapshot().render());
    Ok(())
}

fn keytool(cmd: KeyCmd, seed: Option<u64>) -> Result<(), CliError> {
    match cmd {
        KeyCmd::Derive { addr } => println!("{}", derive_key(&addr)),
        KeyCmd::Validate { hex } => {
            let ok = hex.parse::<Key>().is_ok_and(|k| validate_key(&k));
            println!("{}", if ok { "valid" } else { "invalid" });
            if !ok {
                return Err(CliError::Failed(String::new()));
            }
        }
        KeyCmd::Authority { out } => {
            let kp = StandardSuite::shared().generate_keypair(&mut *rng(seed, b"authority")?);
            write_file(&out, &keys::render_authority(&kp))?;
            println!("{}", out.display());
        }
        KeyCmd::Issue { authority, addr, ring, out_dir } => {
            let suite = StandardSuite::shared();
            let authority = Authority::new(suite.clone(), keys::parse_authority(&read_file(&authority)?)?);
            let peer = derive_key(&addr);
            let keypair = suite.generate_keypair(&mut *rng(seed, peer.key().as_bytes())?);
            let mut authority = authority;
            let certificate = authority.issue(peer, keypair.public.clone());
            let file = keys::PeerKeyFile { peer, keypair, authority_public: authority.public_key().to_vec() };
            write_file(&out_dir.join(format!("{peer}.key")), &keys::render_peer(&file))?;
            write_file(&out_dir.join(format!("{peer}.cert")), &format!("{}\n", B64.encode(certificate.encode())))?;
            let mut dir = InMemoryDirectory::new();
            dir.register(DirectoryRecord { ring_domain: ring, peer_key: peer, certificate })
                .map_err(|e| CliError::Input(e.to_string()))?;
            print!("{}", dir.to_seed_file());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = cli.seed;
    let result = match cli.cmd {
        Cmd::Sim(SimCmd::Run(a)) => sim_run(a, seed),
        Cmd::Bench(b) => bench_run(b, seed),
        Cmd::Inspect { snapshot } => inspect(&snapshot),
        Cmd::Node(NodeCmd::Run(a)) => node_run(a, seed),
        Cmd::Keytool(k) => keytool(k, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string();
            if !msg.is_empty() {
                eprintln!("keeperring: {msg}");
            }
            ExitCode::from(e.code())
        }
    }
}
