use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};
use log::info;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use wbcast::cluster::ClusterSpec;
use wbcast::node::Node;
use wbcast_core::checker::{self, SpecReport};
use wbcast_core::latency::{self, render};
use wbcast_core::protocol::Protocol;
use wbcast_core::scenario;
use wbcast_core::sim::{self, SimConfig};
use wbcast_core::time::Time;
use wbcast_core::trace::Trace;
use wbcast_core::types::{GroupId, ProcessId};

#[derive(Parser)]
#[command(name = "wbcast", version, about = "Genuine atomic multicast: simulator, checker and socket transport")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the simulator and write its trace.
    Sim {
        #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
        config: Option<PathBuf>,
        /// A built-in scenario instead of a config file.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long, default_value = "whitebox")]
        protocol: Protocol,
        #[arg(long)]
        trace: PathBuf,
        /// Record protocol state after every step, for the invariant checks.
        #[arg(long)]
        snapshots: bool,
    },
    /// Check traces against the multicast specification. Several traces are
    /// merged into one, as for the per-node logs of a real run.
    Check {
        #[arg(long, required = true)]
        trace: Vec<PathBuf>,
        /// Simulator config or cluster spec whose topology the trace must use.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Latencies of a simulator trace, in units of δ.
    Latency {
        #[arg(long)]
        trace: PathBuf,
        /// Override the trace's δ.
        #[arg(long)]
        delta: Option<Time>,
    },
    /// Run one protocol process of a cluster.
    Node {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        id: ProcessId,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Multicast a workload from a client process and wait for it to finish.
    Client {
        #[arg(long)]
        spec: PathBuf,
        /// Defaults to the spec's first client.
        #[arg(long)]
        id: Option<ProcessId>,
        /// Destination groups, e.g. g0,g1. Random non-empty sets when absent.
        #[arg(long, value_delimiter = ',')]
        dest: Vec<GroupId>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 10)]
        interval_ms: u64,
        #[arg(long, default_value_t = 30_000)]
        timeout_ms: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a built-in scenario end to end and check it; lists them without a name.
    Scenario {
        name: Option<String>,
        #[arg(long, default_value = "whitebox")]
        protocol: Protocol,
    },
    /// Print a cluster spec for a local test cluster.
    Cluster {
        #[arg(long, default_value = "whitebox")]
        protocol: Protocol,
        #[arg(long, default_value_t = 2)]
        groups: usize,
        #[arg(long, default_value_t = 1)]
        f: usize,
        #[arg(long, default_value_t = 1)]
        clients: usize,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 7000)]
        base_port: u16,
    },
}

/// Prints a line; a closed stdout, as under `| head`, ends the program quietly.
macro_rules! say {
    ($($arg:tt)*) => {
        if let Err(e) = writeln!(io::stdout(), $($arg)*) {
            if e.kind() == io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
            return Err(e.into());
        }
    };
}

/// Input problems exit with 2, like usage errors; failed checks with 1.
struct Failure(u8, String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Failure {
        Failure(2, e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WBCAST_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            if !msg.is_empty() {
                eprintln!("wbcast: {msg}");
            }
            ExitCode::from(code)
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Sim { config, scenario, protocol, trace, snapshots } => {
            let mut cfg = match (config, scenario) {
                (Some(path), _) => serde_json::from_str::<SimConfig>(&read(&path)?)?,
                (None, Some(name)) => named(&name, protocol)?,
                (None, None) => unreachable!("clap requires one"),
            };
            cfg.snapshots |= snapshots;
            let t = sim::run(&cfg)?;
            write_trace(&t, &trace)?;
            let delivered = t.events.iter().filter(|e| matches!(e.kind, wbcast_core::trace::EventKind::Deliver { .. }));
            say!("{} events, {} deliveries, trace in {}", t.events.len(), delivered.count(), trace.display());
            Ok(())
        }
        Cmd::Check { trace, config, report } => {
            let t = load_traces(&trace)?;
            if let Some(path) = config {
                let (protocol, topo) = declared(&path)?;
                if protocol != t.meta.protocol || topo != t.meta.topology {
                    return Err(Failure(1, format!("trace does not match {}", path.display())));
                }
            }
            let r = check(&t);
            say!("{}", r.table().trim_end());
            if let Some(path) = report {
                fs::write(&path, serde_json::to_string_pretty(&r)?)?;
            }
            if r.ok() {
                Ok(())
            } else {
                Err(Failure(1, counterexample(&r, &t)))
            }
        }
        Cmd::Latency { trace, delta } => {
            let mut t = load_traces(&[trace])?;
            if t.meta.horizon.is_none() {
                eprintln!("wbcast: this trace comes from a real run; δ-unit latencies are only meaningful for simulator traces");
            }
            if let Some(d) = delta {
                t.meta.delta = d;
            }
            say!("{}", latency::measure(&t).table().trim_end());
            Ok(())
        }
        Cmd::Node { spec, id, trace } => {
            let spec = ClusterSpec::load(&spec)?;
            let node = Node::start(&spec, id, None, sink(trace.as_deref())?)?;
            say!("{id} listening on {}", spec.addr(id).unwrap_or("?"));
            node.wait();
            Ok(())
        }
        Cmd::Client { spec, id, dest, count, interval_ms, timeout_ms, seed, trace } => {
            let spec = ClusterSpec::load(&spec)?;
            let topo = spec.validate()?;
            let id = match id {
                Some(p) => p,
                None => *spec.clients.keys().next().ok_or("the spec has no clients; pass --id")?,
            };
            for g in &dest {
                if !topo.groups.iter().any(|x| x.id == *g) {
                    return Err(Failure(2, format!("unknown group {g}")));
                }
            }
            let groups: Vec<GroupId> = topo.groups.iter().map(|g| g.id).collect();
            let mut rng = StdRng::seed_from_u64(seed);
            let node = Node::start(&spec, id, None, sink(trace.as_deref())?)?;
            for i in 0..count {
                let d = if dest.is_empty() {
                    let k = rng.gen_range(1..=groups.len());
                    groups.choose_multiple(&mut rng, k).copied().collect()
                } else {
                    dest.clone()
                };
                let m = node.multicast(d, format!("{i}").into_bytes());
                info!("multicast {m}");
                thread::sleep(Duration::from_millis(interval_ms));
            }
            let deadline = Instant::now() + Duration::from_millis(timeout_ms);
            let mut left = node.pending().unwrap_or(count);
            while left > 0 && Instant::now() < deadline {
                thread::sleep(Duration::from_millis(20));
                left = node.pending().unwrap_or(left);
            }
            node.stop();
            if left > 0 {
                return Err(Failure(1, format!("{left} of {count} messages unconfirmed after {timeout_ms} ms")));
            }
            say!("{count} messages confirmed");
            Ok(())
        }
        Cmd::Scenario { name: None, .. } => {
            for n in scenario::NAMES {
                say!("{n}");
            }
            Ok(())
        }
        Cmd::Scenario { name: Some(name), protocol } => {
            let mut cfg = named(&name, protocol)?;
            cfg.snapshots = true;
            let t = sim::run(&cfg)?;
            let lat = latency::measure(&t);
            let p = cfg.protocol;
            let show = |d: Option<latency::Deltas>| d.map_or("-".to_string(), render);
            say!("{p} CFL = {}", show(lat.cfl));
            say!("{p} FFL = {}", show(lat.ffl));
            let r = checker::check_all(&t);
            say!("{}", r.table().trim_end());
            if r.ok() {
                Ok(())
            } else {
                Err(Failure(1, counterexample(&r, &t)))
            }
        }
        Cmd::Cluster { protocol, groups, f, clients, host, base_port } => {
            let spec = ClusterSpec::local(protocol, groups, f, clients, &host, base_port);
            say!("{}", serde_json::to_string_pretty(&spec)?);
            Ok(())
        }
    }
}

fn named(name: &str, protocol: Protocol) -> Result<SimConfig, Failure> {
    scenario::by_name(name, protocol)
        .ok_or_else(|| Failure(2, format!("unknown scenario {name}; try one of {}", scenario::NAMES.join(", "))))
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure(2, format!("{}: {e}", path.display())))
}

fn load_traces(paths: &[PathBuf]) -> Result<Trace, Failure> {
    let mut traces = Vec::new();
    for p in paths {
        let f = File::open(p).map_err(|e| Failure(2, format!("{}: {e}", p.display())))?;
        traces.push(Trace::read_jsonl(BufReader::new(f)).map_err(|e| Failure(2, format!("{}: {e}", p.display())))?);
    }
    let first = traces.remove(0);
    if traces.is_empty() {
        return Ok(first);
    }
    let meta = first.meta.clone();
    let logs = std::iter::once(first).chain(traces).map(|t| t.events).collect();
    Ok(Trace::merge(meta, logs))
}

/// Protocol and topology declared by a simulator config or a cluster spec.
fn declared(path: &Path) -> Result<(Protocol, wbcast_core::types::Topology), Failure> {
    let text = read(path)?;
    if let Ok(cfg) = serde_json::from_str::<SimConfig>(&text) {
        return Ok((cfg.protocol, cfg.validate()?));
    }
    let spec: ClusterSpec = serde_json::from_str(&text)?;
    Ok((spec.protocol, spec.validate()?))
}

/// Every check for simulator traces; safety and genuineness for real runs,
/// whose timing says nothing about δ.
fn check(t: &Trace) -> SpecReport {
    if t.meta.horizon.is_some() {
        return checker::check_all(t);
    }
    let mut r = checker::check_safety(t);
    r.genuineness = checker::check_genuineness(t);
    r
}

fn counterexample(r: &SpecReport, t: &Trace) -> String {
    let mut out = String::new();
    for (name, v) in r.failures() {
        out += &format!("{name} violated: {v}\n");
        if let checker::Verdict::Fail { events, .. } = v {
            for i in events.iter().take(8) {
                if let Some(e) = t.events.get(*i) {
                    out += &format!("  [{i}] {}\n", serde_json::to_string(e).unwrap_or_default());
                }
            }
        }
    }
    out.trim_end().to_string()
}

fn write_trace(t: &Trace, path: &Path) -> Result<(), Failure> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Failure(2, format!("{}: {e}", path.display())))?);
    t.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

fn sink(path: Option<&Path>) -> io::Result<Option<Box<dyn Write + Send>>> {
    path.map(|p| File::create(p).map(|f| Box::new(f) as Box<dyn Write + Send>)).transpose()
}
