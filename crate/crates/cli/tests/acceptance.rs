//! The acceptance suite: one line per criterion, then a single verdict.
//!
//! Criteria run one after another so that their timings are meaningful.

mod common;

use std::collections::BTreeSet;
use std::io::{self, Write};
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use proptest::test_runner::{Config, TestRunner};
use wbcast::frame::{decode, encode};
use wbcast_core::checker::{check_all, check_genuineness, check_safety};
use wbcast_core::explore::{explore, ExploreConfig};
use wbcast_core::latency::{self, render, Deltas};
use wbcast_core::message::Message;
use wbcast_core::protocol::{Mutation, Protocol};
use wbcast_core::scenario;
use wbcast_core::sim;
use wbcast_core::trace::{EventKind, Trace};
use wbcast_core::types::{GroupId, ProcessId, Topology};

const SEEDS: u64 = 1000;

fn d(n: u64) -> Deltas {
    Deltas::from_integer(n)
}

/// Runs one criterion, printing its line. A criterion fails by returning an
/// error, by panicking or by running past its time limit.
fn criterion(n: u32, title: &str, limit: Duration, body: impl FnOnce() -> Result<String, String>) -> bool {
    let start = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let took = start.elapsed();
    let outcome = match outcome {
        Ok(_) if took > limit => Err(format!("took longer than {limit:?}")),
        o => o,
    };
    let pass = outcome.is_ok();
    let detail = outcome.unwrap_or_else(|e| e);
    // Straight to stderr so the line shows even when the harness captures
    // test output.
    let _ = writeln!(
        io::stderr(),
        "criterion {n} {} {title}: {detail} ({:.2}s, limit {}s)",
        if pass { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        limit.as_secs()
    );
    pass
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run(cfg: &sim::SimConfig) -> Trace {
    sim::run(cfg).expect("valid config")
}

fn solo_latency() -> Result<String, String> {
    let cfg = scenario::solo(Protocol::Whitebox);
    ensure(cfg.topology().unwrap() == Topology::uniform(3, 1, 1), || "not 3 groups of 3".into())?;
    let t = run(&cfg);
    let lat = latency::measure(&t);
    let [m] = lat.messages.as_slice() else { return Err("expected one message".into()) };
    let topo = &t.meta.topology;
    ensure(m.per_group.len() == 2, || format!("delivered in {:?}", m.per_group.keys()))?;
    for (g, first) in &m.per_group {
        ensure(*first == d(3), || format!("first delivery in {g} at {}", render(*first)))?;
        let leader = topo.members(*g)[0];
        for p in topo.members(*g) {
            let want = if *p == leader { d(3) } else { d(4) };
            let got = m.per_process.get(p).copied();
            ensure(got == Some(want), || format!("{p} delivered at {got:?}, want {}", render(want)))?;
        }
    }
    Ok("first delivery in each group at 3δ, followers at 4δ".into())
}

fn convoy_bounds() -> Result<String, String> {
    let mut out = Vec::new();
    for (p, solo, convoy) in [(Protocol::Skeen, 2, 4), (Protocol::Whitebox, 3, 5), (Protocol::FtSkeen, 6, 12)] {
        let s = latency::measure(&run(&scenario::solo(p)));
        let c = latency::measure(&run(&scenario::convoy(p)));
        ensure(s.ffl == Some(d(solo)), || format!("{p} solo latency {:?}, want {solo}δ", s.ffl))?;
        ensure(c.ffl == Some(d(convoy)), || format!("{p} convoy latency {:?}, want {convoy}δ", c.ffl))?;
        ensure(s.undelivered.is_empty() && c.undelivered.is_empty(), || format!("{p} left messages undelivered"))?;
        out.push(format!("{p} {solo}δ/{convoy}δ"));
    }
    Ok(format!("solo/convoy: {}", out.join(", ")))
}

fn ffl_law() -> Result<String, String> {
    let mut out = Vec::new();
    for (p, bound) in [(Protocol::Whitebox, 5), (Protocol::Skeen, 4), (Protocol::FtSkeen, 12)] {
        let mut worst = d(0);
        let mut counted = 0;
        for seed in 0..SEEDS {
            let lat = latency::measure(&run(&scenario::random_stable(p, seed)));
            ensure(lat.undelivered.is_empty(), || format!("{p} seed {seed}: undelivered {:?}", lat.undelivered))?;
            for m in lat.messages.iter().filter(|m| m.stabilized) {
                ensure(m.latency <= d(bound), || format!("{p} seed {seed}: {} took {}", m.msg, render(m.latency)))?;
                worst = worst.max(m.latency);
                counted += 1;
            }
        }
        out.push(format!("{p} worst {} of {counted}", render(worst)));
    }
    Ok(format!("{SEEDS} seeds each; {}", out.join(", ")))
}

/// Verdicts that must pass, not merely avoid failing.
const REQUIRED: &[&str] = &[
    "validity",
    "integrity",
    "ordering",
    "acyclicity",
    "termination",
    "genuineness",
    "I1",
    "I2",
    "I3a",
    "I3b",
    "I4",
    "I5",
    "I9",
    "I10",
    "I11",
    "I12",
    "I13",
    "I14",
    "I15",
    "I16",
    "I20",
];

fn safety_under_faults() -> Result<String, String> {
    let mut crashes = 0;
    let mut recoveries = 0;
    for seed in 0..SEEDS {
        let cfg = scenario::random_faulty(seed, Mutation::default());
        crashes += cfg.crashes.len();
        let t = run(&cfg);
        recoveries +=
            t.events.iter().filter(|e| matches!(e.kind, EventKind::Send { msg: Message::NewState { .. }, .. })).count();
        let r = check_all(&t);
        for (name, v) in r.verdicts() {
            let needed = REQUIRED.contains(&name.as_str());
            ensure(!v.is_fail() && (!needed || v.is_pass()), || format!("seed {seed}: {name} {v}"))?;
        }
    }
    ensure(recoveries > 0, || "no recovery ever ran".into())?;
    Ok(format!("{SEEDS} seeds, {crashes} crashes, {recoveries} NEW_STATE sends, every verdict passes"))
}

fn mutation_sensitivity() -> Result<String, String> {
    let mutations = [
        ("clock max in ACCEPT", Mutation { skip_accept_clock_max: true, ..Default::default() }),
        ("delivery guard", Mutation { skip_delivery_guard: true, ..Default::default() }),
        ("maximal cballot rule", Mutation { recover_from_any_reporter: true, ..Default::default() }),
    ];
    let mut out = Vec::new();
    for (name, m) in mutations {
        let caught = (0..SEEDS).find_map(|seed| {
            let r = check_all(&run(&scenario::random_faulty(seed, m)));
            r.failures().first().map(|(v, _)| (seed, v.clone()))
        });
        let (seed, verdict) = caught.ok_or_else(|| format!("removing the {name} goes unnoticed"))?;
        out.push(format!("{name}: seed {seed} fails {verdict}"));
    }
    Ok(out.join("; "))
}

fn exhaustive() -> Result<String, String> {
    let small = [
        vec![(2, vec![0, 1]), (0, vec![0, 1]), (1, vec![0, 1])],
        vec![(2, vec![0, 1]), (0, vec![0]), (1, vec![1])],
        vec![(2, vec![0, 1]), (2, vec![1]), (0, vec![0, 1])],
    ];
    let replicated = [
        vec![(6, vec![0]), (7, vec![0]), (0, vec![0])],
        vec![(6, vec![0, 1]), (0, vec![0])],
        vec![(6, vec![0, 1]), (3, vec![0, 1])],
        vec![(6, vec![0, 1]), (6, vec![0]), (7, vec![1])],
    ];
    let mut runs = Vec::new();
    for casts in &small {
        for p in [Protocol::Skeen, Protocol::Whitebox, Protocol::FtSkeen] {
            runs.push((p, Topology::uniform(2, 0, 1), casts));
        }
    }
    for casts in &replicated {
        for p in [Protocol::Whitebox, Protocol::FtSkeen] {
            runs.push((p, Topology::uniform(2, 1, 2), casts));
        }
    }
    let (mut states, mut leaves) = (0, 0);
    for (protocol, topology, casts) in runs {
        let cfg = ExploreConfig {
            protocol,
            topology,
            casts: casts.iter().map(|(s, d)| (ProcessId(*s), d.iter().map(|g| GroupId(*g)).collect())).collect(),
            max_pending: 6,
            mutation: Mutation::default(),
            full: false,
        };
        let r = explore(&cfg);
        if let Some(v) = r.violation {
            return Err(format!("{protocol} {casts:?}: {} after {}", v.what, v.path.join(", ")));
        }
        ensure(r.leaves > 0, || format!("{protocol} {casts:?}: no complete run within the bound"))?;
        states += r.states;
        leaves += r.leaves;
    }
    Ok(format!("{states} states, {leaves} complete orderings, no violation"))
}

fn recovery() -> Result<String, String> {
    let t = run(&scenario::crash_recovery());
    let old = ProcessId(0);
    let crash = t.events.iter().position(|e| e.process == old && e.kind == EventKind::Crash).ok_or("no crash")?;
    let accepts = t.events[..crash]
        .iter()
        .filter(|e| e.process == old && matches!(e.kind, EventKind::Send { msg: Message::Accept { .. }, .. }))
        .count();
    ensure(accepts == 6, || format!("{accepts} ACCEPTs before the crash"))?;
    let acked = t.events[..crash]
        .iter()
        .any(|e| e.process == old && matches!(e.kind, EventKind::Receive { msg: Message::AcceptAck { .. }, .. }));
    ensure(!acked, || "the leader heard an ACCEPT_ACK before crashing".into())?;
    let nominated = t.events[crash..].iter().find_map(|e| match e.kind {
        EventKind::Nominate { group: GroupId(0), nominee } if nominee != old => Some(nominee),
        _ => None,
    });
    let nominee = nominated.ok_or("no new leader nominated")?;
    let retried = t.events[crash..]
        .iter()
        .any(|e| e.process != old && matches!(e.kind, EventKind::Send { msg: Message::Multicast { .. }, .. }));
    ensure(retried, || "nobody re-multicast the message".into())?;
    let topo = &t.meta.topology;
    for g in [GroupId(0), GroupId(1)] {
        let by: BTreeSet<ProcessId> = t
            .events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Deliver { .. }) && topo.group_of(e.process) == Some(g))
            .map(|e| e.process)
            .collect();
        ensure(by.len() > topo.f, || format!("only {by:?} delivered in {g}"))?;
    }
    let r = check_all(&t);
    ensure(r.ok(), || r.table())?;

    let t = run(&scenario::disregard(Mutation::default()));
    let r = check_all(&t);
    ensure(r.ok() && r.invariants["I5"].is_pass(), || r.table())?;
    let broken =
        check_all(&run(&scenario::disregard(Mutation { recover_from_any_reporter: true, ..Default::default() })));
    ensure(broken.invariants["I5"].is_fail(), || "taking stale acceptances goes unnoticed by I5".into())?;
    Ok(format!("{nominee} took over g0 and the message reached quorums; stale timestamp not resurrected"))
}

fn transport() -> Result<String, String> {
    let run = common::run_cluster(100, Some(50), 8);
    ensure(run.confirmed, || "the client did not see every message confirmed".into())?;
    let killed = run.killed.ok_or("no node was killed")?;
    let took_over = run
        .trace
        .events
        .iter()
        .any(|e| e.process != killed && matches!(e.kind, EventKind::Send { msg: Message::NewState { .. }, .. }));
    ensure(took_over, || "no new leader took over".into())?;
    let safety = check_safety(&run.trace);
    ensure(safety.ok(), || safety.table())?;
    let g = check_genuineness(&run.trace);
    ensure(g.is_pass(), || format!("genuineness {g}"))?;
    let short = common::short_of_quorum(&run);
    ensure(short.is_empty(), || format!("not delivered by quorums: {short:?}"))?;

    let mut runner = TestRunner::new(Config { cases: 10_000, failure_persistence: None, ..Config::default() });
    runner
        .run(&common::envelope(), |env| {
            let bytes = encode(&env).unwrap();
            assert_eq!(encode(&env).unwrap(), bytes);
            assert_eq!(decode(&bytes).unwrap(), (env, bytes.len()));
            Ok(())
        })
        .map_err(|e| format!("frame round trip: {e}"))?;
    Ok(format!("{} messages, {killed} killed, merged trace safe; 10000 frames round-trip", run.casts.len()))
}

#[test]
fn acceptance() {
    let secs = Duration::from_secs;
    let results = [
        criterion(1, "solo latency", secs(1), solo_latency),
        criterion(2, "convoy bounds", secs(5), convoy_bounds),
        criterion(3, "FFL <= C + CFL", secs(120), ffl_law),
        criterion(4, "safety under faults", secs(300), safety_under_faults),
        criterion(5, "mutation sensitivity", secs(300), mutation_sensitivity),
        criterion(6, "exhaustive small scopes", secs(600), exhaustive),
        criterion(7, "leader recovery", secs(10), recovery),
        criterion(8, "socket transport", secs(120), transport),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "criteria {failed:?} failed");
}
