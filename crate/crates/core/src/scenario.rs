//! Canned runs and random run generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::protocol::{Mutation, Protocol};
use crate::sim::{Cast, Crash, DelayModel, EdgeDelay, Nomination, SimConfig};
use crate::time::Time;
use crate::types::{GroupId, ProcessId, Topology};

pub const NAMES: &[&str] = &["solo", "convoy", "crash-recovery", "disregard", "stuck-proposed"];

fn t(n: u64) -> Time {
    Time::from_int(n)
}

fn cast(time: Time, sender: u32, dest: &[u32]) -> Cast {
    Cast { time, sender: ProcessId(sender), dest: dest.iter().map(|g| GroupId(*g)).collect(), payload: vec![] }
}

/// Skeen has no replication, so its groups are single processes.
fn f_for(protocol: Protocol) -> usize {
    match protocol {
        Protocol::Skeen => 0,
        _ => 1,
    }
}

pub fn by_name(name: &str, protocol: Protocol) -> Option<SimConfig> {
    match name {
        "solo" => Some(solo(protocol)),
        "convoy" => Some(convoy(protocol)),
        "crash-recovery" => Some(crash_recovery()),
        "disregard" => Some(disregard(Mutation::default())),
        "stuck-proposed" => Some(stuck_proposed()),
        _ => None,
    }
}

/// A client multicasts one message to two of three groups.
pub fn solo(protocol: Protocol) -> SimConfig {
    let topo = Topology::uniform(3, f_for(protocol), 1);
    let client = topo.clients[0].0;
    SimConfig::new(protocol, &topo, vec![cast(t(0), client, &[0, 1])])
}

/// The message `m` from the client to g0 and g1 gets its global timestamp
/// from g0, whose clock two local messages pushed ahead. Just before g1
/// learns that timestamp, g1's leader multicasts `m'` to g1 and g2 with a
/// smaller local timestamp, so g1 cannot deliver `m` before `m'` commits.
pub fn convoy(protocol: Protocol) -> SimConfig {
    let topo = Topology::uniform(3, f_for(protocol), 1);
    let client = topo.clients[0].0;
    let leader = |g: u32| topo.members(GroupId(g))[0].0;
    // When g1's leader learns the global timestamp of `m`.
    let learn = match protocol {
        Protocol::Skeen => 2,
        Protocol::Whitebox => 2,
        Protocol::FtSkeen => 6,
    };
    let workload = vec![
        cast(t(0), leader(0), &[0]),
        cast(t(0), leader(0), &[0]),
        cast(t(0), client, &[0, 1]),
        cast(t(learn), leader(1), &[1, 2]),
    ];
    SimConfig::new(protocol, &topo, workload)
}

/// Two groups of three. The g0 leader crashes right after sending its
/// ACCEPTs and before any acknowledgement; a follower takes over.
pub fn crash_recovery() -> SimConfig {
    let topo = Topology::uniform(2, 1, 1);
    let mut cfg = SimConfig::new(Protocol::Whitebox, &topo, vec![cast(t(0), 6, &[0, 1])]);
    cfg.gst = t(10);
    cfg.snapshots = true;
    // Six ACCEPTs, one per destination process, the first to itself.
    cfg.crashes = vec![Crash { process: ProcessId(0), time: None, after_sends: Some(6) }];
    cfg.horizon = t(60);
    cfg
}

/// Two groups of five, f = 2. Client p10 multicasts `m` to g0 and crashes;
/// the g0 leader p0 crashes after its ACCEPT for `m` reaches only p1. The
/// nominee p2 recovers from p2, p3 and p4 and commits `m'` with the same local timestamp `m` had; p2 then crashes
/// and p3 recovers from p1, p3 and p4. Only p1 still holds `m`, accepted
/// under an older ballot, and recovery must disregard it.
pub fn disregard(mutation: Mutation) -> SimConfig {
    let topo = Topology::uniform(2, 2, 2);
    let workload = vec![
        // Push g1's clock ahead so `m'` takes its global timestamp from g1.
        cast(t(0), 5, &[1]),
        cast(t(0), 5, &[1]),
        cast(t(0), 5, &[1]),
        cast(t(0), 5, &[1]),
        cast(t(0), 10, &[0]),
        cast(t(7), 11, &[0, 1]),
    ];
    let mut cfg = SimConfig::new(Protocol::Whitebox, &topo, workload);
    cfg.gst = t(30);
    cfg.snapshots = true;
    cfg.mutation = mutation;
    cfg.crashes = vec![
        Crash { process: ProcessId(10), time: None, after_sends: Some(1) },
        Crash { process: ProcessId(0), time: None, after_sends: Some(2) },
        Crash { process: ProcessId(2), time: Some(t(12)), after_sends: None },
    ];
    cfg.nominations = vec![
        Nomination { time: t(2), group: GroupId(0), nominee: ProcessId(2) },
        Nomination { time: t(13), group: GroupId(0), nominee: ProcessId(3) },
    ];
    // p1 hears nothing from p2 before GST.
    cfg.delay = DelayModel::Scripted {
        default: t(1),
        edges: vec![EdgeDelay { from: ProcessId(2), to: ProcessId(1), delay: t(40), until: Some(cfg.gst) }],
    };
    cfg.horizon = t(90);
    cfg
}

/// The client crashes after its MULTICAST reaches only the g0 leader; g1
/// learns of the message through g0's retries.
pub fn stuck_proposed() -> SimConfig {
    let topo = Topology::uniform(2, 1, 1);
    let mut cfg = SimConfig::new(Protocol::Whitebox, &topo, vec![cast(t(0), 6, &[0, 1])]);
    cfg.snapshots = true;
    cfg.crashes = vec![Crash { process: ProcessId(6), time: None, after_sends: Some(1) }];
    cfg
}

fn random_dest(rng: &mut impl Rng, k: usize) -> Vec<GroupId> {
    let n = rng.gen_range(1..=k.min(3));
    let mut all: Vec<u32> = (0..k as u32).collect();
    for i in 0..n {
        let j = rng.gen_range(i..all.len());
        all.swap(i, j);
    }
    let mut dest: Vec<GroupId> = all[..n].iter().map(|g| GroupId(*g)).collect();
    dest.sort();
    dest
}

/// Times on a δ/16 grid in `[0, span·δ)`.
fn random_time(rng: &mut impl Rng, span: u64) -> Time {
    Time::new(rng.gen_range(0..span * 16), 16)
}

/// A fault-free run after GST with random delays and a random workload
/// from clients and group members.
pub fn random_stable(protocol: Protocol, seed: u64) -> SimConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(1..=5);
    let topo = Topology::uniform(k, f_for(protocol), 2);
    let senders: Vec<ProcessId> = topo.processes().collect();
    let n = rng.gen_range(1..=12);
    let mut workload: Vec<Cast> = (0..n)
        .map(|_| Cast {
            time: random_time(&mut rng, 12),
            sender: senders[rng.gen_range(0..senders.len())],
            dest: random_dest(&mut rng, k),
            payload: vec![],
        })
        .collect();
    workload.sort_by_key(|c| c.time);
    let mut cfg = SimConfig::new(protocol, &topo, workload);
    cfg.delay = DelayModel::SeededRandom;
    cfg.seed = seed;
    cfg
}

/// A white-box run with crashes, scripted leader changes and unbounded
/// delays before a random GST. Half the runs replace random delays with
/// slow links inside groups until GST, so that recoveries see partial
/// acceptances from older ballots.
pub fn random_faulty(seed: u64, mutation: Mutation) -> SimConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(1..=3);
    let f = if rng.gen_bool(0.4) { 2 } else { 1 };
    let topo = Topology::uniform(k, f, 2);
    let gst = rng.gen_range(4..=20);
    let senders: Vec<ProcessId> = topo.processes().collect();
    let n = rng.gen_range(2..=10);
    let span = gst + 6;
    let mut workload: Vec<Cast> = (0..n)
        .map(|_| Cast {
            time: random_time(&mut rng, span),
            sender: senders[rng.gen_range(0..senders.len())],
            dest: random_dest(&mut rng, k),
            payload: vec![],
        })
        .collect();
    workload.sort_by_key(|c| c.time);
    let mut crashes = Vec::new();
    let mut nominations = Vec::new();
    let mut edges = Vec::new();
    for g in topo.group_ids() {
        let members = topo.members(g);
        let mut pool: Vec<ProcessId> = members.to_vec();
        for i in 0..rng.gen_range(0..=f) {
            // The initial leader is the most interesting victim.
            let at = if i == 0 && rng.gen_bool(0.5) { 0 } else { rng.gen_range(0..pool.len()) };
            let p = pool.remove(at);
            let crash = if rng.gen_bool(0.5) {
                Crash { process: p, time: Some(random_time(&mut rng, span)), after_sends: None }
            } else {
                Crash { process: p, time: None, after_sends: Some(rng.gen_range(1..=8)) }
            };
            crashes.push(crash);
        }
        for _ in 0..rng.gen_range(0..=4) {
            let time = random_time(&mut rng, gst);
            nominations.push(Nomination { time, group: g, nominee: members[rng.gen_range(0..members.len())] });
        }
        for from in members {
            for to in members {
                if from != to && rng.gen_bool(0.2) {
                    let delay = Time::new(rng.gen_range(32..=gst * 16), 16);
                    edges.push(EdgeDelay { from: *from, to: *to, delay, until: Some(t(gst)) });
                }
            }
        }
    }
    for c in &topo.clients {
        if rng.gen_bool(0.3) {
            crashes.push(Crash { process: *c, time: None, after_sends: Some(rng.gen_range(1..=3)) });
        }
    }
    let mut cfg = SimConfig::new(Protocol::Whitebox, &topo, workload);
    let last = cfg.workload.iter().map(|c| c.time).max().unwrap_or_default();
    cfg.gst = t(gst);
    cfg.horizon = last.max(cfg.gst) + t(60);
    cfg.delay =
        if rng.gen_bool(0.5) { DelayModel::SeededRandom } else { DelayModel::Scripted { default: t(1), edges } };
    cfg.seed = seed;
    cfg.crashes = crashes;
    cfg.nominations = nominations;
    cfg.snapshots = true;
    cfg.mutation = mutation;
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_named_scenario_is_valid() {
        for name in NAMES {
            for p in [Protocol::Skeen, Protocol::Whitebox, Protocol::FtSkeen] {
                by_name(name, p).unwrap().validate().unwrap();
            }
        }
        assert!(by_name("nope", Protocol::Whitebox).is_none());
    }

    #[test]
    fn random_configs_are_valid() {
        for seed in 0..200 {
            random_faulty(seed, Mutation::default()).validate().unwrap();
            for p in [Protocol::Skeen, Protocol::Whitebox, Protocol::FtSkeen] {
                random_stable(p, seed).validate().unwrap();
            }
        }
    }
}
