//! A loopback cluster driven from a test, and random frames.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use wbcast::cluster::ClusterSpec;
use wbcast::frame::{Body, Envelope};
use wbcast::node::{bind_loopback, trace_meta, Node};
use wbcast_core::message::Message;
use wbcast_core::protocol::Protocol;
use wbcast_core::trace::{EventKind, Trace};
use wbcast_core::types::{AppMessage, Ballot, GroupId, MsgId, ProcessId, Timestamp};

pub struct Run {
    pub trace: Trace,
    pub casts: Vec<(MsgId, Vec<GroupId>)>,
    pub killed: Option<ProcessId>,
    /// Whether the client saw every message confirmed before the deadline.
    pub confirmed: bool,
}

/// Two groups of three and one client. The client multicasts `count`
/// messages to random non-empty destination sets; once `kill_at` of them
/// are out, g0's initial leader is killed.
pub fn run_cluster(count: usize, kill_at: Option<usize>, seed: u64) -> Run {
    let mut spec = ClusterSpec::local(Protocol::Whitebox, 2, 1, 1, "127.0.0.1", 0);
    spec.epoch_ms = SystemTime::now().duration_since(UNIX_EPOCH).unwrap().as_millis() as u64;
    let mut listeners = bind_loopback(&mut spec).unwrap();
    let topo = spec.topology().unwrap();
    let client_id = topo.clients[0];
    let mut nodes: BTreeMap<ProcessId, Node> = BTreeMap::new();
    for p in topo.processes() {
        let l = listeners.remove(&p).unwrap();
        nodes.insert(p, Node::start(&spec, p, Some(l), None).unwrap());
    }
    let groups: Vec<GroupId> = topo.groups.iter().map(|g| g.id).collect();
    let leader = topo.members(GroupId(0))[0];
    let mut rng = StdRng::seed_from_u64(seed);
    let mut casts = Vec::new();
    let mut logs = Vec::new();
    let mut killed = None;
    for i in 0..count {
        if Some(i) == kill_at {
            logs.push(nodes.remove(&leader).unwrap().kill());
            killed = Some(leader);
        }
        let k = rng.gen_range(1..=groups.len());
        let dest: Vec<GroupId> = groups.choose_multiple(&mut rng, k).copied().collect();
        let id = nodes[&client_id].multicast(dest.clone(), format!("m{i}").into_bytes());
        casts.push((id, dest));
        thread::sleep(Duration::from_millis(5));
    }
    let deadline = Instant::now() + Duration::from_secs(60);
    let mut confirmed = false;
    while Instant::now() < deadline {
        if nodes[&client_id].pending() == Some(0) {
            confirmed = true;
            break;
        }
        thread::sleep(Duration::from_millis(20));
    }
    // Let followers catch up on the last deliveries.
    thread::sleep(Duration::from_millis(500));
    logs.extend(nodes.into_values().map(Node::stop));
    let trace = Trace::merge(trace_meta(&spec).unwrap(), logs);
    Run { trace, casts, killed, confirmed }
}

/// Messages not delivered by at least `f + 1` members of every destination.
pub fn short_of_quorum(run: &Run) -> Vec<MsgId> {
    let topo = &run.trace.meta.topology;
    let mut by: BTreeMap<MsgId, BTreeSet<ProcessId>> = BTreeMap::new();
    for e in &run.trace.events {
        if let EventKind::Deliver { msg, .. } = e.kind {
            by.entry(msg).or_default().insert(e.process);
        }
    }
    run.casts
        .iter()
        .filter(|(m, dest)| {
            dest.iter().any(|g| {
                let n = topo.members(*g).iter().filter(|p| by.get(m).is_some_and(|s| s.contains(p))).count();
                n < topo.f + 1
            })
        })
        .map(|(m, _)| *m)
        .collect()
}

fn ts() -> impl Strategy<Value = Timestamp> {
    prop_oneof![Just(Timestamp::Bottom), (0u64..1000, 0u32..5).prop_map(|(c, g)| Timestamp::new(c, GroupId(g)))]
}

fn app() -> impl Strategy<Value = AppMessage> {
    (0u32..20, any::<u64>(), prop::collection::btree_set(0u32..5, 1..4), prop::collection::vec(any::<u8>(), 0..32))
        .prop_map(|(p, n, d, payload)| {
            AppMessage::new(MsgId::new(ProcessId(p), n), d.into_iter().map(GroupId), payload)
        })
}

fn ballot() -> impl Strategy<Value = Ballot> {
    (0u64..50, 0u32..20).prop_map(|(n, p)| Ballot::new(n, ProcessId(p)))
}

pub fn envelope() -> impl Strategy<Value = Envelope> {
    let body = prop_oneof![
        (app(), ballot(), ts(), ts()).prop_map(|(msg, ballot, lts, gts)| Body::Protocol(Message::Deliver {
            msg,
            ballot,
            lts,
            gts
        })),
        app().prop_map(|msg| Body::Protocol(Message::Multicast { msg })),
        (app(), 0u32..5, ballot(), ts()).prop_map(|(msg, g, ballot, lts)| {
            Body::Protocol(Message::Accept { msg, group: GroupId(g), ballot, lts })
        }),
        ballot().prop_map(|ballot| Body::Protocol(Message::NewLeader { ballot })),
        (0u32..5, 0u32..20, ballot()).prop_map(|(g, p, ballot)| {
            Body::Protocol(Message::Redirect { group: GroupId(g), leader: ProcessId(p), ballot })
        }),
        any::<u64>().prop_map(|upto| Body::Ack { upto }),
        Just(Body::Heartbeat),
    ];
    (0u32..20, 0u32..20, any::<u64>(), body).prop_map(|(f, t, seq, body)| Envelope {
        from: ProcessId(f),
        to: ProcessId(t),
        seq,
        body,
    })
}
