//! Offline validation of a trace: the atomic multicast properties,
//! genuineness, and the white-box protocol invariants.
//!
//! Every verdict is a pure function of the trace. Counterexamples cite event
//! indices into `trace.events`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::message::{BalVec, Message};
use crate::protocol::{Protocol, Snapshot, Status};
use crate::time::Time;
use crate::trace::{EventKind, Trace};
use crate::types::{merge_global, AppMessage, Ballot, GroupId, MsgId, Phase, ProcessId, Timestamp};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail { reason: String, events: Vec<usize> },
    Inconclusive { reason: String },
    Skipped { reason: String },
}

impl Verdict {
    fn fail(reason: impl Into<String>, events: Vec<usize>) -> Verdict {
        Verdict::Fail { reason: reason.into(), events }
    }

    fn skipped(reason: &str) -> Verdict {
        Verdict::Skipped { reason: reason.to_string() }
    }

    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass)
    }

    pub fn is_fail(&self) -> bool {
        matches!(self, Verdict::Fail { .. })
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Pass => f.write_str("pass"),
            Verdict::Fail { reason, events } => write!(f, "FAIL: {reason} (events {events:?})"),
            Verdict::Inconclusive { reason } => write!(f, "inconclusive: {reason}"),
            Verdict::Skipped { reason } => write!(f, "skipped: {reason}"),
        }
    }
}

/// Fails with the first violation found, if any.
fn first(violations: impl IntoIterator<Item = (String, Vec<usize>)>) -> Verdict {
    match violations.into_iter().next() {
        Some((reason, events)) => Verdict::Fail { reason, events },
        None => Verdict::Pass,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SpecReport {
    pub validity: Verdict,
    pub integrity: Verdict,
    pub ordering: Verdict,
    /// The delivered-before relation embeds into the gts order.
    pub acyclicity: Verdict,
    pub termination: Verdict,
    pub genuineness: Verdict,
    pub invariants: BTreeMap<String, Verdict>,
}

impl SpecReport {
    /// Every verdict with its name, properties first.
    pub fn verdicts(&self) -> Vec<(String, &Verdict)> {
        let mut out = vec![
            ("validity".to_string(), &self.validity),
            ("integrity".to_string(), &self.integrity),
            ("ordering".to_string(), &self.ordering),
            ("acyclicity".to_string(), &self.acyclicity),
            ("termination".to_string(), &self.termination),
            ("genuineness".to_string(), &self.genuineness),
        ];
        let mut inv: Vec<_> = self.invariants.iter().collect();
        inv.sort_by_key(|(k, _)| invariant_order(k));
        out.extend(inv.into_iter().map(|(k, v)| (k.clone(), v)));
        out
    }

    pub fn failures(&self) -> Vec<(String, &Verdict)> {
        self.verdicts().into_iter().filter(|(_, v)| v.is_fail()).collect()
    }

    pub fn ok(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn table(&self) -> String {
        self.verdicts().iter().map(|(k, v)| format!("{k:<12} {v}\n")).collect()
    }
}

fn invariant_order(key: &str) -> (u32, String) {
    let digits: String = key.chars().skip(1).take_while(|c| c.is_ascii_digit()).collect();
    (digits.parse().unwrap_or(u32::MAX), key.to_string())
}

/// Per-message facts gathered in one pass over the trace.
struct Index<'a> {
    trace: &'a Trace,
    casts: BTreeMap<MsgId, (usize, AppMessage)>,
    /// Every application message seen anywhere, for destination lookups.
    known: BTreeMap<MsgId, AppMessage>,
    commits: BTreeMap<MsgId, Vec<(usize, Timestamp)>>,
    delivers: BTreeMap<ProcessId, Vec<(usize, MsgId, Timestamp)>>,
    crashed: BTreeMap<ProcessId, usize>,
}

impl<'a> Index<'a> {
    fn new(trace: &'a Trace) -> Index<'a> {
        let mut ix = Index {
            trace,
            casts: BTreeMap::new(),
            known: BTreeMap::new(),
            commits: BTreeMap::new(),
            delivers: BTreeMap::new(),
            crashed: BTreeMap::new(),
        };
        for (i, e) in trace.events.iter().enumerate() {
            match &e.kind {
                EventKind::Multicast { msg } => {
                    ix.casts.entry(msg.id).or_insert((i, msg.clone()));
                    ix.known.entry(msg.id).or_insert_with(|| msg.clone());
                }
                EventKind::Send { msg, .. } | EventKind::Receive { msg, .. } => {
                    if let Some(m) = carried(msg) {
                        ix.known.entry(m.id).or_insert_with(|| m.clone());
                    }
                }
                EventKind::Commit { msg, gts, .. } => ix.commits.entry(*msg).or_default().push((i, *gts)),
                EventKind::Deliver { msg, gts } => ix.delivers.entry(e.process).or_default().push((i, *msg, *gts)),
                EventKind::Crash => {
                    ix.crashed.entry(e.process).or_insert(i);
                }
                _ => {}
            }
        }
        ix
    }

    fn group_of(&self, p: ProcessId) -> Option<GroupId> {
        self.trace.meta.topology.group_of(p)
    }

    fn members(&self, g: GroupId) -> &[ProcessId] {
        self.trace.meta.topology.members(g)
    }
}

fn carried(msg: &Message) -> Option<&AppMessage> {
    match msg {
        Message::Multicast { msg }
        | Message::Accept { msg, .. }
        | Message::Deliver { msg, .. }
        | Message::Propose { msg, .. }
        | Message::PersistLts { msg, .. } => Some(msg),
        _ => None,
    }
}

/// Runs every check.
pub fn check_all(trace: &Trace) -> SpecReport {
    let mut report = check_safety(trace);
    report.termination = check_termination(trace);
    report.genuineness = check_genuineness(trace);
    report.invariants = check_protocol_invariants(trace);
    report
}

/// Validity, integrity, ordering and acyclicity. Termination, genuineness
/// and the invariants are left skipped.
pub fn check_safety(trace: &Trace) -> SpecReport {
    let ix = Index::new(trace);
    let not_run = || Verdict::skipped("not run");
    SpecReport {
        validity: validity(&ix),
        integrity: integrity(&ix),
        ordering: ordering(&ix),
        acyclicity: acyclicity(&ix),
        termination: not_run(),
        genuineness: not_run(),
        invariants: BTreeMap::new(),
    }
}

fn validity(ix: &Index) -> Verdict {
    let mut bad = Vec::new();
    for (p, ds) in &ix.delivers {
        for &(i, m, _) in ds {
            match ix.casts.get(&m) {
                None => bad.push((format!("{p} delivers {m}, which was never multicast"), vec![i])),
                Some((c, _)) if *c > i => bad.push((format!("{p} delivers {m} before it is multicast"), vec![*c, i])),
                Some((c, msg)) => {
                    if !ix.group_of(*p).is_some_and(|g| msg.dest.contains(&g)) {
                        bad.push((format!("{p} delivers {m} but is not in its destination"), vec![*c, i]));
                    }
                }
            }
        }
    }
    first(bad)
}

fn integrity(ix: &Index) -> Verdict {
    let mut bad = Vec::new();
    for (p, ds) in &ix.delivers {
        let mut seen: BTreeMap<MsgId, usize> = BTreeMap::new();
        for &(i, m, _) in ds {
            if let Some(j) = seen.insert(m, i) {
                bad.push((format!("{p} delivers {m} twice"), vec![j, i]));
            }
        }
    }
    first(bad)
}

/// The global timestamp of every committed message, or the first
/// inconsistency found.
fn global_timestamps(ix: &Index) -> Result<BTreeMap<MsgId, Timestamp>, (String, Vec<usize>)> {
    let mut gts: BTreeMap<MsgId, (usize, Timestamp)> = BTreeMap::new();
    for (m, cs) in &ix.commits {
        for &(i, t) in cs {
            match gts.get(m) {
                Some(&(j, u)) if u != t => {
                    return Err((format!("{m} committed with global timestamps {u} and {t}"), vec![j, i]))
                }
                Some(_) => {}
                None => {
                    gts.insert(*m, (i, t));
                }
            }
        }
    }
    for (p, ds) in &ix.delivers {
        for &(i, m, t) in ds {
            match gts.get(&m) {
                None => return Err((format!("malformed trace: {p} delivers {m} without commit metadata"), vec![i])),
                Some(&(j, u)) if u != t => {
                    return Err((format!("{p} delivers {m} at {t} but it committed at {u}"), vec![j, i]))
                }
                Some(_) => {}
            }
        }
    }
    let mut owner: BTreeMap<Timestamp, (MsgId, usize)> = BTreeMap::new();
    for (m, (i, t)) in &gts {
        if let Some((m2, j)) = owner.insert(*t, (*m, *i)) {
            return Err((format!("I4: {m2} and {m} share global timestamp {t}"), vec![j, *i]));
        }
    }
    Ok(gts.into_iter().map(|(m, (_, t))| (m, t)).collect())
}

/// Each process delivers in increasing gts order, and what it delivered is
/// a prefix of the gts order restricted to its group's messages.
fn ordering(ix: &Index) -> Verdict {
    let gts = match global_timestamps(ix) {
        Ok(g) => g,
        Err((reason, events)) => return Verdict::Fail { reason, events },
    };
    let mut bad = Vec::new();
    for (p, ds) in &ix.delivers {
        for w in ds.windows(2) {
            let ((i, a, ta), (j, b, tb)) = (w[0], w[1]);
            if ta >= tb {
                bad.push((format!("{p} delivers {a} ({ta}) before {b} ({tb})"), vec![i, j]));
            }
        }
        let Some(g) = ix.group_of(*p) else { continue };
        let Some(&(last_i, last_m, last_t)) = ds.last() else { continue };
        let got: BTreeSet<MsgId> = ds.iter().map(|d| d.1).collect();
        for (m, t) in &gts {
            let addressed = ix.known.get(m).is_some_and(|msg| msg.dest.contains(&g));
            if addressed && *t < last_t && !got.contains(m) {
                let c = ix.commits[m][0].0;
                bad.push((format!("{p} delivers {last_m} ({last_t}) but never {m} ({t})"), vec![c, last_i]));
            }
        }
    }
    first(bad)
}

/// The delivered-before relation, built from each process's delivery
/// sequence, has no cycle and agrees with the gts order.
fn acyclicity(ix: &Index) -> Verdict {
    let mut edges: BTreeMap<MsgId, BTreeSet<MsgId>> = BTreeMap::new();
    let mut witness: BTreeMap<(MsgId, MsgId), (usize, usize)> = BTreeMap::new();
    for ds in ix.delivers.values() {
        for w in ds.windows(2) {
            edges.entry(w[0].1).or_default().insert(w[1].1);
            edges.entry(w[1].1).or_default();
            witness.entry((w[0].1, w[1].1)).or_insert((w[0].0, w[1].0));
        }
    }
    let mut indegree: BTreeMap<MsgId, usize> = edges.keys().map(|m| (*m, 0)).collect();
    for succ in edges.values() {
        for m in succ {
            *indegree.get_mut(m).expect("every node has an entry") += 1;
        }
    }
    let mut ready: Vec<MsgId> = indegree.iter().filter(|(_, d)| **d == 0).map(|(m, _)| *m).collect();
    let mut done = 0;
    while let Some(m) = ready.pop() {
        done += 1;
        for s in &edges[&m] {
            let d = indegree.get_mut(s).expect("node");
            *d -= 1;
            if *d == 0 {
                ready.push(*s);
            }
        }
    }
    if done < edges.len() {
        let stuck: Vec<MsgId> = indegree.iter().filter(|(_, d)| **d > 0).map(|(m, _)| *m).collect();
        let events = witness
            .iter()
            .filter(|((a, b), _)| stuck.contains(a) && stuck.contains(b))
            .flat_map(|(_, (i, j))| [*i, *j])
            .collect();
        return Verdict::fail(format!("delivery order has a cycle through {stuck:?}"), events);
    }
    let gts: BTreeMap<MsgId, Timestamp> = ix.delivers.values().flatten().map(|(_, m, t)| (*m, *t)).collect();
    first(witness.iter().filter(|((a, b), _)| gts[a] >= gts[b]).map(|((a, b), (i, j))| {
        (format!("{a} is delivered before {b} but has gts {} >= {}", gts[a], gts[b]), vec![*i, *j])
    }))
}

/// How long after the last disturbance the run must continue for
/// termination to be judged.
pub const SETTLE_DELTAS: u64 = 20;

/// Every message multicast by a correct process, or delivered anywhere, is
/// delivered by a quorum of each destination group.
pub fn check_termination(trace: &Trace) -> Verdict {
    let meta = &trace.meta;
    let Some(horizon) = meta.horizon else {
        return Verdict::Inconclusive { reason: "open-ended trace".into() };
    };
    let start = meta.last_workload.unwrap_or_default().max(meta.gst);
    let needed = start + meta.delta * SETTLE_DELTAS;
    if horizon < needed {
        return Verdict::Inconclusive { reason: format!("horizon {horizon} is before {needed}") };
    }
    let ix = Index::new(trace);
    let mut by: BTreeMap<MsgId, BTreeSet<ProcessId>> = BTreeMap::new();
    for (p, ds) in &ix.delivers {
        for (_, m, _) in ds {
            by.entry(*m).or_default().insert(*p);
        }
    }
    let q = meta.topology.quorum();
    let mut bad = Vec::new();
    for (m, (i, msg)) in &ix.casts {
        let got = by.get(m).cloned().unwrap_or_default();
        if ix.crashed.contains_key(&m.sender) && got.is_empty() {
            continue;
        }
        for g in &msg.dest {
            let n = ix.members(*g).iter().filter(|p| got.contains(p)).count();
            if n < q {
                bad.push((format!("{m} delivered by {n} < {q} processes of {g}"), vec![*i]));
            }
        }
    }
    first(bad)
}

/// Only the sender of a message and members of its destination groups send,
/// receive or time out on anything about it.
pub fn check_genuineness(trace: &Trace) -> Verdict {
    let ix = Index::new(trace);
    let allowed = |m: &MsgId, p: ProcessId| -> bool {
        p == m.sender || ix.known.get(m).is_none_or(|msg| ix.group_of(p).is_some_and(|g| msg.dest.contains(&g)))
    };
    let mut bad = Vec::new();
    for (i, e) in trace.events.iter().enumerate() {
        let (refs, others): (Vec<MsgId>, Vec<ProcessId>) = match &e.kind {
            EventKind::Send { msg, to, .. } => (msg.references(), vec![*to]),
            EventKind::Receive { msg, .. } => (msg.references(), vec![]),
            EventKind::Timer { timer } => (timer.msg().into_iter().collect(), vec![]),
            _ => continue,
        };
        for m in refs {
            for p in std::iter::once(e.process).chain(others.iter().copied()) {
                if !allowed(&m, p) {
                    bad.push((format!("{p} takes part in ordering {m} outside its destination"), vec![i]));
                }
            }
        }
    }
    first(bad)
}

/// An ACCEPT_ACK quorum of one group for one ballot vector.
struct Certificate {
    msg: MsgId,
    group: GroupId,
    balvec: BalVec,
    lts: BTreeMap<GroupId, Timestamp>,
    /// Index of the ack that completed the quorum.
    formed: usize,
    ackers: BTreeMap<ProcessId, usize>,
}

/// Protocol-level facts of a white-box trace.
struct Facts<'a> {
    ix: Index<'a>,
    q: usize,
    states: BTreeMap<ProcessId, Vec<(usize, &'a Snapshot)>>,
    accept_lts: BTreeMap<(MsgId, GroupId, Ballot), (usize, Timestamp)>,
    /// (msg, acker group, ballot vector) -> acker -> first ack index.
    acks: BTreeMap<(MsgId, GroupId, BalVec), BTreeMap<ProcessId, usize>>,
    certs: Vec<Certificate>,
    send_index: BTreeMap<u64, usize>,
}

impl<'a> Facts<'a> {
    fn new(trace: &'a Trace) -> Facts<'a> {
        let ix = Index::new(trace);
        let q = trace.meta.topology.quorum();
        let mut p = Facts {
            ix,
            q,
            states: BTreeMap::new(),
            accept_lts: BTreeMap::new(),
            acks: BTreeMap::new(),
            certs: Vec::new(),
            send_index: BTreeMap::new(),
        };
        let mut formed: BTreeSet<(MsgId, GroupId, BalVec)> = BTreeSet::new();
        for (i, e) in trace.events.iter().enumerate() {
            match &e.kind {
                EventKind::State { state } => p.states.entry(e.process).or_default().push((i, &**state)),
                EventKind::Send { uid, msg, .. } => {
                    p.send_index.insert(*uid, i);
                    match msg {
                        Message::Accept { msg, group, ballot, lts } => {
                            p.accept_lts.entry((msg.id, *group, *ballot)).or_insert((i, *lts));
                        }
                        Message::AcceptAck { msg, group, balvec } => {
                            let key = (*msg, *group, balvec.clone());
                            let ackers = p.acks.entry(key.clone()).or_default();
                            ackers.entry(e.process).or_insert(i);
                            if ackers.len() >= q && formed.insert(key) {
                                let ackers = ackers.clone();
                                p.certs.push(Certificate {
                                    msg: *msg,
                                    group: *group,
                                    balvec: balvec.clone(),
                                    lts: BTreeMap::new(),
                                    formed: i,
                                    ackers,
                                });
                            }
                        }
                        _ => {}
                    }
                }
                _ => {}
            }
        }
        for c in &mut p.certs {
            for (g, b) in &c.balvec {
                if let Some((_, t)) = p.accept_lts.get(&(c.msg, *g, *b)) {
                    c.lts.insert(*g, *t);
                }
            }
        }
        p
    }

    fn state_before(&self, p: ProcessId, index: usize) -> Option<&'a Snapshot> {
        let seq = self.states.get(&p)?;
        let pos = seq.partition_point(|(i, _)| *i < index);
        pos.checked_sub(1).map(|k| seq[k].1)
    }

    /// States of members of `g` recorded after `after` with a cballot above `b`.
    fn later_states(&self, g: GroupId, after: usize, b: Ballot) -> Vec<(usize, ProcessId, &'a Snapshot)> {
        let mut out = Vec::new();
        for p in self.ix.members(g) {
            for (i, s) in self.states.get(p).into_iter().flatten() {
                if *i > after && s.cballot > b {
                    out.push((*i, *p, *s));
                }
            }
        }
        out
    }
}

fn phase_of(s: &Snapshot, m: &MsgId) -> Phase {
    s.entries.get(m).map_or(Phase::Start, |e| e.phase)
}

/// The LocalTS entries below `bound`.
fn below(s: &BTreeMap<MsgId, Timestamp>, bound: Timestamp) -> BTreeMap<MsgId, Timestamp> {
    s.iter().filter(|(_, t)| **t < bound).map(|(m, t)| (*m, *t)).collect()
}

fn local_ts(s: &Snapshot) -> BTreeMap<MsgId, Timestamp> {
    s.entries.iter().map(|(m, e)| (*m, e.lts)).collect()
}

/// Checks that every message whose LocalTS at `s` is below `gts` has the
/// LocalTS recorded in `reference`.
fn matches_reference(
    s: &Snapshot,
    gts: Timestamp,
    reference: &BTreeMap<MsgId, Timestamp>,
) -> Option<(MsgId, Timestamp)> {
    s.entries
        .iter()
        .filter(|(_, e)| e.lts < gts)
        .find(|(m, e)| reference.get(*m) != Some(&e.lts))
        .map(|(m, e)| (*m, e.lts))
}

/// The invariants of the white-box protocol, keyed `I1`..`I20`. Those over
/// process state need snapshots in the trace.
pub fn check_protocol_invariants(trace: &Trace) -> BTreeMap<String, Verdict> {
    let mut out = BTreeMap::new();
    const ALL: [&str; 21] = [
        "I1", "I2", "I3a", "I3b", "I4", "I5", "I6", "I7", "I8", "I9", "I10", "I11", "I12", "I13", "I14", "I15", "I16",
        "I17", "I18", "I19", "I20",
    ];
    if trace.meta.protocol != Protocol::Whitebox {
        for k in ALL {
            out.insert(k.to_string(), Verdict::skipped("not a white-box trace"));
        }
        return out;
    }
    let pr = Facts::new(trace);
    out.insert("I1".into(), i1(&pr));
    out.insert("I3a".into(), i3a(&pr));
    out.insert("I3b".into(), i3b(&pr));
    out.insert("I4".into(), i4(&pr));
    out.insert("I17".into(), i17(&pr));
    out.insert("I19".into(), i19(&pr));
    type Check = fn(&Facts) -> Verdict;
    let state_based: [(&str, Check); 14] = [
        ("I2", i2),
        ("I5", i5),
        ("I6", i6),
        ("I7", i7),
        ("I8", i8),
        ("I9", i9),
        ("I10", i10),
        ("I11", i11),
        ("I12", i12),
        ("I13", i13),
        ("I14", i14),
        ("I15", i15),
        ("I16", i16),
        ("I18", i18),
    ];
    for (k, f) in state_based {
        let v = if trace.meta.snapshots { f(&pr) } else { Verdict::skipped("trace has no state snapshots") };
        out.insert(k.into(), v);
    }
    out.insert(
        "I20".into(),
        if trace.meta.snapshots { i20(&pr) } else { Verdict::skipped("trace has no state snapshots") },
    );
    out
}

fn sends<'a>(pr: &'a Facts<'a>) -> impl Iterator<Item = (usize, ProcessId, ProcessId, &'a Message)> + 'a {
    pr.ix.trace.events.iter().enumerate().filter_map(|(i, e)| match &e.kind {
        EventKind::Send { to, msg, .. } => Some((i, e.process, *to, msg)),
        _ => None,
    })
}

/// One local timestamp per message, group and ballot.
fn i1(pr: &Facts) -> Verdict {
    let mut bad = Vec::new();
    for (i, _, _, msg) in sends(pr) {
        if let Message::Accept { msg, group, ballot, lts } = msg {
            let (j, t) = pr.accept_lts[&(msg.id, *group, *ballot)];
            if t != *lts {
                bad.push((format!("{group} proposes {t} and {lts} for {} in ballot {ballot}", msg.id), vec![j, i]));
            }
        }
    }
    first(bad)
}

fn delivers_sent<'a>(
    pr: &'a Facts<'a>,
) -> impl Iterator<Item = (usize, ProcessId, ProcessId, MsgId, Ballot, Timestamp, Timestamp)> + 'a {
    sends(pr).filter_map(|(i, from, to, msg)| match msg {
        Message::Deliver { msg, ballot, lts, gts } => Some((i, from, to, msg.id, *ballot, *lts, *gts)),
        _ => None,
    })
}

/// DELIVERs for a message sent into one group agree on its local timestamp.
fn i3a(pr: &Facts) -> Verdict {
    let mut seen: BTreeMap<(MsgId, Option<GroupId>), (usize, Timestamp)> = BTreeMap::new();
    let mut bad = Vec::new();
    for (i, _, to, m, _, lts, _) in delivers_sent(pr) {
        let key = (m, pr.ix.group_of(to));
        let (j, t) = *seen.entry(key).or_insert((i, lts));
        if t != lts {
            bad.push((format!("DELIVERs of {m} carry local timestamps {t} and {lts}"), vec![j, i]));
        }
    }
    first(bad)
}

/// All DELIVERs for a message agree on its global timestamp.
fn i3b(pr: &Facts) -> Verdict {
    let mut seen: BTreeMap<MsgId, (usize, Timestamp)> = BTreeMap::new();
    let mut bad = Vec::new();
    for (i, _, _, m, _, _, gts) in delivers_sent(pr) {
        let (j, t) = *seen.entry(m).or_insert((i, gts));
        if t != gts {
            bad.push((format!("DELIVERs of {m} carry global timestamps {t} and {gts}"), vec![j, i]));
        }
    }
    first(bad)
}

/// Distinct messages are delivered with distinct global timestamps.
fn i4(pr: &Facts) -> Verdict {
    let mut owner: BTreeMap<Timestamp, (usize, MsgId)> = BTreeMap::new();
    let mut bad = Vec::new();
    for (i, _, _, m, _, _, gts) in delivers_sent(pr) {
        let (j, o) = *owner.entry(gts).or_insert((i, m));
        if o != m {
            bad.push((format!("{o} and {m} both delivered at {gts}"), vec![j, i]));
        }
    }
    first(bad)
}

/// Once a quorum of g0 has acked a proposal set, every later state of g0 in
/// a higher ballot keeps the message accepted with the same local timestamp
/// and a clock at or above its global timestamp.
fn i2(pr: &Facts) -> Verdict {
    let mut bad = Vec::new();
    for c in &pr.certs {
        let (Some(own), Some(max)) = (c.lts.get(&c.group), merge_global(c.lts.values())) else { continue };
        if c.lts.len() != c.balvec.len() {
            continue;
        }
        for (i, p, s) in pr.later_states(c.group, c.formed, c.balvec[&c.group]) {
            let e = s.entries.get(&c.msg);
            let why = match e {
                None => Some("(a) it is in phase start".to_string()),
                Some(e) if e.phase < Phase::Accepted => Some(format!("(a) it is {:?}", e.phase)),
                Some(e) if e.lts != *own => Some(format!("(b) its local timestamp is {} not {own}", e.lts)),
                _ if s.clock < max.time() => Some(format!("(c) clock {} is below {max}", s.clock)),
                _ => None,
            };
            if let Some(why) = why {
                bad.push((format!("{p} in {} after a quorum accepted {}: {why}", s.cballot, c.msg), vec![c.formed, i]));
            }
        }
    }
    first(bad)
}

/// Like I2, for the local timestamps below the message's global timestamp as
/// the certifying leader knew them when it acked.
fn i5(pr: &Facts) -> Verdict {
    let mut bad = Vec::new();
    for c in &pr.certs {
        let Some(gts) = merge_global(c.lts.values()) else { continue };
        if c.lts.len() != c.balvec.len() {
            continue;
        }
        let bal = c.balvec[&c.group];
        let Some(leader) = bal.leader() else { continue };
        let Some(&ack) = c.ackers.get(&leader) else { continue };
        let Some(ls) = pr.state_before(leader, ack) else { continue };
        let reference = below(&local_ts(ls), gts);
        for (i, p, s) in pr.later_states(c.group, c.formed, bal) {
            if let Some((m, t)) = matches_reference(s, gts, &reference) {
                bad.push((
                    format!(
                        "{p} in {} holds {m} at {t} below {gts}, unknown to {leader} when it acked {}",
                        s.cballot, c.msg
                    ),
                    vec![ack, c.formed, i],
                ));
            }
        }
    }
    first(bad)
}

/// At the end of a run long past GST, each group has a leader followed by a
/// quorum of correct members, and every correct member of every group
/// points at it.
fn i6(pr: &Facts) -> Verdict {
    let meta = &pr.ix.trace.meta;
    let Some(horizon) = meta.horizon else { return Verdict::Inconclusive { reason: "open-ended trace".into() } };
    let needed = meta.gst.max(meta.last_workload.unwrap_or_default()) + meta.delta * SETTLE_DELTAS;
    if horizon < needed {
        return Verdict::Inconclusive { reason: format!("horizon {horizon} is before {needed}") };
    }
    let correct = |p: &ProcessId| !pr.ix.crashed.contains_key(p);
    let last: BTreeMap<ProcessId, (usize, &Snapshot)> = pr
        .states
        .iter()
        .filter(|(p, _)| correct(p))
        .filter_map(|(p, seq)| seq.last().map(|(i, s)| (*p, (*i, *s))))
        .collect();
    let mut bad = Vec::new();
    for g in meta.topology.group_ids() {
        let leader =
            pr.ix.members(g).iter().copied().filter(correct).find(|p| {
                last.get(p).is_some_and(|(_, s)| s.status == Status::Leader && s.cballot.leader() == Some(*p))
            });
        let Some(l) = leader else {
            bad.push((format!("{g} has no correct leader at the end"), vec![]));
            continue;
        };
        let b = last[&l].1.cballot;
        let followers = pr
            .ix
            .members(g)
            .iter()
            .filter(|p| last.get(p).is_some_and(|(_, s)| s.status != Status::Recovering && s.cballot == b))
            .count();
        if followers < pr.q {
            bad.push((format!("only {followers} members of {g} follow {l}"), vec![last[&l].0]));
        }
        for (p, (i, s)) in &last {
            if s.cur_leader.get(&g) != Some(&l) {
                bad.push((format!("{p} believes {:?} leads {g}, not {l}", s.cur_leader.get(&g)), vec![*i]));
            }
        }
    }
    first(bad)
}

/// Anything past phase start was multicast earlier.
fn i7(pr: &Facts) -> Verdict {
    let mut bad = Vec::new();
    for (p, seq) in &pr.states {
        for (i, s) in seq {
            for m in s.entries.keys() {
                match pr.ix.casts.get(m) {
                    Some((c, _)) if c < i => {}
                    _ => bad.push((format!("{p} holds {m}, which was not multicast before"), vec![*i])),
                }
            }
        }
    }
    first(bad)
}

fn consecutive<'a>(
    pr: &'a Facts,
) -> impl Iterator<Item = (ProcessId, (usize, &'a Snapshot), (usize, &'a Snapshot))> + 'a {
    pr.states.iter().flat_map(|(p, seq)| seq.windows(2).map(move |w| (*p, (w[0].0, w[0].1), (w[1].0, w[1].1))))
}

/// ballot and cballot never decrease.
fn i8(pr: &Facts) -> Verdict {
    first(consecutive(pr).filter(|(_, (_, a), (_, b))| b.ballot < a.ballot || b.cballot < a.cballot).map(
        |(p, (i, a), (j, b))| {
            (format!("{p} moves from ({}, {}) back to ({}, {})", a.ballot, a.cballot, b.ballot, b.cballot), vec![i, j])
        },
    ))
}

/// cballot never exceeds ballot.
fn i9(pr: &Facts) -> Verdict {
    first(pr.states.iter().flat_map(|(p, seq)| {
        seq.iter()
            .filter(|(_, s)| s.cballot > s.ballot)
            .map(move |(i, s)| (format!("{p} has cballot {} above ballot {}", s.cballot, s.ballot), vec![*i]))
    }))
}

/// Within one cballot, phases never go back.
fn i10(pr: &Facts) -> Verdict {
    let mut bad = Vec::new();
    for (p, (i, a), (j, b)) in consecutive(pr) {
        if a.cballot != b.cballot {
            continue;
        }
        for m in a.entries.keys() {
            if phase_of(b, m) < phase_of(a, m) {
                bad.push((
                    format!("{p}: {m} goes from {:?} to {:?} in {}", phase_of(a, m), phase_of(b, m), a.cballot),
                    vec![i, j],
                ));
            }
        }
    }
    first(bad)
}

/// Within one cballot, the clock never goes back.
fn i11(pr: &Facts) -> Verdict {
    first(consecutive(pr).filter(|(_, (_, a), (_, b))| a.cballot == b.cballot && b.clock < a.clock).map(
        |(p, (i, a), (j, b))| (format!("{p}: clock goes from {} to {} in {}", a.clock, b.clock, a.cballot), vec![i, j]),
    ))
}

/// Within one cballot, a local timestamp once set never changes.
fn i12(pr: &Facts) -> Verdict {
    let mut bad = Vec::new();
    for (p, (i, a), (j, b)) in consecutive(pr) {
        if a.cballot != b.cballot {
            continue;
        }
        for (m, e) in &a.entries {
            if let Some(f) = b.entries.get(m) {
                if f.lts != e.lts {
                    bad.push((format!("{p}: {m} moves from {} to {} in {}", e.lts, f.lts, a.cballot), vec![i, j]));
                }
            }
        }
    }
    first(bad)
}

fn committed<'a>(
    pr: &'a Facts<'a>,
) -> impl Iterator<Item = (ProcessId, usize, &'a Snapshot, MsgId, Timestamp, Timestamp)> + 'a {
    pr.states.iter().flat_map(|(p, seq)| {
        seq.iter().flat_map(move |(i, s)| {
            s.entries
                .iter()
                .filter(|(_, e)| e.phase == Phase::Committed)
                .map(move |(m, e)| (*p, *i, *s, *m, e.lts, e.gts))
        })
    })
}

/// A committed message's local timestamp is at most its global one.
fn i13(pr: &Facts) -> Verdict {
    first(
        committed(pr)
            .filter(|(.., lts, gts)| lts > gts)
            .map(|(p, i, _, m, lts, gts)| (format!("{p}: {m} committed with local {lts} above global {gts}"), vec![i])),
    )
}

/// The clock is at least the time of every committed global timestamp.
fn i14(pr: &Facts) -> Verdict {
    first(
        committed(pr)
            .filter(|(_, _, s, _, _, gts)| gts.is_bottom() || s.clock < gts.time())
            .map(|(p, i, s, m, _, gts)| (format!("{p}: clock {} below committed {m} at {gts}", s.clock), vec![i])),
    )
}

/// An acking process knows no local timestamp its ballot's leader did not
/// hold when sending the last message of that ballot the acker received.
fn i15(pr: &Facts) -> Verdict {
    let events = &pr.ix.trace.events;
    let mut last_in: BTreeMap<(ProcessId, Ballot), u64> = BTreeMap::new();
    let mut bad = Vec::new();
    for (i, e) in events.iter().enumerate() {
        match &e.kind {
            EventKind::Receive { uid, msg, .. } => {
                let b = match msg {
                    Message::Accept { group, ballot, .. } if pr.ix.group_of(e.process) == Some(*group) => *ballot,
                    Message::NewState { ballot, .. } | Message::Deliver { ballot, .. } => *ballot,
                    _ => continue,
                };
                last_in.insert((e.process, b), *uid);
            }
            EventKind::Send { msg: Message::AcceptAck { msg, group, balvec }, .. } => {
                let Some(&b) = balvec.get(group) else { continue };
                let Some(leader) = b.leader() else { continue };
                let Some(uid) = last_in.get(&(e.process, b)) else {
                    bad.push((format!("{} acks {msg} in {b} without hearing from {leader}", e.process), vec![i]));
                    continue;
                };
                let sent = pr.send_index[uid];
                let (Some(mine), Some(theirs)) = (pr.state_before(e.process, i), pr.state_before(leader, sent)) else {
                    continue;
                };
                let theirs = local_ts(theirs);
                if let Some((m, t)) =
                    mine.entries.iter().map(|(m, x)| (*m, x.lts)).find(|(m, t)| theirs.get(m) != Some(t))
                {
                    bad.push((
                        format!("{} acks {msg} holding {m} at {t}, unknown to {leader}", e.process),
                        vec![sent, i],
                    ));
                }
            }
            _ => {}
        }
    }
    first(bad)
}

/// A committed entry at a process of g0 with ballot b' was either sent to g0
/// in a DELIVER of some ballot b <= b', or committed by g0's leader in such
/// a ballot. A leader commits messages that its delivery guard still holds
/// back, and recovery passes them on, so a DELIVER alone need not exist.
fn i16(pr: &Facts) -> Verdict {
    type Origin = BTreeMap<(MsgId, GroupId), Vec<(usize, Ballot, Timestamp, Timestamp)>>;
    let mut origin: Origin = BTreeMap::new();
    for (i, _, to, m, b, lts, gts) in delivers_sent(pr) {
        if let Some(g) = pr.ix.group_of(to) {
            origin.entry((m, g)).or_default().push((i, b, lts, gts));
        }
    }
    for (i, e) in pr.ix.trace.events.iter().enumerate() {
        if let EventKind::Commit { msg, lts, gts } = e.kind {
            let (Some(g), Some(s)) = (pr.ix.group_of(e.process), pr.state_before(e.process, i)) else { continue };
            origin.entry((msg, g)).or_default().push((i, s.cballot, lts, gts));
        }
    }
    let mut checked: BTreeSet<(ProcessId, MsgId, Timestamp, Timestamp)> = BTreeSet::new();
    let mut bad = Vec::new();
    for (p, i, s, m, lts, gts) in committed(pr) {
        // Ballots only grow, so the first state holding the entry decides.
        if !checked.insert((p, m, lts, gts)) {
            continue;
        }
        let Some(g) = pr.ix.group_of(p) else { continue };
        let backed = origin
            .get(&(m, g))
            .is_some_and(|os| os.iter().any(|&(j, b, l, t)| j < i && b <= s.ballot && l == lts && t == gts));
        if !backed {
            bad.push((
                format!(
                    "{p} in {} holds {m} committed at {lts}/{gts} with no DELIVER or leader commit behind it",
                    s.ballot
                ),
                vec![i],
            ));
        }
    }
    first(bad)
}

/// Every DELIVER is backed by an ACCEPT_ACK quorum in each destination group
/// for one ballot vector, matching its timestamps.
fn i17(pr: &Facts) -> Verdict {
    let mut bad = Vec::new();
    for (i, from, _, m, b, lts, gts) in delivers_sent(pr) {
        let Some(g0) = pr.ix.group_of(from) else { continue };
        let dest = match pr.ix.known.get(&m) {
            Some(msg) => msg.dest.clone(),
            None => continue,
        };
        let vectors: BTreeSet<&BalVec> = pr.acks.keys().filter(|(mm, _, _)| *mm == m).map(|(_, _, v)| v).collect();
        let backed = vectors.into_iter().any(|v| {
            let Some(&own) = v.get(&g0) else { return false };
            if own > b || v.keys().ne(dest.iter()) {
                return false;
            }
            let lts_of = |g: &GroupId| pr.accept_lts.get(&(m, *g, v[g])).map(|x| x.1);
            let all: Option<Vec<Timestamp>> = dest.iter().map(lts_of).collect();
            let Some(all) = all else { return false };
            if lts_of(&g0) != Some(lts) || merge_global(&all) != Some(gts) {
                return false;
            }
            dest.iter().all(|g| {
                let ackers: Vec<ProcessId> = pr
                    .acks
                    .get(&(m, *g, v.clone()))
                    .map(|a| a.iter().filter(|(_, j)| **j < i).map(|(p, _)| *p).collect())
                    .unwrap_or_default();
                ackers.len() >= pr.q && (*g != g0 || own.leader().is_some_and(|l| ackers.contains(&l)))
            })
        });
        if !backed {
            bad.push((format!("DELIVER of {m} at {gts} by {from} has no acceptance quorum behind it"), vec![i]));
        }
    }
    first(bad)
}

/// A NEW_STATE acked by a quorum (counting its leader) fixes the local
/// timestamps below each committed message's global timestamp for all
/// higher ballots.
fn i18(pr: &Facts) -> Verdict {
    let mut states: BTreeMap<Ballot, (usize, &crate::message::Entries)> = BTreeMap::new();
    let mut acks: BTreeMap<Ballot, BTreeSet<ProcessId>> = BTreeMap::new();
    let mut formed: BTreeMap<Ballot, usize> = BTreeMap::new();
    for (i, from, _, msg) in sends(pr) {
        match msg {
            Message::NewState { ballot, entries, .. } => {
                states.entry(*ballot).or_insert((i, entries));
            }
            Message::NewStateAck { ballot } => {
                let set = acks.entry(*ballot).or_default();
                set.insert(from);
                if let Some(l) = ballot.leader() {
                    set.insert(l);
                }
                if set.len() >= pr.q {
                    formed.entry(*ballot).or_insert(i);
                }
            }
            _ => {}
        }
    }
    let mut bad = Vec::new();
    for (b, at) in formed {
        let Some(&(ns, entries)) = states.get(&b) else { continue };
        let Some(g0) = b.leader().and_then(|l| pr.ix.group_of(l)) else { continue };
        let lts: BTreeMap<MsgId, Timestamp> = entries.iter().map(|(m, e)| (*m, e.lts)).collect();
        let later = pr.later_states(g0, at, b);
        for (m, e) in entries.iter().filter(|(_, e)| e.phase == Phase::Committed) {
            let reference = below(&lts, e.gts);
            for (i, p, s) in &later {
                if let Some((m2, t)) = matches_reference(s, e.gts, &reference) {
                    bad.push((
                        format!(
                            "{p} in {} holds {m2} at {t}, below {m} at {}, not in the state installed by {b}",
                            s.cballot, e.gts
                        ),
                        vec![ns, at, *i],
                    ));
                }
            }
        }
    }
    first(bad)
}

/// Two acceptance quorums of a group for a message agree on its local
/// timestamp there.
fn i19(pr: &Facts) -> Verdict {
    let mut seen: BTreeMap<(MsgId, GroupId), (usize, Timestamp)> = BTreeMap::new();
    let mut bad = Vec::new();
    for c in &pr.certs {
        let Some(&t) = c.lts.get(&c.group) else { continue };
        let (j, u) = *seen.entry((c.msg, c.group)).or_insert((c.formed, t));
        if u != t {
            bad.push((format!("quorums of {} accepted {} at {u} and {t}", c.group, c.msg), vec![j, c.formed]));
        }
    }
    first(bad)
}

/// Local timestamps at one process are pairwise distinct.
fn i20(pr: &Facts) -> Verdict {
    let mut bad = Vec::new();
    for (p, seq) in &pr.states {
        for (i, s) in seq {
            let mut owner: BTreeMap<Timestamp, MsgId> = BTreeMap::new();
            for (m, e) in &s.entries {
                if let Some(o) = owner.insert(e.lts, *m) {
                    bad.push((format!("{p} holds {o} and {m} both at {}", e.lts), vec![*i]));
                }
            }
        }
    }
    first(bad)
}

/// The end of the run minus the settle margin, for callers deciding whether
/// liveness verdicts can be trusted.
pub fn settle_point(trace: &Trace) -> Time {
    let meta = &trace.meta;
    meta.gst.max(meta.last_workload.unwrap_or_default()) + meta.delta * SETTLE_DELTAS
}
