//! Latency measurement in units of δ.
//!
//! A message's latency is the time from its multicast until the first
//! delivery in its slowest destination group. Only messages multicast once
//! the run has stabilized count towards the aggregates: after GST and after
//! every message multicast before GST has committed everywhere it will.

use std::collections::{BTreeMap, BTreeSet};

use num_rational::Ratio;
use serde::Serialize;

use crate::time::Time;
use crate::trace::{EventKind, Trace};
use crate::types::{AppMessage, GroupId, MsgId, ProcessId};

/// A duration in δ units.
pub type Deltas = Ratio<u64>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MessageLatency {
    pub msg: MsgId,
    pub multicast: Time,
    /// First delivery in each destination group, relative to the multicast.
    pub per_group: BTreeMap<GroupId, Deltas>,
    /// Every delivery, relative to the multicast.
    pub per_process: BTreeMap<ProcessId, Deltas>,
    pub latency: Deltas,
    /// Until the message is committed at some member of every destination.
    pub commit: Option<Deltas>,
    /// Until some committing member of every destination has its clock at
    /// or past the message's global timestamp.
    pub clock_update: Option<Deltas>,
    pub collision_free: bool,
    pub stabilized: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LatencyReport {
    pub stabilization: Time,
    pub messages: Vec<MessageLatency>,
    /// Messages not delivered in all their destination groups.
    pub undelivered: Vec<MsgId>,
    /// Largest commit latency among stabilized messages.
    pub d: Option<Deltas>,
    /// Largest clock-update latency among stabilized messages.
    pub c: Option<Deltas>,
    /// Largest latency among stabilized collision-free messages.
    pub cfl: Option<Deltas>,
    /// Largest latency among all stabilized messages.
    pub ffl: Option<Deltas>,
}

pub fn render(d: Deltas) -> String {
    if *d.denom() == 1 {
        format!("{}δ", d.numer())
    } else {
        format!("{}/{}δ", d.numer(), d.denom())
    }
}

fn fmt_opt(d: Option<Deltas>) -> String {
    d.map_or("-".to_string(), render)
}

impl LatencyReport {
    pub fn table(&self) -> String {
        let mut out = format!("{:<10} {:>8} {:>8} {:>6}  per group\n", "message", "latency", "cast", "cf");
        for m in &self.messages {
            let groups: Vec<String> = m.per_group.iter().map(|(g, d)| format!("{g}={}", render(*d))).collect();
            out += &format!(
                "{:<10} {:>8} {:>8} {:>6}  {}{}\n",
                m.msg.to_string(),
                render(m.latency),
                m.multicast.to_string(),
                if m.collision_free { "yes" } else { "no" },
                groups.join(" "),
                if m.stabilized { "" } else { "  (before stabilization)" },
            );
        }
        for m in &self.undelivered {
            out += &format!("{m:<10} undelivered\n");
        }
        out += &format!(
            "D = {}  C = {}  CFL = {}  FFL = {}\n",
            fmt_opt(self.d),
            fmt_opt(self.c),
            fmt_opt(self.cfl),
            fmt_opt(self.ffl)
        );
        out
    }
}

pub fn measure(trace: &Trace) -> LatencyReport {
    let meta = &trace.meta;
    let topo = &meta.topology;
    let delta = meta.delta;
    let mut casts: BTreeMap<MsgId, (Time, AppMessage)> = BTreeMap::new();
    let mut delivered: BTreeMap<MsgId, BTreeMap<ProcessId, Time>> = BTreeMap::new();
    let mut commits: BTreeMap<MsgId, BTreeMap<ProcessId, (Time, crate::types::Timestamp)>> = BTreeMap::new();
    let mut clocks: BTreeMap<ProcessId, Vec<(Time, u64)>> = BTreeMap::new();
    let mut crashed: BTreeSet<ProcessId> = BTreeSet::new();
    for e in &trace.events {
        match &e.kind {
            EventKind::Multicast { msg } => {
                casts.entry(msg.id).or_insert((e.time, msg.clone()));
            }
            EventKind::Deliver { msg, .. } => {
                delivered.entry(*msg).or_default().entry(e.process).or_insert(e.time);
            }
            EventKind::Commit { msg, gts, .. } => {
                commits.entry(*msg).or_default().entry(e.process).or_insert((e.time, *gts));
            }
            EventKind::Clock { clock } => clocks.entry(e.process).or_default().push((e.time, *clock)),
            EventKind::Crash => {
                crashed.insert(e.process);
            }
            _ => {}
        }
    }
    let rel = |t: Time, from: Time| t.since(from).in_units_of(delta);

    // Stabilization: GST, or later if a message multicast before it commits
    // afterwards.
    let mut stabilization = meta.gst;
    for (m, (t, _)) in &casts {
        if *t < meta.gst {
            if let Some(last) = commits.get(m).and_then(|c| c.values().map(|x| x.0).max()) {
                stabilization = stabilization.max(last);
            }
        }
    }

    // A message can hold others up until its last delivery.
    let partial: BTreeMap<MsgId, Time> =
        delivered.iter().filter_map(|(m, by)| by.values().max().map(|t| (*m, *t))).collect();
    let concurrent = |a: &MsgId, b: &MsgId| -> bool {
        let (ta, tb) = (casts[a].0, casts[b].0);
        let ea = partial.get(a).copied();
        let eb = partial.get(b).copied();
        ea.is_none_or(|e| tb < e) && eb.is_none_or(|e| ta < e)
    };

    let mut messages = Vec::new();
    let mut undelivered = Vec::new();
    for (m, (t0, msg)) in &casts {
        let by = delivered.get(m).cloned().unwrap_or_default();
        let mut per_group = BTreeMap::new();
        for g in &msg.dest {
            if let Some(first) = topo.members(*g).iter().filter_map(|p| by.get(p)).min() {
                per_group.insert(*g, rel(*first, *t0));
            }
        }
        if per_group.len() < msg.dest.len() {
            undelivered.push(*m);
            continue;
        }
        let latency = *per_group.values().max().expect("non-empty destination");
        let per_process = by.iter().map(|(p, t)| (*p, rel(*t, *t0))).collect();
        let committed = commits.get(m);
        let mut commit = Some(Ratio::from_integer(0));
        let mut clock_update = Some(Ratio::from_integer(0));
        for g in &msg.dest {
            let at_g: Vec<(ProcessId, Time, crate::types::Timestamp)> = committed
                .into_iter()
                .flatten()
                .filter(|(p, _)| topo.group_of(**p) == Some(*g))
                .map(|(p, (t, gts))| (*p, *t, *gts))
                .collect();
            let Some(&(leader, ct, gts)) = at_g.iter().min_by_key(|x| x.1) else {
                commit = None;
                clock_update = None;
                continue;
            };
            commit = commit.map(|c| c.max(rel(ct, *t0)));
            let reached = clocks
                .get(&leader)
                .into_iter()
                .flatten()
                .find(|(_, c)| *c >= gts.time())
                .map(|(t, _)| rel((*t).max(*t0), *t0));
            clock_update = match (clock_update, reached) {
                (Some(c), Some(r)) => Some(c.max(r)),
                _ => None,
            };
        }
        let collision_free = !casts.iter().any(|(o, (_, other))| {
            o != m
                && !crashed.contains(&o.sender)
                && other.dest.intersection(&msg.dest).next().is_some()
                && concurrent(m, o)
        });
        messages.push(MessageLatency {
            msg: *m,
            multicast: *t0,
            per_group,
            per_process,
            latency,
            commit,
            clock_update,
            collision_free,
            stabilized: *t0 >= stabilization,
        });
    }
    let stable = || messages.iter().filter(|m| m.stabilized);
    LatencyReport {
        stabilization,
        d: stable().filter_map(|m| m.commit).max(),
        c: stable().filter_map(|m| m.clock_update).max(),
        cfl: stable().filter(|m| m.collision_free).map(|m| m.latency).max(),
        ffl: stable().map(|m| m.latency).max(),
        messages,
        undelivered,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Protocol;
    use crate::scenario;
    use crate::sim;

    fn d(n: u64) -> Deltas {
        Ratio::from_integer(n)
    }

    #[test]
    fn render_uses_fractions() {
        assert_eq!(render(d(3)), "3δ");
        assert_eq!(render(Ratio::new(27, 8)), "27/8δ");
    }

    #[test]
    fn whitebox_solo_followers_lag_by_one_delta() {
        let r = measure(&sim::run(&scenario::solo(Protocol::Whitebox)).unwrap());
        assert_eq!(r.messages.len(), 1);
        let m = &r.messages[0];
        assert!(m.collision_free && m.stabilized);
        assert_eq!(m.per_group.values().copied().collect::<Vec<_>>(), vec![d(3), d(3)]);
        // Leaders p0 and p3 deliver at 3δ, their followers at 4δ.
        for (p, t) in &m.per_process {
            let expect = if p.0 % 3 == 0 { d(3) } else { d(4) };
            assert_eq!(*t, expect, "{p}");
        }
        assert_eq!(m.commit, Some(d(3)));
        assert_eq!((r.cfl, r.ffl), (Some(d(3)), Some(d(3))));
    }

    #[test]
    fn convoy_is_not_collision_free() {
        let r = measure(&sim::run(&scenario::convoy(Protocol::Skeen)).unwrap());
        assert!(r.undelivered.is_empty());
        let late = r.messages.iter().max_by_key(|m| m.latency).unwrap();
        assert_eq!(late.latency, d(4));
        assert!(!late.collision_free);
        assert_eq!(r.ffl, Some(d(4)));
        // The clock update is what holds the convoyed message back.
        assert!(r.c.is_some() && r.d.is_some());
        assert!(r.ffl.unwrap() <= r.c.unwrap() + r.d.unwrap());
    }

    #[test]
    fn messages_before_gst_do_not_count() {
        let cfg = scenario::crash_recovery();
        let r = measure(&sim::run(&cfg).unwrap());
        assert!(r.stabilization >= cfg.gst);
        assert!(r.messages.iter().all(|m| !m.stabilized));
        assert_eq!((r.cfl, r.ffl), (None, None));
    }

    #[test]
    fn undelivered_messages_are_flagged() {
        let mut cfg = scenario::solo(Protocol::Whitebox);
        cfg.horizon = Time::from_int(2);
        let r = measure(&sim::run(&cfg).unwrap());
        assert_eq!(r.undelivered.len(), 1);
        assert!(r.messages.is_empty());
        assert!(r.table().contains("undelivered"));
    }
}
