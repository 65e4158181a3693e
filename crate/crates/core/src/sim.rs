//! Deterministic discrete-event simulation of a run: reliable FIFO channels,
//! delays bounded by δ after GST, crash-stop failures, a leader selection
//! oracle and a scripted workload.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::message::Message;
use crate::protocol::{Ctx, Effects, Input, Mutation, Note, Protocol, Replica, Snapshot, Timer};
use crate::time::Time;
use crate::trace::{Event, EventKind, Meta, Trace, FORMAT};
use crate::types::{AppMessage, GroupId, MsgId, ProcessId, Topology, TopologyError};

fn one() -> Time {
    Time::from_int(1)
}

fn format_version() -> u32 {
    FORMAT
}

/// How long a message between two distinct processes takes. Messages a
/// process sends to itself are handled immediately in every model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum DelayModel {
    /// Exactly δ.
    Uniform,
    /// Multiples of δ/16 drawn from the seed: in (0, δ] from GST on, in
    /// (0, 4δ] before. The pre-GST range is an arbitrary choice.
    SeededRandom,
    /// `default` unless an edge matches; an edge applies to messages sent
    /// before its `until` (forever when absent).
    Scripted {
        default: Time,
        #[serde(default)]
        edges: Vec<EdgeDelay>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeDelay {
    pub from: ProcessId,
    pub to: ProcessId,
    pub delay: Time,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub until: Option<Time>,
}

/// A process stops at `time`, or right after its `after_sends`-th send,
/// whichever comes first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crash {
    pub process: ProcessId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<Time>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub after_sends: Option<usize>,
}

/// A leader selection decision forced before GST.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Nomination {
    pub time: Time,
    pub group: GroupId,
    pub nominee: ProcessId,
}

/// `sender` multicasts to `dest` at `time`. Message ids number each
/// sender's casts from 0 in list order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cast {
    pub time: Time,
    pub sender: ProcessId,
    pub dest: Vec<GroupId>,
    #[serde(default)]
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default = "format_version")]
    pub format: u32,
    pub protocol: Protocol,
    pub f: usize,
    pub groups: Vec<Vec<ProcessId>>,
    #[serde(default)]
    pub clients: Vec<ProcessId>,
    #[serde(default = "one")]
    pub delta: Time,
    #[serde(default)]
    pub gst: Time,
    pub delay: DelayModel,
    #[serde(default)]
    pub crashes: Vec<Crash>,
    #[serde(default)]
    pub nominations: Vec<Nomination>,
    pub workload: Vec<Cast>,
    pub horizon: Time,
    #[serde(default)]
    pub seed: u64,
    /// Record protocol state after every step that changes it.
    #[serde(default)]
    pub snapshots: bool,
    #[doc(hidden)]
    #[serde(default, skip_serializing_if = "Mutation::is_none")]
    pub mutation: Mutation,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("unsupported config format {0}")]
    Format(u32),
    #[error("delta must be positive")]
    Delta,
    #[error("unknown process {0}")]
    UnknownProcess(ProcessId),
    #[error("unknown group {0}")]
    UnknownGroup(GroupId),
    #[error("cast by {0} has no destination")]
    EmptyDest(ProcessId),
    #[error("group {0} has more than f crashes")]
    TooManyCrashes(GroupId),
    #[error("scripted nomination at {0} is not before GST")]
    LateNomination(Time),
    #[error("nominee {0} is not a member of {1}")]
    ForeignNominee(ProcessId, GroupId),
    #[error("delay {0} exceeds delta after GST")]
    UnboundedDelay(Time),
}

impl SimConfig {
    /// A config with uniform δ = 1 delays, GST at 0, no faults and the given
    /// topology; the horizon leaves room for the whole workload.
    pub fn new(protocol: Protocol, topology: &Topology, workload: Vec<Cast>) -> SimConfig {
        let last = workload.iter().map(|c| c.time).max().unwrap_or_default();
        SimConfig {
            format: FORMAT,
            protocol,
            f: topology.f,
            groups: topology.groups.iter().map(|g| g.members.clone()).collect(),
            clients: topology.clients.clone(),
            delta: one(),
            gst: Time::ZERO,
            delay: DelayModel::Uniform,
            crashes: Vec::new(),
            nominations: Vec::new(),
            workload,
            horizon: last + Time::from_int(40),
            seed: 0,
            snapshots: false,
            mutation: Mutation::default(),
        }
    }

    pub fn topology(&self) -> Result<Topology, ConfigError> {
        Ok(Topology::new(self.f, self.groups.clone(), self.clients.clone())?)
    }

    pub fn validate(&self) -> Result<Topology, ConfigError> {
        if self.format != FORMAT {
            return Err(ConfigError::Format(self.format));
        }
        if self.delta == Time::ZERO {
            return Err(ConfigError::Delta);
        }
        let topo = self.topology()?;
        let known: BTreeSet<ProcessId> = topo.processes().collect();
        let groups: BTreeSet<GroupId> = topo.group_ids().collect();
        for c in &self.workload {
            if !known.contains(&c.sender) {
                return Err(ConfigError::UnknownProcess(c.sender));
            }
            if c.dest.is_empty() {
                return Err(ConfigError::EmptyDest(c.sender));
            }
            if let Some(g) = c.dest.iter().find(|g| !groups.contains(g)) {
                return Err(ConfigError::UnknownGroup(*g));
            }
        }
        let mut per_group: BTreeMap<GroupId, BTreeSet<ProcessId>> = BTreeMap::new();
        for c in &self.crashes {
            if !known.contains(&c.process) {
                return Err(ConfigError::UnknownProcess(c.process));
            }
            if let Some(g) = topo.group_of(c.process) {
                let set = per_group.entry(g).or_default();
                set.insert(c.process);
                if set.len() > self.f {
                    return Err(ConfigError::TooManyCrashes(g));
                }
            }
        }
        for n in &self.nominations {
            if n.time >= self.gst {
                return Err(ConfigError::LateNomination(n.time));
            }
            if topo.group_of(n.nominee) != Some(n.group) {
                return Err(ConfigError::ForeignNominee(n.nominee, n.group));
            }
        }
        if let DelayModel::Scripted { default, edges } = &self.delay {
            if *default > self.delta {
                return Err(ConfigError::UnboundedDelay(*default));
            }
            for e in edges {
                for p in [e.from, e.to] {
                    if !known.contains(&p) {
                        return Err(ConfigError::UnknownProcess(p));
                    }
                }
                if e.delay > self.delta && e.until.is_none_or(|u| u > self.gst) {
                    return Err(ConfigError::UnboundedDelay(e.delay));
                }
            }
        }
        Ok(topo)
    }

    /// The application messages of the workload, in list order.
    pub fn messages(&self) -> Vec<(Time, AppMessage)> {
        let mut seq: BTreeMap<ProcessId, u64> = BTreeMap::new();
        self.workload
            .iter()
            .map(|c| {
                let n = seq.entry(c.sender).or_default();
                let id = MsgId::new(c.sender, *n);
                *n += 1;
                (c.time, AppMessage::new(id, c.dest.iter().copied(), c.payload.clone()))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
enum Ev {
    Cast(AppMessage),
    Arrive { uid: u64, from: ProcessId, to: ProcessId, msg: Message },
    Timer { at: ProcessId, timer: Timer },
    Crash(ProcessId),
    LssCheck(GroupId),
    Reannounce,
    Nominate { group: GroupId, nominee: ProcessId },
}

pub struct Sim {
    cfg: SimConfig,
    ctx: Ctx,
    replicas: BTreeMap<ProcessId, Replica>,
    crashed: BTreeSet<ProcessId>,
    queue: BTreeMap<(Time, u64), Ev>,
    seq: u64,
    uid: u64,
    now: Time,
    rng: ChaCha8Rng,
    last_arrival: BTreeMap<(ProcessId, ProcessId), Time>,
    sends: BTreeMap<ProcessId, usize>,
    send_limit: BTreeMap<ProcessId, usize>,
    nominee: BTreeMap<GroupId, ProcessId>,
    /// Groups whose leader the oracle has named at least once.
    renominated: BTreeSet<GroupId>,
    clocks: BTreeMap<ProcessId, u64>,
    states: BTreeMap<ProcessId, Snapshot>,
    events: Vec<Event>,
}

impl Sim {
    pub fn new(cfg: &SimConfig) -> Result<Sim, ConfigError> {
        let topo = cfg.validate()?;
        let mut ctx = Ctx::new(cfg.protocol, topo, cfg.delta);
        ctx.params.mutation = cfg.mutation;
        let replicas: BTreeMap<ProcessId, Replica> = ctx.topo.processes().map(|p| (p, Replica::new(p, &ctx))).collect();
        let mut sim = Sim {
            cfg: cfg.clone(),
            nominee: ctx.leaders.clone(),
            ctx,
            replicas,
            crashed: BTreeSet::new(),
            queue: BTreeMap::new(),
            seq: 0,
            uid: 0,
            now: Time::ZERO,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            last_arrival: BTreeMap::new(),
            sends: BTreeMap::new(),
            send_limit: BTreeMap::new(),
            renominated: BTreeSet::new(),
            clocks: BTreeMap::new(),
            states: BTreeMap::new(),
            events: Vec::new(),
        };
        for (t, m) in cfg.messages() {
            sim.schedule(t, Ev::Cast(m));
        }
        for c in &cfg.crashes {
            if let Some(t) = c.time {
                sim.schedule(t, Ev::Crash(c.process));
            }
            if let Some(n) = c.after_sends {
                sim.send_limit.insert(c.process, n);
            }
        }
        for n in &cfg.nominations {
            sim.schedule(n.time, Ev::Nominate { group: n.group, nominee: n.nominee });
        }
        if !cfg.crashes.is_empty() || !cfg.nominations.is_empty() {
            sim.schedule(cfg.gst + cfg.delta * 3, Ev::Reannounce);
        }
        if cfg.snapshots {
            let ids: Vec<ProcessId> = sim.replicas.keys().copied().collect();
            for p in ids {
                sim.record_state(p);
            }
        }
        Ok(sim)
    }

    pub fn ctx(&self) -> &Ctx {
        &self.ctx
    }

    pub fn replicas(&self) -> &BTreeMap<ProcessId, Replica> {
        &self.replicas
    }

    pub fn crashed(&self) -> &BTreeSet<ProcessId> {
        &self.crashed
    }

    fn schedule(&mut self, at: Time, ev: Ev) {
        self.queue.insert((at, self.seq), ev);
        self.seq += 1;
    }

    fn log(&mut self, process: ProcessId, kind: EventKind) {
        self.events.push(Event { time: self.now, process, kind });
    }

    /// Processes every event up to and including the horizon.
    pub fn run(&mut self) {
        while let Some(entry) = self.queue.first_entry() {
            let (at, _) = *entry.key();
            if at > self.cfg.horizon {
                break;
            }
            let ev = entry.remove();
            self.now = at;
            self.dispatch(ev);
        }
        self.now = self.cfg.horizon;
    }

    pub fn into_trace(self) -> Trace {
        let last_workload = self.cfg.workload.iter().map(|c| c.time).max();
        Trace {
            meta: Meta {
                protocol: self.cfg.protocol,
                topology: self.ctx.topo,
                delta: self.cfg.delta,
                gst: self.cfg.gst,
                horizon: Some(self.cfg.horizon),
                last_workload,
                snapshots: self.cfg.snapshots,
            },
            events: self.events,
        }
    }

    fn dispatch(&mut self, ev: Ev) {
        match ev {
            Ev::Cast(m) => {
                let p = m.id.sender;
                self.step(p, EventKind::Multicast { msg: m.clone() }, Input::Multicast(m));
            }
            Ev::Arrive { uid, from, to, msg } => {
                self.step(to, EventKind::Receive { uid, from, msg: msg.clone() }, Input::Receive { from, msg });
            }
            Ev::Timer { at, timer } => self.step(at, EventKind::Timer { timer }, Input::Timer(timer)),
            Ev::Crash(p) => self.crash(p),
            Ev::LssCheck(g) => {
                if self.crashed.contains(&self.nominee[&g]) {
                    let alive = self.ctx.members(g).iter().copied().filter(|p| !self.crashed.contains(p)).min();
                    if let Some(p) = alive {
                        self.nominate(g, p);
                    }
                }
            }
            Ev::Nominate { group, nominee } => self.nominate(group, nominee),
            // Settles leader guesses left over from the unstable period.
            Ev::Reannounce => {
                let changed: Vec<(GroupId, ProcessId)> = self
                    .nominee
                    .iter()
                    .filter(|(g, p)| self.renominated.contains(g) && !self.crashed.contains(p))
                    .map(|(g, p)| (*g, *p))
                    .collect();
                for (g, p) in changed {
                    self.nominate(g, p);
                }
            }
        }
    }

    fn crash(&mut self, p: ProcessId) {
        if !self.crashed.insert(p) {
            return;
        }
        self.log(p, EventKind::Crash);
        if let Some(g) = self.ctx.topo.group_of(p) {
            if self.nominee[&g] == p {
                self.schedule(self.now + self.cfg.delta * 2, Ev::LssCheck(g));
            }
        }
    }

    /// Announces `nominee` as the leader of `group` to every live process.
    fn nominate(&mut self, group: GroupId, nominee: ProcessId) {
        self.nominee.insert(group, nominee);
        self.renominated.insert(group);
        if self.crashed.contains(&nominee) {
            self.schedule(self.now + self.cfg.delta * 2, Ev::LssCheck(group));
            return;
        }
        let all: Vec<ProcessId> = self.replicas.keys().copied().collect();
        for p in all {
            self.step(p, EventKind::Nominate { group, nominee }, Input::Nominate { group, nominee });
        }
    }

    fn delay(&mut self, from: ProcessId, to: ProcessId) -> Time {
        let delta = self.cfg.delta;
        match &self.cfg.delay {
            DelayModel::Uniform => delta,
            DelayModel::SeededRandom => {
                let max = if self.now < self.cfg.gst { 64 } else { 16 };
                let k = self.rng.gen_range(1..=max);
                Time::new(delta.numer() * k, delta.denom() * 16)
            }
            DelayModel::Scripted { default, edges } => edges
                .iter()
                .find(|e| e.from == from && e.to == to && e.until.is_none_or(|u| self.now < u))
                .map_or(*default, |e| e.delay),
        }
    }

    /// Runs one input at `p`, then every message `p` sends itself as a
    /// consequence, in order.
    fn step(&mut self, p: ProcessId, cause: EventKind, input: Input) {
        if self.crashed.contains(&p) {
            return;
        }
        self.log(p, cause);
        let mut local: VecDeque<(u64, Message)> = VecDeque::new();
        let mut input = Some(input);
        loop {
            let input = match input.take() {
                Some(i) => i,
                None => match local.pop_front() {
                    Some((uid, msg)) => {
                        self.log(p, EventKind::Receive { uid, from: p, msg: msg.clone() });
                        Input::Receive { from: p, msg }
                    }
                    None => return,
                },
            };
            let mut fx = Effects::default();
            let replica = self.replicas.get_mut(&p).expect("known process");
            replica.step(&self.ctx, input, &mut fx);
            self.after_step(p, &fx);
            for (after, timer) in fx.timers.drain(..) {
                self.schedule(self.now + after, Ev::Timer { at: p, timer });
            }
            for (to, msg) in fx.sends.drain(..) {
                let uid = self.uid;
                self.uid += 1;
                self.log(p, EventKind::Send { uid, to, msg: msg.clone() });
                if to == p {
                    local.push_back((uid, msg));
                } else {
                    let d = self.delay(p, to);
                    let mut at = self.now + d;
                    if self.now < self.cfg.gst {
                        at = at.min(self.cfg.gst + self.cfg.delta);
                    }
                    let last = self.last_arrival.entry((p, to)).or_insert(Time::ZERO);
                    at = at.max(*last);
                    *last = at;
                    self.schedule(at, Ev::Arrive { uid, from: p, to, msg });
                }
                let n = self.sends.entry(p).or_default();
                *n += 1;
                if self.send_limit.get(&p) == Some(n) {
                    self.crash(p);
                    return;
                }
            }
        }
    }

    fn after_step(&mut self, p: ProcessId, fx: &Effects) {
        for note in &fx.notes {
            let kind = match *note {
                Note::Deliver { msg, gts } => EventKind::Deliver { msg, gts },
                Note::Commit { msg, lts, gts } => EventKind::Commit { msg, lts, gts },
            };
            self.log(p, kind);
        }
        let clock = self.replicas[&p].clock();
        if self.clocks.insert(p, clock).unwrap_or(0) != clock {
            self.log(p, EventKind::Clock { clock });
        }
        if self.cfg.snapshots {
            self.record_state(p);
        }
    }

    fn record_state(&mut self, p: ProcessId) {
        let Some(state) = self.replicas[&p].snapshot() else { return };
        if self.states.get(&p) != Some(&state) {
            self.states.insert(p, state.clone());
            self.log(p, EventKind::State { state: Box::new(state) });
        }
    }
}

/// Runs `cfg` to its horizon.
pub fn run(cfg: &SimConfig) -> Result<Trace, ConfigError> {
    let mut sim = Sim::new(cfg)?;
    sim.run();
    Ok(sim.into_trace())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Topology;

    fn t(n: u64) -> Time {
        Time::from_int(n)
    }

    fn cast(time: Time, sender: u32, dest: &[u32]) -> Cast {
        Cast { time, sender: ProcessId(sender), dest: dest.iter().map(|g| GroupId(*g)).collect(), payload: vec![] }
    }

    fn count(trace: &Trace, pred: impl Fn(&EventKind) -> bool) -> usize {
        trace.events.iter().filter(|e| pred(&e.kind)).count()
    }

    #[test]
    fn local_message_delivered_by_whole_group() {
        let cfg = SimConfig::new(Protocol::Whitebox, &Topology::uniform(1, 1, 0), vec![cast(t(0), 0, &[0])]);
        let trace = run(&cfg).unwrap();
        assert_eq!(count(&trace, |k| matches!(k, EventKind::Deliver { .. })), 3);
    }

    #[test]
    fn runs_are_deterministic() {
        let topo = Topology::uniform(3, 1, 2);
        let mut cfg = SimConfig::new(
            Protocol::Whitebox,
            &topo,
            vec![cast(t(0), 9, &[0, 1]), cast(Time::new(1, 3), 10, &[1, 2]), cast(t(1), 0, &[0, 2])],
        );
        cfg.delay = DelayModel::SeededRandom;
        cfg.gst = t(3);
        cfg.seed = 17;
        cfg.snapshots = true;
        cfg.crashes = vec![Crash { process: ProcessId(3), time: Some(t(1)), after_sends: None }];
        let a = run(&cfg).unwrap().to_jsonl();
        let b = run(&cfg).unwrap().to_jsonl();
        assert_eq!(a, b);
        cfg.seed = 18;
        assert_ne!(a, run(&cfg).unwrap().to_jsonl());
    }

    #[test]
    fn leader_crash_triggers_nomination_and_recovery() {
        let mut cfg = SimConfig::new(Protocol::Whitebox, &Topology::uniform(1, 1, 1), vec![cast(t(2), 3, &[0])]);
        cfg.gst = t(5);
        cfg.crashes = vec![Crash { process: ProcessId(0), time: Some(t(1)), after_sends: None }];
        let trace = run(&cfg).unwrap();
        let noms: Vec<&Event> = trace.events.iter().filter(|e| matches!(e.kind, EventKind::Nominate { .. })).collect();
        assert!(!noms.is_empty());
        assert!(noms.iter().all(|e| matches!(e.kind, EventKind::Nominate { nominee, .. } if nominee == ProcessId(1))));
        let times: BTreeSet<Time> = noms.iter().map(|e| e.time).collect();
        // Two δ after the crash, then again once GST has settled.
        assert_eq!(times, [t(3), cfg.gst + t(3)].into());
        assert!(trace.events.iter().any(|e| matches!(&e.kind, EventKind::Send { msg: Message::NewLeader { .. }, .. })));
        let delivered: BTreeSet<ProcessId> =
            trace.events.iter().filter(|e| matches!(e.kind, EventKind::Deliver { .. })).map(|e| e.process).collect();
        assert_eq!(delivered, [ProcessId(1), ProcessId(2)].into());
        assert!(trace.events.iter().all(|e| e.process != ProcessId(0) || e.time <= t(1)));
    }

    #[test]
    fn no_crash_no_nomination() {
        let cfg = SimConfig::new(Protocol::Whitebox, &Topology::uniform(2, 1, 1), vec![cast(t(0), 6, &[0, 1])]);
        let trace = run(&cfg).unwrap();
        assert_eq!(count(&trace, |k| matches!(k, EventKind::Nominate { .. })), 0);
    }

    #[test]
    fn channels_are_fifo_and_bounded_after_gst() {
        let topo = Topology::uniform(2, 1, 1);
        let workload = (0..12).map(|i| cast(Time::new(i, 2), 6, if i % 2 == 0 { &[0, 1] } else { &[1] })).collect();
        let mut cfg = SimConfig::new(Protocol::Whitebox, &topo, workload);
        cfg.delay = DelayModel::SeededRandom;
        cfg.gst = t(3);
        for seed in 0..20 {
            cfg.seed = seed;
            let trace = run(&cfg).unwrap();
            let mut sent: BTreeMap<u64, (Time, ProcessId, ProcessId)> = BTreeMap::new();
            let mut order: BTreeMap<(ProcessId, ProcessId), Vec<u64>> = BTreeMap::new();
            let mut recv: BTreeMap<(ProcessId, ProcessId), Vec<u64>> = BTreeMap::new();
            for e in &trace.events {
                match &e.kind {
                    EventKind::Send { uid, to, .. } => {
                        sent.insert(*uid, (e.time, e.process, *to));
                        order.entry((e.process, *to)).or_default().push(*uid);
                    }
                    EventKind::Receive { uid, from, .. } => {
                        let (at, src, dst) = sent[uid];
                        assert_eq!((src, dst), (*from, e.process));
                        let bound = if at < cfg.gst { cfg.gst + cfg.delta } else { at + cfg.delta };
                        assert!(e.time <= bound, "seed {seed}: uid {uid} sent {at} received {}", e.time);
                        recv.entry((*from, e.process)).or_default().push(*uid);
                    }
                    _ => {}
                }
            }
            for (ch, got) in recv {
                assert_eq!(got[..], order[&ch][..got.len()], "seed {seed}: channel {ch:?}");
            }
        }
    }

    #[test]
    fn crash_after_sends_cuts_the_step_short() {
        let mut cfg = SimConfig::new(Protocol::Whitebox, &Topology::uniform(2, 1, 1), vec![cast(t(0), 6, &[0, 1])]);
        cfg.crashes = vec![Crash { process: ProcessId(6), time: None, after_sends: Some(1) }];
        let trace = run(&cfg).unwrap();
        let sends: Vec<&Event> = trace
            .events
            .iter()
            .filter(|e| e.process == ProcessId(6) && matches!(e.kind, EventKind::Send { .. }))
            .collect();
        assert_eq!(sends.len(), 1);
        assert_eq!(count(&trace, |k| matches!(k, EventKind::Crash)), 1);
    }

    #[test]
    fn rejects_bad_configs() {
        let topo = Topology::uniform(2, 1, 1);
        let base = SimConfig::new(Protocol::Whitebox, &topo, vec![cast(t(0), 6, &[0])]);
        let mut c = base.clone();
        c.groups[0].pop();
        assert!(matches!(c.validate(), Err(ConfigError::Topology(_))));
        let mut c = base.clone();
        c.crashes = (0..2).map(|p| Crash { process: ProcessId(p), time: Some(t(1)), after_sends: None }).collect();
        assert_eq!(c.validate(), Err(ConfigError::TooManyCrashes(GroupId(0))));
        let mut c = base.clone();
        c.workload.push(cast(t(0), 6, &[5]));
        assert_eq!(c.validate(), Err(ConfigError::UnknownGroup(GroupId(5))));
        let mut c = base.clone();
        c.nominations.push(Nomination { time: t(0), group: GroupId(0), nominee: ProcessId(1) });
        assert_eq!(c.validate(), Err(ConfigError::LateNomination(t(0))));
        let mut c = base;
        c.delay = DelayModel::Scripted { default: t(2), edges: vec![] };
        assert_eq!(c.validate(), Err(ConfigError::UnboundedDelay(t(2))));
    }

    #[test]
    fn config_json_round_trip() {
        let mut cfg = SimConfig::new(Protocol::FtSkeen, &Topology::uniform(2, 1, 1), vec![cast(t(0), 6, &[0, 1])]);
        cfg.delay = DelayModel::Scripted {
            default: t(1),
            edges: vec![EdgeDelay { from: ProcessId(0), to: ProcessId(1), delay: Time::new(1, 2), until: None }],
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"format\":1"));
        assert_eq!(serde_json::from_str::<SimConfig>(&s).unwrap(), cfg);
    }
}
