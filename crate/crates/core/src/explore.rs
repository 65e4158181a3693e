//! Exhaustive exploration of small configurations.
//!
//! Every interleaving of message arrivals and multicast issues is tried,
//! with FIFO channels, no timers and no crashes. States are memoized by
//! hash. A state with more than `max_pending` messages in flight is counted
//! and not expanded, which keeps the scope small.
//!
//! Steps at different processes commute, so the search carries sleep sets:
//! a step already explored from a state is not retried after an
//! independent one. The cache remembers the sleep set each state was
//! expanded under and expands again when reached with a smaller one. Every
//! reachable state is still visited, only fewer edges are followed.
//!
//! Along every path the explorer checks that a message has one global
//! timestamp, that no two messages share one, and that each process
//! delivers in strictly increasing timestamp order. At quiescent states it
//! also checks that every message reached every member of its destination
//! groups. Together these give Ordering through the timestamp embedding.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use crate::message::Message;
use crate::protocol::{Ctx, Effects, Input, Mutation, Note, Protocol, Replica};
use crate::time::Time;
use crate::types::{AppMessage, GroupId, MsgId, ProcessId, Timestamp, Topology};

#[derive(Clone, Debug)]
pub struct ExploreConfig {
    pub protocol: Protocol,
    pub topology: Topology,
    /// Multicasts as `(sender, destination)`, issued in list order per sender.
    pub casts: Vec<(ProcessId, Vec<GroupId>)>,
    pub max_pending: usize,
    pub mutation: Mutation,
    /// Follow every edge instead of using sleep sets.
    pub full: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub what: String,
    /// The steps leading to it.
    pub path: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExploreReport {
    pub states: u64,
    /// Quiescent states reached.
    pub leaves: u64,
    /// States not expanded because too many messages were in flight.
    pub pruned: u64,
    pub violation: Option<Violation>,
}

/// A replica shared between states until a step changes it, with its hash.
#[derive(Clone)]
struct Slot {
    hash: u64,
    replica: Rc<Replica>,
}

impl Slot {
    fn new(replica: Replica) -> Slot {
        Slot { hash: hash_of(&replica), replica: Rc::new(replica) }
    }
}

#[derive(Clone)]
struct State {
    replicas: BTreeMap<ProcessId, Slot>,
    channels: BTreeMap<(ProcessId, ProcessId), VecDeque<Message>>,
    issued: BTreeMap<ProcessId, usize>,
    gts: BTreeMap<MsgId, Timestamp>,
    delivered: BTreeMap<ProcessId, Vec<(MsgId, Timestamp)>>,
}

impl State {
    fn in_flight(&self) -> usize {
        self.channels.values().map(VecDeque::len).sum()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
enum Move {
    Issue(ProcessId),
    Arrive(ProcessId, ProcessId),
}

impl Move {
    /// The process whose state the step changes.
    fn actor(self) -> ProcessId {
        match self {
            Move::Issue(p) | Move::Arrive(_, p) => p,
        }
    }
}

type Sleep = BTreeSet<Move>;

struct Explorer {
    ctx: Ctx,
    casts: BTreeMap<ProcessId, Vec<AppMessage>>,
    max_pending: usize,
    full: bool,
    seen: HashMap<u64, Sleep>,
    report: ExploreReport,
    path: Vec<String>,
}

pub fn explore(cfg: &ExploreConfig) -> ExploreReport {
    let mut ctx = Ctx::new(cfg.protocol, cfg.topology.clone(), Time::from_int(1));
    ctx.params.mutation = cfg.mutation;
    let mut casts: BTreeMap<ProcessId, Vec<AppMessage>> = BTreeMap::new();
    for (sender, dest) in &cfg.casts {
        let mine = casts.entry(*sender).or_default();
        let id = MsgId::new(*sender, mine.len() as u64);
        mine.push(AppMessage::new(id, dest.iter().copied(), vec![]));
    }
    let state = State {
        replicas: ctx.topo.processes().map(|p| (p, Slot::new(Replica::new(p, &ctx)))).collect(),
        channels: BTreeMap::new(),
        issued: BTreeMap::new(),
        gts: BTreeMap::new(),
        delivered: BTreeMap::new(),
    };
    let mut ex = Explorer {
        ctx,
        casts,
        max_pending: cfg.max_pending,
        full: cfg.full,
        seen: HashMap::new(),
        report: ExploreReport::default(),
        path: Vec::new(),
    };
    ex.visit(state, Sleep::new());
    ex.report
}

fn hash_of(x: &impl Hash) -> u64 {
    let mut h = DefaultHasher::new();
    x.hash(&mut h);
    h.finish()
}

fn fingerprint(s: &State) -> u64 {
    let mut h = DefaultHasher::new();
    for (p, slot) in &s.replicas {
        p.hash(&mut h);
        h.write_u64(slot.hash);
    }
    s.channels.hash(&mut h);
    s.issued.hash(&mut h);
    s.gts.hash(&mut h);
    s.delivered.hash(&mut h);
    h.finish()
}

impl Explorer {
    fn visit(&mut self, state: State, sleep: Sleep) {
        if self.report.violation.is_some() {
            return;
        }
        let mut moves: Vec<Move> = self
            .casts
            .iter()
            .filter(|(p, ms)| state.issued.get(p).copied().unwrap_or(0) < ms.len())
            .map(|(p, _)| Move::Issue(*p))
            .collect();
        moves.extend(state.channels.iter().filter(|(_, q)| !q.is_empty()).map(|((a, b), _)| Move::Arrive(*a, *b)));
        let fp = fingerprint(&state);
        match self.seen.get_mut(&fp) {
            Some(stored) => {
                if stored.is_subset(&sleep) {
                    return;
                }
                // Only the steps that slept last time are new.
                moves.retain(|m| stored.contains(m));
                *stored = stored.intersection(&sleep).copied().collect();
            }
            None => {
                self.seen.insert(fp, sleep.clone());
                self.report.states += 1;
                if state.in_flight() > self.max_pending {
                    self.report.pruned += 1;
                    return;
                }
                if moves.is_empty() {
                    self.report.leaves += 1;
                    if let Err(what) = self.check_leaf(&state) {
                        self.fail(what);
                    }
                    return;
                }
            }
        }
        if state.in_flight() > self.max_pending {
            return;
        }
        let mut sleep = if self.full { Sleep::new() } else { sleep };
        for mv in moves {
            if sleep.contains(&mv) {
                continue;
            }
            let mut next = state.clone();
            let label = match mv {
                Move::Issue(p) => {
                    let i = next.issued.entry(p).or_default();
                    let m = self.casts[&p][*i].clone();
                    *i += 1;
                    let label = format!("{p} multicasts {}", m.id);
                    self.apply(&mut next, p, Input::Multicast(m)).map(|_| label)
                }
                Move::Arrive(from, to) => {
                    let q = next.channels.get_mut(&(from, to)).expect("listed channel");
                    let msg = q.pop_front().expect("non-empty channel");
                    if q.is_empty() {
                        next.channels.remove(&(from, to));
                    }
                    let label = format!("{to} receives {} from {from}", msg.tag());
                    self.apply(&mut next, to, Input::Receive { from, msg }).map(|_| label)
                }
            };
            match label {
                Ok(label) => {
                    // Sleeping on `mv` assumes every path that commutes it
                    // to the front was expanded, which holds when `mv` does
                    // not add to the messages in flight.
                    let shrinks = next.in_flight() <= state.in_flight();
                    let inherited = sleep.iter().filter(|u| u.actor() != mv.actor()).copied().collect();
                    self.path.push(label);
                    self.visit(next, if self.full { Sleep::new() } else { inherited });
                    self.path.pop();
                    if shrinks && !self.full {
                        sleep.insert(mv);
                    }
                }
                Err(what) => {
                    let step = match mv {
                        Move::Issue(p) => format!("{p} multicasts"),
                        Move::Arrive(from, to) => format!("{to} receives from {from}"),
                    };
                    self.path.push(step);
                    self.fail(what);
                    self.path.pop();
                }
            }
            if self.report.violation.is_some() {
                return;
            }
        }
    }

    fn fail(&mut self, what: String) {
        self.report.violation.get_or_insert(Violation { what, path: self.path.clone() });
    }

    /// Runs `input` at `p` and then everything `p` sends itself.
    fn apply(&self, s: &mut State, p: ProcessId, input: Input) -> Result<(), String> {
        let mut local: VecDeque<Message> = VecDeque::new();
        let mut input = Some(input);
        let mut replica = (*s.replicas[&p].replica).clone();
        while let Some(i) = input.take().or_else(|| local.pop_front().map(|msg| Input::Receive { from: p, msg })) {
            let mut fx = Effects::default();
            replica.step(&self.ctx, i, &mut fx);
            for note in fx.notes.drain(..) {
                self.note(s, p, note)?;
            }
            for (to, msg) in fx.sends.drain(..) {
                // Confirmations only feed sender-side retry timers.
                if matches!(msg, Message::Delivered { .. }) {
                    continue;
                }
                if to == p {
                    local.push_back(msg);
                } else {
                    s.channels.entry((p, to)).or_default().push_back(msg);
                }
            }
        }
        s.replicas.insert(p, Slot::new(replica));
        Ok(())
    }

    fn note(&self, s: &mut State, p: ProcessId, note: Note) -> Result<(), String> {
        let (m, gts) = match note {
            Note::Commit { msg, gts, .. } => (msg, gts),
            Note::Deliver { msg, gts } => (msg, gts),
        };
        if gts.is_bottom() {
            return Err(format!("{p} uses a bottom timestamp for {m}"));
        }
        match s.gts.get(&m) {
            Some(known) if *known != gts => {
                return Err(format!("{m} has global timestamps {known:?} and {gts:?}"));
            }
            Some(_) => {}
            None => {
                if let Some((other, _)) = s.gts.iter().find(|(_, t)| **t == gts) {
                    return Err(format!("{m} and {other} share global timestamp {gts:?}"));
                }
                s.gts.insert(m, gts);
            }
        }
        if let Note::Deliver { .. } = note {
            let msg = self.casts.get(&m.sender).and_then(|ms| ms.get(m.seq as usize));
            let Some(msg) = msg else { return Err(format!("{p} delivers unknown {m}")) };
            if !self.ctx.topo.group_of(p).is_some_and(|g| msg.dest.contains(&g)) {
                return Err(format!("{p} delivers {m} outside its destination"));
            }
            let seq = s.delivered.entry(p).or_default();
            if seq.iter().any(|(d, _)| *d == m) {
                return Err(format!("{p} delivers {m} twice"));
            }
            if let Some((prev, t)) = seq.last() {
                if *t >= gts {
                    return Err(format!("{p} delivers {m} at {gts:?} after {prev} at {t:?}"));
                }
            }
            seq.push((m, gts));
        }
        Ok(())
    }

    fn check_leaf(&self, s: &State) -> Result<(), String> {
        for msg in self.casts.values().flatten() {
            for g in &msg.dest {
                for p in self.ctx.members(*g) {
                    let got = s.delivered.get(p).is_some_and(|seq| seq.iter().any(|(d, _)| *d == msg.id));
                    if !got {
                        return Err(format!("{p} never delivers {}", msg.id));
                    }
                }
            }
        }
        Ok(())
    }
}
