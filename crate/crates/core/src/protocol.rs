//! The step interface shared by every protocol process, plus the pieces all
//! protocols reuse: the multicasting side and the view of group leaders.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ftskeen::FtsProcess;
use crate::message::{Entries, Message};
use crate::skeen::SkeenProcess;
use crate::time::Time;
use crate::types::{AppMessage, Ballot, GroupId, MsgId, Phase, ProcessId, Timestamp, Topology};
use crate::whitebox::WbProcess;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Skeen,
    FtSkeen,
    Whitebox,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Skeen => "skeen",
            Protocol::FtSkeen => "ftskeen",
            Protocol::Whitebox => "whitebox",
        })
    }
}

impl FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Protocol, String> {
        match s {
            "skeen" => Ok(Protocol::Skeen),
            "ftskeen" => Ok(Protocol::FtSkeen),
            "whitebox" => Ok(Protocol::Whitebox),
            _ => Err(format!("unknown protocol {s:?} (expected skeen, ftskeen or whitebox)")),
        }
    }
}

/// Deliberate protocol bugs, used to show the checker is not vacuous.
#[doc(hidden)]
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default, Serialize, Deserialize)]
pub struct Mutation {
    /// ACCEPT handler leaves the clock alone.
    #[serde(default)]
    pub skip_accept_clock_max: bool,
    /// Leaders deliver committed messages without waiting for blockers.
    #[serde(default)]
    pub skip_delivery_guard: bool,
    /// Recovery takes accepted entries from every reporter, not only those
    /// with the maximal cballot.
    #[serde(default)]
    pub recover_from_any_reporter: bool,
}

impl Mutation {
    pub fn is_none(&self) -> bool {
        *self == Mutation::default()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Params {
    /// Leader-side retry period for proposed or accepted messages.
    pub retry: Time,
    /// Sender-side retry period for unconfirmed destination groups.
    pub client_retry: Time,
    /// How long a nominee waits for its recovery to finish before retrying.
    pub recovery_timeout: Time,
    pub mutation: Mutation,
}

impl Params {
    pub fn for_delta(delta: Time) -> Params {
        Params { retry: delta * 4, client_retry: delta * 8, recovery_timeout: delta * 6, mutation: Mutation::default() }
    }
}

/// Static knowledge every process starts with.
#[derive(Clone, Debug)]
pub struct Ctx {
    pub protocol: Protocol,
    pub topo: Topology,
    pub leaders: BTreeMap<GroupId, ProcessId>,
    pub params: Params,
}

impl Ctx {
    pub fn new(protocol: Protocol, topo: Topology, delta: Time) -> Ctx {
        let leaders = topo.initial_leaders();
        Ctx { protocol, topo, leaders, params: Params::for_delta(delta) }
    }

    pub fn members(&self, g: GroupId) -> &[ProcessId] {
        self.topo.members(g)
    }

    /// All members of all destination groups of `m`.
    pub fn dest_processes<'a>(&'a self, m: &'a AppMessage) -> impl Iterator<Item = ProcessId> + 'a {
        m.dest.iter().flat_map(move |g| self.members(*g).iter().copied())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(tag = "timer", content = "msg", rename_all = "snake_case")]
pub enum Timer {
    /// Leader re-multicasts a message stuck before commit.
    Retry(MsgId),
    /// Sender re-multicasts to groups that have not confirmed delivery.
    ClientRetry(MsgId),
    /// A nominee checks whether its recovery completed.
    RecoveryCheck,
}

impl Timer {
    pub fn msg(&self) -> Option<MsgId> {
        match self {
            Timer::Retry(m) | Timer::ClientRetry(m) => Some(*m),
            Timer::RecoveryCheck => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Input {
    /// The application at this process multicasts `m`.
    Multicast(AppMessage),
    Receive {
        from: ProcessId,
        msg: Message,
    },
    Timer(Timer),
    /// Leader selection announces `nominee` for `group`.
    Nominate {
        group: GroupId,
        nominee: ProcessId,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Note {
    Deliver { msg: MsgId, gts: Timestamp },
    Commit { msg: MsgId, lts: Timestamp, gts: Timestamp },
}

/// Everything a step asks the environment to do.
#[derive(Default, Debug)]
pub struct Effects {
    pub sends: Vec<(ProcessId, Message)>,
    pub timers: Vec<(Time, Timer)>,
    pub notes: Vec<Note>,
}

impl Effects {
    pub fn send(&mut self, to: ProcessId, msg: Message) {
        self.sends.push((to, msg));
    }

    pub fn send_all(&mut self, to: impl IntoIterator<Item = ProcessId>, msg: &Message) {
        for p in to {
            self.sends.push((p, msg.clone()));
        }
    }

    pub fn clear(&mut self) {
        self.sends.clear();
        self.timers.clear();
        self.notes.clear();
    }
}

/// The committed messages that may be delivered now, in global-timestamp
/// order: those whose gts is below the local timestamp of every entry whose
/// phase satisfies `blocks`. With `only_new`, messages in `delivered` are
/// left out.
pub fn deliverable(
    entries: &Entries,
    delivered: &BTreeSet<MsgId>,
    only_new: bool,
    blocks: impl Fn(Phase) -> bool,
) -> Vec<MsgId> {
    let floor = entries.values().filter(|e| blocks(e.phase)).map(|e| e.lts).min();
    let mut out: Vec<(Timestamp, MsgId)> = entries
        .iter()
        .filter(|(id, e)| e.phase == Phase::Committed && !(only_new && delivered.contains(id)))
        .filter(|(_, e)| floor.is_none_or(|f| f > e.gts))
        .map(|(id, e)| (e.gts, *id))
        .collect();
    out.sort();
    out.into_iter().map(|(_, id)| id).collect()
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Leader,
    Follower,
    Recovering,
}

#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct SnapEntry {
    pub phase: Phase,
    pub lts: Timestamp,
    #[serde(default)]
    pub gts: Timestamp,
}

/// The protocol variables of a white-box process at one instant.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct Snapshot {
    pub status: Status,
    pub cballot: Ballot,
    pub ballot: Ballot,
    pub clock: u64,
    pub entries: BTreeMap<MsgId, SnapEntry>,
    pub max_delivered_gts: Timestamp,
    pub cur_leader: BTreeMap<GroupId, ProcessId>,
}

/// Best guess at each group's leader. Until the leader selection service
/// speaks about a group, the guess follows the highest ballot seen; after
/// that it follows the service alone, since a late message from an old
/// ballot could otherwise override it.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct LeaderView {
    pub cur: BTreeMap<GroupId, ProcessId>,
    seen: BTreeMap<GroupId, Ballot>,
    nominated: BTreeSet<GroupId>,
}

impl LeaderView {
    pub fn new(leaders: &BTreeMap<GroupId, ProcessId>) -> LeaderView {
        LeaderView { cur: leaders.clone(), seen: BTreeMap::new(), nominated: BTreeSet::new() }
    }

    pub fn leader(&self, g: GroupId) -> Option<ProcessId> {
        self.cur.get(&g).copied()
    }

    /// Record that `b` is in use in `g`.
    pub fn observe(&mut self, g: GroupId, b: Ballot) {
        let Some(owner) = b.leader() else { return };
        let known = self.seen.entry(g).or_default();
        if b > *known {
            *known = b;
            if !self.nominated.contains(&g) {
                self.cur.insert(g, owner);
            }
        }
    }

    pub fn nominate(&mut self, g: GroupId, p: ProcessId) {
        self.nominated.insert(g);
        self.cur.insert(g, p);
    }

    pub fn highest(&self, g: GroupId) -> Ballot {
        self.seen.get(&g).copied().unwrap_or_default()
    }
}

#[derive(Clone, PartialEq, Eq, Hash, Debug)]
struct Pending {
    msg: AppMessage,
    unconfirmed: BTreeSet<GroupId>,
}

/// The multicasting side of a process: issues MULTICAST and, under the
/// white-box protocol, keeps retrying until every destination group confirms.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Default)]
pub struct Outbox {
    pending: BTreeMap<MsgId, Pending>,
}

impl Outbox {
    pub fn start(&mut self, ctx: &Ctx, view: &LeaderView, m: AppMessage, fx: &mut Effects) {
        let out = Message::Multicast { msg: m.clone() };
        match ctx.protocol {
            Protocol::Skeen => fx.send_all(ctx.dest_processes(&m), &out),
            Protocol::FtSkeen => fx.send_all(m.dest.iter().filter_map(|g| ctx.leaders.get(g).copied()), &out),
            Protocol::Whitebox => {
                fx.send_all(m.dest.iter().filter_map(|g| view.leader(*g)), &out);
                fx.timers.push((ctx.params.client_retry, Timer::ClientRetry(m.id)));
                let unconfirmed = m.dest.clone();
                self.pending.insert(m.id, Pending { msg: m, unconfirmed });
            }
        }
    }

    pub fn confirm(&mut self, m: MsgId, g: GroupId) {
        if let Some(p) = self.pending.get_mut(&m) {
            p.unconfirmed.remove(&g);
            if p.unconfirmed.is_empty() {
                self.pending.remove(&m);
            }
        }
    }

    /// Re-multicast to every member of the groups still unconfirmed, since
    /// their leader may have changed.
    pub fn retry(&mut self, ctx: &Ctx, m: MsgId, fx: &mut Effects) {
        let Some(p) = self.pending.get(&m) else { return };
        let out = Message::Multicast { msg: p.msg.clone() };
        for g in &p.unconfirmed {
            fx.send_all(ctx.members(*g).iter().copied(), &out);
        }
        fx.timers.push((ctx.params.client_retry, Timer::ClientRetry(m)));
    }

    pub fn is_pending(&self, m: MsgId) -> bool {
        self.pending.contains_key(&m)
    }
}

/// A process that is not a group member and only multicasts.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct ClientProcess {
    pub id: ProcessId,
    view: LeaderView,
    outbox: Outbox,
}

impl ClientProcess {
    pub fn new(id: ProcessId, ctx: &Ctx) -> ClientProcess {
        ClientProcess { id, view: LeaderView::new(&ctx.leaders), outbox: Outbox::default() }
    }

    pub fn step(&mut self, ctx: &Ctx, input: Input, fx: &mut Effects) {
        match input {
            Input::Multicast(m) => self.outbox.start(ctx, &self.view, m, fx),
            Input::Timer(Timer::ClientRetry(m)) => self.outbox.retry(ctx, m, fx),
            Input::Timer(_) => {}
            Input::Nominate { group, nominee } => self.view.nominate(group, nominee),
            Input::Receive { msg, .. } => match msg {
                Message::Redirect { group, ballot, .. } => self.view.observe(group, ballot),
                Message::Delivered { msg, group } => self.outbox.confirm(msg, group),
                _ => {}
            },
        }
    }

    pub fn is_pending(&self, m: MsgId) -> bool {
        self.outbox.is_pending(m)
    }
}

/// A protocol process of any flavour.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub enum Replica {
    Skeen(SkeenProcess),
    FtSkeen(FtsProcess),
    Whitebox(WbProcess),
    Client(ClientProcess),
}

impl Replica {
    /// Group members run `ctx.protocol`; everyone else is a client.
    pub fn new(id: ProcessId, ctx: &Ctx) -> Replica {
        match (ctx.topo.group_of(id), ctx.protocol) {
            (None, _) => Replica::Client(ClientProcess::new(id, ctx)),
            (Some(g), Protocol::Skeen) => Replica::Skeen(SkeenProcess::new(id, g, ctx)),
            (Some(g), Protocol::FtSkeen) => Replica::FtSkeen(FtsProcess::new(id, g, ctx)),
            (Some(g), Protocol::Whitebox) => Replica::Whitebox(WbProcess::new(id, g, ctx)),
        }
    }

    pub fn step(&mut self, ctx: &Ctx, input: Input, fx: &mut Effects) {
        match self {
            Replica::Skeen(p) => p.step(ctx, input, fx),
            Replica::FtSkeen(p) => p.step(ctx, input, fx),
            Replica::Whitebox(p) => p.step(ctx, input, fx),
            Replica::Client(p) => p.step(ctx, input, fx),
        }
    }

    pub fn id(&self) -> ProcessId {
        match self {
            Replica::Skeen(p) => p.id,
            Replica::FtSkeen(p) => p.id,
            Replica::Whitebox(p) => p.id,
            Replica::Client(p) => p.id,
        }
    }

    pub fn clock(&self) -> u64 {
        match self {
            Replica::Skeen(p) => p.clock,
            Replica::FtSkeen(p) => p.clock,
            Replica::Whitebox(p) => p.clock(),
            Replica::Client(_) => 0,
        }
    }

    /// Whether a multicast issued here still awaits confirmation. Only the
    /// white-box protocol confirms, so the others never report pending.
    pub fn is_pending(&self, m: MsgId) -> bool {
        match self {
            Replica::Whitebox(p) => p.is_pending(m),
            Replica::Client(p) => p.is_pending(m),
            _ => false,
        }
    }

    /// Protocol variables, for white-box processes only.
    pub fn snapshot(&self) -> Option<Snapshot> {
        match self {
            Replica::Whitebox(p) => Some(p.snapshot()),
            _ => None,
        }
    }

    pub fn as_whitebox(&self) -> Option<&WbProcess> {
        match self {
            Replica::Whitebox(p) => Some(p),
            _ => None,
        }
    }
}
