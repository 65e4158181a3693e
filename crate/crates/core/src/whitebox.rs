//! The white-box protocol: Skeen's timestamping woven into a Paxos-like
//! replication of each group, with leader and message recovery.

use std::collections::{BTreeMap, BTreeSet};

use crate::message::{BalVec, Entries, Entry, Message};
use crate::protocol::{deliverable, Ctx, Effects, Input, LeaderView, Note, Outbox, SnapEntry, Snapshot, Status, Timer};
use crate::types::{merge_global, AppMessage, Ballot, GroupId, MsgId, Phase, ProcessId, Timestamp};

/// ACCEPTs received for one message, keyed by proposing group and ballot.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
struct AcceptBuf {
    msg: AppMessage,
    by: BTreeMap<(GroupId, Ballot), Timestamp>,
}

impl AcceptBuf {
    /// The proposal of `g` made in the highest ballot received.
    fn latest(&self, g: GroupId) -> Option<(Ballot, Timestamp)> {
        self.by.range((g, Ballot::Bottom)..).take_while(|((gg, _), _)| *gg == g).last().map(|((_, b), t)| (*b, *t))
    }
}

/// State reported in a NEWLEADER_ACK.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
struct Report {
    cballot: Ballot,
    clock: u64,
    entries: Entries,
}

#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct WbProcess {
    pub id: ProcessId,
    pub group: GroupId,
    pub clock: u64,
    /// Phase, LocalTS and GlobalTS of every message not in phase start.
    pub entries: Entries,
    pub delivered: BTreeSet<MsgId>,
    pub status: Status,
    pub cballot: Ballot,
    pub ballot: Ballot,
    pub view: LeaderView,
    pub max_delivered_gts: Timestamp,
    nominee: Option<ProcessId>,
    /// Recovery watchdogs in flight; only the latest one acts.
    watchdogs: u32,
    accepts: BTreeMap<MsgId, AcceptBuf>,
    acks: BTreeMap<(MsgId, BalVec), BTreeMap<GroupId, BTreeSet<ProcessId>>>,
    reports: BTreeMap<ProcessId, Report>,
    ns_acks: BTreeSet<ProcessId>,
    retry_armed: BTreeSet<MsgId>,
    attempts: BTreeMap<MsgId, u32>,
    outbox: Outbox,
}

impl WbProcess {
    /// Every group starts in ballot `(1, leader)` with its configured leader
    /// already established.
    pub fn new(id: ProcessId, group: GroupId, ctx: &Ctx) -> WbProcess {
        let mut view = LeaderView::new(&ctx.leaders);
        for (g, p) in &ctx.leaders {
            view.observe(*g, Ballot::new(1, *p));
        }
        let leader = ctx.leaders[&group];
        let b = Ballot::new(1, leader);
        WbProcess {
            id,
            group,
            clock: 0,
            entries: Entries::new(),
            delivered: BTreeSet::new(),
            status: if id == leader { Status::Leader } else { Status::Follower },
            cballot: b,
            ballot: b,
            view,
            max_delivered_gts: Timestamp::Bottom,
            nominee: None,
            watchdogs: 0,
            accepts: BTreeMap::new(),
            acks: BTreeMap::new(),
            reports: BTreeMap::new(),
            ns_acks: BTreeSet::new(),
            retry_armed: BTreeSet::new(),
            attempts: BTreeMap::new(),
            outbox: Outbox::default(),
        }
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    /// True while some destination of `m`, multicast here, has not confirmed it.
    pub fn is_pending(&self, m: MsgId) -> bool {
        self.outbox.is_pending(m)
    }

    pub fn phase(&self, m: MsgId) -> Phase {
        self.entries.get(&m).map_or(Phase::Start, |e| e.phase)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            status: self.status,
            cballot: self.cballot,
            ballot: self.ballot,
            clock: self.clock,
            entries: self
                .entries
                .iter()
                .map(|(id, e)| (*id, SnapEntry { phase: e.phase, lts: e.lts, gts: e.gts }))
                .collect(),
            max_delivered_gts: self.max_delivered_gts,
            cur_leader: self.view.cur.clone(),
        }
    }

    pub fn step(&mut self, ctx: &Ctx, input: Input, fx: &mut Effects) {
        match input {
            Input::Multicast(m) => self.outbox.start(ctx, &self.view, m, fx),
            Input::Timer(Timer::Retry(m)) => self.retry(ctx, m, fx),
            Input::Timer(Timer::ClientRetry(m)) => self.outbox.retry(ctx, m, fx),
            Input::Timer(Timer::RecoveryCheck) => {
                self.watchdogs = self.watchdogs.saturating_sub(1);
                if self.watchdogs == 0 && self.nominee == Some(self.id) && self.status != Status::Leader {
                    self.recover(ctx, fx);
                }
            }
            Input::Nominate { group, nominee } => {
                self.view.nominate(group, nominee);
                if group == self.group {
                    self.nominee = Some(nominee);
                    let own_attempt = self.status == Status::Recovering && self.ballot.leader() == Some(self.id);
                    if nominee == self.id && self.status != Status::Leader && !own_attempt {
                        self.recover(ctx, fx);
                    }
                }
            }
            Input::Receive { from, msg } => self.receive(ctx, from, msg, fx),
        }
    }

    fn receive(&mut self, ctx: &Ctx, from: ProcessId, msg: Message, fx: &mut Effects) {
        match msg {
            Message::Multicast { msg } => self.on_multicast(ctx, from, msg, fx),
            Message::Accept { msg, group, ballot, lts } => self.on_accept(ctx, msg, group, ballot, lts, fx),
            Message::AcceptAck { msg, group, balvec } => self.on_accept_ack(ctx, from, msg, group, balvec, fx),
            Message::Deliver { msg, ballot, lts, gts } => self.on_deliver(msg, ballot, lts, gts, fx),
            Message::NewLeader { ballot } => self.on_newleader(ctx, from, ballot, fx),
            Message::NewLeaderAck { ballot, cballot, clock, entries } => {
                self.on_newleader_ack(ctx, from, ballot, Report { cballot, clock, entries }, fx)
            }
            Message::NewState { ballot, clock, entries } => self.on_new_state(ctx, from, ballot, clock, entries, fx),
            Message::NewStateAck { ballot } => self.on_newstate_ack(ctx, from, ballot, fx),
            Message::Redirect { group, ballot, .. } => self.view.observe(group, ballot),
            Message::Delivered { msg, group } => self.outbox.confirm(msg, group),
            Message::Propose { .. }
            | Message::PersistLts { .. }
            | Message::PersistLtsAck { .. }
            | Message::PersistGts { .. }
            | Message::PersistGtsAck { .. } => {}
        }
    }

    fn arm_retry(&mut self, ctx: &Ctx, m: MsgId, fx: &mut Effects) {
        if self.retry_armed.insert(m) {
            fx.timers.push((ctx.params.retry, Timer::Retry(m)));
        }
    }

    pub fn on_multicast(&mut self, ctx: &Ctx, from: ProcessId, m: AppMessage, fx: &mut Effects) {
        if self.status != Status::Leader {
            if from != self.id && self.status == Status::Follower {
                if let Some(leader) = self.cballot.leader() {
                    fx.send(from, Message::Redirect { group: self.group, leader, ballot: self.cballot });
                }
            }
            return;
        }
        if !self.entries.contains_key(&m.id) {
            self.clock += 1;
            let lts = Timestamp::new(self.clock, self.group);
            self.entries.insert(m.id, Entry { msg: m.clone(), phase: Phase::Proposed, lts, gts: Timestamp::Bottom });
            self.arm_retry(ctx, m.id, fx);
        }
        let e = &self.entries[&m.id];
        let out = Message::Accept { msg: m.clone(), group: self.group, ballot: self.cballot, lts: e.lts };
        let done = e.phase == Phase::Committed && self.delivered.contains(&m.id);
        fx.send_all(ctx.dest_processes(&m), &out);
        if done && from == m.id.sender && ctx.topo.group_of(from) != Some(self.group) {
            fx.send(from, Message::Delivered { msg: m.id, group: self.group });
        }
    }

    pub fn on_accept(&mut self, ctx: &Ctx, m: AppMessage, g: GroupId, bal: Ballot, lts: Timestamp, fx: &mut Effects) {
        self.view.observe(g, bal);
        if g == self.group && bal < self.cballot {
            return;
        }
        let id = m.id;
        self.accepts.entry(id).or_insert_with(|| AcceptBuf { msg: m, by: BTreeMap::new() }).by.insert((g, bal), lts);
        self.try_accept(ctx, id, fx);
    }

    /// Acts on the buffered ACCEPTs for `m` once there is one from the own
    /// group in the current ballot and one from every other destination.
    fn try_accept(&mut self, ctx: &Ctx, m: MsgId, fx: &mut Effects) {
        if self.status == Status::Recovering {
            return;
        }
        let Some(buf) = self.accepts.get(&m) else { return };
        let Some(own) = buf.by.get(&(self.group, self.cballot)) else { return };
        let mut balvec = BalVec::new();
        let mut lts = BTreeMap::new();
        for g in &buf.msg.dest {
            let (b, t) = if *g == self.group {
                (self.cballot, *own)
            } else {
                match buf.latest(*g) {
                    Some(x) => x,
                    None => return,
                }
            };
            balvec.insert(*g, b);
            lts.insert(*g, t);
        }
        let msg = buf.msg.clone();
        let own = *own;
        let e = self.entries.entry(m).or_insert_with(|| Entry {
            msg,
            phase: Phase::Start,
            lts: own,
            gts: Timestamp::Bottom,
        });
        if e.phase < Phase::Accepted {
            e.phase = Phase::Accepted;
        }
        e.lts = own;
        if !ctx.params.mutation.skip_accept_clock_max {
            let max = merge_global(lts.values()).expect("one proposal per destination");
            self.clock = self.clock.max(max.time());
        }
        let out = Message::AcceptAck { msg: m, group: self.group, balvec: balvec.clone() };
        let leaders: BTreeSet<ProcessId> = balvec.values().filter_map(|b| b.leader()).collect();
        fx.send_all(leaders, &out);
    }

    pub fn on_accept_ack(
        &mut self,
        ctx: &Ctx,
        from: ProcessId,
        m: MsgId,
        g: GroupId,
        balvec: BalVec,
        fx: &mut Effects,
    ) {
        if balvec.get(&self.group) != Some(&self.cballot) {
            return;
        }
        self.acks.entry((m, balvec.clone())).or_default().entry(g).or_default().insert(from);
        self.try_commit(ctx, m, &balvec, fx);
    }

    fn try_commit(&mut self, ctx: &Ctx, m: MsgId, balvec: &BalVec, fx: &mut Effects) {
        if self.status != Status::Leader || balvec.get(&self.group) != Some(&self.cballot) {
            return;
        }
        let Some(e) = self.entries.get(&m) else { return };
        if e.phase == Phase::Committed || e.msg.dest.iter().ne(balvec.keys()) {
            return;
        }
        let Some(tally) = self.acks.get(&(m, balvec.clone())) else { return };
        let q = ctx.topo.quorum();
        let quorate = balvec.keys().all(|g| tally.get(g).is_some_and(|s| s.len() >= q));
        if !quorate || !tally[&self.group].contains(&self.id) {
            return;
        }
        let Some(buf) = self.accepts.get(&m) else { return };
        let mut lts = Vec::with_capacity(balvec.len());
        for (g, b) in balvec {
            match buf.by.get(&(*g, *b)) {
                Some(t) => lts.push(*t),
                None => return,
            }
        }
        let gts = merge_global(&lts).expect("non-empty destination");
        let e = self.entries.get_mut(&m).expect("checked above");
        e.phase = Phase::Committed;
        e.gts = gts;
        fx.notes.push(Note::Commit { msg: m, lts: e.lts, gts });
        self.acks.remove(&(m, balvec.clone()));
        self.deliver_ready(ctx, false, fx);
    }

    /// Sends DELIVER for every committed message no longer blocked. After
    /// recovery only accepted messages block, and messages already marked
    /// delivered are re-sent.
    fn deliver_ready(&mut self, ctx: &Ctx, after_recovery: bool, fx: &mut Effects) {
        let guard = !ctx.params.mutation.skip_delivery_guard;
        let ready = if after_recovery {
            deliverable(&self.entries, &self.delivered, false, |p| guard && p == Phase::Accepted)
        } else {
            deliverable(&self.entries, &self.delivered, true, |p| {
                guard && matches!(p, Phase::Proposed | Phase::Accepted)
            })
        };
        let members = ctx.members(self.group);
        for id in ready {
            self.delivered.insert(id);
            let e = &self.entries[&id];
            let out = Message::Deliver { msg: e.msg.clone(), ballot: self.cballot, lts: e.lts, gts: e.gts };
            fx.send_all(members.iter().copied(), &out);
            if !members.contains(&id.sender) {
                fx.send(id.sender, Message::Delivered { msg: id, group: self.group });
            }
        }
    }

    pub fn on_deliver(&mut self, m: AppMessage, b: Ballot, lts: Timestamp, gts: Timestamp, fx: &mut Effects) {
        if self.status == Status::Recovering || self.cballot != b || self.max_delivered_gts >= gts {
            return;
        }
        self.clock = self.clock.max(gts.time());
        self.max_delivered_gts = gts;
        let id = m.id;
        self.entries.insert(id, Entry { msg: m, phase: Phase::Committed, lts, gts });
        fx.notes.push(Note::Deliver { msg: id, gts });
        if id.sender == self.id {
            self.outbox.confirm(id, self.group);
        }
    }

    /// Re-multicasts a message stuck before commit. The first attempt goes to
    /// the presumed leaders; later ones to every member of the other
    /// destination groups, in case the presumed leader is gone.
    pub fn retry(&mut self, ctx: &Ctx, m: MsgId, fx: &mut Effects) {
        self.retry_armed.remove(&m);
        if self.status != Status::Leader {
            return;
        }
        let Some(e) = self.entries.get(&m) else { return };
        if !matches!(e.phase, Phase::Proposed | Phase::Accepted) {
            return;
        }
        let attempt = self.attempts.entry(m).or_default();
        *attempt += 1;
        // Three retry periods without a quorum of our own group behind us:
        // the group may have moved to a ballot we never heard of.
        let own_quorum = self
            .acks
            .range((m, BalVec::new())..)
            .take_while(|((id, _), _)| *id == m)
            .any(|(_, by)| by.get(&self.group).is_some_and(|s| s.len() >= ctx.topo.quorum()));
        if *attempt > 2 && !own_quorum && self.nominee.is_none_or(|n| n == self.id) {
            self.recover(ctx, fx);
            return;
        }
        let mut to: BTreeSet<ProcessId> = e.msg.dest.iter().filter_map(|g| self.view.leader(*g)).collect();
        if *attempt > 1 {
            to.extend(e.msg.dest.iter().filter(|g| **g != self.group).flat_map(|g| ctx.members(*g).iter().copied()));
        }
        to.insert(self.id);
        fx.send_all(to, &Message::Multicast { msg: e.msg.clone() });
        self.arm_retry(ctx, m, fx);
    }

    /// Proposes the smallest ballot owned by this process above every ballot
    /// it has joined or seen in its group.
    pub fn recover(&mut self, ctx: &Ctx, fx: &mut Effects) {
        let base = self.ballot.max(self.view.highest(self.group));
        let b = base.next_for(self.id);
        fx.send_all(ctx.members(self.group).iter().copied(), &Message::NewLeader { ballot: b });
        self.arm_watchdog(ctx, fx);
    }

    fn arm_watchdog(&mut self, ctx: &Ctx, fx: &mut Effects) {
        self.watchdogs += 1;
        fx.timers.push((ctx.params.recovery_timeout, Timer::RecoveryCheck));
    }

    pub fn on_newleader(&mut self, ctx: &Ctx, from: ProcessId, b: Ballot, fx: &mut Effects) {
        self.view.observe(self.group, b);
        if b <= self.ballot {
            return;
        }
        // Another process is taking over while the oracle still names us.
        if self.nominee == Some(self.id) && b.leader() != Some(self.id) {
            self.arm_watchdog(ctx, fx);
        }
        self.status = Status::Recovering;
        self.ballot = b;
        self.reports.clear();
        self.ns_acks.clear();
        fx.send(
            from,
            Message::NewLeaderAck {
                ballot: b,
                cballot: self.cballot,
                clock: self.clock,
                entries: self.entries.clone(),
            },
        );
    }

    fn is_candidate(&self, b: Ballot) -> bool {
        self.status == Status::Recovering && self.ballot == b && b.leader() == Some(self.id)
    }

    fn on_newleader_ack(&mut self, ctx: &Ctx, from: ProcessId, b: Ballot, report: Report, fx: &mut Effects) {
        if !self.is_candidate(b) || self.cballot == b {
            return;
        }
        self.reports.insert(from, report);
        if self.reports.len() < ctx.topo.quorum() {
            return;
        }
        let reports = std::mem::take(&mut self.reports);
        self.entries = merge_reports(&reports, ctx.params.mutation.recover_from_any_reporter);
        self.clock = reports.values().map(|r| r.clock).max().unwrap_or(0);
        self.delivered.clear();
        self.set_cballot(b);
        let out = Message::NewState { ballot: b, clock: self.clock, entries: self.entries.clone() };
        fx.send_all(ctx.members(self.group).iter().copied().filter(|p| *p != self.id), &out);
        if self.ns_acks.len() + 1 >= ctx.topo.quorum() {
            self.become_leader(ctx, fx);
        }
    }

    fn on_new_state(&mut self, ctx: &Ctx, from: ProcessId, b: Ballot, clock: u64, entries: Entries, fx: &mut Effects) {
        if self.status != Status::Recovering || self.ballot != b {
            return;
        }
        self.status = Status::Follower;
        self.clock = clock;
        self.entries = entries;
        self.set_cballot(b);
        fx.send(from, Message::NewStateAck { ballot: b });
        let buffered: Vec<MsgId> = self.accepts.keys().copied().collect();
        for m in buffered {
            self.try_accept(ctx, m, fx);
        }
    }

    fn on_newstate_ack(&mut self, ctx: &Ctx, from: ProcessId, b: Ballot, fx: &mut Effects) {
        if !self.is_candidate(b) || self.cballot != b {
            return;
        }
        self.ns_acks.insert(from);
        if self.ns_acks.len() + 1 >= ctx.topo.quorum() {
            self.become_leader(ctx, fx);
        }
    }

    fn set_cballot(&mut self, b: Ballot) {
        self.cballot = b;
        self.view.observe(self.group, b);
        self.acks.clear();
        let group = self.group;
        for buf in self.accepts.values_mut() {
            buf.by.retain(|(g, bal), _| *g != group || *bal >= b);
        }
    }

    fn become_leader(&mut self, ctx: &Ctx, fx: &mut Effects) {
        self.status = Status::Leader;
        self.ns_acks.clear();
        self.attempts.clear();
        self.deliver_ready(ctx, true, fx);
        let stuck: Vec<MsgId> = self
            .entries
            .iter()
            .filter(|(_, e)| matches!(e.phase, Phase::Proposed | Phase::Accepted))
            .map(|(id, _)| *id)
            .collect();
        for m in stuck {
            self.arm_retry(ctx, m, fx);
        }
    }
}

/// The state a new leader starts from: messages committed anywhere stay
/// committed; otherwise accepted entries survive only from the reporters with
/// the maximal cballot (or from anyone when `any_reporter`).
fn merge_reports(reports: &BTreeMap<ProcessId, Report>, any_reporter: bool) -> Entries {
    let top = reports.values().map(|r| r.cballot).max().unwrap_or_default();
    let ids: BTreeSet<MsgId> = reports.values().flat_map(|r| r.entries.keys().copied()).collect();
    let mut out = Entries::new();
    for id in ids {
        let committed = reports.values().filter_map(|r| r.entries.get(&id)).find(|e| e.phase == Phase::Committed);
        if let Some(e) = committed {
            out.insert(id, e.clone());
            continue;
        }
        let accepted = reports
            .values()
            .filter(|r| any_reporter || r.cballot == top)
            .filter_map(|r| r.entries.get(&id))
            .find(|e| e.phase == Phase::Accepted);
        if let Some(e) = accepted {
            out.insert(id, Entry { msg: e.msg.clone(), phase: Phase::Accepted, lts: e.lts, gts: Timestamp::Bottom });
        }
    }
    out
}
