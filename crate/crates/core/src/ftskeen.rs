//! Skeen's protocol with each group simulating one reliable process: the
//! static leader persists every local and global timestamp at a quorum of its
//! group before acting on it.

use std::collections::{BTreeMap, BTreeSet};

use crate::message::{Entries, Entry, Message};
use crate::protocol::{deliverable, Ctx, Effects, Input, LeaderView, Note, Outbox};
use crate::types::{merge_global, AppMessage, Ballot, GroupId, MsgId, Phase, ProcessId, Timestamp};

#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct FtsProcess {
    pub id: ProcessId,
    pub group: GroupId,
    pub leader: ProcessId,
    pub clock: u64,
    pub entries: Entries,
    pub delivered: BTreeSet<MsgId>,
    pub max_delivered_gts: Timestamp,
    lts_acks: BTreeMap<MsgId, BTreeSet<ProcessId>>,
    gts_acks: BTreeMap<MsgId, BTreeSet<ProcessId>>,
    proposed_out: BTreeSet<MsgId>,
    proposals: BTreeMap<MsgId, BTreeMap<GroupId, Timestamp>>,
    pending_gts: BTreeMap<MsgId, Timestamp>,
    view: LeaderView,
    outbox: Outbox,
}

impl FtsProcess {
    pub fn new(id: ProcessId, group: GroupId, ctx: &Ctx) -> FtsProcess {
        FtsProcess {
            id,
            group,
            leader: ctx.leaders[&group],
            clock: 0,
            entries: Entries::new(),
            delivered: BTreeSet::new(),
            max_delivered_gts: Timestamp::Bottom,
            lts_acks: BTreeMap::new(),
            gts_acks: BTreeMap::new(),
            proposed_out: BTreeSet::new(),
            proposals: BTreeMap::new(),
            pending_gts: BTreeMap::new(),
            view: LeaderView::new(&ctx.leaders),
            outbox: Outbox::default(),
        }
    }

    fn is_leader(&self) -> bool {
        self.id == self.leader
    }

    fn ballot(&self) -> Ballot {
        Ballot::new(1, self.leader)
    }

    pub fn step(&mut self, ctx: &Ctx, input: Input, fx: &mut Effects) {
        let (from, msg) = match input {
            Input::Multicast(m) => return self.outbox.start(ctx, &self.view, m, fx),
            Input::Receive { from, msg } => (from, msg),
            Input::Timer(_) | Input::Nominate { .. } => return,
        };
        match msg {
            Message::Multicast { msg } => self.on_multicast(ctx, msg, fx),
            Message::PersistLts { msg, lts } => {
                self.entries.entry(msg.id).or_insert(Entry {
                    msg: msg.clone(),
                    phase: Phase::Proposed,
                    lts,
                    gts: Timestamp::Bottom,
                });
                fx.send(from, Message::PersistLtsAck { msg: msg.id });
            }
            Message::PersistLtsAck { msg } => self.on_persist_lts_ack(ctx, from, msg, fx),
            Message::Propose { msg, group, lts } => self.on_propose(ctx, msg, group, lts, fx),
            Message::PersistGts { msg, gts } => {
                if let Some(e) = self.entries.get_mut(&msg) {
                    if e.phase != Phase::Committed {
                        e.gts = gts;
                    }
                }
                fx.send(from, Message::PersistGtsAck { msg });
            }
            Message::PersistGtsAck { msg } => self.on_persist_gts_ack(ctx, from, msg, fx),
            Message::Deliver { msg, ballot, lts, gts } if ballot == self.ballot() && self.max_delivered_gts < gts => {
                self.clock = self.clock.max(gts.time());
                self.max_delivered_gts = gts;
                self.entries.insert(msg.id, Entry { msg: msg.clone(), phase: Phase::Committed, lts, gts });
                fx.notes.push(Note::Deliver { msg: msg.id, gts });
            }
            _ => {}
        }
    }

    pub fn on_multicast(&mut self, ctx: &Ctx, m: AppMessage, fx: &mut Effects) {
        if !self.is_leader() {
            return;
        }
        let lts = match self.entries.get(&m.id) {
            Some(e) if e.phase == Phase::Committed => return,
            Some(e) => e.lts,
            None => {
                self.clock += 1;
                let lts = Timestamp::new(self.clock, self.group);
                self.entries
                    .insert(m.id, Entry { msg: m.clone(), phase: Phase::Proposed, lts, gts: Timestamp::Bottom });
                lts
            }
        };
        let out = Message::PersistLts { msg: m, lts };
        fx.send_all(ctx.members(self.group).iter().copied(), &out);
    }

    fn on_persist_lts_ack(&mut self, ctx: &Ctx, from: ProcessId, m: MsgId, fx: &mut Effects) {
        if !self.is_leader() || self.proposed_out.contains(&m) {
            return;
        }
        let acks = self.lts_acks.entry(m).or_default();
        acks.insert(from);
        if acks.len() < ctx.topo.quorum() {
            return;
        }
        self.lts_acks.remove(&m);
        self.proposed_out.insert(m);
        let e = &self.entries[&m];
        let out = Message::Propose { msg: e.msg.clone(), group: self.group, lts: e.lts };
        fx.send_all(e.msg.dest.iter().map(|g| ctx.leaders[g]), &out);
    }

    fn on_propose(&mut self, ctx: &Ctx, m: AppMessage, g: GroupId, lts: Timestamp, fx: &mut Effects) {
        if !self.is_leader() || self.pending_gts.contains_key(&m.id) {
            return;
        }
        if self.entries.get(&m.id).is_some_and(|e| e.phase == Phase::Committed) {
            return;
        }
        let got = self.proposals.entry(m.id).or_default();
        got.insert(g, lts);
        if !m.dest.iter().all(|d| got.contains_key(d)) {
            return;
        }
        let gts = merge_global(got.values()).expect("complete proposal set");
        self.proposals.remove(&m.id);
        self.pending_gts.insert(m.id, gts);
        let out = Message::PersistGts { msg: m.id, gts };
        fx.send_all(ctx.members(self.group).iter().copied(), &out);
    }

    fn on_persist_gts_ack(&mut self, ctx: &Ctx, from: ProcessId, m: MsgId, fx: &mut Effects) {
        if !self.is_leader() || !self.pending_gts.contains_key(&m) {
            return;
        }
        let acks = self.gts_acks.entry(m).or_default();
        acks.insert(from);
        if acks.len() < ctx.topo.quorum() {
            return;
        }
        self.gts_acks.remove(&m);
        let gts = self.pending_gts.remove(&m).expect("checked above");
        self.clock = self.clock.max(gts.time());
        let e = self.entries.get_mut(&m).expect("leader holds an entry for every proposal");
        e.phase = Phase::Committed;
        e.gts = gts;
        fx.notes.push(Note::Commit { msg: m, lts: e.lts, gts });
        let ready = deliverable(&self.entries, &self.delivered, true, |p| p == Phase::Proposed);
        for id in ready {
            self.delivered.insert(id);
            let e = &self.entries[&id];
            let out = Message::Deliver { msg: e.msg.clone(), ballot: self.ballot(), lts: e.lts, gts: e.gts };
            fx.send_all(ctx.members(self.group).iter().copied(), &out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Protocol;
    use crate::time::Time;
    use crate::types::Topology;

    fn ctx() -> Ctx {
        Ctx::new(Protocol::FtSkeen, Topology::uniform(2, 1, 1), Time::from_int(1))
    }

    fn msg(dest: &[u32]) -> AppMessage {
        AppMessage::new(MsgId::new(ProcessId(6), 0), dest.iter().map(|g| GroupId(*g)), vec![])
    }

    fn recv(p: &mut FtsProcess, ctx: &Ctx, from: u32, msg: Message) -> Effects {
        let mut fx = Effects::default();
        p.step(ctx, Input::Receive { from: ProcessId(from), msg }, &mut fx);
        fx
    }

    #[test]
    fn leader_persists_local_timestamp_before_proposing() {
        let ctx = ctx();
        let mut p = FtsProcess::new(ProcessId(0), GroupId(0), &ctx);
        let m = msg(&[0, 1]);
        let fx = recv(&mut p, &ctx, 6, Message::Multicast { msg: m.clone() });
        assert_eq!(fx.sends.len(), 3);
        assert!(matches!(&fx.sends[0].1, Message::PersistLts { lts, .. } if *lts == Timestamp::new(1, GroupId(0))));
        let fx = recv(&mut p, &ctx, 0, Message::PersistLtsAck { msg: m.id });
        assert!(fx.sends.is_empty());
        let fx = recv(&mut p, &ctx, 1, Message::PersistLtsAck { msg: m.id });
        let to: Vec<_> = fx.sends.iter().map(|(q, _)| *q).collect();
        assert_eq!(to, vec![ProcessId(0), ProcessId(3)]);
        // A third ack changes nothing.
        assert!(recv(&mut p, &ctx, 2, Message::PersistLtsAck { msg: m.id }).sends.is_empty());
    }

    #[test]
    fn clock_moves_only_at_gts_quorum() {
        let ctx = ctx();
        let mut p = FtsProcess::new(ProcessId(0), GroupId(0), &ctx);
        let m = msg(&[0, 1]);
        recv(&mut p, &ctx, 6, Message::Multicast { msg: m.clone() });
        recv(
            &mut p,
            &ctx,
            0,
            Message::Propose { msg: m.clone(), group: GroupId(0), lts: Timestamp::new(1, GroupId(0)) },
        );
        let fx = recv(
            &mut p,
            &ctx,
            3,
            Message::Propose { msg: m.clone(), group: GroupId(1), lts: Timestamp::new(2, GroupId(1)) },
        );
        assert!(matches!(&fx.sends[0].1, Message::PersistGts { gts, .. } if *gts == Timestamp::new(2, GroupId(1))));
        assert_eq!(p.clock, 1);
        recv(&mut p, &ctx, 0, Message::PersistGtsAck { msg: m.id });
        assert_eq!(p.clock, 1);
        let fx = recv(&mut p, &ctx, 1, Message::PersistGtsAck { msg: m.id });
        assert_eq!(p.clock, 2);
        assert!(fx.sends.iter().all(|(_, x)| matches!(x, Message::Deliver { .. })));
        assert_eq!(fx.sends.len(), 3);
    }

    #[test]
    fn duplicate_multicast_rebroadcasts() {
        let ctx = ctx();
        let mut p = FtsProcess::new(ProcessId(0), GroupId(0), &ctx);
        let m = msg(&[0]);
        let a = recv(&mut p, &ctx, 6, Message::Multicast { msg: m.clone() });
        let b = recv(&mut p, &ctx, 6, Message::Multicast { msg: m });
        assert_eq!(a.sends, b.sends);
        assert_eq!(p.clock, 1);
    }

    #[test]
    fn follower_ignores_multicast() {
        let ctx = ctx();
        let mut p = FtsProcess::new(ProcessId(1), GroupId(0), &ctx);
        let fx = recv(&mut p, &ctx, 6, Message::Multicast { msg: msg(&[0]) });
        assert!(fx.sends.is_empty());
        assert_eq!(p.clock, 0);
    }
}
