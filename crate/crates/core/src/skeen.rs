//! Skeen's protocol for groups made of a single reliable process.

use std::collections::{BTreeMap, BTreeSet};

use crate::message::{Entries, Entry, Message};
use crate::protocol::{deliverable, Ctx, Effects, Input, LeaderView, Note, Outbox};
use crate::types::{merge_global, AppMessage, GroupId, MsgId, Phase, ProcessId, Timestamp};

#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct SkeenProcess {
    pub id: ProcessId,
    pub group: GroupId,
    pub clock: u64,
    pub entries: Entries,
    pub delivered: BTreeSet<MsgId>,
    proposals: BTreeMap<MsgId, BTreeMap<GroupId, Timestamp>>,
    view: LeaderView,
    outbox: Outbox,
}

impl SkeenProcess {
    pub fn new(id: ProcessId, group: GroupId, ctx: &Ctx) -> SkeenProcess {
        SkeenProcess {
            id,
            group,
            clock: 0,
            entries: Entries::new(),
            delivered: BTreeSet::new(),
            proposals: BTreeMap::new(),
            view: LeaderView::new(&ctx.leaders),
            outbox: Outbox::default(),
        }
    }

    pub fn step(&mut self, ctx: &Ctx, input: Input, fx: &mut Effects) {
        match input {
            Input::Multicast(m) => self.outbox.start(ctx, &self.view, m, fx),
            Input::Receive { msg: Message::Multicast { msg }, .. } => self.on_multicast(ctx, msg, fx),
            Input::Receive { msg: Message::Propose { msg, group, lts }, .. } => self.on_propose(msg, group, lts, fx),
            Input::Receive { .. } | Input::Timer(_) | Input::Nominate { .. } => {}
        }
    }

    pub fn on_multicast(&mut self, ctx: &Ctx, m: AppMessage, fx: &mut Effects) {
        // A repeated MULTICAST re-sends the stored proposal.
        let lts = match self.entries.get(&m.id) {
            Some(e) => e.lts,
            None => {
                self.clock += 1;
                let lts = Timestamp::new(self.clock, self.group);
                self.entries
                    .insert(m.id, Entry { msg: m.clone(), phase: Phase::Proposed, lts, gts: Timestamp::Bottom });
                lts
            }
        };
        let out = Message::Propose { msg: m.clone(), group: self.group, lts };
        fx.send_all(ctx.dest_processes(&m), &out);
    }

    pub fn on_propose(&mut self, m: AppMessage, g: GroupId, lts: Timestamp, fx: &mut Effects) {
        if self.entries.get(&m.id).is_some_and(|e| e.phase == Phase::Committed) {
            return;
        }
        let got = self.proposals.entry(m.id).or_default();
        got.insert(g, lts);
        if !m.dest.iter().all(|d| got.contains_key(d)) {
            return;
        }
        let got = self.proposals.remove(&m.id).unwrap_or_default();
        for id in self.propose_complete(&m, &got, fx) {
            let gts = self.entries[&id].gts;
            fx.notes.push(Note::Deliver { msg: id, gts });
        }
    }

    /// Commits `m` with the maximal proposal and returns the messages that
    /// become deliverable, marking them delivered.
    pub fn propose_complete(
        &mut self,
        m: &AppMessage,
        lts: &BTreeMap<GroupId, Timestamp>,
        fx: &mut Effects,
    ) -> Vec<MsgId> {
        let gts = merge_global(lts.values()).expect("one proposal per destination group");
        self.clock = self.clock.max(gts.time());
        let e = self.entries.entry(m.id).or_insert_with(|| Entry {
            msg: m.clone(),
            phase: Phase::Proposed,
            lts: lts[&self.group],
            gts: Timestamp::Bottom,
        });
        e.phase = Phase::Committed;
        e.gts = gts;
        fx.notes.push(Note::Commit { msg: m.id, lts: e.lts, gts });
        let ready = deliverable(&self.entries, &self.delivered, true, |p| p == Phase::Proposed);
        self.delivered.extend(ready.iter().copied());
        ready
    }
}
