//! Wire messages exchanged by protocol processes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::types::{AppMessage, Ballot, GroupId, MsgId, Phase, ProcessId, Timestamp};

/// Ballot chosen by the leader of each destination group, keyed by group.
pub type BalVec = BTreeMap<GroupId, Ballot>;

/// One message's slot in a state transfer. Messages in phase `start` are
/// absent; `gts` is bottom unless the phase is committed.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct Entry {
    pub msg: AppMessage,
    pub phase: Phase,
    pub lts: Timestamp,
    #[serde(default)]
    pub gts: Timestamp,
}

pub type Entries = BTreeMap<MsgId, Entry>;

#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Message {
    #[serde(rename = "MULTICAST")]
    Multicast { msg: AppMessage },
    #[serde(rename = "ACCEPT")]
    Accept { msg: AppMessage, group: GroupId, ballot: Ballot, lts: Timestamp },
    #[serde(rename = "ACCEPT_ACK")]
    AcceptAck { msg: MsgId, group: GroupId, balvec: BalVec },
    #[serde(rename = "DELIVER")]
    Deliver { msg: AppMessage, ballot: Ballot, lts: Timestamp, gts: Timestamp },
    #[serde(rename = "NEWLEADER")]
    NewLeader { ballot: Ballot },
    #[serde(rename = "NEWLEADER_ACK")]
    NewLeaderAck { ballot: Ballot, cballot: Ballot, clock: u64, entries: Entries },
    #[serde(rename = "NEW_STATE")]
    NewState { ballot: Ballot, clock: u64, entries: Entries },
    #[serde(rename = "NEWSTATE_ACK")]
    NewStateAck { ballot: Ballot },
    #[serde(rename = "PROPOSE")]
    Propose { msg: AppMessage, group: GroupId, lts: Timestamp },
    /// Reply of a non-leader to a misdirected MULTICAST.
    #[serde(rename = "REDIRECT")]
    Redirect { group: GroupId, leader: ProcessId, ballot: Ballot },
    /// Tells the sender of `msg` that `group` has delivered it.
    #[serde(rename = "DELIVERED")]
    Delivered { msg: MsgId, group: GroupId },
    #[serde(rename = "PERSIST_LTS")]
    PersistLts { msg: AppMessage, lts: Timestamp },
    #[serde(rename = "PERSIST_LTS_ACK")]
    PersistLtsAck { msg: MsgId },
    #[serde(rename = "PERSIST_GTS")]
    PersistGts { msg: MsgId, gts: Timestamp },
    #[serde(rename = "PERSIST_GTS_ACK")]
    PersistGtsAck { msg: MsgId },
}

impl Message {
    pub fn tag(&self) -> &'static str {
        match self {
            Message::Multicast { .. } => "MULTICAST",
            Message::Accept { .. } => "ACCEPT",
            Message::AcceptAck { .. } => "ACCEPT_ACK",
            Message::Deliver { .. } => "DELIVER",
            Message::NewLeader { .. } => "NEWLEADER",
            Message::NewLeaderAck { .. } => "NEWLEADER_ACK",
            Message::NewState { .. } => "NEW_STATE",
            Message::NewStateAck { .. } => "NEWSTATE_ACK",
            Message::Propose { .. } => "PROPOSE",
            Message::Redirect { .. } => "REDIRECT",
            Message::Delivered { .. } => "DELIVERED",
            Message::PersistLts { .. } => "PERSIST_LTS",
            Message::PersistLtsAck { .. } => "PERSIST_LTS_ACK",
            Message::PersistGts { .. } => "PERSIST_GTS",
            Message::PersistGtsAck { .. } => "PERSIST_GTS_ACK",
        }
    }

    /// Every application message this protocol message carries information
    /// about. State transfers reference all their entries.
    pub fn references(&self) -> Vec<MsgId> {
        match self {
            Message::Multicast { msg }
            | Message::Accept { msg, .. }
            | Message::Deliver { msg, .. }
            | Message::Propose { msg, .. }
            | Message::PersistLts { msg, .. } => vec![msg.id],
            Message::AcceptAck { msg, .. }
            | Message::Delivered { msg, .. }
            | Message::PersistLtsAck { msg }
            | Message::PersistGts { msg, .. }
            | Message::PersistGtsAck { msg } => vec![*msg],
            Message::NewLeaderAck { entries, .. } | Message::NewState { entries, .. } => {
                entries.keys().copied().collect()
            }
            Message::NewLeader { .. } | Message::NewStateAck { .. } | Message::Redirect { .. } => Vec::new(),
        }
    }
}
