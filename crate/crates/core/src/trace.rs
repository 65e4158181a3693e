//! The event log of a run, as produced by the simulator or by socket nodes.

use std::collections::HashSet;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::message::Message;
use crate::protocol::{Protocol, Snapshot, Timer};
use crate::time::Time;
use crate::types::{AppMessage, GroupId, MsgId, ProcessId, Timestamp, Topology};

pub const FORMAT: u32 = 1;

/// Run parameters the checker needs alongside the events.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub protocol: Protocol,
    pub topology: Topology,
    pub delta: Time,
    #[serde(default)]
    pub gst: Time,
    /// End of the observed run; absent for open-ended real-network runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<Time>,
    /// Time of the last scheduled multicast.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_workload: Option<Time>,
    #[serde(default)]
    pub snapshots: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum EventKind {
    Multicast { msg: AppMessage },
    Send { uid: u64, to: ProcessId, msg: Message },
    Receive { uid: u64, from: ProcessId, msg: Message },
    Deliver { msg: MsgId, gts: Timestamp },
    Commit { msg: MsgId, lts: Timestamp, gts: Timestamp },
    Clock { clock: u64 },
    Crash,
    Nominate { group: GroupId, nominee: ProcessId },
    Timer { timer: Timer },
    State { state: Box<Snapshot> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub time: Time,
    pub process: ProcessId,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    meta: Meta,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    pub meta: Meta,
    pub events: Vec<Event>,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("empty trace")]
    Empty,
    #[error("unsupported trace format {0}")]
    Format(u32),
    #[error("invalid topology: {0}")]
    Topology(#[from] crate::types::TopologyError),
}

impl Trace {
    /// One JSON object per line: a header carrying the metadata, then events.
    pub fn write_jsonl(&self, mut w: impl Write) -> io::Result<()> {
        let header = Header { format: FORMAT, meta: self.meta.clone() };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Trace, TraceError> {
        let mut lines = r.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
        let (_, first) = lines.next().ok_or(TraceError::Empty)?;
        let header: Header = serde_json::from_str(&first?).map_err(|source| TraceError::Json { line: 1, source })?;
        if header.format != FORMAT {
            return Err(TraceError::Format(header.format));
        }
        let mut meta = header.meta;
        meta.topology.validate()?;
        let mut events = Vec::new();
        for (i, line) in lines {
            let e = serde_json::from_str(&line?).map_err(|source| TraceError::Json { line: i + 1, source })?;
            events.push(e);
        }
        Ok(Trace { meta, events })
    }

    pub fn from_jsonl(s: &str) -> Result<Trace, TraceError> {
        Trace::read_jsonl(s.as_bytes())
    }

    /// Merges per-process logs into one trace ordered by time; each log's own
    /// order is kept for equal times. A receive is held back until its send
    /// has been placed, so skew between the logs' clocks cannot put an
    /// effect before its cause.
    pub fn merge(meta: Meta, logs: Vec<Vec<Event>>) -> Trace {
        let sent: HashSet<u64> = logs
            .iter()
            .flatten()
            .filter_map(|e| match e.kind {
                EventKind::Send { uid, .. } => Some(uid),
                _ => None,
            })
            .collect();
        let mut placed: HashSet<u64> = HashSet::new();
        let mut pos = vec![0; logs.len()];
        let mut events = Vec::with_capacity(logs.iter().map(Vec::len).sum());
        loop {
            // Ready heads first, then earliest time, then lowest log index.
            let best = (0..logs.len()).filter_map(|i| logs[i].get(pos[i]).map(|e| (i, e))).min_by_key(|(i, e)| {
                let waiting = match e.kind {
                    EventKind::Receive { uid, .. } => sent.contains(&uid) && !placed.contains(&uid),
                    _ => false,
                };
                (waiting, e.time, *i)
            });
            let Some((i, e)) = best else { break };
            if let EventKind::Send { uid, .. } = e.kind {
                placed.insert(uid);
            }
            events.push(e.clone());
            pos[i] += 1;
        }
        Trace { meta, events }
    }
}
