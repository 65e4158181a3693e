//! One protocol process over TCP.
//!
//! Each inbound connection has a reader thread that decodes frames into a
//! queue; a single protocol thread drains the queue, runs the state machine
//! and writes to peers over its own outbound connections. Protocol messages
//! carry per-channel sequence numbers: the receiver processes them in order
//! exactly once and acknowledges cumulatively, and the sender retransmits
//! whatever is unacknowledged after a reconnect or a quiet spell.
//!
//! Group members heartbeat each other. A member silent for `election_ms` is
//! presumed crashed; when that is the current nominee, the lowest live
//! member is nominated locally, which is how leader selection is realized.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::io::{self, BufWriter, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{debug, info, warn};
use wbcast_core::message::Message;
use wbcast_core::protocol::{Ctx, Effects, Input, Note, Protocol, Replica, Timer};
use wbcast_core::time::Time;
use wbcast_core::trace::{Event, EventKind, Meta, Trace};
use wbcast_core::types::{AppMessage, GroupId, MsgId, ProcessId};

use crate::cluster::{ClusterSpec, SpecError};
use crate::frame::{read_frame, write_frame, Body, Envelope};

enum Cmd {
    Net(Envelope),
    Cast(AppMessage),
    Pending(Sender<usize>),
    Kill,
    Stop,
}

/// Trace metadata for node logs: times are in heartbeat units and the run
/// is open-ended.
pub fn trace_meta(spec: &ClusterSpec) -> Result<Meta, SpecError> {
    Ok(Meta {
        protocol: spec.protocol,
        topology: spec.validate()?,
        delta: Time::from_int(1),
        gst: Time::ZERO,
        horizon: None,
        last_workload: None,
        snapshots: false,
    })
}

/// A running node.
pub struct Node {
    pub id: ProcessId,
    tx: Sender<Cmd>,
    next_msg: AtomicU64,
    events: Arc<Mutex<Vec<Event>>>,
    main: Option<JoinHandle<()>>,
}

impl Node {
    /// Starts process `id` of `spec`, listening on `listener` or on its
    /// address from the spec. Events are kept in memory and, with `sink`,
    /// also written there as a JSONL trace as they happen.
    pub fn start(
        spec: &ClusterSpec,
        id: ProcessId,
        listener: Option<TcpListener>,
        sink: Option<Box<dyn Write + Send>>,
    ) -> Result<Node, NodeError> {
        let ctx = spec.ctx()?;
        if !ctx.topo.processes().any(|p| p == id) {
            return Err(NodeError::UnknownProcess(id));
        }
        let listener = match listener {
            Some(l) => l,
            None => {
                let addr = spec.addr(id).ok_or(NodeError::UnknownProcess(id))?;
                TcpListener::bind(addr).map_err(|e| NodeError::Bind(addr.to_string(), e))?
            }
        };
        let mut sink = sink.map(BufWriter::new);
        if let Some(w) = sink.as_mut() {
            Trace { meta: trace_meta(spec)?, events: vec![] }.write_jsonl(&mut *w)?;
            w.flush()?;
        }
        let (tx, rx) = mpsc::channel();
        let dead = Arc::new(AtomicBool::new(false));
        let inbound: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
        spawn_acceptor(listener, tx.clone(), dead.clone(), inbound.clone())?;
        let events: Arc<Mutex<Vec<Event>>> = Arc::default();
        let mut core = Core::new(spec, id, ctx, events.clone(), sink);
        let main = thread::Builder::new().name(format!("{id}")).spawn(move || {
            core.run(rx);
            dead.store(true, Ordering::SeqCst);
            for s in inbound.lock().expect("inbound list").drain(..) {
                let _ = s.shutdown(Shutdown::Both);
            }
        })?;
        info!("{id} started");
        Ok(Node { id, tx, next_msg: AtomicU64::new(0), events, main: Some(main) })
    }

    /// Multicasts a new message from this node.
    pub fn multicast(&self, dest: impl IntoIterator<Item = GroupId>, payload: Vec<u8>) -> MsgId {
        let id = MsgId::new(self.id, self.next_msg.fetch_add(1, Ordering::SeqCst));
        let _ = self.tx.send(Cmd::Cast(AppMessage::new(id, dest, payload)));
        id
    }

    /// How many of this node's multicasts await confirmation; `None` once
    /// the node has stopped.
    pub fn pending(&self) -> Option<usize> {
        let (tx, rx) = mpsc::channel();
        self.tx.send(Cmd::Pending(tx)).ok()?;
        rx.recv().ok()
    }

    pub fn events(&self) -> Vec<Event> {
        self.events.lock().expect("event log").clone()
    }

    /// Crashes the node: it stops at once and logs a crash event.
    pub fn kill(mut self) -> Vec<Event> {
        let _ = self.tx.send(Cmd::Kill);
        self.join()
    }

    /// Stops the node without logging a crash.
    pub fn stop(mut self) -> Vec<Event> {
        let _ = self.tx.send(Cmd::Stop);
        self.join()
    }

    /// Runs until the node is killed from elsewhere, which for a standalone
    /// node means until the process is.
    pub fn wait(mut self) -> Vec<Event> {
        self.join()
    }

    fn join(&mut self) -> Vec<Event> {
        if let Some(h) = self.main.take() {
            let _ = h.join();
        }
        self.events()
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        if self.main.is_some() {
            let _ = self.tx.send(Cmd::Stop);
            self.join();
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("process {0} is not in the cluster spec")]
    UnknownProcess(ProcessId),
    #[error("binding {0}: {1}")]
    Bind(String, io::Error),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

fn spawn_acceptor(
    listener: TcpListener,
    tx: Sender<Cmd>,
    dead: Arc<AtomicBool>,
    inbound: Arc<Mutex<Vec<TcpStream>>>,
) -> io::Result<()> {
    listener.set_nonblocking(true)?;
    thread::Builder::new().name("accept".into()).spawn(move || {
        while !dead.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    debug!("connection from {peer}");
                    let _ = stream.set_nonblocking(false);
                    let _ = stream.set_nodelay(true);
                    if let Ok(s) = stream.try_clone() {
                        inbound.lock().expect("inbound list").push(s);
                    }
                    let tx = tx.clone();
                    let dead = dead.clone();
                    let _ = thread::Builder::new().name("read".into()).spawn(move || read_loop(stream, tx, dead));
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
                Err(e) => {
                    warn!("accept: {e}");
                    thread::sleep(Duration::from_millis(20));
                }
            }
        }
    })?;
    Ok(())
}

fn read_loop(mut stream: TcpStream, tx: Sender<Cmd>, dead: Arc<AtomicBool>) {
    loop {
        match read_frame(&mut stream) {
            Ok(env) => {
                if dead.load(Ordering::SeqCst) || tx.send(Cmd::Net(env)).is_err() {
                    return;
                }
            }
            Err(e) => {
                // A malformed frame poisons the connection; the sender
                // reconnects and retransmits.
                debug!("closing inbound connection: {e}");
                let _ = stream.shutdown(Shutdown::Both);
                return;
            }
        }
    }
}

/// Outbound side of one channel.
struct Peer {
    addr: String,
    conn: Option<TcpStream>,
    next_seq: u64,
    unacked: VecDeque<Envelope>,
    /// When the oldest unacknowledged message was last (re)sent.
    sent_at: Instant,
    retry_at: Instant,
    backoff: Duration,
}

struct Core {
    id: ProcessId,
    ctx: Ctx,
    replica: Replica,
    hb: Duration,
    election: Duration,
    started: Instant,
    epoch: SystemTime,
    unit_us: u64,
    peers: BTreeMap<ProcessId, Peer>,
    next_in: BTreeMap<ProcessId, u64>,
    heard: BTreeMap<ProcessId, Instant>,
    nominee: Option<ProcessId>,
    timers: BinaryHeap<Reverse<(Instant, u64, Timer)>>,
    timer_seq: u64,
    self_seq: u64,
    last_clock: u64,
    events: Arc<Mutex<Vec<Event>>>,
    sink: Option<BufWriter<Box<dyn Write + Send>>>,
}

impl Core {
    fn new(
        spec: &ClusterSpec,
        id: ProcessId,
        ctx: Ctx,
        events: Arc<Mutex<Vec<Event>>>,
        sink: Option<BufWriter<Box<dyn Write + Send>>>,
    ) -> Core {
        let now = Instant::now();
        let peers = ctx
            .topo
            .processes()
            .filter(|p| *p != id)
            .filter_map(|p| spec.addr(p).map(|a| (p, a.to_string())))
            .map(|(p, addr)| {
                let peer = Peer {
                    addr,
                    conn: None,
                    next_seq: 1,
                    unacked: VecDeque::new(),
                    sent_at: now,
                    retry_at: now,
                    backoff: Duration::from_millis(spec.heartbeat_ms),
                };
                (p, peer)
            })
            .collect();
        let nominee = ctx.topo.group_of(id).map(|g| ctx.leaders[&g]);
        Core {
            id,
            replica: Replica::new(id, &ctx),
            ctx,
            hb: Duration::from_millis(spec.heartbeat_ms),
            election: Duration::from_millis(spec.election_ms),
            started: now,
            epoch: UNIX_EPOCH + Duration::from_millis(spec.epoch_ms),
            unit_us: spec.heartbeat_ms * 1000,
            peers,
            next_in: BTreeMap::new(),
            heard: BTreeMap::new(),
            nominee,
            timers: BinaryHeap::new(),
            timer_seq: 0,
            self_seq: 0,
            last_clock: 0,
            events,
            sink,
        }
    }

    fn now(&self) -> Time {
        let us = SystemTime::now().duration_since(self.epoch).unwrap_or_default().as_micros() as u64;
        Time::new(us, self.unit_us)
    }

    fn log(&mut self, kind: EventKind) {
        let e = Event { time: self.now(), process: self.id, kind };
        if let Some(w) = self.sink.as_mut() {
            let ok = serde_json::to_writer(&mut *w, &e).is_ok() && w.write_all(b"\n").is_ok() && w.flush().is_ok();
            if !ok {
                warn!("{}: trace sink failed, continuing in memory only", self.id);
                self.sink = None;
            }
        }
        self.events.lock().expect("event log").push(e);
    }

    fn run(&mut self, rx: Receiver<Cmd>) {
        let mut next_tick = Instant::now();
        loop {
            let now = Instant::now();
            if now >= next_tick {
                self.tick(now);
                next_tick = now + self.hb;
            }
            while let Some(Reverse((at, _, timer))) = self.timers.peek().copied() {
                if at > Instant::now() {
                    break;
                }
                self.timers.pop();
                self.log(EventKind::Timer { timer });
                self.step(Input::Timer(timer));
            }
            let deadline = self.timers.peek().map_or(next_tick, |Reverse((at, _, _))| (*at).min(next_tick));
            let cmd = match rx.recv_timeout(deadline.saturating_duration_since(Instant::now())) {
                Ok(c) => c,
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => return,
            };
            match cmd {
                Cmd::Net(env) => self.on_frame(env),
                Cmd::Cast(m) => {
                    self.log(EventKind::Multicast { msg: m.clone() });
                    self.step(Input::Multicast(m));
                }
                Cmd::Pending(reply) => {
                    let _ = reply.send(self.pending());
                }
                Cmd::Kill => {
                    self.log(EventKind::Crash);
                    info!("{} killed", self.id);
                    self.close();
                    return;
                }
                Cmd::Stop => {
                    self.close();
                    return;
                }
            }
        }
    }

    fn pending(&self) -> usize {
        self.events
            .lock()
            .expect("event log")
            .iter()
            .filter_map(|e| match &e.kind {
                EventKind::Multicast { msg } => Some(msg.id),
                _ => None,
            })
            .filter(|m| self.replica.is_pending(*m))
            .count()
    }

    fn close(&mut self) {
        for p in self.peers.values_mut() {
            if let Some(c) = p.conn.take() {
                let _ = c.shutdown(Shutdown::Both);
            }
        }
    }

    fn uid(from: ProcessId, to: ProcessId, seq: u64) -> u64 {
        ((from.0 as u64) << 48) | ((to.0 as u64) << 32) | (seq & 0xffff_ffff)
    }

    fn on_frame(&mut self, env: Envelope) {
        if env.to != self.id {
            warn!("{}: frame addressed to {} dropped", self.id, env.to);
            return;
        }
        let from = env.from;
        self.heard.insert(from, Instant::now());
        match env.body {
            Body::Heartbeat => {}
            Body::Ack { upto } => {
                if let Some(p) = self.peers.get_mut(&from) {
                    let before = p.unacked.len();
                    while p.unacked.front().is_some_and(|e| e.seq < upto) {
                        p.unacked.pop_front();
                    }
                    if p.unacked.len() < before {
                        p.sent_at = Instant::now();
                    }
                }
            }
            Body::Protocol(msg) => {
                let expected = self.next_in.entry(from).or_insert(1);
                if env.seq == *expected {
                    *expected += 1;
                    self.log(EventKind::Receive { uid: Core::uid(from, self.id, env.seq), from, msg: msg.clone() });
                    self.step(Input::Receive { from, msg });
                }
                // Duplicates and out-of-order retransmissions are dropped;
                // the ack tells the sender where to resume.
                let upto = self.next_in[&from];
                self.transmit(from, Envelope { from: self.id, to: from, seq: 0, body: Body::Ack { upto } });
            }
        }
    }

    /// Runs `input`, then every message the process sends itself.
    fn step(&mut self, input: Input) {
        let mut local: VecDeque<(u64, Message)> = VecDeque::new();
        let mut input = Some(input);
        loop {
            let input = match input.take() {
                Some(i) => i,
                None => match local.pop_front() {
                    Some((uid, msg)) => {
                        self.log(EventKind::Receive { uid, from: self.id, msg: msg.clone() });
                        Input::Receive { from: self.id, msg }
                    }
                    None => return,
                },
            };
            let mut fx = Effects::default();
            self.replica.step(&self.ctx, input, &mut fx);
            for note in fx.notes.drain(..) {
                self.log(match note {
                    Note::Deliver { msg, gts } => EventKind::Deliver { msg, gts },
                    Note::Commit { msg, lts, gts } => EventKind::Commit { msg, lts, gts },
                });
            }
            let clock = self.replica.clock();
            if clock != self.last_clock {
                self.last_clock = clock;
                self.log(EventKind::Clock { clock });
            }
            for (after, timer) in fx.timers.drain(..) {
                let us = after.numer() * self.unit_us / after.denom();
                let at = Instant::now() + Duration::from_micros(us);
                self.timer_seq += 1;
                self.timers.push(Reverse((at, self.timer_seq, timer)));
            }
            for (to, msg) in fx.sends.drain(..) {
                if to == self.id {
                    self.self_seq += 1;
                    let uid = Core::uid(self.id, self.id, self.self_seq);
                    self.log(EventKind::Send { uid, to, msg: msg.clone() });
                    local.push_back((uid, msg));
                    continue;
                }
                let Some(peer) = self.peers.get_mut(&to) else {
                    warn!("{}: no address for {to}", self.id);
                    continue;
                };
                let seq = peer.next_seq;
                peer.next_seq += 1;
                if peer.unacked.is_empty() {
                    peer.sent_at = Instant::now();
                }
                let env = Envelope { from: self.id, to, seq, body: Body::Protocol(msg.clone()) };
                peer.unacked.push_back(env.clone());
                self.log(EventKind::Send { uid: Core::uid(self.id, to, seq), to, msg });
                self.transmit(to, env);
            }
        }
    }

    /// Writes `env` to `to`, connecting first if needed. A fresh connection
    /// first replays every unacknowledged message.
    fn transmit(&mut self, to: ProcessId, env: Envelope) {
        let Some(peer) = self.peers.get_mut(&to) else { return };
        if peer.conn.is_none() && !connect(peer) {
            return;
        }
        let conn = peer.conn.as_mut().expect("connected");
        if write_frame(conn, &env).is_err() {
            debug!("{}: lost connection to {to}", self.id);
            peer.conn = None;
        }
    }

    fn tick(&mut self, now: Instant) {
        // Heartbeats inside the group.
        if let Some(g) = self.ctx.topo.group_of(self.id) {
            let members: Vec<ProcessId> = self.ctx.members(g).iter().copied().filter(|p| *p != self.id).collect();
            for p in members {
                self.transmit(p, Envelope { from: self.id, to: p, seq: 0, body: Body::Heartbeat });
            }
            self.select_leader(g, now);
        }
        // Retransmit what has gone unacknowledged for a while.
        let quiet = self.hb * 4;
        let stale: Vec<ProcessId> = self
            .peers
            .iter()
            .filter(|(_, p)| !p.unacked.is_empty() && now.duration_since(p.sent_at) >= quiet)
            .map(|(id, _)| *id)
            .collect();
        for to in stale {
            let peer = self.peers.get_mut(&to).expect("listed peer");
            peer.sent_at = now;
            if peer.conn.is_some() {
                let backlog: Vec<Envelope> = peer.unacked.iter().cloned().collect();
                for env in backlog {
                    self.transmit(to, env);
                }
            } else {
                // A successful connect replays the backlog.
                connect(peer);
            }
        }
    }

    /// Keeps the nominee while it is heard from, otherwise nominates the
    /// lowest live member.
    fn select_leader(&mut self, g: GroupId, now: Instant) {
        if self.ctx.protocol != Protocol::Whitebox || now.duration_since(self.started) < self.election {
            return;
        }
        let alive =
            |p: &ProcessId| *p == self.id || self.heard.get(p).is_some_and(|t| now.duration_since(*t) < self.election);
        if self.nominee.is_some_and(|n| alive(&n)) {
            return;
        }
        let live: BTreeSet<ProcessId> = self.ctx.members(g).iter().copied().filter(alive).collect();
        let Some(&nominee) = live.first() else { return };
        info!("{}: nominating {nominee} for {g}", self.id);
        self.nominee = Some(nominee);
        self.log(EventKind::Nominate { group: g, nominee });
        self.step(Input::Nominate { group: g, nominee });
    }
}

/// Tries to connect, respecting the peer's backoff, and replays the
/// unacknowledged backlog on success.
fn connect(peer: &mut Peer) -> bool {
    let now = Instant::now();
    if now < peer.retry_at {
        return false;
    }
    let stream = peer
        .addr
        .to_socket_addrs()
        .ok()
        .and_then(|mut a| a.next())
        .and_then(|a| TcpStream::connect_timeout(&a, Duration::from_millis(250)).ok());
    let Some(mut stream) = stream else {
        peer.retry_at = now + peer.backoff;
        peer.backoff = (peer.backoff * 2).min(Duration::from_secs(1));
        return false;
    };
    let _ = stream.set_nodelay(true);
    let _ = stream.set_write_timeout(Some(Duration::from_secs(1)));
    for env in &peer.unacked {
        if write_frame(&mut stream, env).is_err() {
            peer.retry_at = now + peer.backoff;
            return false;
        }
    }
    peer.sent_at = now;
    peer.backoff = Duration::from_millis(10);
    peer.conn = Some(stream);
    true
}

/// Binds one loopback listener per process of `spec` on free ports and
/// rewrites the spec's addresses to match.
pub fn bind_loopback(spec: &mut ClusterSpec) -> io::Result<BTreeMap<ProcessId, TcpListener>> {
    let mut out = BTreeMap::new();
    let ids: Vec<ProcessId> =
        spec.groups.iter().flat_map(|g| g.members.keys().copied()).chain(spec.clients.keys().copied()).collect();
    for p in ids {
        let l = TcpListener::bind("127.0.0.1:0")?;
        let addr = l.local_addr()?.to_string();
        for g in &mut spec.groups {
            if let Some(a) = g.members.get_mut(&p) {
                *a = addr.clone();
            }
        }
        if let Some(a) = spec.clients.get_mut(&p) {
            *a = addr.clone();
        }
        out.insert(p, l);
    }
    Ok(out)
}
