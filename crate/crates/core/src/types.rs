//! Identifiers, timestamps, ballots and application messages shared by all
//! protocols.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProcessId(pub u32);

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupId(pub u32);

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

impl fmt::Debug for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g{}", self.0)
    }
}

impl fmt::Debug for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for GroupId {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<GroupId, ParseError> {
        let digits = s.strip_prefix('g').unwrap_or(s);
        digits.parse().map(GroupId).map_err(|_| ParseError::new("group id", s))
    }
}

impl FromStr for ProcessId {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<ProcessId, ParseError> {
        let digits = s.strip_prefix('p').unwrap_or(s);
        digits.parse().map(ProcessId).map_err(|_| ParseError::new("process id", s))
    }
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("cannot parse {what} from {input:?}")]
pub struct ParseError {
    what: &'static str,
    input: String,
}

impl ParseError {
    fn new(what: &'static str, input: &str) -> ParseError {
        ParseError { what, input: input.to_string() }
    }
}

/// Identity of an application message: its sender plus a per-sender counter.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MsgId {
    pub sender: ProcessId,
    pub seq: u64,
}

impl MsgId {
    pub fn new(sender: ProcessId, seq: u64) -> MsgId {
        MsgId { sender, seq }
    }
}

impl fmt::Display for MsgId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.sender, self.seq)
    }
}

impl fmt::Debug for MsgId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for MsgId {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<MsgId, ParseError> {
        let (p, n) = s.split_once('#').ok_or_else(|| ParseError::new("message id", s))?;
        Ok(MsgId { sender: p.parse()?, seq: n.parse().map_err(|_| ParseError::new("message id", s))? })
    }
}

/// A logical timestamp `(time, group)`, or bottom. The derived order is the
/// lexicographic one with `Bottom` minimal.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum Timestamp {
    #[default]
    Bottom,
    At {
        time: u64,
        group: GroupId,
    },
}

impl Timestamp {
    pub fn new(time: u64, group: GroupId) -> Timestamp {
        Timestamp::At { time, group }
    }

    /// The clock component. Panics on bottom, which has no time.
    pub fn time(&self) -> u64 {
        match self {
            Timestamp::At { time, .. } => *time,
            Timestamp::Bottom => panic!("time() of the bottom timestamp is undefined"),
        }
    }

    pub fn is_bottom(&self) -> bool {
        matches!(self, Timestamp::Bottom)
    }
}

/// Strict lexicographic comparison with bottom minimal.
pub fn ts_less(a: Timestamp, b: Timestamp) -> bool {
    a < b
}

/// The global timestamp of a message: the maximum of its local timestamps.
///
/// Returns `None` when `lts` is empty or contains bottom.
pub fn merge_global<'a, I>(lts: I) -> Option<Timestamp>
where
    I: IntoIterator<Item = &'a Timestamp>,
{
    let mut best: Option<Timestamp> = None;
    for ts in lts {
        if ts.is_bottom() {
            return None;
        }
        best = Some(match best {
            Some(b) if b >= *ts => b,
            _ => *ts,
        });
    }
    best
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Timestamp::Bottom => f.write_str("⊥"),
            Timestamp::At { time, group } => write!(f, "({},{})", time, group),
        }
    }
}

impl fmt::Debug for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

fn parse_pair(s: &str) -> Option<(&str, &str)> {
    s.strip_prefix('(')?.strip_suffix(')')?.split_once(',')
}

impl FromStr for Timestamp {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Timestamp, ParseError> {
        if s == "⊥" {
            return Ok(Timestamp::Bottom);
        }
        let (t, g) = parse_pair(s).ok_or_else(|| ParseError::new("timestamp", s))?;
        Ok(Timestamp::At { time: t.parse().map_err(|_| ParseError::new("timestamp", s))?, group: g.parse()? })
    }
}

/// A leadership epoch `(round, owner)`, or bottom.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum Ballot {
    #[default]
    Bottom,
    At {
        round: u64,
        owner: ProcessId,
    },
}

impl Ballot {
    pub fn new(round: u64, owner: ProcessId) -> Ballot {
        Ballot::At { round, owner }
    }

    /// The process leading this ballot; `None` for bottom.
    pub fn leader(&self) -> Option<ProcessId> {
        match self {
            Ballot::At { owner, .. } => Some(*owner),
            Ballot::Bottom => None,
        }
    }

    pub fn round(&self) -> u64 {
        match self {
            Ballot::At { round, .. } => *round,
            Ballot::Bottom => 0,
        }
    }

    /// The smallest ballot owned by `owner` that is strictly greater than
    /// `self`. Rounds start at 1.
    pub fn next_for(&self, owner: ProcessId) -> Ballot {
        match *self {
            Ballot::Bottom => Ballot::new(1, owner),
            Ballot::At { round, owner: o } if owner > o => Ballot::new(round, owner),
            Ballot::At { round, .. } => Ballot::new(round + 1, owner),
        }
    }
}

impl fmt::Display for Ballot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ballot::Bottom => f.write_str("⊥"),
            Ballot::At { round, owner } => write!(f, "({},{})", round, owner),
        }
    }
}

impl fmt::Debug for Ballot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Ballot {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Ballot, ParseError> {
        if s == "⊥" {
            return Ok(Ballot::Bottom);
        }
        let (r, p) = parse_pair(s).ok_or_else(|| ParseError::new("ballot", s))?;
        Ok(Ballot::At { round: r.parse().map_err(|_| ParseError::new("ballot", s))?, owner: p.parse()? })
    }
}

macro_rules! string_serde {
    ($($ty:ty),*) => {$(
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<$ty, D::Error> {
                let s = String::deserialize(deserializer)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    )*};
}

string_serde!(MsgId, Timestamp, Ballot);

/// Identifiers serialize as bare numbers but also accept strings, which is
/// how JSON map keys arrive.
macro_rules! id_serde {
    ($($ty:ident),*) => {$(
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.serialize_u32(self.0)
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<$ty, D::Error> {
                struct V;
                impl serde::de::Visitor<'_> for V {
                    type Value = $ty;
                    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                        f.write_str("an identifier")
                    }
                    fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<$ty, E> {
                        u32::try_from(v).map($ty).map_err(E::custom)
                    }
                    fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<$ty, E> {
                        u32::try_from(v).map($ty).map_err(E::custom)
                    }
                    fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<$ty, E> {
                        v.parse().map_err(E::custom)
                    }
                }
                deserializer.deserialize_any(V)
            }
        }
    )*};
}

id_serde!(ProcessId, GroupId);

/// An application message and its destination groups.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct AppMessage {
    pub id: MsgId,
    pub dest: BTreeSet<GroupId>,
    #[serde(default)]
    pub payload: Vec<u8>,
}

impl AppMessage {
    pub fn new(id: MsgId, dest: impl IntoIterator<Item = GroupId>, payload: Vec<u8>) -> AppMessage {
        AppMessage { id, dest: dest.into_iter().collect(), payload }
    }
}

/// Per-message progress at a process. The order is the progress order.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    #[default]
    Start,
    Proposed,
    Accepted,
    Committed,
}

/// A process group.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct Group {
    pub id: GroupId,
    pub members: Vec<ProcessId>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopologyError {
    #[error("no groups configured")]
    NoGroups,
    #[error("group {group} has {size} members, expected 2f+1 = {expected}")]
    GroupSize { group: GroupId, size: usize, expected: usize },
    #[error("process {0} appears more than once")]
    DuplicateProcess(ProcessId),
    #[error("group id {0} appears more than once")]
    DuplicateGroup(GroupId),
}

/// Groups of `2f+1` processes plus optional client-only processes.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct Topology {
    pub f: usize,
    pub groups: Vec<Group>,
    #[serde(default)]
    pub clients: Vec<ProcessId>,
    #[serde(skip)]
    index: BTreeMap<ProcessId, GroupId>,
}

impl Topology {
    pub fn new(f: usize, groups: Vec<Vec<ProcessId>>, clients: Vec<ProcessId>) -> Result<Topology, TopologyError> {
        let groups =
            groups.into_iter().enumerate().map(|(i, members)| Group { id: GroupId(i as u32), members }).collect();
        Topology::from_groups(f, groups, clients)
    }

    pub fn from_groups(f: usize, groups: Vec<Group>, clients: Vec<ProcessId>) -> Result<Topology, TopologyError> {
        let mut t = Topology { f, groups, clients, index: BTreeMap::new() };
        t.validate()?;
        Ok(t)
    }

    /// `k` groups of `2f+1` processes numbered consecutively from `p0`,
    /// followed by `clients` client-only processes.
    pub fn uniform(k: usize, f: usize, clients: usize) -> Topology {
        let n = 2 * f + 1;
        let groups = (0..k).map(|g| (0..n).map(|i| ProcessId((g * n + i) as u32)).collect()).collect();
        let clients = (0..clients).map(|c| ProcessId((k * n + c) as u32)).collect();
        Topology::new(f, groups, clients).expect("uniform topology is valid")
    }

    /// Checks the group arithmetic and rebuilds the membership index. Call
    /// after deserializing.
    pub fn validate(&mut self) -> Result<(), TopologyError> {
        if self.groups.is_empty() {
            return Err(TopologyError::NoGroups);
        }
        let expected = 2 * self.f + 1;
        let mut index = BTreeMap::new();
        let mut seen_groups = BTreeSet::new();
        let mut seen = BTreeSet::new();
        for g in &self.groups {
            if !seen_groups.insert(g.id) {
                return Err(TopologyError::DuplicateGroup(g.id));
            }
            if g.members.len() != expected {
                return Err(TopologyError::GroupSize { group: g.id, size: g.members.len(), expected });
            }
            for p in &g.members {
                if !seen.insert(*p) {
                    return Err(TopologyError::DuplicateProcess(*p));
                }
                index.insert(*p, g.id);
            }
        }
        for c in &self.clients {
            if !seen.insert(*c) {
                return Err(TopologyError::DuplicateProcess(*c));
            }
        }
        self.index = index;
        Ok(())
    }

    pub fn quorum(&self) -> usize {
        self.f + 1
    }

    pub fn group_of(&self, p: ProcessId) -> Option<GroupId> {
        self.index.get(&p).copied()
    }

    pub fn members(&self, g: GroupId) -> &[ProcessId] {
        self.groups.iter().find(|x| x.id == g).map(|x| x.members.as_slice()).unwrap_or(&[])
    }

    pub fn group_ids(&self) -> impl Iterator<Item = GroupId> + '_ {
        self.groups.iter().map(|g| g.id)
    }

    /// Every process, group members first, then clients.
    pub fn processes(&self) -> impl Iterator<Item = ProcessId> + '_ {
        self.groups.iter().flat_map(|g| g.members.iter().copied()).chain(self.clients.iter().copied())
    }

    /// The lowest-id member of each group.
    pub fn initial_leaders(&self) -> BTreeMap<GroupId, ProcessId> {
        self.groups.iter().map(|g| (g.id, *g.members.iter().min().expect("groups are non-empty"))).collect()
    }

    /// True when `p` is the sender of `m` or a member of one of its
    /// destination groups.
    pub fn participates(&self, p: ProcessId, m: &AppMessage) -> bool {
        m.id.sender == p || self.group_of(p).is_some_and(|g| m.dest.contains(&g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(i: u32) -> GroupId {
        GroupId(i)
    }

    #[test]
    fn ts_less_examples() {
        assert!(ts_less(Timestamp::Bottom, Timestamp::new(0, g(0))));
        assert!(ts_less(Timestamp::new(1, g(2)), Timestamp::new(2, g(0))));
        assert!(ts_less(Timestamp::new(2, g(0)), Timestamp::new(2, g(1))));
        assert!(!ts_less(Timestamp::new(2, g(1)), Timestamp::new(2, g(1))));
    }

    #[test]
    fn merge_global_examples() {
        let a = [Timestamp::new(3, g(1)), Timestamp::new(5, g(2))];
        assert_eq!(merge_global(&a), Some(Timestamp::new(5, g(2))));
        assert_eq!(merge_global(&[Timestamp::new(4, g(1))]), Some(Timestamp::new(4, g(1))));
        let tie = [Timestamp::new(4, g(1)), Timestamp::new(4, g(2))];
        assert_eq!(merge_global(&tie), Some(Timestamp::new(4, g(2))));
        assert_eq!(merge_global(&[]), None);
        assert_eq!(merge_global(&[Timestamp::Bottom]), None);
    }

    #[test]
    #[should_panic]
    fn time_of_bottom_is_undefined() {
        Timestamp::Bottom.time();
    }

    #[test]
    fn next_ballot() {
        assert_eq!(Ballot::new(2, ProcessId(1)).next_for(ProcessId(0)), Ballot::new(3, ProcessId(0)));
        assert_eq!(Ballot::Bottom.next_for(ProcessId(0)), Ballot::new(1, ProcessId(0)));
        assert_eq!(Ballot::new(2, ProcessId(1)).next_for(ProcessId(2)), Ballot::new(2, ProcessId(2)));
        let mut b = Ballot::Bottom;
        for _ in 0..5 {
            let n = b.next_for(ProcessId(0));
            assert!(n > b);
            b = n;
        }
        assert_eq!(Ballot::new(1, ProcessId(4)).leader(), Some(ProcessId(4)));
        assert_eq!(Ballot::Bottom.leader(), None);
    }

    #[test]
    fn canonical_rendering_round_trips() {
        for ts in [Timestamp::Bottom, Timestamp::new(7, g(3))] {
            assert_eq!(ts.to_string().parse::<Timestamp>().unwrap(), ts);
        }
        assert_eq!(Timestamp::new(7, g(3)).to_string(), "(7,g3)");
        assert_eq!(Ballot::new(2, ProcessId(1)).to_string(), "(2,p1)");
        assert_eq!(Ballot::Bottom.to_string(), "⊥");
        let b: Ballot = "(2,p1)".parse().unwrap();
        assert_eq!(b, Ballot::new(2, ProcessId(1)));
        let id: MsgId = "p3#9".parse().unwrap();
        assert_eq!(id, MsgId::new(ProcessId(3), 9));
    }

    #[test]
    fn topology_arithmetic() {
        let t = Topology::uniform(2, 1, 1);
        assert_eq!(t.quorum(), 2);
        assert_eq!(t.group_of(ProcessId(4)), Some(g(1)));
        assert_eq!(t.group_of(ProcessId(6)), None);
        assert_eq!(t.processes().count(), 7);
        let bad = Topology::new(1, vec![vec![ProcessId(0), ProcessId(1)]], vec![]);
        assert!(matches!(bad, Err(TopologyError::GroupSize { .. })));
        let dup = Topology::new(0, vec![vec![ProcessId(0)], vec![ProcessId(0)]], vec![]);
        assert_eq!(dup, Err(TopologyError::DuplicateProcess(ProcessId(0))));
    }

    fn arb_ts() -> impl Strategy<Value = Timestamp> {
        prop_oneof![
            1 => Just(Timestamp::Bottom),
            8 => (0u64..6, 0u32..4).prop_map(|(t, gr)| Timestamp::new(t, GroupId(gr))),
        ]
    }

    fn arb_ballot() -> impl Strategy<Value = Ballot> {
        prop_oneof![
            1 => Just(Ballot::Bottom),
            8 => (0u64..6, 0u32..4).prop_map(|(r, p)| Ballot::new(r, ProcessId(p))),
        ]
    }

    fn lex_less(a: Timestamp, b: Timestamp) -> bool {
        match (a, b) {
            (Timestamp::Bottom, Timestamp::Bottom) => false,
            (Timestamp::Bottom, _) => true,
            (_, Timestamp::Bottom) => false,
            (Timestamp::At { time: t1, group: g1 }, Timestamp::At { time: t2, group: g2 }) => {
                t1 < t2 || (t1 == t2 && g1.0 < g2.0)
            }
        }
    }

    proptest! {
        #[test]
        fn ts_order_is_strict_total(a in arb_ts(), b in arb_ts(), c in arb_ts()) {
            prop_assert!(!ts_less(a, a));
            prop_assert_eq!(ts_less(a, b), lex_less(a, b));
            prop_assert!(a == b || ts_less(a, b) || ts_less(b, a));
            prop_assert!(!(ts_less(a, b) && ts_less(b, a)));
            if ts_less(a, b) && ts_less(b, c) {
                prop_assert!(ts_less(a, c));
            }
        }

        #[test]
        fn ballot_order_is_strict_total(a in arb_ballot(), b in arb_ballot(), c in arb_ballot()) {
            prop_assert!(!(a < a));
            prop_assert_eq!([a == b, a < b, b < a].iter().filter(|x| **x).count(), 1);
            if a < b && b < c {
                prop_assert!(a < c);
            }
            if let (Ballot::At { round: r1, owner: o1 }, Ballot::At { round: r2, owner: o2 }) = (a, b) {
                prop_assert_eq!(a < b, r1 < r2 || (r1 == r2 && o1 < o2));
            }
        }

        #[test]
        fn merge_global_is_a_member_and_an_upper_bound(
            s in proptest::collection::vec((0u64..8, 0u32..4), 1..6)
        ) {
            let v: Vec<Timestamp> = s.iter().map(|(t, gr)| Timestamp::new(*t, GroupId(*gr))).collect();
            let m = merge_global(&v).unwrap();
            prop_assert!(v.contains(&m));
            prop_assert!(v.iter().all(|x| !ts_less(m, *x)));
        }
    }
}
