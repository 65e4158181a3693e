//! Cluster description shared by every node and client.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use wbcast_core::protocol::{Ctx, Params, Protocol};
use wbcast_core::time::Time;
use wbcast_core::types::{Group, GroupId, ProcessId, Topology, TopologyError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub id: GroupId,
    /// Member id to `host:port`.
    pub members: BTreeMap<ProcessId, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub protocol: Protocol,
    pub f: usize,
    pub groups: Vec<GroupSpec>,
    /// Client-only processes and their addresses.
    #[serde(default)]
    pub clients: BTreeMap<ProcessId, String>,
    /// Initial leader of each group; the lowest member id when absent.
    #[serde(default)]
    pub leaders: BTreeMap<GroupId, ProcessId>,
    /// Heartbeat period, and the unit trace times are expressed in.
    pub heartbeat_ms: u64,
    /// Leader-side retry period.
    pub retry_ms: u64,
    /// Sender-side retry period.
    pub client_retry_ms: u64,
    /// Silence after which a group member is presumed crashed, and how long
    /// a nominee waits for its recovery before trying again.
    pub election_ms: u64,
    /// Trace times count from this instant (milliseconds since the Unix epoch).
    #[serde(default)]
    pub epoch_ms: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum SpecError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing cluster spec: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("{0}")]
    Invalid(String),
}

impl ClusterSpec {
    pub fn load(path: &Path) -> Result<ClusterSpec, SpecError> {
        let text =
            fs::read_to_string(path).map_err(|source| SpecError::Io { path: path.display().to_string(), source })?;
        let spec: ClusterSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// `k` groups of `2f+1` nodes and `clients` clients on consecutive ports
    /// of `host`, numbered like `Topology::uniform`.
    pub fn local(protocol: Protocol, k: usize, f: usize, clients: usize, host: &str, base_port: u16) -> ClusterSpec {
        let topo = Topology::uniform(k, f, clients);
        let addr = |p: ProcessId| format!("{host}:{}", base_port + p.0 as u16);
        ClusterSpec {
            protocol,
            f,
            groups: topo
                .groups
                .iter()
                .map(|g| GroupSpec { id: g.id, members: g.members.iter().map(|p| (*p, addr(*p))).collect() })
                .collect(),
            clients: topo.clients.iter().map(|p| (*p, addr(*p))).collect(),
            leaders: BTreeMap::new(),
            heartbeat_ms: 20,
            retry_ms: 80,
            client_retry_ms: 160,
            election_ms: 200,
            epoch_ms: 0,
        }
    }

    pub fn topology(&self) -> Result<Topology, TopologyError> {
        let groups =
            self.groups.iter().map(|g| Group { id: g.id, members: g.members.keys().copied().collect() }).collect();
        Topology::from_groups(self.f, groups, self.clients.keys().copied().collect())
    }

    pub fn validate(&self) -> Result<Topology, SpecError> {
        let topo = self.topology()?;
        for (g, p) in &self.leaders {
            if topo.group_of(*p) != Some(*g) {
                return Err(SpecError::Invalid(format!("leader {p} of {g} is not a member of it")));
            }
        }
        let periods = [
            ("heartbeat_ms", self.heartbeat_ms),
            ("retry_ms", self.retry_ms),
            ("client_retry_ms", self.client_retry_ms),
        ];
        for (name, v) in periods {
            if v == 0 {
                return Err(SpecError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.election_ms <= 2 * self.heartbeat_ms {
            return Err(SpecError::Invalid("election_ms must exceed two heartbeats".into()));
        }
        Ok(topo)
    }

    pub fn addr(&self, p: ProcessId) -> Option<&str> {
        self.groups.iter().find_map(|g| g.members.get(&p)).or_else(|| self.clients.get(&p)).map(String::as_str)
    }

    /// `ms` in heartbeat units.
    pub fn in_units(&self, ms: u64) -> Time {
        Time::new(ms, self.heartbeat_ms)
    }

    pub fn ctx(&self) -> Result<Ctx, SpecError> {
        let topo = self.validate()?;
        let mut ctx = Ctx::new(self.protocol, topo, Time::from_int(1));
        ctx.leaders.extend(self.leaders.iter().map(|(g, p)| (*g, *p)));
        ctx.params = Params {
            retry: self.in_units(self.retry_ms),
            client_retry: self.in_units(self.client_retry_ms),
            recovery_timeout: self.in_units(self.election_ms),
            mutation: Default::default(),
        };
        Ok(ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_spec_matches_uniform_numbering() {
        let spec = ClusterSpec::local(Protocol::Whitebox, 2, 1, 1, "127.0.0.1", 7000);
        assert_eq!(spec.topology().unwrap(), Topology::uniform(2, 1, 1));
        assert_eq!(spec.addr(ProcessId(6)), Some("127.0.0.1:7006"));
        assert_eq!(spec.addr(ProcessId(7)), None);
        let ctx = spec.ctx().unwrap();
        assert_eq!(ctx.leaders[&GroupId(1)], ProcessId(3));
        assert_eq!(ctx.params.retry, Time::from_int(4));
    }

    #[test]
    fn json_round_trip_and_leader_override() {
        let mut spec = ClusterSpec::local(Protocol::Whitebox, 2, 1, 0, "localhost", 9000);
        spec.leaders.insert(GroupId(0), ProcessId(2));
        let back: ClusterSpec = serde_json::from_str(&serde_json::to_string_pretty(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.ctx().unwrap().leaders[&GroupId(0)], ProcessId(2));
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut spec = ClusterSpec::local(Protocol::Whitebox, 2, 1, 0, "localhost", 9000);
        spec.leaders.insert(GroupId(0), ProcessId(4));
        assert!(matches!(spec.validate(), Err(SpecError::Invalid(_))));
        let mut spec = ClusterSpec::local(Protocol::Whitebox, 2, 1, 0, "localhost", 9000);
        spec.groups[1].members.pop_first();
        assert!(matches!(spec.validate(), Err(SpecError::Topology(_))));
        let mut spec = ClusterSpec::local(Protocol::Whitebox, 1, 1, 0, "localhost", 9000);
        spec.election_ms = spec.heartbeat_ms;
        assert!(spec.validate().is_err());
    }
}
