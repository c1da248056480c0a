//! Scenario configuration: everything a simulation run depends on.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::workload::WorkloadSpec;
use crate::transport::adversary::AdversaryPolicy;
use crate::types::{quorum_size, QuorumError, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProtocolKind {
    #[serde(rename = "r-abd")]
    Abd,
    #[serde(rename = "r-raft")]
    Raft,
    #[serde(rename = "r-cr")]
    Chain,
    #[serde(rename = "r-allconcur")]
    AllConcur,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 4] = [
        ProtocolKind::Abd,
        ProtocolKind::Raft,
        ProtocolKind::Chain,
        ProtocolKind::AllConcur,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolKind::Abd => "r-abd",
            ProtocolKind::Raft => "r-raft",
            ProtocolKind::Chain => "r-cr",
            ProtocolKind::AllConcur => "r-allconcur",
        }
    }

    /// Whether committed writes form one global sequence (as opposed to
    /// independent per-key version histories).
    pub fn totally_ordered(self) -> bool {
        !matches!(self, ProtocolKind::Abd)
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "r-abd" | "abd" => Ok(ProtocolKind::Abd),
            "r-raft" | "raft" => Ok(ProtocolKind::Raft),
            "r-cr" | "cr" | "chain" => Ok(ProtocolKind::Chain),
            "r-allconcur" | "allconcur" => Ok(ProtocolKind::AllConcur),
            other => Err(ConfigError::UnknownProtocol(other.to_string())),
        }
    }
}

/// `Plain` runs the same protocol code with authentication switched off:
/// zero tags, no MAC checks. It is the unhardened reference used for
/// equivalence testing; sequence numbers are still enforced, as any
/// reliable FIFO transport would.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shielding {
    #[default]
    Shielded,
    Plain,
}

/// Protocol and transport timers, in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub rto: Tick,
    pub heartbeat: Tick,
    pub lease_duration: Tick,
    pub lease_slack: Tick,
    pub election_timeout: Tick,
    pub election_jitter: Tick,
    pub client_timeout: Tick,
    pub client_backoff: Tick,
    pub cas_fd_timeout: Tick,
    pub join_timeout: Tick,
}

impl Timing {
    pub fn from_delta(delta: Tick) -> Self {
        let d = delta.max(1);
        Self {
            rto: 2 * d + 2,
            heartbeat: 2 * d,
            lease_duration: 8 * d,
            lease_slack: d,
            election_timeout: 12 * d,
            election_jitter: 6 * d,
            client_timeout: 60 * d,
            client_backoff: 2 * d,
            cas_fd_timeout: 12 * d,
            join_timeout: 40 * d,
        }
    }
}

/// A machine asking to join mid-run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinSpec {
    pub at: Tick,
    /// Runs the expected replica code (its measurement is known to CAS).
    #[serde(default = "yes")]
    pub genuine: bool,
    /// Holds a hardware key registered with CAS.
    #[serde(default = "yes")]
    pub hw_key: bool,
    /// Id the machine claims for itself; only used to label rejections.
    #[serde(default)]
    pub claimed_id: Option<u32>,
    /// Crash the joiner at this tick.
    #[serde(default)]
    pub crash_at: Option<Tick>,
}

fn yes() -> bool {
    true
}

fn default_window() -> usize {
    32
}

fn default_budget() -> Tick {
    200_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub protocol: ProtocolKind,
    pub n: usize,
    pub f: usize,
    pub gst: Tick,
    pub delta: Tick,
    #[serde(default)]
    pub adversary: AdversaryPolicy,
    #[serde(default)]
    pub workload: WorkloadSpec,
    pub seed: u64,
    #[serde(default)]
    pub confidential: bool,
    #[serde(default = "default_budget")]
    pub tick_budget: Tick,
    /// Unacknowledged messages allowed in flight per channel.
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub timing: Option<Timing>,
    #[serde(default)]
    pub joins: Vec<JoinSpec>,
    #[serde(default)]
    pub shielding: Shielding,
    /// Let CAS remove members it stops hearing from. Defaults to on for
    /// chain replication only.
    #[serde(default)]
    pub cas_excise: Option<bool>,
    /// Record every frame put on the wire (for leak scans).
    #[serde(default)]
    pub capture_wire: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Quorum(#[from] QuorumError),
    #[error("delta must be at least 1 tick")]
    ZeroDelta,
    #[error("window must be at least 1")]
    ZeroWindow,
    #[error("unknown protocol {0:?}")]
    UnknownProtocol(String),
    #[error("invalid workload: {0}")]
    Workload(String),
}

impl ScenarioConfig {
    /// A benign three-node scenario.
    pub fn new(protocol: ProtocolKind, seed: u64) -> Self {
        Self {
            protocol,
            n: 3,
            f: 1,
            gst: 0,
            delta: 5,
            adversary: AdversaryPolicy::default(),
            workload: WorkloadSpec::default(),
            seed,
            confidential: false,
            tick_budget: default_budget(),
            window: default_window(),
            timing: None,
            joins: Vec::new(),
            shielding: Shielding::Shielded,
            cas_excise: None,
            capture_wire: false,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        quorum_size(self.n, self.f)?;
        if self.delta == 0 {
            return Err(ConfigError::ZeroDelta);
        }
        if self.window == 0 {
            return Err(ConfigError::ZeroWindow);
        }
        self.workload.validate().map_err(ConfigError::Workload)?;
        Ok(())
    }

    pub fn timing(&self) -> Timing {
        self.timing.unwrap_or_else(|| Timing::from_delta(self.delta))
    }

    pub fn excise_enabled(&self) -> bool {
        self.cas_excise
            .unwrap_or(self.protocol == ProtocolKind::Chain)
    }
}
