//! Replication protocols hardened by a small trusted core.
//!
//! Each replica runs its protocol logic on top of a [`tcb::TrustedCore`]
//! that authenticates, orders and deduplicates every message, an
//! attestation service ([`attestation::CasState`]) that admits only
//! measured code, and an integrity-checked key-value store. The [`sim`]
//! module drives whole clusters deterministically and [`tracecheck`]
//! verifies what they did.

pub mod attestation;
pub mod config;
pub mod crypto;
pub mod harness;
pub mod kvstore;
pub mod protocols;
pub mod sim;
pub mod tcb;
pub mod trace;
pub mod tracecheck;
pub mod transport;
pub mod types;
pub mod wire;

pub use config::{ConfigError, JoinSpec, ProtocolKind, ScenarioConfig, Shielding, Timing};
pub use harness::workload::{KeyDistribution, WorkloadSpec};
pub use harness::{MatrixSpec, RunReport, TransportKind};
pub use protocols::{ClientError, Outcome};
pub use sim::{Sim, SimError, SimOutput};
pub use trace::{EventKind, RejectReason, Trace, TraceEvent};
pub use tracecheck::{HistoryOp, OpKind, Property, Violation};
pub use transport::{AdversaryPolicy, FaultParams};
pub use types::{ClientId, NodeId, Op, Tick};
