//! The untrusted message plane.
//!
//! Replicas talk through [`Endpoint`]s, which own the TX/RX rings and the
//! per-channel retransmission state. Endpoints hand finished [`Frame`]s to a
//! [`Network`]: either the deterministic [`simnet::SimNet`] (with its
//! scriptable adversary) or a loopback TCP transport.

pub mod adversary;
pub mod endpoint;
pub mod simnet;
pub mod tcp;

use crate::types::{NodeId, Tick};

pub use adversary::{Action, AdversaryPolicy, FaultParams, ScriptedAction};
pub use endpoint::{Endpoint, EndpointConfig, EndpointError, EndpointStats, Nic};
pub use simnet::SimNet;
pub use tcp::TcpNet;

/// Raw bytes in transit between two nodes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    pub from: NodeId,
    pub to: NodeId,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetStats {
    pub frames_sent: u64,
    pub bytes_sent: u64,
    pub frames_delivered: u64,
    pub dropped: u64,
    pub tampered: u64,
    pub duplicated: u64,
    pub replayed: u64,
    pub forged: u64,
}

/// Something that moves frames between nodes.
pub trait Network {
    fn send(&mut self, now: Tick, frame: Frame);

    /// Frames due at or before `now`, in delivery order.
    fn deliver(&mut self, now: Tick) -> Vec<Frame>;

    /// Runs adversary actions scripted for `now`; returns nodes to crash.
    fn scripted(&mut self, _now: Tick) -> Vec<NodeId> {
        Vec::new()
    }

    fn stats(&self) -> NetStats;

    /// Number of frames still in transit.
    fn in_flight(&self) -> usize;

    /// Every frame put on the wire so far, if capture is enabled.
    fn captured_wire(&self) -> &[Vec<u8>] {
        &[]
    }

    /// Real-time pacing between ticks; the simulated network needs none.
    fn pace(&self) {}
}
