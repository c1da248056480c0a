//! Client-observed operation histories and lease claim records.

use serde::{Deserialize, Serialize};

use crate::types::{ClientId, NodeId, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Read,
    Write,
}

/// One client operation from invocation to response.
///
/// For writes `value` is the value written; for reads it is the value
/// returned (`None` for a key never written). `response` is `None` when
/// the client never got an answer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HistoryOp {
    pub client: ClientId,
    pub rid: u64,
    pub kind: OpKind,
    pub key: Vec<u8>,
    pub value: Option<Vec<u8>>,
    pub invoke: Tick,
    pub response: Option<Tick>,
    /// Replica that produced the response.
    pub served_by: Option<NodeId>,
}

impl HistoryOp {
    pub fn is_complete(&self) -> bool {
        self.response.is_some()
    }

    pub fn is_write(&self) -> bool {
        self.kind == OpKind::Write
    }
}

/// A node believed it held exclusive leadership during `[from, to]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LeaseClaim {
    pub node: NodeId,
    pub from: Tick,
    pub to: Tick,
}
