//! Identifiers, the shielded message envelope and its canonical encoding,
//! client requests and quorum arithmetic.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, Digest, Tag, MAC_LEN};
use crate::wire::{DecodeError, Reader, Writer};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

/// Monotonic epoch identifying the network-level configuration.
pub type ViewId = u64;
/// Per-channel trusted message counter.
pub type Counter = u64;
/// Logical simulation time.
pub type Tick = u64;

/// Directed communication endpoint between two nodes. `(a -> b)` and
/// `(b -> a)` are different channels with independent counters.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct ChannelId {
    pub sender: NodeId,
    pub receiver: NodeId,
    pub lane: u16,
}

impl ChannelId {
    pub fn new(sender: NodeId, receiver: NodeId) -> Self {
        Self {
            sender,
            receiver,
            lane: 0,
        }
    }

    pub fn with_lane(sender: NodeId, receiver: NodeId, lane: u16) -> Self {
        Self {
            sender,
            receiver,
            lane,
        }
    }

    pub fn reversed(self) -> Self {
        Self {
            sender: self.receiver,
            receiver: self.sender,
            lane: self.lane,
        }
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}#{}", self.sender, self.receiver, self.lane)
    }
}

/// `(view, cq, cnt)` stamped on every shielded message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SequenceTuple {
    pub view: ViewId,
    pub cq: ChannelId,
    pub cnt: Counter,
}

/// Message kind tag. Protocol kinds are plain constants so that unknown
/// tags survive decoding and are rejected at dispatch instead.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct MsgKind(pub u16);

impl MsgKind {
    /// Transport acknowledgement; unsequenced (cnt = 0), never dispatched.
    pub const ACK: MsgKind = MsgKind(1);
    pub const HEARTBEAT: MsgKind = MsgKind(2);
    pub const HEARTBEAT_ACK: MsgKind = MsgKind(3);

    pub const JOIN_NOTICE: MsgKind = MsgKind(10);
    pub const JOIN_ACK: MsgKind = MsgKind(11);
    pub const SNAPSHOT_REQUEST: MsgKind = MsgKind(12);
    pub const SNAPSHOT: MsgKind = MsgKind(13);

    pub const ABD_READ_TS: MsgKind = MsgKind(20);
    pub const ABD_TS_REPLY: MsgKind = MsgKind(21);
    pub const ABD_WRITE: MsgKind = MsgKind(22);
    pub const ABD_WRITE_ACK: MsgKind = MsgKind(23);
    pub const ABD_READ: MsgKind = MsgKind(24);
    pub const ABD_READ_REPLY: MsgKind = MsgKind(25);

    pub const RAFT_APPEND: MsgKind = MsgKind(30);
    pub const RAFT_APPEND_ACK: MsgKind = MsgKind(31);
    pub const RAFT_COMMIT: MsgKind = MsgKind(32);
    pub const RAFT_COMMIT_ACK: MsgKind = MsgKind(33);
    pub const RAFT_VOTE_REQUEST: MsgKind = MsgKind(34);
    pub const RAFT_VOTE: MsgKind = MsgKind(35);

    pub const CHAIN_FORWARD: MsgKind = MsgKind(40);
    pub const CHAIN_ACK: MsgKind = MsgKind(41);

    pub const AC_ROUND: MsgKind = MsgKind(50);
    pub const AC_SUSPECT: MsgKind = MsgKind(51);

    /// Free for tests and smoke checks.
    pub const PROBE: MsgKind = MsgKind(60);

    pub fn name(self) -> &'static str {
        match self {
            Self::ACK => "ack",
            Self::HEARTBEAT => "heartbeat",
            Self::HEARTBEAT_ACK => "heartbeat_ack",
            Self::JOIN_NOTICE => "join_notice",
            Self::JOIN_ACK => "join_ack",
            Self::SNAPSHOT_REQUEST => "snapshot_request",
            Self::SNAPSHOT => "snapshot",
            Self::ABD_READ_TS => "abd_read_ts",
            Self::ABD_TS_REPLY => "abd_ts_reply",
            Self::ABD_WRITE => "abd_write",
            Self::ABD_WRITE_ACK => "abd_write_ack",
            Self::ABD_READ => "abd_read",
            Self::ABD_READ_REPLY => "abd_read_reply",
            Self::RAFT_APPEND => "raft_append",
            Self::RAFT_APPEND_ACK => "raft_append_ack",
            Self::RAFT_COMMIT => "raft_commit",
            Self::RAFT_COMMIT_ACK => "raft_commit_ack",
            Self::RAFT_VOTE_REQUEST => "raft_vote_request",
            Self::RAFT_VOTE => "raft_vote",
            Self::CHAIN_FORWARD => "chain_forward",
            Self::CHAIN_ACK => "chain_ack",
            Self::AC_ROUND => "ac_round",
            Self::AC_SUSPECT => "ac_suspect",
            Self::PROBE => "probe",
            _ => "unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MessageMeta {
    pub tuple: SequenceTuple,
    pub sender: NodeId,
    pub receiver: NodeId,
    pub kind: MsgKind,
}

/// Authenticated network envelope.
///
/// Canonical layout (all integers little-endian):
///
/// ```text
/// view:u64 | cq.sender:u32 | cq.receiver:u32 | cq.lane:u16 | cnt:u64
/// | sender:u32 | receiver:u32 | kind:u16 | payload_len:u32 | payload | mac[32]
/// ```
///
/// The MAC covers every byte before it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ShieldedMessage {
    pub meta: MessageMeta,
    pub payload: Vec<u8>,
    pub mac: Tag,
}

/// Bytes preceding the payload.
pub const HEADER_LEN: usize = 8 + 4 + 4 + 2 + 8 + 4 + 4 + 2 + 4;
/// Meta portion of the header (everything except the payload length).
pub const META_LEN: usize = HEADER_LEN - 4;

impl MessageMeta {
    fn write(&self, w: &mut Writer) {
        let t = &self.tuple;
        w.u64(t.view)
            .u32(t.cq.sender.0)
            .u32(t.cq.receiver.0)
            .u16(t.cq.lane)
            .u64(t.cnt)
            .u32(self.sender.0)
            .u32(self.receiver.0)
            .u16(self.kind.0);
    }

    /// Canonical meta bytes; used as associated data when payloads are sealed.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(META_LEN);
        self.write(&mut w);
        w.finish()
    }
}

impl ShieldedMessage {
    fn write_body(meta: &MessageMeta, payload: &[u8], w: &mut Writer) {
        meta.write(w);
        w.bytes(payload);
    }

    /// Bytes the MAC is computed over.
    pub fn authenticated_bytes(meta: &MessageMeta, payload: &[u8]) -> Vec<u8> {
        let mut w = Writer::with_capacity(HEADER_LEN + payload.len());
        Self::write_body(meta, payload, &mut w);
        w.finish()
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + MAC_LEN
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(self.encoded_len());
        Self::write_body(&self.meta, &self.payload, &mut w);
        w.raw(&self.mac);
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let view = r.u64()?;
        let cq = ChannelId {
            sender: NodeId(r.u32()?),
            receiver: NodeId(r.u32()?),
            lane: r.u16()?,
        };
        let cnt = r.u64()?;
        let sender = NodeId(r.u32()?);
        let receiver = NodeId(r.u32()?);
        let kind = MsgKind(r.u16()?);
        let payload = r.bytes()?;
        let mac = r.array::<MAC_LEN>()?;
        r.finish()?;
        if sender != cq.sender || receiver != cq.receiver {
            return Err(DecodeError::Invalid("endpoint ids disagree with channel"));
        }
        if cnt == 0 && kind != MsgKind::ACK {
            return Err(DecodeError::Invalid("sequenced message with zero counter"));
        }
        Ok(Self {
            meta: MessageMeta {
                tuple: SequenceTuple { view, cq, cnt },
                sender,
                receiver,
                kind,
            },
            payload,
            mac,
        })
    }

    /// Message identity used by the trace: hash of the canonical encoding.
    pub fn digest(&self) -> Digest {
        crypto::digest(&self.encode())
    }

    pub fn channel(&self) -> ChannelId {
        self.meta.tuple.cq
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Put { key: Vec<u8>, value: Vec<u8> },
    Get { key: Vec<u8> },
}

impl Op {
    pub fn key(&self) -> &[u8] {
        match self {
            Op::Put { key, .. } | Op::Get { key } => key,
        }
    }

    pub fn is_write(&self) -> bool {
        matches!(self, Op::Put { .. })
    }

    pub fn write(&self, w: &mut Writer) {
        match self {
            Op::Put { key, value } => {
                w.u8(1).bytes(key).bytes(value);
            }
            Op::Get { key } => {
                w.u8(2).bytes(key);
            }
        }
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            1 => Ok(Op::Put {
                key: r.bytes()?,
                value: r.bytes()?,
            }),
            2 => Ok(Op::Get { key: r.bytes()? }),
            _ => Err(DecodeError::Invalid("op tag")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClientRequest {
    pub client_id: ClientId,
    pub request_id: u64,
    pub op: Op,
    pub known_view: ViewId,
    pub known_leader: Option<NodeId>,
    /// Highest commit position the client has already observed. Replicas
    /// that serve reads locally must have caught up to it.
    pub min_index: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RequestError {
    #[error("empty key")]
    EmptyKey,
    #[error("request id must be positive")]
    ZeroRequestId,
}

impl ClientRequest {
    pub fn validate(&self) -> Result<(), RequestError> {
        if self.op.key().is_empty() {
            return Err(RequestError::EmptyKey);
        }
        if self.request_id == 0 {
            return Err(RequestError::ZeroRequestId);
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.client_id.0).u64(self.request_id);
        self.op.write(&mut w);
        w.u64(self.known_view);
        match self.known_leader {
            Some(l) => w.u8(1).u32(l.0),
            None => w.u8(0),
        };
        w.u64(self.min_index);
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let client_id = ClientId(r.u32()?);
        let request_id = r.u64()?;
        let op = Op::read(&mut r)?;
        let known_view = r.u64()?;
        let known_leader = match r.u8()? {
            0 => None,
            1 => Some(NodeId(r.u32()?)),
            _ => return Err(DecodeError::Invalid("leader flag")),
        };
        let min_index = r.u64()?;
        r.finish()?;
        Ok(Self {
            client_id,
            request_id,
            op,
            known_view,
            known_leader,
            min_index,
        })
    }
}

/// A client request together with its client-key MAC.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedRequest {
    pub request: ClientRequest,
    pub mac: Tag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum QuorumError {
    #[error("{n} nodes cannot tolerate {f} faults (need n >= 2f+1)")]
    TooFewNodes { n: usize, f: usize },
}

/// Size of a quorum: `n - f`, defined only when `n >= 2f + 1`.
pub fn quorum_size(n: usize, f: usize) -> Result<usize, QuorumError> {
    if n < 2 * f + 1 {
        return Err(QuorumError::TooFewNodes { n, f });
    }
    Ok(n - f)
}

/// Quorum for a live membership that may have shrunk below `2f + 1` after
/// excisions: never smaller than a strict majority.
pub fn membership_quorum(members: usize, f: usize) -> usize {
    let majority = members / 2 + 1;
    members.saturating_sub(f).max(majority)
}
