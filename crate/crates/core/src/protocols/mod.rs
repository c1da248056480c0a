//! Replication protocols running on top of the trusted core.
//!
//! A [`Replica`] bundles one node's trusted core, store and endpoint with a
//! protocol state machine. Everything security relevant (authentication,
//! freshness, client checks, leases) goes through the core; the protocol
//! code only ever sees verified [`Delivered`] payloads.

pub mod abd;
pub mod allconcur;
pub mod chain;
pub mod raft;

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ProtocolKind, Timing};
use crate::crypto;
use crate::kvstore::{LamportTs, Store, StoreError};
use crate::tcb::{Delivered, Status, TrustedCore};
use crate::trace::{EventKind, RejectReason, Trace};
use crate::transport::{Endpoint, EndpointError};
use crate::types::{
    membership_quorum, ClientId, ClientRequest, MsgKind, NodeId, SignedRequest, Tick, ViewId,
};
use crate::wire::{Reader, Writer};

/// Endpoint handler tag: membership traffic is handled by the replica
/// scaffolding, everything else by the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dispatch {
    Replica,
    Protocol,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClientError {
    NotLeader(Option<NodeId>),
    NotTail(Option<NodeId>),
    Duplicate,
    BadAuth,
    Unavailable,
    Recovering,
}

pub type Outcome = Result<Option<Vec<u8>>, ClientError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub client: ClientId,
    pub request_id: u64,
    pub outcome: Outcome,
    pub from: NodeId,
    /// Commit position the answer reflects, for protocols that expose one.
    pub index: u64,
}

/// Counters a protocol keeps about its own work.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProtoStats {
    /// Acknowledgements (including the coordinator's own) held when each
    /// write was declared committed.
    pub commit_acks: Vec<usize>,
    /// Broadcast rounds spent per completed client operation.
    pub rounds: Vec<(bool, u32)>,
}

/// Everything a protocol handler may touch besides its own state.
pub struct Ctx<'a> {
    pub now: Tick,
    pub me: NodeId,
    pub core: &'a mut TrustedCore,
    pub store: &'a mut Store,
    pub ep: &'a mut Endpoint<Dispatch>,
    pub trace: &'a mut Trace,
    pub members: &'a [NodeId],
    pub epoch: ViewId,
    pub replies: &'a mut Vec<Reply>,
    pub rng: &'a mut ChaCha8Rng,
    pub timing: Timing,
    pub f: usize,
}

impl Ctx<'_> {
    pub fn send(&mut self, to: NodeId, kind: MsgKind, payload: Vec<u8>) {
        if to == self.me {
            return;
        }
        // Backpressure and missing keys are transient from the protocol's
        // point of view; retries are driven by protocol timers.
        let _ = self
            .ep
            .send(self.core, self.trace, self.now, to, kind, payload);
    }

    pub fn broadcast(&mut self, kind: MsgKind, payload: Vec<u8>) {
        let peers: Vec<NodeId> = self.peers().collect();
        for p in peers {
            self.send(p, kind, payload.clone());
        }
    }

    pub fn peers(&self) -> impl Iterator<Item = NodeId> + '_ {
        let me = self.me;
        self.members.iter().copied().filter(move |m| *m != me)
    }

    pub fn quorum(&self) -> usize {
        membership_quorum(self.members.len(), self.f)
    }

    pub fn reply(&mut self, client: ClientId, request_id: u64, outcome: Outcome) {
        self.reply_at(client, request_id, outcome, 0);
    }

    pub fn reply_at(&mut self, client: ClientId, request_id: u64, outcome: Outcome, index: u64) {
        self.replies.push(Reply {
            client,
            request_id,
            outcome,
            from: self.me,
            index,
        });
    }

    pub fn reject(&mut self, reason: RejectReason) {
        self.trace.push(
            self.now,
            EventKind::Reject {
                node: self.me,
                reason,
            },
        );
    }

    /// Applies a write to the store and records the commit.
    pub fn apply(&mut self, client: ClientId, request: u64, key: &[u8], value: &[u8], ts: LamportTs, index: u64) {
        if let Err(e) = self.store.write(key, value, ts) {
            debug_assert!(matches!(e, StoreError::Full), "unexpected store error {e:?}");
        }
        self.trace.push(
            self.now,
            EventKind::Commit {
                node: self.me,
                client,
                request,
                key: key.to_vec(),
                digest: crypto::digest(value),
                index,
            },
        );
    }

    /// Integrity-checked local read; a tampered entry is reported and
    /// surfaces as unavailability.
    pub fn read_local(&mut self, key: &[u8]) -> Result<Option<(Vec<u8>, LamportTs)>, ClientError> {
        match self.store.get(key) {
            Ok(v) => Ok(Some(v)),
            Err(StoreError::NotFound) => Ok(None),
            Err(StoreError::IntegrityViolation) => {
                self.reject(RejectReason::IntegrityViolation);
                Err(ClientError::Unavailable)
            }
            Err(_) => Err(ClientError::Unavailable),
        }
    }

    pub fn view_change(&mut self, view: ViewId) {
        self.trace.push(self.now, EventKind::ViewChange { node: self.me, view });
    }
}

/// A replication protocol as a deterministic state machine.
pub trait Protocol: Send {
    fn kind(&self) -> ProtocolKind;

    /// Message kinds this protocol handles.
    fn kinds(&self) -> &'static [MsgKind];

    fn on_start(&mut self, _ctx: &mut Ctx<'_>) {}

    fn on_client(&mut self, ctx: &mut Ctx<'_>, req: ClientRequest);

    fn on_message(&mut self, ctx: &mut Ctx<'_>, msg: Delivered);

    fn on_tick(&mut self, ctx: &mut Ctx<'_>);

    /// Called after the network view changed (join or excision).
    fn on_membership(&mut self, _ctx: &mut Ctx<'_>, _old: &[NodeId]) {}

    /// Whether this node currently believes it holds an exclusive
    /// leadership lease.
    fn lease_claim(&self, _now: Tick, _core: &TrustedCore, _members: &[NodeId], _f: usize) -> bool {
        false
    }

    /// The node clients should talk to, as far as this replica knows.
    fn leader_hint(&self) -> Option<NodeId> {
        None
    }

    fn stats(&self) -> &ProtoStats;
}

pub fn new_protocol(kind: ProtocolKind, me: NodeId, members: &[NodeId], joining: bool) -> Box<dyn Protocol> {
    match kind {
        ProtocolKind::Abd => Box::new(abd::Abd::new(me, joining)),
        ProtocolKind::Raft => Box::new(raft::Raft::new(me, members, joining)),
        ProtocolKind::Chain => Box::new(chain::Chain::new(me, joining)),
        ProtocolKind::AllConcur => Box::new(allconcur::AllConcur::new(me, members)),
    }
}

/// One replica: trusted core, store, endpoint and protocol.
pub struct Replica {
    pub id: NodeId,
    pub core: TrustedCore,
    pub store: Store,
    pub ep: Endpoint<Dispatch>,
    pub proto: Box<dyn Protocol>,
    pub members: Vec<NodeId>,
    pub epoch: ViewId,
    pub timing: Timing,
    pub f: usize,
    rng: ChaCha8Rng,
    join_acks: BTreeMap<NodeId, BTreeSet<NodeId>>,
    /// Joins that gathered a quorum of acknowledgements, for CAS to commit.
    pub ready_joins: Vec<NodeId>,
}

impl std::fmt::Debug for Replica {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Replica")
            .field("id", &self.id)
            .field("status", &self.core.status())
            .field("members", &self.members)
            .field("epoch", &self.epoch)
            .finish()
    }
}

macro_rules! ctx {
    ($self:ident, $now:expr, $trace:expr, $replies:expr) => {
        Ctx {
            now: $now,
            me: $self.id,
            core: &mut $self.core,
            store: &mut $self.store,
            ep: &mut $self.ep,
            trace: $trace,
            members: &$self.members,
            epoch: $self.epoch,
            replies: $replies,
            rng: &mut $self.rng,
            timing: $self.timing,
            f: $self.f,
        }
    };
}

pub struct ReplicaParts {
    pub core: TrustedCore,
    pub store: Store,
    pub ep: Endpoint<Dispatch>,
    pub proto: Box<dyn Protocol>,
    pub members: Vec<NodeId>,
    pub epoch: ViewId,
    pub timing: Timing,
    pub f: usize,
    pub rng: ChaCha8Rng,
}

impl Replica {
    pub fn new(parts: ReplicaParts) -> Result<Self, EndpointError> {
        let ReplicaParts {
            core,
            store,
            mut ep,
            proto,
            members,
            epoch,
            timing,
            f,
            rng,
        } = parts;
        ep.reg_hdlr(MsgKind::JOIN_NOTICE, Dispatch::Replica)?;
        ep.reg_hdlr(MsgKind::JOIN_ACK, Dispatch::Replica)?;
        for &k in proto.kinds() {
            ep.reg_hdlr(k, Dispatch::Protocol)?;
        }
        Ok(Self {
            id: core.node_id(),
            core,
            store,
            ep,
            proto,
            members,
            epoch,
            timing,
            f,
            rng,
            join_acks: BTreeMap::new(),
            ready_joins: Vec::new(),
        })
    }

    pub fn status(&self) -> Status {
        self.core.status()
    }

    pub fn start(&mut self, now: Tick, trace: &mut Trace, replies: &mut Vec<Reply>) {
        let mut ctx = ctx!(self, now, trace, replies);
        self.proto.on_start(&mut ctx);
    }

    /// Drains the RX ring and runs the handlers of accepted messages.
    pub fn receive(&mut self, now: Tick, trace: &mut Trace, replies: &mut Vec<Reply>) {
        let accepted = self.ep.poll(&mut self.core, trace, now);
        for (h, d) in accepted {
            if self.core.status() == Status::Halted {
                break;
            }
            match h {
                Dispatch::Replica => self.on_membership_msg(now, trace, d),
                Dispatch::Protocol => {
                    let mut ctx = ctx!(self, now, trace, replies);
                    self.proto.on_message(&mut ctx, d);
                }
            }
        }
    }

    pub fn tick(&mut self, now: Tick, trace: &mut Trace, replies: &mut Vec<Reply>) {
        if self.core.status() != Status::Halted {
            let mut ctx = ctx!(self, now, trace, replies);
            self.proto.on_tick(&mut ctx);
        }
        self.ep.retransmit(now);
    }

    /// Entry point for client traffic (a direct link, not the replica
    /// network).
    pub fn on_client(&mut self, now: Tick, trace: &mut Trace, replies: &mut Vec<Reply>, signed: SignedRequest) {
        let req = &signed.request;
        let (client, rid) = (req.client_id, req.request_id);
        if !self.core.verify_client(&signed) || req.validate().is_err() {
            trace.push(
                now,
                EventKind::Reject {
                    node: self.id,
                    reason: RejectReason::BadAuth,
                },
            );
            replies.push(Reply {
                client,
                request_id: rid,
                outcome: Err(ClientError::BadAuth),
                from: self.id,
                index: 0,
            });
            return;
        }
        match self.core.status() {
            Status::Normal => {}
            Status::Halted => return,
            Status::Recovering | Status::ViewChange => {
                replies.push(Reply {
                    client,
                    request_id: rid,
                    outcome: Err(ClientError::Recovering),
                    from: self.id,
                    index: 0,
                });
                return;
            }
        }
        let mut ctx = ctx!(self, now, trace, replies);
        self.proto.on_client(&mut ctx, signed.request);
    }

    /// Installs a membership update pushed by CAS.
    pub fn install_membership(
        &mut self,
        now: Tick,
        trace: &mut Trace,
        replies: &mut Vec<Reply>,
        epoch: ViewId,
        members: Vec<NodeId>,
    ) {
        if epoch <= self.epoch && self.core.view() >= epoch {
            return;
        }
        if !members.contains(&self.id) {
            self.core.set_status(Status::Halted);
            self.members = members;
            self.epoch = epoch;
            return;
        }
        if self
            .ep
            .install_view(&mut self.core, trace, now, epoch, &members)
            .is_err()
        {
            return;
        }
        for gone in self.members.iter().filter(|m| !members.contains(m)) {
            self.ep.drop_peer(*gone);
        }
        let old = std::mem::replace(&mut self.members, members);
        self.epoch = epoch;
        self.join_acks.retain(|j, _| !self.members.contains(j));
        let mut ctx = ctx!(self, now, trace, replies);
        self.proto.on_membership(&mut ctx, &old);
    }

    /// Designated-node side of a join: tell the other members about the
    /// attested newcomer and collect their acknowledgements.
    pub fn begin_join(&mut self, now: Tick, trace: &mut Trace, joiner: NodeId) {
        let mut w = Writer::new();
        w.u32(joiner.0);
        let payload = w.finish();
        self.join_acks.entry(joiner).or_default().insert(self.id);
        let peers: Vec<NodeId> = self.members.iter().copied().filter(|m| *m != self.id).collect();
        for p in peers {
            let _ = self
                .ep
                .send(&mut self.core, trace, now, p, MsgKind::JOIN_NOTICE, payload.clone());
        }
        self.check_join(joiner);
    }

    pub fn abort_join(&mut self, joiner: NodeId) {
        self.join_acks.remove(&joiner);
    }

    fn check_join(&mut self, joiner: NodeId) {
        let q = membership_quorum(self.members.len(), self.f);
        if self.join_acks.get(&joiner).is_some_and(|s| s.len() >= q) {
            self.join_acks.remove(&joiner);
            self.ready_joins.push(joiner);
        }
    }

    fn on_membership_msg(&mut self, now: Tick, trace: &mut Trace, d: Delivered) {
        let mut r = Reader::new(&d.payload);
        let Ok(joiner) = r.u32().map(NodeId) else {
            trace.push(now, EventKind::Reject { node: self.id, reason: RejectReason::Malformed });
            return;
        };
        match d.kind {
            MsgKind::JOIN_NOTICE => {
                // Acknowledge only newcomers this core was provisioned to
                // talk to, i.e. ones CAS attested.
                if self.core.has_key(&crate::types::ChannelId::new(self.id, joiner)) {
                    let mut w = Writer::new();
                    w.u32(joiner.0);
                    let _ = self
                        .ep
                        .respond(&mut self.core, trace, now, &d, MsgKind::JOIN_ACK, w.finish());
                }
            }
            MsgKind::JOIN_ACK => {
                if let Some(s) = self.join_acks.get_mut(&joiner) {
                    s.insert(d.from);
                    self.check_join(joiner);
                }
            }
            _ => {}
        }
    }

    pub fn lease_claim(&self, now: Tick) -> bool {
        self.core.status() == Status::Normal
            && self.proto.lease_claim(now, &self.core, &self.members, self.f)
    }
}

// Shared payload pieces.

pub(crate) fn write_op_fields(w: &mut Writer, client: ClientId, rid: u64, key: &[u8], value: &[u8]) {
    w.u32(client.0).u64(rid).bytes(key).bytes(value);
}

pub(crate) fn read_op_fields(r: &mut Reader<'_>) -> Result<(ClientId, u64, Vec<u8>, Vec<u8>), crate::wire::DecodeError> {
    Ok((ClientId(r.u32()?), r.u64()?, r.bytes()?, r.bytes()?))
}

/// Last completed request per client, with its result, so that retries of
/// an already executed request are answered instead of re-executed.
#[derive(Debug, Clone, Default)]
pub struct ReplyCache {
    last: BTreeMap<ClientId, (u64, Option<Vec<u8>>)>,
}

pub enum CacheHit {
    Miss,
    Answer(Option<Vec<u8>>),
    Stale,
}

impl ReplyCache {
    pub fn record(&mut self, c: ClientId, rid: u64, result: Option<Vec<u8>>) {
        let e = self.last.entry(c).or_insert((0, None));
        if rid >= e.0 {
            *e = (rid, result);
        }
    }

    pub fn lookup(&self, c: ClientId, rid: u64) -> CacheHit {
        match self.last.get(&c) {
            Some((r, v)) if *r == rid => CacheHit::Answer(v.clone()),
            Some((r, _)) if *r > rid => CacheHit::Stale,
            _ => CacheHit::Miss,
        }
    }

    pub fn applied(&self, c: ClientId) -> u64 {
        self.last.get(&c).map_or(0, |e| e.0)
    }

    pub fn table(&self) -> BTreeMap<ClientId, u64> {
        self.last.iter().map(|(c, (r, _))| (*c, *r)).collect()
    }
}
