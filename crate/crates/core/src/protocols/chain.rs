//! Chain replication: writes enter at the head and flow down the chain,
//! the tail acknowledges back up, and reads are served by the tail alone.
//!
//! Chain order is the membership order. When CAS excises a node the
//! neighbours re-link and resend whatever the tail has not acknowledged.

use std::collections::BTreeMap;

use crate::config::ProtocolKind;
use crate::kvstore::{decode_snapshot, encode_snapshot, LamportTs};
use crate::tcb::{Dedupe, Delivered, Status};
use crate::trace::RejectReason;
use crate::types::{ClientId, ClientRequest, MsgKind, NodeId, Op};
use crate::wire::{DecodeError, Reader, Writer};

use super::{read_op_fields, write_op_fields, ClientError, Ctx, ProtoStats, Protocol};

const KINDS: &[MsgKind] = &[MsgKind::CHAIN_FORWARD, MsgKind::CHAIN_ACK, MsgKind::SNAPSHOT];

#[derive(Debug, Clone, PartialEq, Eq)]
struct Update {
    client: ClientId,
    rid: u64,
    key: Vec<u8>,
    value: Vec<u8>,
}

#[derive(Debug)]
pub struct Chain {
    me: NodeId,
    next_seq: u64,
    applied_seq: u64,
    acked: u64,
    /// Applied here, not yet acknowledged by the tail.
    pending: BTreeMap<u64, Update>,
    /// Arrived ahead of a gap.
    early: BTreeMap<u64, Update>,
    /// Latest applied request per client and the sequence number it got.
    last_seq: BTreeMap<ClientId, (u64, u64)>,
    waiting: BTreeMap<u64, (ClientId, u64)>,
    joining: bool,
    stats: ProtoStats,
}

fn position(members: &[NodeId], me: NodeId) -> Option<usize> {
    members.iter().position(|m| *m == me)
}

impl Chain {
    pub fn new(me: NodeId, joining: bool) -> Self {
        Self {
            me,
            next_seq: 1,
            applied_seq: 0,
            acked: 0,
            pending: BTreeMap::new(),
            early: BTreeMap::new(),
            last_seq: BTreeMap::new(),
            waiting: BTreeMap::new(),
            joining,
            stats: ProtoStats::default(),
        }
    }

    fn head(members: &[NodeId]) -> Option<NodeId> {
        members.first().copied()
    }

    fn tail(members: &[NodeId]) -> Option<NodeId> {
        members.last().copied()
    }

    fn successor(&self, members: &[NodeId]) -> Option<NodeId> {
        position(members, self.me).and_then(|i| members.get(i + 1).copied())
    }

    fn predecessor(&self, members: &[NodeId]) -> Option<NodeId> {
        position(members, self.me)
            .filter(|i| *i > 0)
            .map(|i| members[i - 1])
    }

    fn is_head(&self, members: &[NodeId]) -> bool {
        Self::head(members) == Some(self.me)
    }

    fn is_tail(&self, members: &[NodeId]) -> bool {
        Self::tail(members) == Some(self.me)
    }

    fn forward_payload(seq: u64, u: &Update) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(seq);
        write_op_fields(&mut w, u.client, u.rid, &u.key, &u.value);
        w.finish()
    }

    fn apply(&mut self, ctx: &mut Ctx<'_>, seq: u64, u: Update) {
        self.applied_seq = seq;
        let fresh = self.last_seq.get(&u.client).map_or(true, |(r, _)| *r < u.rid);
        if fresh {
            ctx.apply(u.client, u.rid, &u.key, &u.value, LamportTs::new(seq, NodeId(0)), seq);
            self.last_seq.insert(u.client, (u.rid, seq));
        }
        match self.successor(ctx.members) {
            Some(s) => {
                ctx.send(s, MsgKind::CHAIN_FORWARD, Self::forward_payload(seq, &u));
                self.pending.insert(seq, u);
            }
            None => self.on_acked(ctx, seq),
        }
    }

    fn drain_early(&mut self, ctx: &mut Ctx<'_>) {
        while let Some(u) = self.early.remove(&(self.applied_seq + 1)) {
            self.apply(ctx, self.applied_seq + 1, u);
        }
        self.early.retain(|s, _| *s > self.applied_seq);
    }

    fn send_ack(&self, ctx: &mut Ctx<'_>) {
        if let Some(p) = self.predecessor(ctx.members) {
            let mut w = Writer::new();
            w.u64(self.applied_seq);
            ctx.send(p, MsgKind::CHAIN_ACK, w.finish());
        }
    }

    /// Everything up to `upto` is stored at the tail.
    fn on_acked(&mut self, ctx: &mut Ctx<'_>, upto: u64) {
        if upto <= self.acked && self.pending.is_empty() {
            return;
        }
        self.acked = self.acked.max(upto);
        self.pending = self.pending.split_off(&(upto + 1));
        if self.is_head(ctx.members) {
            let done = self.waiting.split_off(&(upto + 1));
            let replies = std::mem::replace(&mut self.waiting, done);
            let hops = ctx.members.len().saturating_sub(1) as u32;
            for (_, (c, rid)) in replies {
                self.stats.commit_acks.push(ctx.members.len());
                self.stats.rounds.push((true, hops));
                ctx.reply(c, rid, Ok(None));
            }
        } else if self.is_tail(ctx.members) {
            self.send_ack(ctx);
        } else if let Some(p) = self.predecessor(ctx.members) {
            let mut w = Writer::new();
            w.u64(self.acked);
            ctx.send(p, MsgKind::CHAIN_ACK, w.finish());
        }
    }

    fn snapshot(&self, ctx: &mut Ctx<'_>) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.applied_seq);
        encode_snapshot(&ctx.store.export_snapshot().unwrap_or_default(), &mut w);
        w.u32(self.last_seq.len() as u32);
        for (c, (rid, seq)) in &self.last_seq {
            w.u32(c.0).u64(*rid).u64(*seq);
        }
        w.finish()
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, d: &Delivered) -> Result<(), DecodeError> {
        let mut r = Reader::new(&d.payload);
        match d.kind {
            MsgKind::CHAIN_FORWARD => {
                let seq = r.u64()?;
                let (client, rid, key, value) = read_op_fields(&mut r)?;
                r.finish()?;
                if self.predecessor(ctx.members) != Some(d.from) {
                    return Ok(());
                }
                let u = Update { client, rid, key, value };
                if self.joining {
                    self.early.insert(seq, u);
                } else if seq == self.applied_seq + 1 {
                    self.apply(ctx, seq, u);
                    self.drain_early(ctx);
                } else if seq > self.applied_seq {
                    self.early.insert(seq, u);
                } else if self.is_tail(ctx.members) {
                    self.send_ack(ctx);
                }
            }
            MsgKind::CHAIN_ACK => {
                let upto = r.u64()?;
                r.finish()?;
                if self.successor(ctx.members) == Some(d.from) {
                    self.on_acked(ctx, upto.min(self.applied_seq));
                }
            }
            MsgKind::SNAPSHOT => {
                let seq = r.u64()?;
                let records = decode_snapshot(&mut r)?;
                let mut table = BTreeMap::new();
                for _ in 0..r.u32()? {
                    table.insert(ClientId(r.u32()?), (r.u64()?, r.u64()?));
                }
                r.finish()?;
                if !self.joining {
                    return Ok(());
                }
                if ctx.store.import_snapshot(&records).is_err() {
                    ctx.reject(RejectReason::IntegrityViolation);
                    return Ok(());
                }
                self.applied_seq = seq;
                self.acked = seq;
                self.last_seq = table;
                self.joining = false;
                ctx.core.set_status(Status::Normal);
                self.drain_early(ctx);
                if self.is_tail(ctx.members) {
                    self.send_ack(ctx);
                }
            }
            _ => return Err(DecodeError::Invalid("kind")),
        }
        Ok(())
    }
}

impl Protocol for Chain {
    fn kind(&self) -> ProtocolKind {
        ProtocolKind::Chain
    }

    fn kinds(&self) -> &'static [MsgKind] {
        KINDS
    }

    fn on_client(&mut self, ctx: &mut Ctx<'_>, req: ClientRequest) {
        let (c, rid) = (req.client_id, req.request_id);
        match req.op {
            Op::Get { key } => {
                if !self.is_tail(ctx.members) {
                    ctx.reply(c, rid, Err(ClientError::NotTail(Self::tail(ctx.members))));
                    return;
                }
                let out = ctx.read_local(&key).map(|v| v.map(|(v, _)| v));
                self.stats.rounds.push((false, 0));
                ctx.reply(c, rid, out);
            }
            Op::Put { key, value } => {
                if !self.is_head(ctx.members) {
                    ctx.reply(c, rid, Err(ClientError::NotLeader(Self::head(ctx.members))));
                    return;
                }
                if ctx.core.dedupe_client(c, rid) == Dedupe::Duplicate {
                    match self.last_seq.get(&c) {
                        Some(&(r, seq)) if r == rid && seq <= self.acked => ctx.reply(c, rid, Ok(None)),
                        Some(&(r, seq)) if r == rid => {
                            self.waiting.insert(seq, (c, rid));
                        }
                        _ if self.waiting.values().any(|w| *w == (c, rid)) => {}
                        _ => ctx.reply(c, rid, Err(ClientError::Duplicate)),
                    }
                    return;
                }
                let seq = self.next_seq.max(self.applied_seq + 1);
                self.next_seq = seq + 1;
                self.waiting.insert(seq, (c, rid));
                self.apply(ctx, seq, Update { client: c, rid, key, value });
            }
        }
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_>, msg: Delivered) {
        if self.handle(ctx, &msg).is_err() {
            ctx.reject(RejectReason::Malformed);
        }
    }

    fn on_tick(&mut self, _ctx: &mut Ctx<'_>) {}

    fn on_membership(&mut self, ctx: &mut Ctx<'_>, old: &[NodeId]) {
        if self.joining {
            return;
        }
        let old_succ = position(old, self.me).and_then(|i| old.get(i + 1).copied());
        let old_pred = position(old, self.me).filter(|i| *i > 0).map(|i| old[i - 1]);
        let succ = self.successor(ctx.members);
        if self.is_head(ctx.members) && Self::head(old) != Some(self.me) {
            self.next_seq = self.applied_seq + 1;
            let table = self.last_seq.iter().map(|(c, (r, _))| (*c, *r)).collect();
            ctx.core.reset_client_table(table);
        }
        if succ != old_succ {
            if let Some(s) = succ {
                if !old.contains(&s) {
                    // A newcomer starts from our state, then gets the rest
                    // of the stream like any successor.
                    let snap = self.snapshot(ctx);
                    ctx.send(s, MsgKind::SNAPSHOT, snap);
                }
                let resend: Vec<(u64, Update)> =
                    self.pending.iter().map(|(s, u)| (*s, u.clone())).collect();
                for (seq, u) in resend {
                    ctx.send(s, MsgKind::CHAIN_FORWARD, Self::forward_payload(seq, &u));
                }
            } else {
                self.on_acked(ctx, self.applied_seq);
            }
        }
        if self.predecessor(ctx.members) != old_pred && self.is_tail(ctx.members) {
            self.send_ack(ctx);
        }
    }

    fn leader_hint(&self) -> Option<NodeId> {
        None
    }

    fn stats(&self) -> &ProtoStats {
        &self.stats
    }
}
