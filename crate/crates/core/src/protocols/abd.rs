//! Multi-writer ABD register per key, with Lamport timestamps.
//!
//! Any replica coordinates. A write first collects timestamps from a quorum
//! and then stores `(max + 1, coordinator)` at a quorum. A read collects
//! `(ts, value)` from a quorum and returns at once when a quorum already
//! holds the newest timestamp; otherwise it writes that value back first.

use std::collections::{BTreeMap, BTreeSet};

use crate::config::ProtocolKind;
use crate::kvstore::{decode_snapshot, encode_snapshot, LamportTs};
use crate::tcb::{Dedupe, Delivered, Status};
use crate::trace::RejectReason;
use crate::types::{membership_quorum, ClientId, ClientRequest, MsgKind, NodeId, Op};
use crate::wire::{DecodeError, Reader, Writer};

use super::{CacheHit, ClientError, Ctx, ProtoStats, Protocol, ReplyCache};

const KINDS: &[MsgKind] = &[
    MsgKind::ABD_READ_TS,
    MsgKind::ABD_TS_REPLY,
    MsgKind::ABD_WRITE,
    MsgKind::ABD_WRITE_ACK,
    MsgKind::ABD_READ,
    MsgKind::ABD_READ_REPLY,
    MsgKind::SNAPSHOT_REQUEST,
    MsgKind::SNAPSHOT,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    ReadTs = 1,
    Write = 2,
    Read = 3,
    WriteBack = 4,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Version {
    ts: LamportTs,
    value: Option<Vec<u8>>,
    origin: (ClientId, u64),
}

#[derive(Debug, Clone)]
struct Pending {
    client: ClientId,
    rid: u64,
    key: Vec<u8>,
    value: Option<Vec<u8>>,
    phase: Phase,
    seen: BTreeMap<NodeId, Version>,
    dup: bool,
    acks: BTreeSet<NodeId>,
    chosen: Option<Version>,
    rounds: u32,
}

#[derive(Debug)]
struct Sync {
    needed: usize,
    got: BTreeSet<NodeId>,
}

#[derive(Debug)]
pub struct Abd {
    me: NodeId,
    next_op: u64,
    pending: BTreeMap<u64, Pending>,
    /// Highest write request id applied here, per client.
    applied: BTreeMap<ClientId, u64>,
    /// Request that produced the current value of each key.
    origin: BTreeMap<Vec<u8>, (ClientId, u64)>,
    cache: ReplyCache,
    sync: Option<Sync>,
    joining: bool,
    stats: ProtoStats,
}

impl Abd {
    pub fn new(me: NodeId, joining: bool) -> Self {
        Self {
            me,
            next_op: 0,
            pending: BTreeMap::new(),
            applied: BTreeMap::new(),
            origin: BTreeMap::new(),
            cache: ReplyCache::default(),
            sync: None,
            joining,
            stats: ProtoStats::default(),
        }
    }

    fn local_version(&self, ctx: &mut Ctx<'_>, key: &[u8]) -> Option<Version> {
        let origin = self.origin.get(key).copied().unwrap_or((ClientId(0), 0));
        match ctx.read_local(key) {
            Ok(Some((value, ts))) => Some(Version {
                ts,
                value: Some(value),
                origin,
            }),
            Ok(None) => Some(Version {
                ts: LamportTs::ZERO,
                value: None,
                origin,
            }),
            Err(_) => None,
        }
    }

    /// Replica-side apply rule: only strictly newer timestamps win.
    fn apply(&mut self, ctx: &mut Ctx<'_>, key: &[u8], v: &Version) {
        let Some(value) = &v.value else { return };
        let stored = ctx.store.ts_of(key).unwrap_or(LamportTs::ZERO);
        if v.ts > stored {
            ctx.apply(v.origin.0, v.origin.1, key, value, v.ts, v.ts.pack());
            self.origin.insert(key.to_vec(), v.origin);
        }
        let a = self.applied.entry(v.origin.0).or_insert(0);
        *a = (*a).max(v.origin.1);
    }

    fn header(w: &mut Writer, op: u64, phase: Phase) {
        w.u64(op).u8(phase as u8);
    }

    fn write_version(w: &mut Writer, v: &Version) {
        w.u64(v.ts.pack());
        match &v.value {
            Some(x) => w.u8(1).bytes(x),
            None => w.u8(0),
        };
        w.u32(v.origin.0 .0).u64(v.origin.1);
    }

    fn read_version(r: &mut Reader<'_>) -> Result<Version, DecodeError> {
        let ts = LamportTs::unpack(r.u64()?);
        let value = match r.u8()? {
            0 => None,
            1 => Some(r.bytes()?),
            _ => return Err(DecodeError::Invalid("value flag")),
        };
        let origin = (ClientId(r.u32()?), r.u64()?);
        Ok(Version { ts, value, origin })
    }

    fn send_phase(&self, ctx: &mut Ctx<'_>, op: u64, to: &[NodeId]) {
        let Some(p) = self.pending.get(&op) else { return };
        let mut w = Writer::new();
        Self::header(&mut w, op, p.phase);
        let kind = match p.phase {
            Phase::ReadTs => {
                w.bytes(&p.key).u32(p.client.0).u64(p.rid);
                MsgKind::ABD_READ_TS
            }
            Phase::Read => {
                w.bytes(&p.key);
                MsgKind::ABD_READ
            }
            Phase::Write | Phase::WriteBack => {
                w.bytes(&p.key);
                Self::write_version(&mut w, p.chosen.as_ref().expect("write phases carry a version"));
                MsgKind::ABD_WRITE
            }
        };
        let payload = w.finish();
        for &n in to {
            ctx.send(n, kind, payload.clone());
        }
    }

    fn start_phase(&mut self, ctx: &mut Ctx<'_>, op: u64, phase: Phase) {
        let Some(p) = self.pending.get_mut(&op) else { return };
        p.phase = phase;
        p.rounds += 1;
        p.seen.clear();
        p.acks.clear();
        let key = p.key.clone();
        match phase {
            Phase::ReadTs | Phase::Read => {
                let (client, rid) = (p.client, p.rid);
                let Some(v) = self.local_version(ctx, &key) else {
                    self.fail(ctx, op);
                    return;
                };
                let p = self.pending.get_mut(&op).expect("present");
                p.dup |= phase == Phase::ReadTs && self.applied.get(&client).is_some_and(|r| *r >= rid);
                p.seen.insert(self.me, v);
            }
            Phase::Write | Phase::WriteBack => {
                let v = p.chosen.clone().expect("write phases carry a version");
                p.acks.insert(self.me);
                self.apply(ctx, &key, &v);
            }
        }
        let peers: Vec<NodeId> = ctx.peers().collect();
        self.send_phase(ctx, op, &peers);
        self.progress(ctx, op);
    }

    fn fail(&mut self, ctx: &mut Ctx<'_>, op: u64) {
        if let Some(p) = self.pending.remove(&op) {
            ctx.reply(p.client, p.rid, Err(ClientError::Unavailable));
        }
    }

    fn finish(&mut self, ctx: &mut Ctx<'_>, op: u64, result: Option<Vec<u8>>, acks: Option<usize>) {
        let Some(p) = self.pending.remove(&op) else { return };
        let write = p.value.is_some();
        if write {
            self.cache.record(p.client, p.rid, None);
        }
        if let Some(a) = acks {
            if write {
                self.stats.commit_acks.push(a);
            }
        }
        self.stats.rounds.push((write, p.rounds));
        ctx.reply(p.client, p.rid, Ok(result));
    }

    /// Advances `op` if its current phase has gathered a quorum.
    fn progress(&mut self, ctx: &mut Ctx<'_>, op: u64) {
        let q = ctx.quorum();
        let Some(p) = self.pending.get_mut(&op) else { return };
        match p.phase {
            Phase::ReadTs if p.seen.len() >= q => {
                if p.dup {
                    // Executed before (through another coordinator).
                    self.finish(ctx, op, None, None);
                    return;
                }
                let max = p.seen.values().map(|v| v.ts).max().unwrap_or(LamportTs::ZERO);
                p.chosen = Some(Version {
                    ts: LamportTs::new(max.counter + 1, self.me),
                    value: p.value.clone(),
                    origin: (p.client, p.rid),
                });
                self.start_phase(ctx, op, Phase::Write);
            }
            Phase::Read if p.seen.len() >= q => {
                let newest = p
                    .seen
                    .values()
                    .max_by_key(|v| v.ts)
                    .cloned()
                    .expect("quorum is non-empty");
                let holders = p.seen.values().filter(|v| v.ts == newest.ts).count();
                if holders >= q {
                    self.finish(ctx, op, newest.value, None);
                } else {
                    p.chosen = Some(newest);
                    self.start_phase(ctx, op, Phase::WriteBack);
                }
            }
            Phase::Write | Phase::WriteBack if p.acks.len() >= q => {
                let acks = p.acks.len();
                let result = match p.phase {
                    Phase::WriteBack => p.chosen.as_ref().and_then(|v| v.value.clone()),
                    _ => None,
                };
                self.finish(ctx, op, result, Some(acks));
            }
            _ => {}
        }
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, d: &Delivered) -> Result<(), DecodeError> {
        let serving = ctx.core.status() == Status::Normal;
        let mut r = Reader::new(&d.payload);
        match d.kind {
            MsgKind::SNAPSHOT_REQUEST => {
                r.finish()?;
                if serving {
                    let snap = self.snapshot(ctx);
                    ctx.send(d.from, MsgKind::SNAPSHOT, snap);
                }
                return Ok(());
            }
            MsgKind::SNAPSHOT => return self.on_snapshot(ctx, d.from, r),
            _ => {}
        }
        let op = r.u64()?;
        let phase = r.u8()?;
        match d.kind {
            MsgKind::ABD_READ_TS => {
                let key = r.bytes()?;
                let (client, rid) = (ClientId(r.u32()?), r.u64()?);
                r.finish()?;
                if !serving {
                    return Ok(());
                }
                let Some(v) = self.local_version(ctx, &key) else { return Ok(()) };
                let done = self.applied.get(&client).is_some_and(|a| *a >= rid);
                let mut w = Writer::new();
                w.u64(op).u8(phase).u64(v.ts.pack()).bool(done);
                ctx.send(d.from, MsgKind::ABD_TS_REPLY, w.finish());
            }
            MsgKind::ABD_READ => {
                let key = r.bytes()?;
                r.finish()?;
                if !serving {
                    return Ok(());
                }
                let Some(v) = self.local_version(ctx, &key) else { return Ok(()) };
                let mut w = Writer::new();
                w.u64(op).u8(phase);
                Self::write_version(&mut w, &v);
                ctx.send(d.from, MsgKind::ABD_READ_REPLY, w.finish());
            }
            MsgKind::ABD_WRITE => {
                let key = r.bytes()?;
                let v = Self::read_version(&mut r)?;
                r.finish()?;
                if v.value.is_none() {
                    return Err(DecodeError::Invalid("write without value"));
                }
                self.apply(ctx, &key, &v);
                let mut w = Writer::new();
                w.u64(op).u8(phase);
                ctx.send(d.from, MsgKind::ABD_WRITE_ACK, w.finish());
            }
            MsgKind::ABD_TS_REPLY => {
                let ts = LamportTs::unpack(r.u64()?);
                let done = r.bool()?;
                r.finish()?;
                if let Some(p) = self.current(op, phase, ctx.members, d.from) {
                    p.dup |= done;
                    p.seen.insert(
                        d.from,
                        Version {
                            ts,
                            value: None,
                            origin: (ClientId(0), 0),
                        },
                    );
                    self.progress(ctx, op);
                }
            }
            MsgKind::ABD_READ_REPLY => {
                let v = Self::read_version(&mut r)?;
                r.finish()?;
                if let Some(p) = self.current(op, phase, ctx.members, d.from) {
                    p.seen.insert(d.from, v);
                    self.progress(ctx, op);
                }
            }
            MsgKind::ABD_WRITE_ACK => {
                r.finish()?;
                if let Some(p) = self.current(op, phase, ctx.members, d.from) {
                    p.acks.insert(d.from);
                    self.progress(ctx, op);
                }
            }
            _ => return Err(DecodeError::Invalid("kind")),
        }
        Ok(())
    }

    /// The pending op a reply belongs to, if it is still in that phase and
    /// the replier is a member.
    fn current(&mut self, op: u64, phase: u8, members: &[NodeId], from: NodeId) -> Option<&mut Pending> {
        if !members.contains(&from) {
            return None;
        }
        self.pending.get_mut(&op).filter(|p| p.phase as u8 == phase)
    }

    fn snapshot(&self, ctx: &mut Ctx<'_>) -> Vec<u8> {
        let records = ctx.store.export_snapshot().unwrap_or_default();
        let mut w = Writer::new();
        encode_snapshot(&records, &mut w);
        w.u32(self.applied.len() as u32);
        for (c, r) in &self.applied {
            w.u32(c.0).u64(*r);
        }
        w.u32(self.origin.len() as u32);
        for (k, (c, r)) in &self.origin {
            w.bytes(k).u32(c.0).u64(*r);
        }
        w.finish()
    }

    fn on_snapshot(&mut self, ctx: &mut Ctx<'_>, from: NodeId, mut r: Reader<'_>) -> Result<(), DecodeError> {
        let records = decode_snapshot(&mut r)?;
        let mut applied = Vec::new();
        for _ in 0..r.u32()? {
            applied.push((ClientId(r.u32()?), r.u64()?));
        }
        let mut origins = BTreeMap::new();
        for _ in 0..r.u32()? {
            origins.insert(r.bytes()?, (ClientId(r.u32()?), r.u64()?));
        }
        r.finish()?;
        let Some(sync) = self.sync.as_mut() else { return Ok(()) };
        if !sync.got.insert(from) {
            return Ok(());
        }
        for rec in records {
            let origin = origins.get(&rec.key).copied().unwrap_or((ClientId(0), 0));
            let v = Version {
                ts: rec.ts,
                value: Some(rec.value),
                origin,
            };
            self.apply(ctx, &rec.key, &v);
        }
        for (c, rid) in applied {
            let a = self.applied.entry(c).or_insert(0);
            *a = (*a).max(rid);
        }
        if self.sync.as_ref().is_some_and(|s| s.got.len() >= s.needed) {
            self.sync = None;
            ctx.core.set_status(Status::Normal);
        }
        Ok(())
    }
}

impl Protocol for Abd {
    fn kind(&self) -> ProtocolKind {
        ProtocolKind::Abd
    }

    fn kinds(&self) -> &'static [MsgKind] {
        KINDS
    }

    fn on_client(&mut self, ctx: &mut Ctx<'_>, req: ClientRequest) {
        let (c, rid) = (req.client_id, req.request_id);
        if self.pending.values().any(|p| p.client == c && p.rid == rid) {
            return;
        }
        let value = match &req.op {
            Op::Put { value, .. } => {
                if ctx.core.dedupe_client(c, rid) == Dedupe::Duplicate {
                    match self.cache.lookup(c, rid) {
                        CacheHit::Answer(v) => ctx.reply(c, rid, Ok(v)),
                        _ => ctx.reply(c, rid, Err(ClientError::Duplicate)),
                    }
                    return;
                }
                Some(value.clone())
            }
            Op::Get { .. } => None,
        };
        self.next_op += 1;
        let op = self.next_op;
        let write = value.is_some();
        self.pending.insert(
            op,
            Pending {
                client: c,
                rid,
                key: req.op.key().to_vec(),
                value,
                phase: Phase::ReadTs,
                seen: BTreeMap::new(),
                dup: false,
                acks: BTreeSet::new(),
                chosen: None,
                rounds: 0,
            },
        );
        self.start_phase(ctx, op, if write { Phase::ReadTs } else { Phase::Read });
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_>, msg: Delivered) {
        if self.handle(ctx, &msg).is_err() {
            ctx.reject(RejectReason::Malformed);
        }
    }

    fn on_tick(&mut self, _ctx: &mut Ctx<'_>) {}

    fn on_membership(&mut self, ctx: &mut Ctx<'_>, old: &[NodeId]) {
        if self.joining && !old.contains(&self.me) {
            self.joining = false;
            let needed = membership_quorum(old.len(), ctx.f).min(old.len());
            self.sync = Some(Sync {
                needed,
                got: BTreeSet::new(),
            });
            for &p in old {
                ctx.send(p, MsgKind::SNAPSHOT_REQUEST, Vec::new());
            }
            return;
        }
        // Members that appeared mid-phase have not seen the request yet.
        let fresh: Vec<NodeId> = ctx.peers().filter(|m| !old.contains(m)).collect();
        let ops: Vec<u64> = self.pending.keys().copied().collect();
        for op in ops {
            self.send_phase(ctx, op, &fresh);
            self.progress(ctx, op);
        }
    }

    fn stats(&self) -> &ProtoStats {
        &self.stats
    }
}
