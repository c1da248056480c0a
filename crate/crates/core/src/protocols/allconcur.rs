//! Leaderless atomic broadcast in rounds. Every member broadcasts one batch
//! per round; once a node knows the fate of every member's batch it
//! delivers all included batches in origin order.
//!
//! Failure detection runs on liveness leases refreshed by heartbeats. A node
//! whose lease has lapsed is reported; every report is final, and a batch is
//! excluded only when all other round members reported it missing. A report
//! from a node that does hold the batch carries the batch itself, so every
//! survivor reaches the same decision. Reads are served locally.

use std::collections::{BTreeMap, BTreeSet};

use crate::config::ProtocolKind;
use crate::kvstore::LamportTs;
use crate::tcb::{Dedupe, Delivered, LeaseRole, Status};
use crate::trace::{EventKind, RejectReason};
use crate::types::{ClientId, ClientRequest, MsgKind, NodeId, Op, Tick};
use crate::wire::{DecodeError, Reader, Writer};

use super::{read_op_fields, write_op_fields, ClientError, Ctx, ProtoStats, Protocol};

const KINDS: &[MsgKind] = &[MsgKind::AC_ROUND, MsgKind::AC_SUSPECT, MsgKind::HEARTBEAT];

const MAX_BATCH: usize = 64;
const KEEP_ROUNDS: u64 = 64;

const REPORT_MISSING: u8 = 0;
const REPORT_HAS: u8 = 1;
/// Receipt notice sent back to a batch's origin.
const REPORT_ECHO: u8 = 2;

type Batch = Vec<(ClientId, u64, Vec<u8>, Vec<u8>)>;

#[derive(Debug, Default)]
struct RoundState {
    members: Vec<NodeId>,
    msgs: BTreeMap<NodeId, Batch>,
    /// about -> reporter -> batch if the reporter holds it.
    reports: BTreeMap<NodeId, BTreeMap<NodeId, Option<Batch>>>,
    reported: BTreeSet<NodeId>,
    echoes: BTreeSet<NodeId>,
}

#[derive(Debug)]
pub struct AllConcur {
    me: NodeId,
    members: Vec<NodeId>,
    min_members: usize,
    round: u64,
    started: bool,
    rounds: BTreeMap<u64, RoundState>,
    pending: Vec<(ClientId, u64, Vec<u8>, Vec<u8>)>,
    in_round: BTreeSet<(ClientId, u64)>,
    applied_table: BTreeMap<ClientId, u64>,
    next_index: u64,
    next_heartbeat: Tick,
    stats: ProtoStats,
}

fn write_batch(w: &mut Writer, b: &Batch) {
    w.u32(b.len() as u32);
    for (c, rid, k, v) in b {
        write_op_fields(w, *c, *rid, k, v);
    }
}

fn read_batch(r: &mut Reader<'_>) -> Result<Batch, DecodeError> {
    let n = r.u32()?;
    let mut b = Vec::with_capacity(n.min(1024) as usize);
    for _ in 0..n {
        b.push(read_op_fields(r)?);
    }
    Ok(b)
}

impl AllConcur {
    pub fn new(me: NodeId, members: &[NodeId]) -> Self {
        Self {
            me,
            members: members.to_vec(),
            min_members: members.len(),
            round: 1,
            started: false,
            rounds: BTreeMap::new(),
            pending: Vec::new(),
            in_round: BTreeSet::new(),
            applied_table: BTreeMap::new(),
            next_index: 1,
            next_heartbeat: 0,
            stats: ProtoStats::default(),
        }
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn members(&self) -> &[NodeId] {
        &self.members
    }

    fn state(&mut self, r: u64) -> &mut RoundState {
        self.rounds.entry(r).or_default()
    }

    fn suspected(&self, ctx: &Ctx<'_>, j: NodeId) -> bool {
        match ctx.core.granted_lease(LeaseRole::Liveness(j)) {
            Some(l) => !l.is_valid(ctx.now, true),
            None => ctx.now > ctx.timing.lease_duration + ctx.timing.lease_slack,
        }
    }

    fn start_round(&mut self, ctx: &mut Ctx<'_>) {
        if self.members.len() < self.min_members {
            return;
        }
        let take = self.pending.len().min(MAX_BATCH);
        let batch: Batch = self.pending.drain(..take).collect();
        for (c, rid, _, _) in &batch {
            self.in_round.insert((*c, *rid));
        }
        let (r, me, members) = (self.round, self.me, self.members.clone());
        let mut w = Writer::new();
        w.u64(r);
        write_batch(&mut w, &batch);
        let st = self.state(r);
        st.members = members.clone();
        st.msgs.insert(me, batch);
        self.started = true;
        for p in members.into_iter().filter(|p| *p != me) {
            ctx.send(p, MsgKind::AC_ROUND, w.clone().finish());
        }
    }

    fn report(&mut self, ctx: &mut Ctx<'_>, r: u64, about: NodeId) {
        let me = self.me;
        let st = self.state(r);
        if about == me || !st.reported.insert(about) {
            return;
        }
        let held = st.msgs.get(&about).cloned();
        st.reports.entry(about).or_default().insert(me, held.clone());
        let members = if st.members.is_empty() {
            self.members.clone()
        } else {
            st.members.clone()
        };
        let mut w = Writer::new();
        w.u64(r).u32(about.0);
        match &held {
            Some(b) => {
                w.u8(REPORT_HAS);
                write_batch(&mut w, b);
            }
            None => {
                w.u8(REPORT_MISSING);
            }
        }
        let payload = w.finish();
        for p in members.into_iter().filter(|p| *p != me && *p != about) {
            ctx.send(p, MsgKind::AC_SUSPECT, payload.clone());
        }
    }

    /// `Some(Some(b))` include, `Some(None)` exclude, `None` undecided.
    fn decide(&self, st: &RoundState, j: NodeId) -> Option<Option<Batch>> {
        if j == self.me {
            let alone = st.members.len() == 1;
            let echoed = alone || !st.echoes.is_empty();
            return echoed.then(|| Some(st.msgs.get(&j).cloned().unwrap_or_default()));
        }
        if let Some(b) = st.msgs.get(&j) {
            return Some(Some(b.clone()));
        }
        let reps = st.reports.get(&j);
        if let Some(b) = reps.and_then(|m| m.values().flatten().next()) {
            return Some(Some(b.clone()));
        }
        let all_missing = st
            .members
            .iter()
            .filter(|m| **m != j)
            .all(|m| reps.is_some_and(|x| x.get(m).is_some_and(|b| b.is_none())));
        all_missing.then_some(None)
    }

    fn try_complete(&mut self, ctx: &mut Ctx<'_>) {
        while self.started && ctx.core.status() == Status::Normal {
            let r = self.round;
            let Some(st) = self.rounds.get(&r) else { return };
            let mut decided = Vec::new();
            for &j in &st.members {
                match self.decide(st, j) {
                    Some(d) => decided.push((j, d)),
                    None => return,
                }
            }
            let excluded: Vec<NodeId> = decided
                .iter()
                .filter(|(_, d)| d.is_none())
                .map(|(j, _)| *j)
                .collect();
            for (origin, batch) in decided {
                for (c, rid, key, value) in batch.into_iter().flatten() {
                    let i = self.next_index;
                    self.next_index += 1;
                    if self.applied_table.get(&c).map_or(true, |a| *a < rid) {
                        ctx.apply(c, rid, &key, &value, LamportTs::new(i, NodeId(0)), i);
                        self.applied_table.insert(c, rid);
                    }
                    if origin == self.me && self.in_round.remove(&(c, rid)) {
                        self.stats.commit_acks.push(self.members.len());
                        self.stats.rounds.push((true, 1));
                        ctx.reply_at(c, rid, Ok(None), i);
                    }
                }
            }
            self.members.retain(|m| !excluded.contains(m));
            self.round += 1;
            self.started = false;
            self.rounds.retain(|k, _| *k + KEEP_ROUNDS > r);
            let next_busy = self
                .rounds
                .get(&self.round)
                .is_some_and(|s| !s.msgs.is_empty());
            if next_busy || !self.pending.is_empty() {
                self.start_round(ctx);
                self.check_suspects(ctx);
            }
        }
    }

    fn check_suspects(&mut self, ctx: &mut Ctx<'_>) {
        if !self.started {
            return;
        }
        let r = self.round;
        let Some(st) = self.rounds.get(&r) else { return };
        let waiting: Vec<NodeId> = st
            .members
            .iter()
            .copied()
            .filter(|j| *j != self.me && !st.msgs.contains_key(j) && !st.reported.contains(j))
            .collect();
        for j in waiting {
            if self.suspected(ctx, j) {
                self.report(ctx, r, j);
            }
        }
    }

    fn halt(&mut self, ctx: &mut Ctx<'_>) {
        ctx.core.set_status(Status::Halted);
        ctx.trace.push(ctx.now, EventKind::Crash { node: self.me });
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, d: &Delivered) -> Result<(), DecodeError> {
        let mut rd = Reader::new(&d.payload);
        match d.kind {
            MsgKind::HEARTBEAT => {
                let _sent = rd.u64()?;
                rd.finish()?;
                let dur = ctx.timing.lease_duration;
                let _ = ctx
                    .core
                    .grant_lease(LeaseRole::Liveness(d.from), d.from, ctx.now, dur);
            }
            MsgKind::AC_ROUND => {
                let r = rd.u64()?;
                let batch = read_batch(&mut rd)?;
                rd.finish()?;
                if r < self.round && !self.rounds.contains_key(&r) {
                    return Ok(());
                }
                let st = self.state(r);
                // A missing report is final: later copies are ignored.
                if st.reported.contains(&d.from) || st.msgs.contains_key(&d.from) {
                    return Ok(());
                }
                st.msgs.insert(d.from, batch);
                let mut w = Writer::new();
                w.u64(r).u32(d.from.0).u8(REPORT_ECHO);
                ctx.send(d.from, MsgKind::AC_SUSPECT, w.finish());
                if r == self.round && !self.started {
                    self.start_round(ctx);
                    self.check_suspects(ctx);
                }
            }
            MsgKind::AC_SUSPECT => {
                let r = rd.u64()?;
                let about = NodeId(rd.u32()?);
                let state = rd.u8()?;
                let batch = match state {
                    REPORT_HAS => Some(read_batch(&mut rd)?),
                    REPORT_MISSING | REPORT_ECHO => None,
                    _ => return Err(DecodeError::Invalid("report state")),
                };
                rd.finish()?;
                if r < self.round && !self.rounds.contains_key(&r) {
                    return Ok(());
                }
                if state == REPORT_ECHO {
                    if about == self.me {
                        self.state(r).echoes.insert(d.from);
                    }
                } else {
                    let me = self.me;
                    let fallback = self.members.clone();
                    let st = self.state(r);
                    st.reports.entry(about).or_default().insert(d.from, batch);
                    if about == me {
                        let members = if st.members.is_empty() { &fallback } else { &st.members };
                        let reps = &st.reports[&me];
                        let everyone = members
                            .iter()
                            .filter(|m| **m != me)
                            .all(|m| reps.get(m).is_some_and(|b| b.is_none()));
                        if everyone {
                            self.halt(ctx);
                            return Ok(());
                        }
                    } else {
                        self.report(ctx, r, about);
                    }
                }
            }
            _ => return Err(DecodeError::Invalid("kind")),
        }
        self.try_complete(ctx);
        Ok(())
    }
}

impl Protocol for AllConcur {
    fn kind(&self) -> ProtocolKind {
        ProtocolKind::AllConcur
    }

    fn kinds(&self) -> &'static [MsgKind] {
        KINDS
    }

    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        self.min_members = ctx.members.len().saturating_sub(ctx.f).max(1);
    }

    fn on_client(&mut self, ctx: &mut Ctx<'_>, req: ClientRequest) {
        let (c, rid) = (req.client_id, req.request_id);
        match req.op {
            Op::Get { key } => {
                let seen = self.next_index - 1;
                // A replica behind what the client already saw would take
                // the client back in time.
                if seen < req.min_index {
                    ctx.reply(c, rid, Err(ClientError::Unavailable));
                    return;
                }
                let out = ctx.read_local(&key).map(|v| v.map(|(v, _)| v));
                self.stats.rounds.push((false, 0));
                ctx.reply_at(c, rid, out, seen);
            }
            Op::Put { key, value } => {
                if ctx.core.dedupe_client(c, rid) == Dedupe::Duplicate {
                    let queued = self.in_round.contains(&(c, rid))
                        || self.pending.iter().any(|p| p.0 == c && p.1 == rid);
                    if queued {
                        return;
                    }
                    let out = if self.applied_table.get(&c).is_some_and(|a| *a >= rid) {
                        Ok(None)
                    } else {
                        Err(ClientError::Duplicate)
                    };
                    ctx.reply_at(c, rid, out, self.next_index - 1);
                    return;
                }
                self.pending.push((c, rid, key, value));
                if !self.started {
                    self.start_round(ctx);
                    self.check_suspects(ctx);
                    self.try_complete(ctx);
                }
            }
        }
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_>, msg: Delivered) {
        if self.handle(ctx, &msg).is_err() {
            ctx.reject(RejectReason::Malformed);
        }
    }

    fn on_tick(&mut self, ctx: &mut Ctx<'_>) {
        if ctx.now >= self.next_heartbeat {
            self.next_heartbeat = ctx.now + ctx.timing.heartbeat;
            let mut w = Writer::new();
            w.u64(ctx.now);
            let payload = w.finish();
            for p in self.members.clone().into_iter().filter(|p| *p != self.me) {
                ctx.send(p, MsgKind::HEARTBEAT, payload.clone());
            }
        }
        self.check_suspects(ctx);
        self.try_complete(ctx);
    }

    fn stats(&self) -> &ProtoStats {
        &self.stats
    }
}
