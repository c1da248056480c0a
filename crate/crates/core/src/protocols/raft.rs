//! Leader-based log replication with terms, majority elections and
//! lease-protected local reads at the leader.
//!
//! A write takes two phases: the leader appends and replicates the entry,
//! commits it once a quorum stores it, then tells followers to apply and
//! answers the client after a quorum has applied it.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::config::ProtocolKind;
use crate::kvstore::LamportTs;
use crate::tcb::{Dedupe, Delivered, LeaseRole, Status, TrustedCore};
use crate::trace::RejectReason;
use crate::types::{membership_quorum, ClientId, ClientRequest, MsgKind, NodeId, Op, Tick};
use crate::wire::{DecodeError, Reader, Writer};

use super::{ClientError, Ctx, ProtoStats, Protocol};

const KINDS: &[MsgKind] = &[
    MsgKind::RAFT_APPEND,
    MsgKind::RAFT_APPEND_ACK,
    MsgKind::RAFT_COMMIT,
    MsgKind::RAFT_COMMIT_ACK,
    MsgKind::RAFT_VOTE_REQUEST,
    MsgKind::RAFT_VOTE,
    MsgKind::HEARTBEAT,
    MsgKind::HEARTBEAT_ACK,
];

const MAX_BATCH: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Follower,
    Candidate,
    Leader,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Entry {
    term: u64,
    /// `None` for the no-op a new leader appends.
    op: Option<(ClientId, u64, Vec<u8>, Vec<u8>)>,
}

impl Entry {
    fn write(&self, w: &mut Writer) {
        w.u64(self.term);
        match &self.op {
            None => {
                w.u8(0);
            }
            Some((c, rid, k, v)) => {
                w.u8(1);
                super::write_op_fields(w, *c, *rid, k, v);
            }
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let term = r.u64()?;
        let op = match r.u8()? {
            0 => None,
            1 => Some(super::read_op_fields(r)?),
            _ => return Err(DecodeError::Invalid("entry flag")),
        };
        Ok(Self { term, op })
    }
}

#[derive(Debug)]
pub struct Raft {
    me: NodeId,
    term: u64,
    role: Role,
    leader: Option<NodeId>,
    voted: Option<(u64, NodeId)>,
    votes: BTreeSet<NodeId>,
    log: Vec<Entry>,
    commit: u64,
    applied: u64,
    /// Prefix of the log known to match the current leader's.
    matched_upto: u64,
    leader_commit: u64,
    next_index: BTreeMap<NodeId, u64>,
    match_index: BTreeMap<NodeId, u64>,
    peer_applied: BTreeMap<NodeId, u64>,
    noop_index: u64,
    waiting: BTreeMap<u64, (ClientId, u64)>,
    applied_table: BTreeMap<ClientId, u64>,
    last_heard: Tick,
    deadline: Option<Tick>,
    next_heartbeat: Tick,
    joining: bool,
    stats: ProtoStats,
}

impl Raft {
    pub fn new(me: NodeId, members: &[NodeId], joining: bool) -> Self {
        let first = members.first().copied();
        let bootstrap = !joining;
        Self {
            me,
            term: if bootstrap { 1 } else { 0 },
            role: if bootstrap && first == Some(me) {
                Role::Leader
            } else {
                Role::Follower
            },
            leader: if bootstrap { first } else { None },
            voted: None,
            votes: BTreeSet::new(),
            log: Vec::new(),
            commit: 0,
            applied: 0,
            matched_upto: 0,
            leader_commit: 0,
            next_index: BTreeMap::new(),
            match_index: BTreeMap::new(),
            peer_applied: BTreeMap::new(),
            noop_index: 0,
            waiting: BTreeMap::new(),
            applied_table: BTreeMap::new(),
            last_heard: 0,
            deadline: None,
            next_heartbeat: 0,
            joining,
            stats: ProtoStats::default(),
        }
    }

    pub fn term(&self) -> u64 {
        self.term
    }

    pub fn is_leader(&self) -> bool {
        self.role == Role::Leader
    }

    fn last_index(&self) -> u64 {
        self.log.len() as u64
    }

    fn term_at(&self, i: u64) -> u64 {
        if i == 0 {
            0
        } else {
            self.log.get(i as usize - 1).map_or(0, |e| e.term)
        }
    }

    fn reset_deadline(&mut self, ctx: &mut Ctx<'_>) {
        let jitter = ctx.rng.gen_range(0..=ctx.timing.election_jitter);
        self.deadline = Some(ctx.now + ctx.timing.election_timeout + jitter);
    }

    fn adopt_term(&mut self, ctx: &mut Ctx<'_>, term: u64) {
        if term <= self.term {
            return;
        }
        self.term = term;
        self.role = Role::Follower;
        self.leader = None;
        self.votes.clear();
        self.matched_upto = 0;
        ctx.core.clear_held_leases(LeaseRole::Leadership);
        ctx.view_change(term);
        self.reset_deadline(ctx);
    }

    fn follow(&mut self, ctx: &mut Ctx<'_>, leader: NodeId) {
        if self.role != Role::Follower || self.leader != Some(leader) {
            self.role = Role::Follower;
            self.leader = Some(leader);
        }
        self.last_heard = ctx.now;
        self.reset_deadline(ctx);
        if !self.joining && ctx.core.status() == Status::ViewChange {
            ctx.core.set_status(Status::Normal);
        }
    }

    fn become_leader(&mut self, ctx: &mut Ctx<'_>) {
        self.role = Role::Leader;
        self.leader = Some(self.me);
        self.deadline = None;
        ctx.core.clear_held_leases(LeaseRole::Leadership);
        ctx.core.set_status(Status::Normal);
        self.next_index.clear();
        self.match_index.clear();
        self.peer_applied.clear();
        let next = self.last_index() + 1;
        for p in ctx.peers().collect::<Vec<_>>() {
            self.next_index.insert(p, next);
            self.match_index.insert(p, 0);
            self.peer_applied.insert(p, 0);
        }
        self.log.push(Entry {
            term: self.term,
            op: None,
        });
        self.noop_index = self.last_index();
        self.matched_upto = self.last_index();
        // Requests the old leader accepted but never applied may be retried
        // here, so the client table restarts from what is applied.
        ctx.core.reset_client_table(self.applied_table.clone());
        self.heartbeat(ctx);
        self.replicate_all(ctx);
        self.advance_commit(ctx);
    }

    fn start_election(&mut self, ctx: &mut Ctx<'_>) {
        self.term += 1;
        self.role = Role::Candidate;
        self.leader = None;
        self.voted = Some((self.term, self.me));
        self.votes = BTreeSet::from([self.me]);
        ctx.core.set_status(Status::ViewChange);
        ctx.core.clear_held_leases(LeaseRole::Leadership);
        ctx.view_change(self.term);
        self.reset_deadline(ctx);
        let mut w = Writer::new();
        w.u64(self.term).u64(self.last_index()).u64(self.term_at(self.last_index()));
        ctx.broadcast(MsgKind::RAFT_VOTE_REQUEST, w.finish());
        if self.votes.len() >= ctx.quorum() {
            self.become_leader(ctx);
        }
    }

    fn heartbeat(&mut self, ctx: &mut Ctx<'_>) {
        self.next_heartbeat = ctx.now + ctx.timing.heartbeat;
        // The leader's own grant keeps it from voting others in.
        let _ = ctx
            .core
            .grant_lease(LeaseRole::Leadership, self.me, ctx.now, ctx.timing.lease_duration);
        let mut w = Writer::new();
        w.u64(self.term).u64(ctx.now);
        ctx.broadcast(MsgKind::HEARTBEAT, w.finish());
        let mut w = Writer::new();
        w.u64(self.term).u64(self.commit);
        ctx.broadcast(MsgKind::RAFT_COMMIT, w.finish());
    }

    fn replicate_all(&mut self, ctx: &mut Ctx<'_>) {
        for p in ctx.peers().collect::<Vec<_>>() {
            self.replicate(ctx, p);
        }
    }

    fn replicate(&mut self, ctx: &mut Ctx<'_>, peer: NodeId) {
        let last = self.last_index();
        let next = *self.next_index.entry(peer).or_insert(last + 1);
        if next > last {
            return;
        }
        let end = last.min(next + MAX_BATCH - 1);
        let prev = next - 1;
        let mut w = Writer::new();
        w.u64(self.term).u64(prev).u64(self.term_at(prev)).u64(self.commit);
        w.u32((end - prev) as u32);
        for i in next..=end {
            self.log[i as usize - 1].write(&mut w);
        }
        ctx.send(peer, MsgKind::RAFT_APPEND, w.finish());
        self.next_index.insert(peer, end + 1);
    }

    fn advance_commit(&mut self, ctx: &mut Ctx<'_>) {
        let q = ctx.quorum();
        let mut idx = self.last_index();
        while idx > self.commit {
            if self.term_at(idx) == self.term {
                let acks = 1 + ctx
                    .peers()
                    .filter(|p| self.match_index.get(p).is_some_and(|m| *m >= idx))
                    .count();
                if acks >= q {
                    for i in self.commit + 1..=idx {
                        if self.log[i as usize - 1].op.is_some() {
                            self.stats.commit_acks.push(acks);
                        }
                    }
                    self.commit = idx;
                    let mut w = Writer::new();
                    w.u64(self.term).u64(self.commit);
                    ctx.broadcast(MsgKind::RAFT_COMMIT, w.finish());
                    break;
                }
            }
            idx -= 1;
        }
        self.apply_ready(ctx);
    }

    fn apply_ready(&mut self, ctx: &mut Ctx<'_>) {
        let upto = match self.role {
            Role::Leader => self.commit,
            _ => self.commit.min(self.matched_upto),
        };
        let before = self.applied;
        while self.applied < upto {
            self.applied += 1;
            let i = self.applied;
            if let Some((c, rid, key, value)) = self.log[i as usize - 1].op.clone() {
                if self.applied_table.get(&c).map_or(true, |r| *r < rid) {
                    ctx.apply(c, rid, &key, &value, LamportTs::new(i, NodeId(0)), i);
                    self.applied_table.insert(c, rid);
                }
            }
        }
        if self.applied > before {
            if let (Role::Follower, Some(l)) = (self.role, self.leader) {
                let mut w = Writer::new();
                w.u64(self.term).u64(self.applied);
                ctx.send(l, MsgKind::RAFT_COMMIT_ACK, w.finish());
            }
        }
        if self.joining && self.leader.is_some() && self.applied >= self.leader_commit {
            self.joining = false;
            ctx.core.set_status(Status::Normal);
        }
        self.answer_clients(ctx);
    }

    /// Replies for every entry a quorum (leader included) has applied.
    fn answer_clients(&mut self, ctx: &mut Ctx<'_>) {
        if self.role != Role::Leader {
            return;
        }
        let q = ctx.quorum();
        let ready: Vec<u64> = self
            .waiting
            .range(..=self.applied)
            .map(|(i, _)| *i)
            .filter(|i| {
                1 + ctx
                    .peers()
                    .filter(|p| self.peer_applied.get(p).is_some_and(|a| a >= i))
                    .count()
                    >= q
            })
            .collect();
        for i in ready {
            let (c, rid) = self.waiting.remove(&i).expect("listed above");
            self.stats.rounds.push((true, 2));
            ctx.reply(c, rid, Ok(None));
        }
    }

    fn holds_read_lease(&self, now: Tick, core: &TrustedCore, members: &[NodeId], f: usize) -> bool {
        let held = members
            .iter()
            .filter(|p| **p != self.me)
            .filter(|p| {
                core.held_lease(LeaseRole::Leadership, **p)
                    .is_some_and(|l| l.holder == self.me && l.is_valid(now, false))
            })
            .count();
        held + 1 >= membership_quorum(members.len(), f)
    }

    fn on_append(&mut self, ctx: &mut Ctx<'_>, from: NodeId, mut r: Reader<'_>) -> Result<(), DecodeError> {
        let term = r.u64()?;
        let prev = r.u64()?;
        let prev_term = r.u64()?;
        let commit = r.u64()?;
        let n = r.u32()?;
        let mut entries = Vec::with_capacity(n.min(1024) as usize);
        for _ in 0..n {
            entries.push(Entry::read(&mut r)?);
        }
        r.finish()?;
        if term < self.term {
            ctx.reject(RejectReason::StaleTerm);
            let mut w = Writer::new();
            w.u64(self.term).bool(false).u64(0);
            ctx.send(from, MsgKind::RAFT_APPEND_ACK, w.finish());
            return Ok(());
        }
        self.adopt_term(ctx, term);
        self.follow(ctx, from);
        self.leader_commit = self.leader_commit.max(commit);
        let mut w = Writer::new();
        if prev > self.last_index() || self.term_at(prev) != prev_term {
            let hint = self.last_index().min(prev.saturating_sub(1));
            w.u64(self.term).bool(false).u64(hint);
        } else {
            for (k, e) in entries.into_iter().enumerate() {
                let i = prev + 1 + k as u64;
                if i <= self.last_index() {
                    if self.term_at(i) == e.term {
                        continue;
                    }
                    self.log.truncate(i as usize - 1);
                }
                self.log.push(e);
            }
            self.matched_upto = prev + n as u64;
            w.u64(self.term).bool(true).u64(self.matched_upto);
            self.commit = self.commit.max(commit.min(self.matched_upto));
        }
        ctx.send(from, MsgKind::RAFT_APPEND_ACK, w.finish());
        self.apply_ready(ctx);
        Ok(())
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, d: &Delivered) -> Result<(), DecodeError> {
        let mut r = Reader::new(&d.payload);
        match d.kind {
            MsgKind::RAFT_APPEND => return self.on_append(ctx, d.from, r),
            MsgKind::RAFT_VOTE_REQUEST => {
                let (term, last, last_term) = (r.u64()?, r.u64()?, r.u64()?);
                r.finish()?;
                // A live lease to someone else pins this node's vote; it
                // does not even move to the new term.
                if ctx.core.lease_blocks(LeaseRole::Leadership, d.from, ctx.now) {
                    return Ok(());
                }
                if term < self.term {
                    ctx.reject(RejectReason::StaleTerm);
                    return Ok(());
                }
                self.adopt_term(ctx, term);
                let mine = (self.term_at(self.last_index()), self.last_index());
                let free = self.voted.map_or(true, |(t, c)| t < term || c == d.from);
                let granted = free && (last_term, last) >= mine && self.role != Role::Leader;
                if granted {
                    self.voted = Some((term, d.from));
                    self.reset_deadline(ctx);
                }
                let mut w = Writer::new();
                w.u64(self.term).bool(granted);
                ctx.send(d.from, MsgKind::RAFT_VOTE, w.finish());
            }
            MsgKind::RAFT_VOTE => {
                let (term, granted) = (r.u64()?, r.bool()?);
                r.finish()?;
                if term > self.term {
                    self.adopt_term(ctx, term);
                } else if term == self.term && granted && self.role == Role::Candidate {
                    self.votes.insert(d.from);
                    if self.votes.len() >= ctx.quorum() {
                        self.become_leader(ctx);
                    }
                }
            }
            MsgKind::RAFT_APPEND_ACK => {
                let (term, ok, m) = (r.u64()?, r.bool()?, r.u64()?);
                r.finish()?;
                if term > self.term {
                    self.adopt_term(ctx, term);
                    return Ok(());
                }
                if term < self.term || self.role != Role::Leader {
                    return Ok(());
                }
                if ok {
                    let e = self.match_index.entry(d.from).or_insert(0);
                    *e = (*e).max(m);
                    self.advance_commit(ctx);
                } else {
                    self.next_index.insert(d.from, m + 1);
                }
                self.replicate(ctx, d.from);
            }
            MsgKind::RAFT_COMMIT => {
                let (term, commit) = (r.u64()?, r.u64()?);
                r.finish()?;
                if term < self.term {
                    ctx.reject(RejectReason::StaleTerm);
                    return Ok(());
                }
                self.adopt_term(ctx, term);
                if self.role != Role::Leader {
                    self.follow(ctx, d.from);
                    self.leader_commit = self.leader_commit.max(commit);
                    self.commit = self.commit.max(commit.min(self.matched_upto));
                    self.apply_ready(ctx);
                }
            }
            MsgKind::RAFT_COMMIT_ACK => {
                let (term, applied) = (r.u64()?, r.u64()?);
                r.finish()?;
                if term == self.term && self.role == Role::Leader {
                    let e = self.peer_applied.entry(d.from).or_insert(0);
                    *e = (*e).max(applied);
                    self.answer_clients(ctx);
                }
            }
            MsgKind::HEARTBEAT => {
                let (term, sent_at) = (r.u64()?, r.u64()?);
                r.finish()?;
                if term < self.term {
                    ctx.reject(RejectReason::StaleTerm);
                    return Ok(());
                }
                self.adopt_term(ctx, term);
                if self.role == Role::Leader {
                    return Ok(());
                }
                self.follow(ctx, d.from);
                let dur = ctx.timing.lease_duration;
                if ctx.core.grant_lease(LeaseRole::Leadership, d.from, ctx.now, dur).is_ok() {
                    let mut w = Writer::new();
                    w.u64(self.term).u64(sent_at).u64(dur);
                    ctx.send(d.from, MsgKind::HEARTBEAT_ACK, w.finish());
                }
            }
            MsgKind::HEARTBEAT_ACK => {
                let (term, sent_at, dur) = (r.u64()?, r.u64()?, r.u64()?);
                r.finish()?;
                if term == self.term && self.role == Role::Leader {
                    // Measured from our send time, so the holder's view
                    // never outlasts the granter's.
                    let lease = crate::tcb::Lease {
                        holder: self.me,
                        granted_at: sent_at,
                        duration: dur,
                        granter_slack: 0,
                    };
                    ctx.core.record_held_lease(LeaseRole::Leadership, d.from, lease);
                }
            }
            _ => return Err(DecodeError::Invalid("kind")),
        }
        Ok(())
    }
}

impl Protocol for Raft {
    fn kind(&self) -> ProtocolKind {
        ProtocolKind::Raft
    }

    fn kinds(&self) -> &'static [MsgKind] {
        KINDS
    }

    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        match self.role {
            Role::Leader => self.become_leader(ctx),
            _ => self.reset_deadline(ctx),
        }
    }

    fn on_client(&mut self, ctx: &mut Ctx<'_>, req: ClientRequest) {
        let (c, rid) = (req.client_id, req.request_id);
        if self.role != Role::Leader {
            ctx.reply(c, rid, Err(ClientError::NotLeader(self.leader)));
            return;
        }
        match req.op {
            Op::Get { key } => {
                let fresh = self.applied >= self.noop_index
                    && self.holds_read_lease(ctx.now, ctx.core, ctx.members, ctx.f);
                if !fresh {
                    ctx.reply(c, rid, Err(ClientError::Unavailable));
                    return;
                }
                let out = ctx.read_local(&key).map(|v| v.map(|(v, _)| v));
                self.stats.rounds.push((false, 0));
                ctx.reply(c, rid, out);
            }
            Op::Put { key, value } => {
                if ctx.core.dedupe_client(c, rid) == Dedupe::Duplicate {
                    if self.applied_table.get(&c).is_some_and(|r| *r >= rid) {
                        ctx.reply(c, rid, Ok(None));
                    } else if !self.waiting.values().any(|w| *w == (c, rid)) {
                        ctx.reply(c, rid, Err(ClientError::Duplicate));
                    }
                    return;
                }
                self.log.push(Entry {
                    term: self.term,
                    op: Some((c, rid, key, value)),
                });
                let i = self.last_index();
                self.matched_upto = i;
                self.waiting.insert(i, (c, rid));
                self.replicate_all(ctx);
                self.advance_commit(ctx);
            }
        }
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_>, msg: Delivered) {
        if self.handle(ctx, &msg).is_err() {
            ctx.reject(RejectReason::Malformed);
        }
    }

    fn on_tick(&mut self, ctx: &mut Ctx<'_>) {
        if self.role == Role::Leader {
            if ctx.now >= self.next_heartbeat {
                self.heartbeat(ctx);
                self.replicate_all(ctx);
            }
            return;
        }
        if self.joining || ctx.core.status() == Status::Recovering {
            return;
        }
        let Some(deadline) = self.deadline else {
            self.reset_deadline(ctx);
            return;
        };
        if ctx.now < deadline || ctx.core.lease_blocks(LeaseRole::Leadership, self.me, ctx.now) {
            return;
        }
        self.start_election(ctx);
    }

    fn on_membership(&mut self, ctx: &mut Ctx<'_>, old: &[NodeId]) {
        if self.role != Role::Leader {
            return;
        }
        let peers: Vec<NodeId> = ctx.peers().collect();
        self.next_index.retain(|p, _| peers.contains(p));
        self.match_index.retain(|p, _| peers.contains(p));
        self.peer_applied.retain(|p, _| peers.contains(p));
        for p in peers.iter().filter(|p| !old.contains(p)) {
            self.next_index.insert(*p, 1);
            self.match_index.insert(*p, 0);
            self.peer_applied.insert(*p, 0);
        }
        self.replicate_all(ctx);
        self.advance_commit(ctx);
    }

    fn lease_claim(&self, now: Tick, core: &TrustedCore, members: &[NodeId], f: usize) -> bool {
        self.role == Role::Leader && self.holds_read_lease(now, core, members, f)
    }

    fn leader_hint(&self) -> Option<NodeId> {
        self.leader
    }

    fn stats(&self) -> &ProtoStats {
        &self.stats
    }
}
