//! Deterministic discrete-time driver: replicas, clients, the attestation
//! service and the network advance together one tick at a time.
//!
//! Clients reach replicas over a direct one-tick link that the network
//! adversary does not control, and CAS pushes membership updates over its
//! own channel. Everything replicas say to each other goes through the
//! [`Network`].

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attestation::{attest, AttestOutcome, CasState, CodeIdentity, Machine, MachineId};
use crate::config::{ConfigError, ProtocolKind, ScenarioConfig, Shielding, Timing};
use crate::crypto::{self, Key};
use crate::harness::workload::gen_workload;
use crate::kvstore::Store;
use crate::protocols::{new_protocol, ClientError, Outcome, ProtoStats, Replica, ReplicaParts, Reply};
use crate::tcb::{sign_request, Provisioning, Status, TrustedCore};
use crate::trace::{EventKind, RejectReason, Trace};
use crate::tracecheck::history::{HistoryOp, LeaseClaim, OpKind};
use crate::transport::endpoint::DEFAULT_QUEUE_CAPACITY;
use crate::transport::{EndpointConfig, EndpointError, NetStats, Network, Nic, SimNet};
use crate::types::{
    ChannelId, ClientId, ClientRequest, MessageMeta, MsgKind, NodeId, Op, SequenceTuple,
    ShieldedMessage, SignedRequest, Tick,
};

/// Arena budget per replica.
const STORE_CAPACITY: usize = 64 << 20;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
    #[error("initial attestation of node {0} failed")]
    Bootstrap(usize),
    #[error("{0} does not support membership joins")]
    JoinsUnsupported(ProtocolKind),
}

#[derive(Debug)]
struct InFlightOp {
    rid: u64,
    op: Op,
    hist: usize,
    sent_at: Tick,
    target: NodeId,
    /// Waiting to resend at this tick.
    retry_at: Option<Tick>,
}

#[derive(Debug)]
struct Client {
    id: ClientId,
    key: Key,
    queue: VecDeque<Op>,
    current: Option<InFlightOp>,
    next_rid: u64,
    /// Highest commit position observed in a reply.
    session: u64,
    /// Tick the last operation completed; the next one starts strictly
    /// later so program order is visible in real time.
    done_at: Tick,
    read_target: NodeId,
    write_target: NodeId,
}

#[derive(Debug)]
struct Slot {
    replica: Replica,
    machine: MachineId,
    crashed: bool,
    crashed_at: Option<Tick>,
    excised: bool,
}

#[derive(Debug)]
struct PendingJoin {
    node: NodeId,
    sponsor: NodeId,
    deadline: Tick,
}

/// Everything a finished (or interrupted) run produced.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub trace: Trace,
    pub history: Vec<HistoryOp>,
    pub lease_claims: Vec<LeaseClaim>,
    pub ticks: Tick,
    pub net: NetStats,
    pub sent_by_kind: BTreeMap<MsgKind, u64>,
    pub proto_stats: BTreeMap<NodeId, ProtoStats>,
    pub wire: Vec<Vec<u8>>,
    pub arenas: Vec<Vec<u8>>,
    pub issued_keys: Vec<Key>,
    pub completed: bool,
}

pub struct Sim {
    cfg: ScenarioConfig,
    timing: Timing,
    now: Tick,
    cas: CasState,
    nic: Nic,
    net: Box<dyn Network>,
    slots: BTreeMap<NodeId, Slot>,
    machines: BTreeMap<MachineId, Machine>,
    next_machine: u32,
    trace: Trace,
    history: Vec<HistoryOp>,
    clients: Vec<Client>,
    to_replicas: VecDeque<(Tick, NodeId, SignedRequest)>,
    to_clients: VecDeque<(Tick, Reply)>,
    crash_plan: BTreeMap<Tick, Vec<NodeId>>,
    join_plan: BTreeMap<Tick, Vec<usize>>,
    pending_joins: Vec<PendingJoin>,
    open_claims: BTreeMap<NodeId, Tick>,
    lease_claims: Vec<LeaseClaim>,
    rng: ChaCha8Rng,
    /// Ids CAS handed out, in order.
    issued_ids: Vec<NodeId>,
}

impl std::fmt::Debug for Sim {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sim")
            .field("now", &self.now)
            .field("protocol", &self.cfg.protocol)
            .field("members", &self.cas.members())
            .finish()
    }
}

impl Sim {
    /// Builds a scenario on the simulated network.
    pub fn new(cfg: ScenarioConfig) -> Result<Self, SimError> {
        let net = SimNet::new(cfg.seed, cfg.delta, cfg.gst, cfg.adversary.clone())
            .with_capture(cfg.capture_wire);
        Self::with_network(cfg, Box::new(net))
    }

    /// Builds a scenario on any network. Initial nodes get ids `0..n`.
    pub fn with_network(cfg: ScenarioConfig, net: Box<dyn Network>) -> Result<Self, SimError> {
        cfg.validate()?;
        if !cfg.joins.is_empty() && cfg.protocol == ProtocolKind::AllConcur {
            return Err(SimError::JoinsUnsupported(cfg.protocol));
        }
        let timing = cfg.timing();
        let mut cas = CasState::new(cfg.seed, cfg.confidential);
        cas.expect(attest(&CodeIdentity::replica()));
        let mut sim = Self {
            timing,
            now: 0,
            cas,
            nic: Nic::new(),
            net,
            slots: BTreeMap::new(),
            machines: BTreeMap::new(),
            next_machine: 0,
            trace: Trace::new(),
            history: Vec::new(),
            clients: Vec::new(),
            to_replicas: VecDeque::new(),
            to_clients: VecDeque::new(),
            crash_plan: BTreeMap::new(),
            join_plan: BTreeMap::new(),
            pending_joins: Vec::new(),
            open_claims: BTreeMap::new(),
            lease_claims: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x51_7e_5e_ed),
            issued_ids: Vec::new(),
            cfg,
        };
        for (i, j) in sim.cfg.joins.iter().enumerate() {
            sim.join_plan.entry(j.at).or_default().push(i);
        }
        let mut cores: Vec<(MachineId, TrustedCore)> = Vec::new();
        for i in 0..sim.cfg.n {
            let machine = sim.new_machine(true, true);
            let AttestOutcome::Provisioned(p) = sim.cas.remote_attestation(&sim.machines[&machine]) else {
                return Err(SimError::Bootstrap(i));
            };
            let id = p.node_id;
            sim.issued_ids.push(id);
            sim.cas.bootstrap_member(id).map_err(|_| SimError::Bootstrap(i))?;
            for (_, earlier) in cores.iter_mut() {
                earlier.provision(sim.cas.keys_for_peer(earlier.node_id(), id));
            }
            cores.push((machine, sim.make_core(id, p.provisioning)));
            sim.trace.push(0, EventKind::Trusted { node: id });
        }
        let members: Vec<NodeId> = sim.cas.members().to_vec();
        for (machine, core) in cores {
            let id = core.node_id();
            let replica = sim.build_replica(core, members.clone(), 0, false)?;
            sim.slots.insert(
                id,
                Slot {
                    replica,
                    machine,
                    crashed: false,
                    crashed_at: None,
                    excised: false,
                },
            );
        }
        let mut replies = Vec::new();
        for slot in sim.slots.values_mut() {
            slot.replica.start(0, &mut sim.trace, &mut replies);
        }
        sim.route_replies(replies);
        sim.init_clients();
        Ok(sim)
    }

    fn new_machine(&mut self, genuine: bool, hw_key: bool) -> MachineId {
        let id = MachineId(self.next_machine);
        self.next_machine += 1;
        let mut code = CodeIdentity::replica();
        if !genuine {
            code.flags = 0xbad;
        }
        let key: Key = self.rng.gen();
        if hw_key {
            self.cas.register_machine(id, key);
        }
        let machine = Machine {
            id,
            code,
            hw_key: hw_key.then_some(key),
            rogue_key: self.rng.gen(),
        };
        self.machines.insert(id, machine);
        id
    }

    fn make_core(&self, id: NodeId, p: Provisioning) -> TrustedCore {
        let mut core = TrustedCore::new(id, self.cfg.confidential)
            .with_plain(self.cfg.shielding == Shielding::Plain)
            .with_lease_slack(self.timing.lease_slack);
        core.provision(p);
        core
    }

    /// Gives every already attested live node the keys for `newcomer`.
    fn share_keys_with(&mut self, newcomer: NodeId) {
        for (id, slot) in self.slots.iter_mut() {
            if !slot.crashed {
                let p = self.cas.keys_for_peer(*id, newcomer);
                slot.replica.core.provision(p);
            }
        }
    }

    fn build_replica(
        &mut self,
        core: TrustedCore,
        members: Vec<NodeId>,
        epoch: u64,
        joining: bool,
    ) -> Result<Replica, SimError> {
        let id = core.node_id();
        let ep = self.nic.create_rpc(
            id,
            EndpointConfig {
                lane: 0,
                window: self.cfg.window,
                queue_capacity: DEFAULT_QUEUE_CAPACITY,
                rto: self.timing.rto,
            },
        )?;
        let cipher = if self.cfg.confidential {
            core.sealing_key().copied()
        } else {
            None
        };
        let proto = new_protocol(self.cfg.protocol, id, &members, joining);
        let rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(31).wrapping_add(id.0 as u64));
        Ok(Replica::new(ReplicaParts {
            core,
            store: Store::new(STORE_CAPACITY, cipher),
            ep,
            proto,
            members,
            epoch,
            timing: self.timing,
            f: self.cfg.f,
            rng,
        })?)
    }

    fn init_clients(&mut self) {
        let members = self.cas.members().to_vec();
        let count = self.cfg.workload.client_count;
        for c in 0..count {
            let id = ClientId(c as u32);
            let spread = members[c % members.len()];
            let (read_target, write_target) = match self.cfg.protocol {
                ProtocolKind::Raft => (members[0], members[0]),
                ProtocolKind::Chain => (*members.last().expect("non-empty"), members[0]),
                _ => (spread, spread),
            };
            self.clients.push(Client {
                id,
                key: self.cas.client_key(id),
                queue: VecDeque::new(),
                current: None,
                next_rid: 1,
                session: 0,
                done_at: 0,
                read_target,
                write_target,
            });
        }
        for item in gen_workload(&self.cfg.workload, self.cfg.seed) {
            self.clients[item.client.0 as usize].queue.push_back(item.op);
        }
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn history(&self) -> &[HistoryOp] {
        &self.history
    }

    pub fn cas(&self) -> &CasState {
        &self.cas
    }

    pub fn members(&self) -> Vec<NodeId> {
        self.cas.members().to_vec()
    }

    pub fn replica(&self, id: NodeId) -> Option<&Replica> {
        self.slots.get(&id).map(|s| &s.replica)
    }

    pub fn replica_mut(&mut self, id: NodeId) -> Option<&mut Replica> {
        self.slots.get_mut(&id).map(|s| &mut s.replica)
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.slots.keys().copied().collect()
    }

    pub fn is_crashed(&self, id: NodeId) -> bool {
        self.slots.get(&id).is_some_and(|s| s.crashed)
    }

    pub fn issued_ids(&self) -> &[NodeId] {
        &self.issued_ids
    }

    pub fn net_stats(&self) -> NetStats {
        self.net.stats()
    }

    pub fn lease_claims(&self) -> &[LeaseClaim] {
        &self.lease_claims
    }

    /// Queues an extra operation for `client` after its workload.
    pub fn submit(&mut self, client: ClientId, op: Op) {
        if let Some(c) = self.clients.get_mut(client.0 as usize) {
            c.queue.push_back(op);
        }
    }

    /// Submits `op` and runs until it completes or `max_ticks` pass.
    pub fn execute(&mut self, client: ClientId, op: Op, max_ticks: Tick) -> Option<Outcome> {
        let kind = if op.is_write() { OpKind::Write } else { OpKind::Read };
        let start = self.history.len();
        self.submit(client, op);
        let end = self.now + max_ticks;
        while self.now < end {
            self.step();
            let done = self.history[start.min(self.history.len())..]
                .iter()
                .find(|h| h.client == client && h.kind == kind)
                .filter(|h| h.is_complete());
            if let Some(h) = done {
                return Some(Ok(h.value.clone().filter(|_| kind == OpKind::Read)));
            }
        }
        None
    }

    pub fn crash(&mut self, id: NodeId) {
        let now = self.now;
        if let Some(slot) = self.slots.get_mut(&id) {
            if slot.crashed {
                return;
            }
            slot.crashed = true;
            slot.crashed_at = Some(now);
            self.trace.push(now, EventKind::Crash { node: id });
        }
        self.close_claim(id, now);
    }

    pub fn crash_at(&mut self, at: Tick, id: NodeId) {
        self.crash_plan.entry(at).or_default().push(id);
    }

    /// No client has work left.
    pub fn is_idle(&self) -> bool {
        self.clients
            .iter()
            .all(|c| c.queue.is_empty() && c.current.is_none())
    }

    /// Runs until the workload drains or the tick budget is spent; returns
    /// whether the workload finished.
    pub fn run(&mut self) -> bool {
        while !self.is_idle() && self.now < self.cfg.tick_budget {
            self.step();
        }
        self.is_idle()
    }

    pub fn run_until(&mut self, t: Tick) {
        while self.now < t {
            self.step();
        }
    }

    /// Runs `ticks` more ticks.
    pub fn run_for(&mut self, ticks: Tick) {
        let end = self.now + ticks;
        self.run_until(end);
    }

    /// Advances one tick.
    pub fn step(&mut self) {
        self.now += 1;
        let now = self.now;
        let mut crashes = self.net.scripted(now);
        crashes.extend(self.crash_plan.remove(&now).unwrap_or_default());
        for c in crashes {
            self.crash(c);
        }
        for i in self.join_plan.remove(&now).unwrap_or_default() {
            self.start_join(i);
        }

        for frame in self.net.deliver(now) {
            if let Some(slot) = self.slots.get_mut(&frame.to) {
                if !slot.crashed {
                    slot.replica.ep.enqueue_rx(frame.bytes);
                }
            }
        }

        let mut replies = Vec::new();
        while self.to_replicas.front().is_some_and(|(at, _, _)| *at <= now) {
            let (_, to, req) = self.to_replicas.pop_front().expect("front");
            if let Some(slot) = self.slots.get_mut(&to) {
                if !slot.crashed {
                    slot.replica.on_client(now, &mut self.trace, &mut replies, req);
                }
            }
        }

        let mut frames = Vec::new();
        for slot in self.slots.values_mut().filter(|s| !s.crashed) {
            slot.replica.receive(now, &mut self.trace, &mut replies);
            slot.replica.tick(now, &mut self.trace, &mut replies);
            frames.extend(slot.replica.ep.flush());
        }
        for f in frames {
            self.net.send(now, f);
        }
        self.route_replies(replies);
        self.step_clients();
        self.excise_failed();
        self.progress_joins();
        self.monitor_leases();
        self.net.pace();
    }

    fn route_replies(&mut self, replies: Vec<Reply>) {
        for r in replies {
            self.to_clients.push_back((self.now + 1, r));
        }
    }

    fn rotate(&self, from: NodeId) -> NodeId {
        let members = self.cas.members();
        let i = members.iter().position(|m| *m == from).map_or(0, |i| i + 1);
        members[i % members.len()]
    }

    fn send_request(&mut self, ci: usize) {
        let now = self.now;
        let epoch = self.cas.epoch();
        let c = &mut self.clients[ci];
        let session = c.session;
        let Some(cur) = c.current.as_mut() else { return };
        cur.sent_at = now;
        cur.retry_at = None;
        let target = cur.target;
        let req = ClientRequest {
            client_id: c.id,
            request_id: cur.rid,
            op: cur.op.clone(),
            known_view: epoch,
            known_leader: Some(target),
            min_index: session,
        };
        let signed = sign_request(&c.key, req);
        self.to_replicas.push_back((now + 1, target, signed));
    }

    fn complete(&mut self, ci: usize, value: Option<Vec<u8>>, by: NodeId) {
        let now = self.now;
        let c = &mut self.clients[ci];
        let Some(cur) = c.current.take() else { return };
        c.done_at = now;
        let h = &mut self.history[cur.hist];
        h.response = Some(now);
        h.served_by = Some(by);
        if h.kind == OpKind::Read {
            h.value = value;
        }
    }

    fn step_clients(&mut self) {
        let now = self.now;
        while self.to_clients.front().is_some_and(|(at, _)| *at <= now) {
            let (_, r) = self.to_clients.pop_front().expect("front");
            let ci = r.client.0 as usize;
            let Some(c) = self.clients.get(ci) else { continue };
            let Some(cur) = c.current.as_ref() else { continue };
            if cur.rid != r.request_id || cur.retry_at.is_some() {
                continue;
            }
            let write = cur.op.is_write();
            let backoff = self.timing.client_backoff;
            match r.outcome {
                Ok(v) => {
                    let c = &mut self.clients[ci];
                    c.session = c.session.max(r.index);
                    self.complete(ci, v, r.from)
                }
                Err(ClientError::Duplicate) if write => self.complete(ci, None, r.from),
                Err(ClientError::BadAuth) => {
                    self.clients[ci].current = None;
                }
                Err(e) => {
                    let (next, delay) = match e {
                        ClientError::NotLeader(Some(l)) | ClientError::NotTail(Some(l)) if l != r.from => (l, 1),
                        _ => (self.rotate(r.from), backoff),
                    };
                    let c = &mut self.clients[ci];
                    if write {
                        c.write_target = next;
                    } else {
                        c.read_target = next;
                    }
                    let cur = c.current.as_mut().expect("checked");
                    cur.target = next;
                    cur.retry_at = Some(now + delay);
                }
            }
        }
        for ci in 0..self.clients.len() {
            let timeout = self.timing.client_timeout;
            let c = &self.clients[ci];
            match &c.current {
                Some(cur) => {
                    if cur.retry_at.is_some_and(|t| t <= now) {
                        self.send_request(ci);
                    } else if cur.retry_at.is_none() && now >= cur.sent_at + timeout {
                        let next = self.rotate(cur.target);
                        let write = cur.op.is_write();
                        let c = &mut self.clients[ci];
                        if write {
                            c.write_target = next;
                        } else {
                            c.read_target = next;
                        }
                        c.current.as_mut().expect("some").target = next;
                        self.send_request(ci);
                    }
                }
                None => {
                    let c = &mut self.clients[ci];
                    if c.done_at == now && now > 0 {
                        continue;
                    }
                    let Some(op) = c.queue.pop_front() else { continue };
                    let rid = c.next_rid;
                    c.next_rid += 1;
                    let (kind, value) = match &op {
                        Op::Put { value, .. } => (OpKind::Write, Some(value.clone())),
                        Op::Get { .. } => (OpKind::Read, None),
                    };
                    let target = if kind == OpKind::Write { c.write_target } else { c.read_target };
                    self.history.push(HistoryOp {
                        client: c.id,
                        rid,
                        kind,
                        key: op.key().to_vec(),
                        value,
                        invoke: now,
                        response: None,
                        served_by: None,
                    });
                    c.current = Some(InFlightOp {
                        rid,
                        op,
                        hist: self.history.len() - 1,
                        sent_at: now,
                        target,
                        retry_at: None,
                    });
                    self.send_request(ci);
                }
            }
        }
    }

    fn install_update(&mut self, epoch: u64, members: Vec<NodeId>) {
        let now = self.now;
        let mut replies = Vec::new();
        let log_view = self.cfg.protocol != ProtocolKind::Raft;
        for (id, slot) in self.slots.iter_mut() {
            if slot.crashed || slot.excised {
                continue;
            }
            let was = slot.replica.members.contains(id) || members.contains(id);
            if !was {
                continue;
            }
            slot.replica
                .install_membership(now, &mut self.trace, &mut replies, epoch, members.clone());
            if !members.contains(id) {
                slot.excised = true;
            } else if log_view {
                self.trace.push(now, EventKind::ViewChange { node: *id, view: epoch });
            }
        }
        self.route_replies(replies);
    }

    fn excise_failed(&mut self) {
        if !self.cfg.excise_enabled() {
            return;
        }
        let now = self.now;
        let due: Vec<NodeId> = self
            .slots
            .iter()
            .filter(|(id, s)| {
                s.crashed_at.is_some_and(|t| now >= t + self.timing.cas_fd_timeout)
                    && self.cas.members().contains(id)
            })
            .map(|(id, _)| *id)
            .collect();
        for id in due {
            if let Ok(u) = self.cas.remove(id) {
                self.install_update(u.epoch, u.members);
            }
        }
    }

    fn start_join(&mut self, spec_index: usize) {
        let spec = self.cfg.joins[spec_index].clone();
        let now = self.now;
        let machine = if spec.genuine && spec.hw_key {
            // A genuine rejoin comes back on the most recently crashed host.
            let reuse = self
                .slots
                .values()
                .filter(|s| s.crashed)
                .max_by_key(|s| s.crashed_at)
                .map(|s| s.machine);
            reuse.unwrap_or_else(|| self.new_machine(true, true))
        } else {
            self.new_machine(spec.genuine, spec.hw_key)
        };
        let outcome = self.cas.remote_attestation(&self.machines[&machine]);
        let p = match outcome {
            AttestOutcome::Denied(_) => {
                let claimed = NodeId(spec.claimed_id.unwrap_or(u32::MAX - machine.0));
                self.trace.push(
                    now,
                    EventKind::Reject {
                        node: claimed,
                        reason: RejectReason::JoinDenied,
                    },
                );
                self.inject_forged(claimed);
                return;
            }
            AttestOutcome::Provisioned(p) => p,
        };
        let id = p.node_id;
        self.issued_ids.push(id);
        self.share_keys_with(id);
        let mut core = self.make_core(id, p.provisioning);
        if p.epoch > 0 {
            let _ = core.install_view(p.epoch);
        }
        core.set_status(Status::Recovering);
        let Ok(replica) = self.build_replica(core, p.membership.clone(), p.epoch, true) else {
            return;
        };
        self.trace.push(now, EventKind::Trusted { node: id });
        self.slots.insert(
            id,
            Slot {
                replica,
                machine,
                crashed: false,
                crashed_at: None,
                excised: false,
            },
        );
        if let Some(at) = spec.crash_at {
            self.crash_plan.entry(at.max(now + 1)).or_default().push(id);
        }
        let sponsor = p
            .membership
            .iter()
            .copied()
            .find(|m| self.slots.get(m).is_some_and(|s| !s.crashed));
        let Some(sponsor) = sponsor else { return };
        let slot = self.slots.get_mut(&sponsor).expect("live sponsor");
        slot.replica.begin_join(now, &mut self.trace, id);
        self.pending_joins.push(PendingJoin {
            node: id,
            sponsor,
            deadline: now + self.timing.join_timeout,
        });
    }

    /// What an unattested machine can do: put frames on the wire under keys
    /// of its own making.
    fn inject_forged(&mut self, claimed: NodeId) {
        let kind = self
            .slots
            .values()
            .next()
            .and_then(|s| s.replica.proto.kinds().first().copied())
            .unwrap_or(MsgKind::PROBE);
        let key: Key = self.rng.gen();
        let members = self.cas.members().to_vec();
        for to in members {
            let cq = ChannelId::new(claimed, to);
            let meta = MessageMeta {
                tuple: SequenceTuple {
                    view: self.cas.epoch(),
                    cq,
                    cnt: 1,
                },
                sender: claimed,
                receiver: to,
                kind,
            };
            let payload: Vec<u8> = (0..24).map(|_| self.rng.gen()).collect();
            let mac = crypto::mac(&key, &ShieldedMessage::authenticated_bytes(&meta, &payload));
            let msg = ShieldedMessage { meta, payload, mac };
            self.net.send(
                self.now,
                crate::transport::Frame {
                    from: claimed,
                    to,
                    bytes: msg.encode(),
                },
            );
        }
    }

    fn progress_joins(&mut self) {
        let now = self.now;
        let mut ready = Vec::new();
        for slot in self.slots.values_mut() {
            ready.append(&mut slot.replica.ready_joins);
        }
        let pending = std::mem::take(&mut self.pending_joins);
        for j in pending {
            let joiner_alive = self.slots.get(&j.node).is_some_and(|s| !s.crashed);
            if ready.contains(&j.node) && joiner_alive {
                if let Ok(u) = self.cas.commit_join(j.node) {
                    self.install_update(u.epoch, u.members);
                }
            } else if now >= j.deadline || !joiner_alive {
                self.cas.revoke(j.node);
                if let Some(s) = self.slots.get_mut(&j.sponsor) {
                    s.replica.abort_join(j.node);
                }
                if let Some(s) = self.slots.get_mut(&j.node) {
                    s.replica.core.set_status(Status::Halted);
                    s.excised = true;
                }
                self.trace.push(
                    now,
                    EventKind::Reject {
                        node: j.node,
                        reason: RejectReason::JoinDenied,
                    },
                );
            } else {
                self.pending_joins.push(j);
            }
        }
    }

    fn close_claim(&mut self, id: NodeId, now: Tick) {
        if let Some(from) = self.open_claims.remove(&id) {
            self.lease_claims.push(LeaseClaim {
                node: id,
                from,
                to: now.saturating_sub(1).max(from),
            });
        }
    }

    fn monitor_leases(&mut self) {
        let now = self.now;
        let states: Vec<(NodeId, bool)> = self
            .slots
            .iter()
            .map(|(id, s)| (*id, !s.crashed && s.replica.lease_claim(now)))
            .collect();
        for (id, claiming) in states {
            match (claiming, self.open_claims.contains_key(&id)) {
                (true, false) => {
                    self.open_claims.insert(id, now);
                }
                (false, true) => self.close_claim(id, now),
                _ => {}
            }
        }
    }

    /// Closes open records and collects the run's artefacts.
    pub fn finish(&mut self) -> SimOutput {
        let now = self.now;
        for id in self.open_claims.keys().copied().collect::<Vec<_>>() {
            self.close_claim(id, now + 1);
        }
        let mut sent_by_kind = BTreeMap::new();
        let mut proto_stats = BTreeMap::new();
        let mut arenas = Vec::new();
        for (id, s) in &self.slots {
            for (k, v) in &s.replica.ep.stats().sent_by_kind {
                *sent_by_kind.entry(*k).or_insert(0) += v;
            }
            proto_stats.insert(*id, s.replica.proto.stats().clone());
            arenas.push(s.replica.store.arena().to_vec());
        }
        SimOutput {
            trace: self.trace.clone(),
            history: self.history.clone(),
            lease_claims: self.lease_claims.clone(),
            ticks: now,
            net: self.net.stats(),
            sent_by_kind,
            proto_stats,
            wire: self.net.captured_wire().to_vec(),
            arenas,
            issued_keys: self.cas.issued_keys(),
            completed: self.is_idle(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ProtocolKind, seed: u64) -> ScenarioConfig {
        let mut c = ScenarioConfig::new(kind, seed);
        c.workload.op_count = 120;
        c.workload.key_count = 20;
        c
    }

    #[test]
    fn every_protocol_drains_a_benign_workload() {
        for kind in ProtocolKind::ALL {
            let mut sim = Sim::new(small(kind, 1)).unwrap();
            assert!(sim.run(), "{kind} stalled at tick {}", sim.now());
            assert!(sim.history().iter().all(|h| h.is_complete()), "{kind}");
            eprintln!("{kind}: {} ticks", sim.now());
        }
    }
}
