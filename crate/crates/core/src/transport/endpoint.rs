//! RPC endpoint: handler table, bounded TX/RX rings, sliding window and
//! retransmission over the trusted core's shield/verify primitives.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::tcb::{Delivered, TcbError, TrustedCore, Verdict};
use crate::trace::{EventKind, RejectReason, Trace};
use crate::types::{ChannelId, Counter, MsgKind, NodeId, ShieldedMessage, Tick, ViewId};

use super::Frame;

pub const DEFAULT_QUEUE_CAPACITY: usize = 4096;
pub const DEFAULT_WINDOW: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EndpointError {
    #[error("endpoint for {0} lane {1} already exists")]
    DuplicateEndpoint(NodeId, u16),
    #[error("handler for {0:?} registered after the first connection")]
    LateRegistration(MsgKind),
    #[error("queue full")]
    QueueFull,
    #[error(transparent)]
    Tcb(#[from] TcbError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EndpointConfig {
    pub lane: u16,
    pub window: usize,
    pub queue_capacity: usize,
    pub rto: Tick,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            lane: 0,
            window: DEFAULT_WINDOW,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            rto: 12,
        }
    }
}

/// Simulated NIC: tracks which (owner, lane) endpoints exist.
#[derive(Debug, Default)]
pub struct Nic {
    registered: BTreeSet<(NodeId, u16)>,
}

impl Nic {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create_rpc<H: Copy>(
        &mut self,
        owner: NodeId,
        config: EndpointConfig,
    ) -> Result<Endpoint<H>, EndpointError> {
        if !self.registered.insert((owner, config.lane)) {
            return Err(EndpointError::DuplicateEndpoint(owner, config.lane));
        }
        Ok(Endpoint::new(owner, config))
    }

    pub fn release(&mut self, owner: NodeId, lane: u16) {
        self.registered.remove(&(owner, lane));
    }
}

#[derive(Debug, Clone)]
struct InFlight {
    kind: MsgKind,
    payload: Vec<u8>,
    bytes: Vec<u8>,
    last_sent: Tick,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EndpointStats {
    /// First transmissions, by kind.
    pub sent_by_kind: BTreeMap<MsgKind, u64>,
    pub retransmits: u64,
    pub acks_sent: u64,
    pub rx_overflow: u64,
    pub tx_rejected: u64,
}

#[derive(Debug)]
pub struct Endpoint<H> {
    owner: NodeId,
    config: EndpointConfig,
    handlers: BTreeMap<MsgKind, H>,
    connected: bool,
    tx: VecDeque<Frame>,
    rx: VecDeque<Vec<u8>>,
    backlog: BTreeMap<NodeId, VecDeque<(MsgKind, Vec<u8>)>>,
    inflight: BTreeMap<NodeId, BTreeMap<Counter, InFlight>>,
    ack_due: BTreeSet<ChannelId>,
    stats: EndpointStats,
}

impl<H: Copy> Endpoint<H> {
    fn new(owner: NodeId, config: EndpointConfig) -> Self {
        Self {
            owner,
            config,
            handlers: BTreeMap::new(),
            connected: false,
            tx: VecDeque::new(),
            rx: VecDeque::new(),
            backlog: BTreeMap::new(),
            inflight: BTreeMap::new(),
            ack_due: BTreeSet::new(),
            stats: EndpointStats::default(),
        }
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn stats(&self) -> &EndpointStats {
        &self.stats
    }

    /// Registers (or replaces) the handler for `kind`.
    pub fn reg_hdlr(&mut self, kind: MsgKind, handler: H) -> Result<(), EndpointError> {
        if self.connected {
            return Err(EndpointError::LateRegistration(kind));
        }
        self.handlers.insert(kind, handler);
        Ok(())
    }

    fn channel_to(&self, peer: NodeId) -> ChannelId {
        ChannelId::with_lane(self.owner, peer, self.config.lane)
    }

    /// Messages queued or unacknowledged towards `peer`.
    pub fn outstanding(&self, peer: NodeId) -> usize {
        self.backlog.get(&peer).map_or(0, |b| b.len())
            + self.inflight.get(&peer).map_or(0, |b| b.len())
    }

    /// Queues `payload` for `to`. It is shielded as soon as the channel's
    /// window has room, which is immediately in the common case.
    pub fn send(
        &mut self,
        core: &mut TrustedCore,
        trace: &mut Trace,
        now: Tick,
        to: NodeId,
        kind: MsgKind,
        payload: Vec<u8>,
    ) -> Result<(), EndpointError> {
        self.connected = true;
        if self.outstanding(to) >= self.config.queue_capacity
            || self.tx.len() >= self.config.queue_capacity
        {
            self.stats.tx_rejected += 1;
            return Err(EndpointError::QueueFull);
        }
        let window_open = self.inflight.get(&to).map_or(0, |m| m.len()) < self.config.window
            && self.backlog.get(&to).map_or(true, |b| b.is_empty());
        if window_open {
            self.transmit(core, trace, now, to, kind, payload)
        } else {
            self.backlog.entry(to).or_default().push_back((kind, payload));
            Ok(())
        }
    }

    /// Reply to the sender of a delivered message.
    pub fn respond(
        &mut self,
        core: &mut TrustedCore,
        trace: &mut Trace,
        now: Tick,
        to: &Delivered,
        kind: MsgKind,
        payload: Vec<u8>,
    ) -> Result<(), EndpointError> {
        self.send(core, trace, now, to.from, kind, payload)
    }

    fn transmit(
        &mut self,
        core: &mut TrustedCore,
        trace: &mut Trace,
        now: Tick,
        to: NodeId,
        kind: MsgKind,
        payload: Vec<u8>,
    ) -> Result<(), EndpointError> {
        let cq = self.channel_to(to);
        let msg = core.shield_request(&payload, cq, kind)?;
        let bytes = msg.encode();
        trace.push(
            now,
            EventKind::Send {
                node: self.owner,
                digest: crate::crypto::digest(&bytes),
                channel: cq,
                view: msg.meta.tuple.view,
                cnt: msg.meta.tuple.cnt,
            },
        );
        *self.stats.sent_by_kind.entry(kind).or_insert(0) += 1;
        self.tx.push_back(Frame {
            from: self.owner,
            to,
            bytes: bytes.clone(),
        });
        self.inflight.entry(to).or_default().insert(
            msg.meta.tuple.cnt,
            InFlight {
                kind,
                payload,
                bytes,
                last_sent: now,
            },
        );
        Ok(())
    }

    fn pump(&mut self, core: &mut TrustedCore, trace: &mut Trace, now: Tick, to: NodeId) {
        loop {
            if self.inflight.get(&to).map_or(0, |m| m.len()) >= self.config.window {
                return;
            }
            let Some((kind, payload)) = self.backlog.get_mut(&to).and_then(|b| b.pop_front()) else {
                return;
            };
            if self.transmit(core, trace, now, to, kind, payload).is_err() {
                self.stats.tx_rejected += 1;
            }
        }
    }

    /// Network side: raw bytes arrive in the RX ring.
    pub fn enqueue_rx(&mut self, bytes: Vec<u8>) {
        if self.rx.len() >= self.config.queue_capacity {
            self.stats.rx_overflow += 1;
            return;
        }
        self.rx.push_back(bytes);
    }

    fn reject(&self, trace: &mut Trace, now: Tick, reason: RejectReason) {
        trace.push(
            now,
            EventKind::Reject {
                node: self.owner,
                reason,
            },
        );
    }

    fn log_accept(&self, trace: &mut Trace, now: Tick, d: &Delivered) {
        trace.push(
            now,
            EventKind::Accept {
                node: self.owner,
                digest: d.digest,
                channel: d.tuple.cq,
                view: d.tuple.view,
                cnt: d.tuple.cnt,
            },
        );
    }

    /// Drains the RX ring through `verify_request`, returning the accepted
    /// messages (with their handlers) in acceptance order. Rejections are
    /// logged; acknowledgements for touched channels are queued on TX.
    pub fn poll(
        &mut self,
        core: &mut TrustedCore,
        trace: &mut Trace,
        now: Tick,
    ) -> Vec<(H, Delivered)> {
        let mut out = Vec::new();
        while let Some(bytes) = self.rx.pop_front() {
            self.connected = true;
            let msg = match ShieldedMessage::decode(&bytes) {
                Ok(m) => m,
                Err(_) => {
                    self.reject(trace, now, RejectReason::Malformed);
                    continue;
                }
            };
            if msg.meta.kind == MsgKind::ACK {
                match core.verify_ack(&msg) {
                    Ok((cq, upto)) => self.on_ack(core, trace, now, cq, upto),
                    Err(r) => self.reject(trace, now, r),
                }
                continue;
            }
            let Some(&handler) = self.handlers.get(&msg.meta.kind) else {
                self.reject(trace, now, RejectReason::Malformed);
                continue;
            };
            match core.verify_request(&msg) {
                Verdict::AcceptNow(d) => {
                    let cq = d.tuple.cq;
                    self.log_accept(trace, now, &d);
                    out.push((handler, d));
                    for d in core.drain_ready(cq) {
                        self.log_accept(trace, now, &d);
                        if let Some(&h) = self.handlers.get(&d.kind) {
                            out.push((h, d));
                        }
                    }
                    self.ack_due.insert(cq);
                }
                Verdict::BufferFuture(t) => {
                    self.ack_due.insert(t.cq);
                }
                Verdict::Reject(r) => {
                    self.reject(trace, now, r);
                    if r == RejectReason::StaleCounter {
                        self.ack_due.insert(msg.meta.tuple.cq);
                    }
                }
            }
        }
        for cq in std::mem::take(&mut self.ack_due) {
            if let Ok(ack) = core.shield_ack(cq, core.recv_counter(&cq)) {
                self.stats.acks_sent += 1;
                self.tx.push_back(Frame {
                    from: self.owner,
                    to: cq.sender,
                    bytes: ack.encode(),
                });
            }
        }
        out
    }

    fn on_ack(&mut self, core: &mut TrustedCore, trace: &mut Trace, now: Tick, cq: ChannelId, upto: Counter) {
        if cq.sender != self.owner {
            return;
        }
        let peer = cq.receiver;
        if let Some(m) = self.inflight.get_mut(&peer) {
            let keep = m.split_off(&(upto + 1));
            *m = keep;
        }
        self.pump(core, trace, now, peer);
    }

    /// Re-sends the exact bytes of every message unacknowledged for `rto`.
    pub fn retransmit(&mut self, now: Tick) {
        for (peer, m) in self.inflight.iter_mut() {
            for f in m.values_mut() {
                if now >= f.last_sent + self.config.rto {
                    f.last_sent = now;
                    self.stats.retransmits += 1;
                    self.tx.push_back(Frame {
                        from: self.owner,
                        to: *peer,
                        bytes: f.bytes.clone(),
                    });
                }
            }
        }
    }

    /// Hands every queued frame to the caller (the network).
    pub fn flush(&mut self) -> Vec<Frame> {
        self.tx.drain(..).collect()
    }

    /// Moves to a new view: counters restart, so undelivered messages to
    /// peers that remain in `members` are shielded again under the new view;
    /// traffic to departed peers is dropped.
    pub fn install_view(
        &mut self,
        core: &mut TrustedCore,
        trace: &mut Trace,
        now: Tick,
        view: ViewId,
        members: &[NodeId],
    ) -> Result<(), EndpointError> {
        core.install_view(view)?;
        self.rx.clear();
        self.ack_due.clear();
        self.tx.retain(|_| false);
        let inflight = std::mem::take(&mut self.inflight);
        let mut backlog = std::mem::take(&mut self.backlog);
        for (peer, msgs) in inflight {
            let q = backlog.entry(peer).or_default();
            for (_, f) in msgs.into_iter().rev() {
                q.push_front((f.kind, f.payload));
            }
        }
        for (peer, q) in backlog {
            if !members.contains(&peer) || peer == self.owner {
                continue;
            }
            self.backlog.insert(peer, q);
            self.pump(core, trace, now, peer);
        }
        Ok(())
    }

    /// Forgets all traffic towards `peer`.
    pub fn drop_peer(&mut self, peer: NodeId) {
        self.inflight.remove(&peer);
        self.backlog.remove(&peer);
        self.tx.retain(|f| f.to != peer);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tcb::{ChannelKeys, Provisioning};

    const A: NodeId = NodeId(0);
    const B: NodeId = NodeId(1);

    fn cores() -> (TrustedCore, TrustedCore) {
        let keys = vec![
            (ChannelId::new(A, B), ChannelKeys { mac: [1; 32], cipher: None }),
            (ChannelId::new(B, A), ChannelKeys { mac: [2; 32], cipher: None }),
        ];
        let mut a = TrustedCore::new(A, false);
        let mut b = TrustedCore::new(B, false);
        for c in [&mut a, &mut b] {
            c.provision(Provisioning {
                channel_keys: keys.clone(),
                ..Default::default()
            });
        }
        (a, b)
    }

    fn pair(nic: &mut Nic) -> (Endpoint<u8>, Endpoint<u8>) {
        let mut ea = nic.create_rpc(A, EndpointConfig::default()).unwrap();
        let mut eb = nic.create_rpc(B, EndpointConfig::default()).unwrap();
        ea.reg_hdlr(MsgKind::PROBE, 1).unwrap();
        eb.reg_hdlr(MsgKind::PROBE, 1).unwrap();
        (ea, eb)
    }

    #[test]
    fn duplicate_endpoint_is_refused() {
        let mut nic = Nic::new();
        nic.create_rpc::<u8>(A, EndpointConfig::default()).unwrap();
        assert_eq!(
            nic.create_rpc::<u8>(A, EndpointConfig::default()).err(),
            Some(EndpointError::DuplicateEndpoint(A, 0))
        );
        let other_lane = EndpointConfig {
            lane: 1,
            ..Default::default()
        };
        assert!(nic.create_rpc::<u8>(A, other_lane).is_ok());
    }

    #[test]
    fn registration_last_wins_and_closes_on_connect() {
        let mut nic = Nic::new();
        let (mut ca, _) = cores();
        let mut ea: Endpoint<u8> = nic.create_rpc(A, EndpointConfig::default()).unwrap();
        ea.reg_hdlr(MsgKind::PROBE, 1).unwrap();
        ea.reg_hdlr(MsgKind::PROBE, 2).unwrap();
        assert_eq!(ea.handlers[&MsgKind::PROBE], 2);
        let mut t = Trace::new();
        ea.send(&mut ca, &mut t, 0, B, MsgKind::PROBE, vec![]).unwrap();
        assert_eq!(
            ea.reg_hdlr(MsgKind::HEARTBEAT, 3),
            Err(EndpointError::LateRegistration(MsgKind::HEARTBEAT))
        );
    }

    #[test]
    fn three_sends_flush_three_frames_and_dispatch_once() {
        let mut nic = Nic::new();
        let (mut ca, mut cb) = cores();
        let (mut ea, mut eb) = pair(&mut nic);
        let mut t = Trace::new();
        for i in 0..3u8 {
            ea.send(&mut ca, &mut t, 0, B, MsgKind::PROBE, vec![i]).unwrap();
        }
        let frames = ea.flush();
        assert_eq!(frames.len(), 3);
        for f in &frames {
            eb.enqueue_rx(f.bytes.clone());
        }
        eb.enqueue_rx(frames[1].bytes.clone());
        let got = eb.poll(&mut cb, &mut t, 1);
        let payloads: Vec<_> = got.iter().map(|(_, d)| d.payload[0]).collect();
        assert_eq!(payloads, vec![0, 1, 2]);
        assert_eq!(
            t.count(|k| matches!(k, EventKind::Reject { reason: RejectReason::StaleCounter, .. })),
            1
        );
        // The ack clears the sender's window.
        let acks = eb.flush();
        assert_eq!(acks.len(), 1);
        assert_eq!(ea.outstanding(B), 3);
        ea.enqueue_rx(acks[0].bytes.clone());
        assert!(ea.poll(&mut ca, &mut t, 2).is_empty());
        assert_eq!(ea.outstanding(B), 0);
    }

    #[test]
    fn missing_handler_rejects_as_malformed() {
        let mut nic = Nic::new();
        let (mut ca, mut cb) = cores();
        let (mut ea, mut eb) = pair(&mut nic);
        ea.reg_hdlr(MsgKind::HEARTBEAT, 9).unwrap();
        let mut t = Trace::new();
        ea.send(&mut ca, &mut t, 0, B, MsgKind::HEARTBEAT, vec![]).unwrap();
        for f in ea.flush() {
            eb.enqueue_rx(f.bytes);
        }
        assert!(eb.poll(&mut cb, &mut t, 1).is_empty());
        assert_eq!(
            t.count(|k| matches!(k, EventKind::Reject { reason: RejectReason::Malformed, .. })),
            1
        );
    }

    #[test]
    fn window_limits_inflight_and_backlog_drains_on_ack() {
        let mut nic = Nic::new();
        let (mut ca, mut cb) = cores();
        let cfg = EndpointConfig {
            window: 2,
            ..Default::default()
        };
        let mut ea: Endpoint<u8> = nic.create_rpc(A, cfg).unwrap();
        let mut eb: Endpoint<u8> = nic.create_rpc(B, cfg).unwrap();
        eb.reg_hdlr(MsgKind::PROBE, 0).unwrap();
        let mut t = Trace::new();
        for i in 0..5u8 {
            ea.send(&mut ca, &mut t, 0, B, MsgKind::PROBE, vec![i]).unwrap();
        }
        let mut delivered = Vec::new();
        let mut now = 0;
        while delivered.len() < 5 && now < 20 {
            now += 1;
            for f in ea.flush() {
                eb.enqueue_rx(f.bytes);
            }
            delivered.extend(eb.poll(&mut cb, &mut t, now).into_iter().map(|(_, d)| d.payload[0]));
            for f in eb.flush() {
                ea.enqueue_rx(f.bytes);
            }
            ea.poll(&mut ca, &mut t, now);
        }
        assert_eq!(delivered, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn queue_capacity_backpressure() {
        let mut nic = Nic::new();
        let (mut ca, _) = cores();
        let cfg = EndpointConfig {
            window: 1,
            queue_capacity: 3,
            ..Default::default()
        };
        let mut ea: Endpoint<u8> = nic.create_rpc(A, cfg).unwrap();
        let mut t = Trace::new();
        for _ in 0..3 {
            ea.send(&mut ca, &mut t, 0, B, MsgKind::PROBE, vec![]).unwrap();
        }
        assert_eq!(
            ea.send(&mut ca, &mut t, 0, B, MsgKind::PROBE, vec![]),
            Err(EndpointError::QueueFull)
        );
    }

    #[test]
    fn lost_frames_are_retransmitted_verbatim() {
        let mut nic = Nic::new();
        let (mut ca, _) = cores();
        let (mut ea, _) = pair(&mut nic);
        let mut t = Trace::new();
        ea.send(&mut ca, &mut t, 0, B, MsgKind::PROBE, vec![7]).unwrap();
        let first = ea.flush();
        ea.retransmit(5);
        assert!(ea.flush().is_empty());
        ea.retransmit(12);
        let again = ea.flush();
        assert_eq!(again, first);
        assert_eq!(t.count(|k| matches!(k, EventKind::Send { .. })), 1);
    }

    #[test]
    fn view_change_reshields_unacked_messages() {
        let mut nic = Nic::new();
        let (mut ca, mut cb) = cores();
        let (mut ea, mut eb) = pair(&mut nic);
        let mut t = Trace::new();
        ea.send(&mut ca, &mut t, 0, B, MsgKind::PROBE, vec![1]).unwrap();
        let old = ea.flush();
        ea.install_view(&mut ca, &mut t, 1, 1, &[A, B]).unwrap();
        eb.install_view(&mut cb, &mut t, 1, 1, &[A, B]).unwrap();
        let new = ea.flush();
        assert_eq!(new.len(), 1);
        assert_ne!(new[0].bytes, old[0].bytes);
        eb.enqueue_rx(old[0].bytes.clone());
        eb.enqueue_rx(new[0].bytes.clone());
        let got = eb.poll(&mut cb, &mut t, 2);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].1.tuple.view, 1);
        assert_eq!(
            t.count(|k| matches!(k, EventKind::Reject { reason: RejectReason::WrongView, .. })),
            1
        );
    }
}
