//! The per-replica trusted core.
//!
//! Everything the adversary must not read or forge lives here: channel
//! keys, the send (`cnt`) and receive (`rcnt`) counters, the client table,
//! verified-but-early messages and the lease table. Callers only ever see
//! shielded bytes going out and verified payloads coming in.

mod lease;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::crypto::{self, Digest, Key};
use crate::trace::RejectReason;
use crate::types::{
    ChannelId, ClientId, ClientRequest, Counter, MessageMeta, MsgKind, NodeId, SequenceTuple,
    ShieldedMessage, SignedRequest, Tick, ViewId,
};
use crate::wire::{Reader, Writer};

pub use lease::{lease_valid, Lease, LeaseRole};

/// Default bound on buffered future messages per channel.
pub const DEFAULT_BUFFER_LIMIT: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Status {
    Normal,
    ViewChange,
    Recovering,
    /// Removed from the membership or self-stopped; sends nothing.
    Halted,
}

impl Status {
    pub fn can_send(self) -> bool {
        !matches!(self, Status::Halted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelKeys {
    pub mac: Key,
    /// Present only in confidential mode.
    pub cipher: Option<Key>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TcbError {
    #[error("no provisioned key for channel {0}")]
    NoKey(ChannelId),
    #[error("core status {0:?} forbids sending")]
    NotOperational(Status),
    #[error("channel {0} does not originate at this node")]
    ForeignChannel(ChannelId),
    #[error("unexpired lease held by {holder}")]
    LeaseConflict { holder: NodeId },
    #[error("view {new} does not advance current view {current}")]
    StaleView { current: ViewId, new: ViewId },
}

/// A verified message, decrypted if the channel is confidential.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivered {
    pub from: NodeId,
    pub kind: MsgKind,
    pub tuple: SequenceTuple,
    pub payload: Vec<u8>,
    /// Digest of the shielded bytes as received.
    pub digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    AcceptNow(Delivered),
    BufferFuture(SequenceTuple),
    Reject(RejectReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dedupe {
    Fresh,
    Duplicate,
}

/// Secrets handed over by the attestation service.
#[derive(Debug, Clone, Default)]
pub struct Provisioning {
    pub channel_keys: Vec<(ChannelId, ChannelKeys)>,
    pub client_master: Option<Key>,
    pub sealing_key: Option<Key>,
}

#[derive(Debug)]
pub struct TrustedCore {
    node_id: NodeId,
    status: Status,
    view: ViewId,
    confidential: bool,
    channel_keys: BTreeMap<ChannelId, ChannelKeys>,
    send_counters: BTreeMap<ChannelId, Counter>,
    recv_counters: BTreeMap<ChannelId, Counter>,
    client_table: BTreeMap<ClientId, u64>,
    future_buffer: BTreeMap<ChannelId, BTreeMap<Counter, Delivered>>,
    buffer_limit: usize,
    lease_table: BTreeMap<LeaseRole, Lease>,
    held_leases: BTreeMap<(LeaseRole, NodeId), Lease>,
    lease_slack: Tick,
    client_master: Option<Key>,
    sealing_key: Option<Key>,
    /// Authentication disabled (reference mode); counters still apply.
    plain: bool,
}

impl TrustedCore {
    /// A core with no secrets; it can neither shield nor verify until
    /// provisioned.
    pub fn new(node_id: NodeId, confidential: bool) -> Self {
        Self {
            node_id,
            status: Status::Normal,
            view: 0,
            confidential,
            channel_keys: BTreeMap::new(),
            send_counters: BTreeMap::new(),
            recv_counters: BTreeMap::new(),
            client_table: BTreeMap::new(),
            future_buffer: BTreeMap::new(),
            buffer_limit: DEFAULT_BUFFER_LIMIT,
            lease_table: BTreeMap::new(),
            held_leases: BTreeMap::new(),
            lease_slack: 1,
            client_master: None,
            sealing_key: None,
            plain: false,
        }
    }

    /// Disables tags and tag checks, leaving sequencing intact.
    pub fn with_plain(mut self, plain: bool) -> Self {
        self.plain = plain;
        self
    }

    fn tag(&self, key: &Key, meta: &MessageMeta, payload: &[u8]) -> crypto::Tag {
        if self.plain {
            return [0; crypto::MAC_LEN];
        }
        crypto::mac(key, &ShieldedMessage::authenticated_bytes(meta, payload))
    }

    pub fn with_buffer_limit(mut self, limit: usize) -> Self {
        self.buffer_limit = limit;
        self
    }

    pub fn with_lease_slack(mut self, slack: Tick) -> Self {
        self.lease_slack = slack;
        self
    }

    pub fn provision(&mut self, p: Provisioning) {
        for (cq, k) in p.channel_keys {
            self.channel_keys.insert(cq, k);
        }
        if p.client_master.is_some() {
            self.client_master = p.client_master;
        }
        if p.sealing_key.is_some() {
            self.sealing_key = p.sealing_key;
        }
    }

    pub fn node_id(&self) -> NodeId {
        self.node_id
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn set_status(&mut self, s: Status) {
        self.status = s;
    }

    pub fn view(&self) -> ViewId {
        self.view
    }

    pub fn confidential(&self) -> bool {
        self.confidential
    }

    pub fn sealing_key(&self) -> Option<&Key> {
        self.sealing_key.as_ref()
    }

    pub fn has_key(&self, cq: &ChannelId) -> bool {
        self.channel_keys.contains_key(cq)
    }

    pub fn is_provisioned(&self) -> bool {
        !self.channel_keys.is_empty()
    }

    /// Last counter assigned on `cq`.
    pub fn send_counter(&self, cq: &ChannelId) -> Counter {
        self.send_counters.get(cq).copied().unwrap_or(0)
    }

    /// Last contiguously accepted counter on `cq`.
    pub fn recv_counter(&self, cq: &ChannelId) -> Counter {
        self.recv_counters.get(cq).copied().unwrap_or(0)
    }

    pub fn buffered(&self, cq: &ChannelId) -> usize {
        self.future_buffer.get(cq).map_or(0, |b| b.len())
    }

    /// Moves to a new network view. Counters restart at zero because the
    /// view is part of every sequence tuple; buffered futures from the old
    /// view can never become deliverable and are dropped.
    pub fn install_view(&mut self, view: ViewId) -> Result<(), TcbError> {
        if view <= self.view {
            return Err(TcbError::StaleView {
                current: self.view,
                new: view,
            });
        }
        self.view = view;
        self.send_counters.clear();
        self.recv_counters.clear();
        self.future_buffer.clear();
        Ok(())
    }

    /// Forgets everything about a channel (peer excised).
    pub fn drop_channel(&mut self, cq: &ChannelId) {
        self.future_buffer.remove(cq);
    }

    fn seal_payload(&self, keys: &ChannelKeys, meta: &MessageMeta, payload: &[u8]) -> Vec<u8> {
        match (self.confidential, keys.cipher) {
            (true, Some(ck)) => crypto::seal(
                &ck,
                meta.tuple.view as u32,
                meta.tuple.cnt,
                &meta.encode(),
                payload,
            ),
            _ => payload.to_vec(),
        }
    }

    fn open_payload(&self, keys: &ChannelKeys, msg: &ShieldedMessage) -> Option<Vec<u8>> {
        match (self.confidential, keys.cipher) {
            (true, Some(ck)) => crypto::open(
                &ck,
                msg.meta.tuple.view as u32,
                msg.meta.tuple.cnt,
                &msg.meta.encode(),
                &msg.payload,
            ),
            _ => Some(msg.payload.clone()),
        }
    }

    /// Assigns the next counter on `cq` and authenticates `req` together
    /// with its sequence tuple.
    pub fn shield_request(
        &mut self,
        req: &[u8],
        cq: ChannelId,
        kind: MsgKind,
    ) -> Result<ShieldedMessage, TcbError> {
        if !self.status.can_send() {
            return Err(TcbError::NotOperational(self.status));
        }
        if cq.sender != self.node_id {
            return Err(TcbError::ForeignChannel(cq));
        }
        let keys = *self.channel_keys.get(&cq).ok_or(TcbError::NoKey(cq))?;
        let cnt = self.send_counters.entry(cq).or_insert(0);
        *cnt += 1;
        let meta = MessageMeta {
            tuple: SequenceTuple {
                view: self.view,
                cq,
                cnt: *cnt,
            },
            sender: cq.sender,
            receiver: cq.receiver,
            kind,
        };
        let payload = self.seal_payload(&keys, &meta, req);
        let mac = self.tag(&keys.mac, &meta, &payload);
        Ok(ShieldedMessage { meta, payload, mac })
    }

    fn authenticate(&self, msg: &ShieldedMessage) -> Result<ChannelKeys, RejectReason> {
        if msg.meta.receiver != self.node_id {
            return Err(RejectReason::Malformed);
        }
        // Without a key the tag cannot be checked, which is an
        // authentication failure like any other.
        let keys = *self
            .channel_keys
            .get(&msg.meta.tuple.cq)
            .ok_or(RejectReason::BadMac)?;
        let bytes = ShieldedMessage::authenticated_bytes(&msg.meta, &msg.payload);
        if !self.plain && !crypto::verify_mac(&keys.mac, &bytes, &msg.mac) {
            return Err(RejectReason::BadMac);
        }
        if msg.meta.tuple.view != self.view {
            return Err(RejectReason::WrongView);
        }
        Ok(keys)
    }

    /// Checks authenticity, view and freshness of an incoming message.
    ///
    /// `cnt == rcnt + 1` is accepted and advances `rcnt`; larger counters are
    /// buffered until the gap closes; anything at or below `rcnt` is a replay.
    pub fn verify_request(&mut self, msg: &ShieldedMessage) -> Verdict {
        if msg.meta.kind == MsgKind::ACK {
            return Verdict::Reject(RejectReason::Malformed);
        }
        let keys = match self.authenticate(msg) {
            Ok(k) => k,
            Err(r) => return Verdict::Reject(r),
        };
        let tuple = msg.meta.tuple;
        let cq = tuple.cq;
        let rcnt = self.recv_counter(&cq);
        if tuple.cnt <= rcnt {
            return Verdict::Reject(RejectReason::StaleCounter);
        }
        let Some(payload) = self.open_payload(&keys, msg) else {
            return Verdict::Reject(RejectReason::Malformed);
        };
        let delivered = Delivered {
            from: msg.meta.sender,
            kind: msg.meta.kind,
            tuple,
            payload,
            digest: msg.digest(),
        };
        if tuple.cnt == rcnt + 1 {
            self.recv_counters.insert(cq, tuple.cnt);
            return Verdict::AcceptNow(delivered);
        }
        let buf = self.future_buffer.entry(cq).or_default();
        if buf.contains_key(&tuple.cnt) {
            return Verdict::Reject(RejectReason::StaleCounter);
        }
        if buf.len() >= self.buffer_limit {
            return Verdict::Reject(RejectReason::BufferFull);
        }
        buf.insert(tuple.cnt, delivered);
        Verdict::BufferFuture(tuple)
    }

    /// Releases buffered messages that now continue the `rcnt` sequence.
    pub fn drain_ready(&mut self, cq: ChannelId) -> Vec<Delivered> {
        let mut out = Vec::new();
        let Some(buf) = self.future_buffer.get_mut(&cq) else {
            return out;
        };
        let mut rcnt = self.recv_counters.get(&cq).copied().unwrap_or(0);
        while let Some(d) = buf.remove(&(rcnt + 1)) {
            rcnt += 1;
            out.push(d);
        }
        if buf.is_empty() {
            self.future_buffer.remove(&cq);
        }
        if !out.is_empty() {
            self.recv_counters.insert(cq, rcnt);
        }
        out
    }

    /// Cumulative acknowledgement for data received on `data_cq`
    /// (peer -> self), sent back on the reverse channel. Acks are
    /// unsequenced: a replayed ack can only repeat an old, smaller bound.
    pub fn shield_ack(&self, data_cq: ChannelId, upto: Counter) -> Result<ShieldedMessage, TcbError> {
        if !self.status.can_send() {
            return Err(TcbError::NotOperational(self.status));
        }
        let cq = data_cq.reversed();
        if cq.sender != self.node_id {
            return Err(TcbError::ForeignChannel(cq));
        }
        let keys = self.channel_keys.get(&cq).ok_or(TcbError::NoKey(cq))?;
        let meta = MessageMeta {
            tuple: SequenceTuple {
                view: self.view,
                cq,
                cnt: 0,
            },
            sender: cq.sender,
            receiver: cq.receiver,
            kind: MsgKind::ACK,
        };
        let mut w = Writer::with_capacity(8);
        w.u64(upto);
        let payload = w.finish();
        let mac = self.tag(&keys.mac, &meta, &payload);
        Ok(ShieldedMessage { meta, payload, mac })
    }

    /// Returns the acknowledged data channel (self -> peer) and bound.
    pub fn verify_ack(&self, msg: &ShieldedMessage) -> Result<(ChannelId, Counter), RejectReason> {
        if msg.meta.kind != MsgKind::ACK {
            return Err(RejectReason::Malformed);
        }
        self.authenticate(msg)?;
        let mut r = Reader::new(&msg.payload);
        let upto = r.u64().map_err(|_| RejectReason::Malformed)?;
        r.finish().map_err(|_| RejectReason::Malformed)?;
        Ok((msg.meta.tuple.cq.reversed(), upto))
    }

    /// Fresh iff `rid` is newer than the latest processed request of `c`;
    /// a fresh id becomes the new latest.
    pub fn dedupe_client(&mut self, c: ClientId, rid: u64) -> Dedupe {
        let last = self.client_table.entry(c).or_insert(0);
        if rid > *last {
            *last = rid;
            Dedupe::Fresh
        } else {
            Dedupe::Duplicate
        }
    }

    pub fn last_processed(&self, c: ClientId) -> u64 {
        self.client_table.get(&c).copied().unwrap_or(0)
    }

    /// Replaces the client table, e.g. with the table implied by the
    /// committed state when taking over as coordinator.
    pub fn reset_client_table(&mut self, table: BTreeMap<ClientId, u64>) {
        self.client_table = table;
    }

    fn client_key(&self, c: ClientId) -> Option<Key> {
        self.client_master
            .as_ref()
            .map(|m| client_key_from_master(m, c))
    }

    pub fn verify_client(&self, signed: &SignedRequest) -> bool {
        match self.client_key(signed.request.client_id) {
            Some(k) => crypto::verify_mac(&k, &signed.request.encode(), &signed.mac),
            None => false,
        }
    }

    /// Grants (or renews) a lease. An exclusive role cannot be granted to a
    /// new holder while the current holder's lease is unexpired in the
    /// granter's view.
    pub fn grant_lease(
        &mut self,
        role: LeaseRole,
        holder: NodeId,
        now: Tick,
        duration: Tick,
    ) -> Result<Lease, TcbError> {
        let mut duration = duration;
        if let Some(cur) = self.lease_table.get(&role) {
            if cur.holder != holder && cur.is_valid(now, true) {
                return Err(TcbError::LeaseConflict { holder: cur.holder });
            }
            // A renewal never shortens what the holder was already promised.
            if cur.holder == holder && cur.is_valid(now, false) {
                duration = duration.max(cur.holder_expiry() - now);
            }
        }
        let lease = Lease {
            holder,
            granted_at: now,
            duration,
            granter_slack: self.lease_slack,
        };
        self.lease_table.insert(role, lease);
        Ok(lease)
    }

    pub fn granted_lease(&self, role: LeaseRole) -> Option<&Lease> {
        self.lease_table.get(&role)
    }

    /// True when an unexpired (granter view) lease for `role` is held by
    /// someone other than `candidate`.
    pub fn lease_blocks(&self, role: LeaseRole, candidate: NodeId, now: Tick) -> bool {
        self.lease_table
            .get(&role)
            .is_some_and(|l| l.holder != candidate && l.is_valid(now, true))
    }

    pub fn clear_lease(&mut self, role: LeaseRole) {
        self.lease_table.remove(&role);
    }

    /// Holder side: remembers a lease granted to this node by `granter`.
    pub fn record_held_lease(&mut self, role: LeaseRole, granter: NodeId, lease: Lease) {
        let slot = self.held_leases.entry((role, granter)).or_insert(lease);
        if lease.granted_at >= slot.granted_at {
            *slot = lease;
        }
    }

    pub fn held_lease(&self, role: LeaseRole, granter: NodeId) -> Option<&Lease> {
        self.held_leases.get(&(role, granter))
    }

    pub fn clear_held_leases(&mut self, role: LeaseRole) {
        self.held_leases.retain(|(r, _), _| *r != role);
    }
}

pub fn client_key_from_master(master: &Key, c: ClientId) -> Key {
    let mut info = b"client-key/".to_vec();
    info.extend_from_slice(&c.0.to_le_bytes());
    crypto::derive_key(master, &info)
}

pub fn sign_request(key: &Key, request: ClientRequest) -> SignedRequest {
    let mac = crypto::mac(key, &request.encode());
    SignedRequest { request, mac }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: NodeId = NodeId(0);
    const B: NodeId = NodeId(1);

    fn keys(seed: u8, confidential: bool) -> ChannelKeys {
        ChannelKeys {
            mac: [seed; 32],
            cipher: confidential.then_some([seed.wrapping_add(100); 32]),
        }
    }

    fn pair(confidential: bool) -> (TrustedCore, TrustedCore) {
        let ab = ChannelId::new(A, B);
        let ba = ab.reversed();
        let prov = Provisioning {
            channel_keys: vec![(ab, keys(1, confidential)), (ba, keys(2, confidential))],
            client_master: Some([7; 32]),
            sealing_key: None,
        };
        let mut a = TrustedCore::new(A, confidential);
        let mut b = TrustedCore::new(B, confidential);
        a.provision(prov.clone());
        b.provision(prov);
        (a, b)
    }

    fn ab() -> ChannelId {
        ChannelId::new(A, B)
    }

    #[test]
    fn first_shield_carries_counter_one_then_two() {
        let (mut a, _) = pair(false);
        let m1 = a.shield_request(b"x", ab(), MsgKind::PROBE).unwrap();
        let m2 = a.shield_request(b"y", ab(), MsgKind::PROBE).unwrap();
        assert_eq!(m1.meta.tuple.cnt, 1);
        assert_eq!(m2.meta.tuple.cnt, 2);
        assert_eq!(a.send_counter(&ab()), 2);
    }

    #[test]
    fn shield_without_key_fails() {
        let mut c = TrustedCore::new(A, false);
        assert_eq!(
            c.shield_request(b"x", ab(), MsgKind::PROBE),
            Err(TcbError::NoKey(ab()))
        );
        assert_eq!(c.send_counter(&ab()), 0);
    }

    #[test]
    fn shield_when_halted_fails() {
        let (mut a, _) = pair(false);
        a.set_status(Status::Halted);
        assert_eq!(
            a.shield_request(b"x", ab(), MsgKind::PROBE),
            Err(TcbError::NotOperational(Status::Halted))
        );
    }

    #[test]
    fn shield_on_foreign_channel_fails() {
        let (_, mut b) = pair(false);
        assert_eq!(
            b.shield_request(b"x", ab(), MsgKind::PROBE),
            Err(TcbError::ForeignChannel(ab()))
        );
    }

    /// Shields `n` messages and delivers all but the ones whose counters are
    /// listed in `skip`, returning the skipped messages.
    fn advance(a: &mut TrustedCore, n: u64) -> Vec<ShieldedMessage> {
        (0..n)
            .map(|i| a.shield_request(&i.to_le_bytes(), ab(), MsgKind::PROBE).unwrap())
            .collect()
    }

    #[test]
    fn next_counter_is_accepted_and_advances_rcnt() {
        let (mut a, mut b) = pair(false);
        let msgs = advance(&mut a, 5);
        for m in &msgs[..4] {
            assert!(matches!(b.verify_request(m), Verdict::AcceptNow(_)));
        }
        assert_eq!(b.recv_counter(&ab()), 4);
        match b.verify_request(&msgs[4]) {
            Verdict::AcceptNow(d) => {
                assert_eq!(d.tuple.cnt, 5);
                assert_eq!(d.payload, 4u64.to_le_bytes());
            }
            v => panic!("unexpected {v:?}"),
        }
        assert_eq!(b.recv_counter(&ab()), 5);
    }

    #[test]
    fn counter_at_or_below_rcnt_is_stale() {
        let (mut a, mut b) = pair(false);
        let msgs = advance(&mut a, 4);
        for m in &msgs {
            b.verify_request(m);
        }
        assert_eq!(b.recv_counter(&ab()), 4);
        assert_eq!(
            b.verify_request(&msgs[2]),
            Verdict::Reject(RejectReason::StaleCounter)
        );
        assert_eq!(
            b.verify_request(&msgs[3]),
            Verdict::Reject(RejectReason::StaleCounter)
        );
        assert_eq!(b.recv_counter(&ab()), 4);
    }

    #[test]
    fn future_counter_is_buffered_without_advancing() {
        let (mut a, mut b) = pair(false);
        let msgs = advance(&mut a, 7);
        for m in &msgs[..4] {
            b.verify_request(m);
        }
        assert_eq!(
            b.verify_request(&msgs[6]),
            Verdict::BufferFuture(msgs[6].meta.tuple)
        );
        assert_eq!(b.recv_counter(&ab()), 4);
        assert_eq!(b.buffered(&ab()), 1);
        // Same future again is a replay.
        assert_eq!(
            b.verify_request(&msgs[6]),
            Verdict::Reject(RejectReason::StaleCounter)
        );
    }

    #[test]
    fn drain_respects_gaps_then_releases_in_order() {
        let (mut a, mut b) = pair(false);
        let msgs = advance(&mut a, 7);
        for m in &msgs[..4] {
            b.verify_request(m);
        }
        b.verify_request(&msgs[5]);
        b.verify_request(&msgs[6]);
        assert!(b.drain_ready(ab()).is_empty());
        assert!(matches!(b.verify_request(&msgs[4]), Verdict::AcceptNow(_)));
        let drained = b.drain_ready(ab());
        let cnts: Vec<_> = drained.iter().map(|d| d.tuple.cnt).collect();
        assert_eq!(cnts, vec![6, 7]);
        assert_eq!(b.recv_counter(&ab()), 7);
        assert!(b.drain_ready(ab()).is_empty());
    }

    #[test]
    fn wrong_view_is_rejected_after_mac_check() {
        let (mut a, mut b) = pair(false);
        let m = a.shield_request(b"x", ab(), MsgKind::PROBE).unwrap();
        b.install_view(1).unwrap();
        assert_eq!(b.verify_request(&m), Verdict::Reject(RejectReason::WrongView));
    }

    #[test]
    fn install_view_resets_counters_and_must_advance() {
        let (mut a, mut b) = pair(false);
        let m = a.shield_request(b"x", ab(), MsgKind::PROBE).unwrap();
        b.verify_request(&m);
        a.install_view(2).unwrap();
        b.install_view(2).unwrap();
        assert_eq!(a.send_counter(&ab()), 0);
        assert_eq!(b.recv_counter(&ab()), 0);
        let m = a.shield_request(b"y", ab(), MsgKind::PROBE).unwrap();
        assert_eq!(m.meta.tuple.view, 2);
        assert!(matches!(b.verify_request(&m), Verdict::AcceptNow(_)));
        assert_eq!(
            a.install_view(2),
            Err(TcbError::StaleView { current: 2, new: 2 })
        );
    }

    #[test]
    fn forged_key_and_unknown_channel_are_bad_mac() {
        let (_, mut b) = pair(false);
        let mut rogue = TrustedCore::new(A, false);
        rogue.provision(Provisioning {
            channel_keys: vec![(ab(), keys(99, false))],
            ..Default::default()
        });
        let m = rogue.shield_request(b"x", ab(), MsgKind::PROBE).unwrap();
        assert_eq!(b.verify_request(&m), Verdict::Reject(RejectReason::BadMac));
        let mut sybil = TrustedCore::new(NodeId(42), false);
        let cq = ChannelId::new(NodeId(42), B);
        sybil.provision(Provisioning {
            channel_keys: vec![(cq, keys(5, false))],
            ..Default::default()
        });
        let m = sybil.shield_request(b"x", cq, MsgKind::PROBE).unwrap();
        assert_eq!(b.verify_request(&m), Verdict::Reject(RejectReason::BadMac));
    }

    #[test]
    fn misaddressed_message_is_malformed() {
        let (mut a, mut b) = pair(false);
        let m = a.shield_request(b"x", ab(), MsgKind::PROBE).unwrap();
        let mut c = TrustedCore::new(NodeId(2), false);
        c.provision(Provisioning {
            channel_keys: vec![(ab(), keys(1, false))],
            ..Default::default()
        });
        assert_eq!(c.verify_request(&m), Verdict::Reject(RejectReason::Malformed));
        assert!(matches!(b.verify_request(&m), Verdict::AcceptNow(_)));
    }

    #[test]
    fn buffer_limit_applies_backpressure() {
        let (mut a, b) = pair(false);
        let mut b = b.with_buffer_limit(2);
        let msgs = advance(&mut a, 5);
        assert!(matches!(b.verify_request(&msgs[2]), Verdict::BufferFuture(_)));
        assert!(matches!(b.verify_request(&msgs[3]), Verdict::BufferFuture(_)));
        assert_eq!(
            b.verify_request(&msgs[4]),
            Verdict::Reject(RejectReason::BufferFull)
        );
    }

    #[test]
    fn acks_round_trip_and_are_not_requests() {
        let (a, mut b) = pair(false);
        let ack = b.shield_ack(ab(), 9).unwrap();
        assert_eq!(ack.meta.tuple.cnt, 0);
        assert_eq!(a.verify_ack(&ack), Ok((ab(), 9)));
        assert_eq!(b.verify_request(&ack), Verdict::Reject(RejectReason::Malformed));
        let mut bad = ack.clone();
        bad.payload[0] ^= 1;
        assert_eq!(a.verify_ack(&bad), Err(RejectReason::BadMac));
    }

    #[test]
    fn confidential_payloads_are_sealed_and_recovered() {
        let (mut a, mut b) = pair(true);
        let secret = b"attack at dawn, value bytes!";
        let m = a.shield_request(secret, ab(), MsgKind::PROBE).unwrap();
        let wire = m.encode();
        assert!(!wire.windows(secret.len()).any(|w| w == secret));
        match b.verify_request(&m) {
            Verdict::AcceptNow(d) => assert_eq!(d.payload, secret),
            v => panic!("unexpected {v:?}"),
        }
    }

    #[test]
    fn client_table_dedupes() {
        let (mut a, _) = pair(false);
        let c = ClientId(1);
        assert_eq!(a.dedupe_client(c, 1), Dedupe::Fresh);
        assert_eq!(a.dedupe_client(c, 7), Dedupe::Fresh);
        assert_eq!(a.dedupe_client(c, 7), Dedupe::Duplicate);
        assert_eq!(a.dedupe_client(c, 3), Dedupe::Duplicate);
        assert_eq!(a.dedupe_client(c, 9), Dedupe::Fresh);
        assert_eq!(a.last_processed(c), 9);
    }

    #[test]
    fn client_requests_are_authenticated() {
        let (a, _) = pair(false);
        let key = client_key_from_master(&[7; 32], ClientId(4));
        let req = ClientRequest {
            client_id: ClientId(4),
            request_id: 1,
            op: crate::types::Op::Get { key: b"k".to_vec() },
            known_view: 0,
            known_leader: None,
            min_index: 0,
        };
        let signed = sign_request(&key, req.clone());
        assert!(a.verify_client(&signed));
        let mut forged = signed.clone();
        forged.request.client_id = ClientId(5);
        assert!(!a.verify_client(&forged));
        let unprovisioned = TrustedCore::new(A, false);
        assert!(!unprovisioned.verify_client(&signed));
    }

    #[test]
    fn lease_interval_arithmetic() {
        let mut g = TrustedCore::new(A, false).with_lease_slack(10);
        let l = g.grant_lease(LeaseRole::Leadership, B, 100, 50).unwrap();
        assert_eq!(l.holder_expiry(), 150);
        assert_eq!(l.granter_expiry(), 160);
        assert!(!lease_valid(&l, 155, false));
        assert!(lease_valid(&l, 155, true));
        assert!(lease_valid(&l, 100, false) && lease_valid(&l, 100, true));
        assert!(lease_valid(&l, 150, false));
        assert!(!lease_valid(&l, 161, true));
    }

    #[test]
    fn lease_conflict_and_renewal() {
        let mut g = TrustedCore::new(A, false).with_lease_slack(10);
        g.grant_lease(LeaseRole::Leadership, B, 100, 50).unwrap();
        assert_eq!(
            g.grant_lease(LeaseRole::Leadership, NodeId(2), 120, 50),
            Err(TcbError::LeaseConflict { holder: B })
        );
        let renewed = g.grant_lease(LeaseRole::Leadership, B, 120, 50).unwrap();
        assert_eq!(renewed.granted_at, 120);
        // Still blocked at the granter's inclusive bound, free just after.
        assert!(g.grant_lease(LeaseRole::Leadership, NodeId(2), 180, 50).is_err());
        assert!(g.grant_lease(LeaseRole::Leadership, NodeId(2), 181, 50).is_ok());
        // Liveness roles are per holder and never conflict with each other.
        g.grant_lease(LeaseRole::Liveness(B), B, 0, 5).unwrap();
        g.grant_lease(LeaseRole::Liveness(NodeId(2)), NodeId(2), 0, 5).unwrap();
    }

    proptest! {
        /// Any single-bit flip anywhere in the encoding is rejected.
        #[test]
        fn single_bit_flips_are_rejected(payload in proptest::collection::vec(any::<u8>(), 0..64),
                                         bit in any::<usize>()) {
            let (mut a, mut b) = pair(false);
            let m = a.shield_request(&payload, ab(), MsgKind::PROBE).unwrap();
            let mut wire = m.encode();
            let bit = bit % (wire.len() * 8);
            wire[bit / 8] ^= 1 << (bit % 8);
            match ShieldedMessage::decode(&wire) {
                Err(_) => {}
                Ok(tampered) => prop_assert!(matches!(b.verify_request(&tampered), Verdict::Reject(_))),
            }
        }

        /// Delivering any permutation of a counter range yields each message
        /// exactly once, in counter order, and rcnt ends at the top.
        #[test]
        fn any_arrival_order_delivers_once_in_order(perm in Just((1u64..=12).collect::<Vec<_>>()).prop_shuffle(),
                                                    dup in proptest::collection::vec(0usize..12, 0..6)) {
            let (mut a, mut b) = pair(false);
            let msgs: Vec<_> = (1..=12u64)
                .map(|i| a.shield_request(&i.to_le_bytes(), ab(), MsgKind::PROBE).unwrap())
                .collect();
            let mut order: Vec<usize> = perm.iter().map(|c| (*c - 1) as usize).collect();
            order.extend(dup);
            let mut accepted = Vec::new();
            for i in order {
                if let Verdict::AcceptNow(d) = b.verify_request(&msgs[i]) {
                    accepted.push(d.tuple.cnt);
                    accepted.extend(b.drain_ready(ab()).iter().map(|d| d.tuple.cnt));
                }
                // rcnt is always the top of the contiguous prefix.
                let rc = b.recv_counter(&ab());
                prop_assert_eq!(accepted.len() as u64, rc);
            }
            prop_assert_eq!(accepted, (1..=12).collect::<Vec<_>>());
        }

        /// At every tick at most one holder sees a valid exclusive lease.
        #[test]
        fn exclusive_lease_has_one_holder(attempts in proptest::collection::vec((0u32..3, 1u64..8, 1u64..30), 1..40),
                                          slack in 0u64..10) {
            let mut g = TrustedCore::new(A, false).with_lease_slack(slack);
            let mut now = 0;
            let mut granted: Vec<Lease> = Vec::new();
            for (holder, gap, dur) in attempts {
                now += gap;
                if let Ok(l) = g.grant_lease(LeaseRole::Leadership, NodeId(holder), now, dur) {
                    granted.push(l);
                }
            }
            let horizon = now + 50;
            for t in 0..=horizon {
                let mut holders: Vec<NodeId> = granted
                    .iter()
                    .filter(|l| lease_valid(l, t, false))
                    .map(|l| l.holder)
                    .collect();
                holders.dedup();
                holders.sort();
                holders.dedup();
                prop_assert!(holders.len() <= 1, "tick {} holders {:?}", t, holders);
            }
        }
    }
}
