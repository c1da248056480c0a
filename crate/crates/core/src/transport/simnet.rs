//! Deterministic discrete-event network under partial synchrony.
//!
//! Honest latency is uniform in `[1, delta]`. Before `gst` the adversary may
//! drop and delay freely; from `gst` on, frames on channels that are not
//! partitioned are always delivered within `delta` of being sent.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crypto;
use crate::types::{
    ChannelId, MessageMeta, MsgKind, NodeId, SequenceTuple, ShieldedMessage, Tick, HEADER_LEN,
};

use super::adversary::{Action, AdversaryPolicy, Partition, ScriptedAction};
use super::{Frame, NetStats, Network};

const CAPTURE_LIMIT: usize = 4096;

/// A frame scheduled for delivery.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct NetEvent {
    pub deliver_at: Tick,
    seq: u64,
    pub sent_at: Tick,
    pub channel: ChannelId,
    pub msg: Vec<u8>,
}

#[derive(Debug)]
pub struct SimNet {
    heap: BinaryHeap<Reverse<NetEvent>>,
    seq: u64,
    rng: ChaCha8Rng,
    delta: Tick,
    gst: Tick,
    policy: AdversaryPolicy,
    script: VecDeque<ScriptedAction>,
    partition: Partition,
    tamper_next: Vec<(NodeId, NodeId)>,
    captured: VecDeque<Frame>,
    stats: NetStats,
    wire: Option<Vec<Vec<u8>>>,
}

fn link(from: NodeId, to: NodeId) -> ChannelId {
    ChannelId::new(from, to)
}

impl SimNet {
    pub fn new(seed: u64, delta: Tick, gst: Tick, policy: AdversaryPolicy) -> Self {
        let mut script: Vec<ScriptedAction> = policy.scripted.clone();
        script.sort_by_key(|s| s.at);
        Self {
            heap: BinaryHeap::new(),
            seq: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_0e7),
            delta: delta.max(1),
            gst,
            policy,
            script: script.into(),
            partition: Partition::default(),
            tamper_next: Vec::new(),
            captured: VecDeque::new(),
            stats: NetStats::default(),
            wire: None,
        }
    }

    pub fn with_capture(mut self, on: bool) -> Self {
        self.wire = on.then(Vec::new);
        self
    }

    pub fn policy(&self) -> &AdversaryPolicy {
        &self.policy
    }

    fn schedule(&mut self, sent_at: Tick, deliver_at: Tick, from: NodeId, to: NodeId, msg: Vec<u8>) {
        self.seq += 1;
        self.heap.push(Reverse(NetEvent {
            deliver_at,
            seq: self.seq,
            sent_at,
            channel: link(from, to),
            msg,
        }));
    }

    fn latency(&mut self, now: Tick, reorder: Tick) -> Tick {
        let base = self.rng.gen_range(1..=self.delta);
        let extra = if reorder > 0 {
            self.rng.gen_range(0..=reorder)
        } else {
            0
        };
        if now >= self.gst {
            (base + extra).min(self.delta)
        } else {
            base + extra
        }
    }

    fn corrupt_any(&mut self, bytes: &[u8]) -> Vec<u8> {
        let mut out = bytes.to_vec();
        if !out.is_empty() {
            let bit = self.rng.gen_range(0..out.len() * 8);
            out[bit / 8] ^= 1 << (bit % 8);
        }
        out
    }

    fn corrupt_payload(&mut self, bytes: &[u8]) -> Vec<u8> {
        let mut out = bytes.to_vec();
        let mac_start = out.len().saturating_sub(crypto::MAC_LEN);
        if mac_start > HEADER_LEN {
            let i = self.rng.gen_range(HEADER_LEN..mac_start);
            out[i] ^= 0xff;
            out
        } else {
            self.corrupt_any(bytes)
        }
    }

    fn capture(&mut self, frame: &Frame) {
        if self.captured.len() >= CAPTURE_LIMIT {
            self.captured.pop_front();
        }
        self.captured.push_back(frame.clone());
    }

    fn replay_candidates(&self, from: Option<NodeId>, to: Option<NodeId>) -> Vec<Frame> {
        self.captured
            .iter()
            .filter(|f| from.map_or(true, |x| x == f.from) && to.map_or(true, |x| x == f.to))
            .cloned()
            .collect()
    }

    fn forged(&mut self, from: NodeId, to: NodeId) -> Vec<u8> {
        let view = self
            .captured
            .iter()
            .rev()
            .find(|f| f.from == from && f.to == to)
            .and_then(|f| ShieldedMessage::decode(&f.bytes).ok())
            .map_or(0, |m| m.meta.tuple.view);
        let cq = link(from, to);
        let meta = MessageMeta {
            tuple: SequenceTuple {
                view,
                cq,
                cnt: self.rng.gen_range(1..64),
            },
            sender: from,
            receiver: to,
            kind: MsgKind::PROBE,
        };
        let payload: Vec<u8> = (0..32).map(|_| self.rng.gen()).collect();
        let key: crypto::Key = self.rng.gen();
        let mac = crypto::mac(&key, &ShieldedMessage::authenticated_bytes(&meta, &payload));
        ShieldedMessage { meta, payload, mac }.encode()
    }

    fn delay_all(&mut self, now: Tick, from: NodeId, to: NodeId, ticks: Tick) {
        let ch = link(from, to);
        let events: Vec<NetEvent> = std::mem::take(&mut self.heap)
            .into_iter()
            .map(|Reverse(mut e)| {
                if e.channel == ch {
                    let mut at = e.deliver_at + ticks;
                    if now >= self.gst && !self.partition.cuts(from, to) {
                        at = at.min(e.sent_at.max(self.gst) + self.delta);
                    }
                    e.deliver_at = at.max(e.deliver_at);
                }
                e
            })
            .collect();
        self.heap = events.into_iter().map(Reverse).collect();
    }

    fn run_action(&mut self, now: Tick, action: Action, crashes: &mut Vec<NodeId>) {
        match action {
            Action::Partition { nodes } => self.partition.set(&nodes),
            Action::Heal => self.partition.heal(),
            Action::ReplayCaptured { from, to, count } => {
                let c = self.replay_candidates(from, to);
                for f in c.iter().rev().take(count) {
                    self.stats.replayed += 1;
                    let at = now + self.rng.gen_range(1..=self.delta);
                    self.schedule(now, at, f.from, f.to, f.bytes.clone());
                }
            }
            Action::TamperNext { from, to } => self.tamper_next.push((from, to)),
            Action::DelayAll { from, to, ticks } => self.delay_all(now, from, to, ticks),
            Action::CrashTee { node } => crashes.push(node),
            Action::InjectForged { from, to } => {
                let bytes = self.forged(from, to);
                self.stats.forged += 1;
                self.schedule(now, now + 1, from, to, bytes);
            }
        }
    }

    /// Per-channel frames in flight, for inspection.
    pub fn in_flight_by_channel(&self) -> BTreeMap<ChannelId, usize> {
        let mut m = BTreeMap::new();
        for Reverse(e) in self.heap.iter() {
            *m.entry(e.channel).or_insert(0) += 1;
        }
        m
    }
}

impl Network for SimNet {
    fn send(&mut self, now: Tick, frame: Frame) {
        self.stats.frames_sent += 1;
        self.stats.bytes_sent += frame.bytes.len() as u64;
        if let Some(w) = &mut self.wire {
            w.push(frame.bytes.clone());
        }
        self.capture(&frame);
        let (from, to) = (frame.from, frame.to);
        if self.partition.cuts(from, to) {
            self.stats.dropped += 1;
            return;
        }
        let p = self.policy.params_for(from, to);
        let post_gst = now >= self.gst;
        if p.drop_prob > 0.0 && self.rng.gen_bool(p.drop_prob.min(1.0)) && !post_gst {
            self.stats.dropped += 1;
            return;
        }
        let scripted_tamper = self
            .tamper_next
            .iter()
            .position(|&(f, t)| f == from && t == to);
        let random_tamper = p.tamper_prob > 0.0 && self.rng.gen_bool(p.tamper_prob.min(1.0));
        let lat = self.latency(now, p.reorder_window);
        if let Some(i) = scripted_tamper {
            self.tamper_next.remove(i);
            self.stats.tampered += 1;
            let bad = self.corrupt_payload(&frame.bytes);
            self.schedule(now, now + lat, from, to, bad);
            if post_gst {
                let lat = self.latency(now, p.reorder_window);
                self.schedule(now, now + lat, from, to, frame.bytes.clone());
            }
        } else if random_tamper {
            self.stats.tampered += 1;
            let bad = self.corrupt_any(&frame.bytes);
            self.schedule(now, now + lat, from, to, bad);
            if post_gst {
                let lat = self.latency(now, p.reorder_window);
                self.schedule(now, now + lat, from, to, frame.bytes.clone());
            }
        } else {
            self.schedule(now, now + lat, from, to, frame.bytes.clone());
        }
        if p.dup_prob > 0.0 && self.rng.gen_bool(p.dup_prob.min(1.0)) {
            self.stats.duplicated += 1;
            let lat = self.latency(now, p.reorder_window);
            self.schedule(now, now + lat, from, to, frame.bytes.clone());
        }
        if p.replay_prob > 0.0 && self.rng.gen_bool(p.replay_prob.min(1.0)) {
            let c = self.replay_candidates(Some(from), Some(to));
            if !c.is_empty() {
                let pick = c[self.rng.gen_range(0..c.len())].clone();
                self.stats.replayed += 1;
                let at = now + self.rng.gen_range(1..=self.delta.saturating_mul(4));
                self.schedule(now, at, from, to, pick.bytes);
            }
        }
    }

    fn deliver(&mut self, now: Tick) -> Vec<Frame> {
        let mut out = Vec::new();
        while let Some(Reverse(e)) = self.heap.peek() {
            if e.deliver_at > now {
                break;
            }
            let Reverse(e) = self.heap.pop().expect("peeked");
            // A partition also cuts frames already in flight.
            if self.partition.cuts(e.channel.sender, e.channel.receiver) {
                self.stats.dropped += 1;
                continue;
            }
            self.stats.frames_delivered += 1;
            out.push(Frame {
                from: e.channel.sender,
                to: e.channel.receiver,
                bytes: e.msg,
            });
        }
        out
    }

    fn scripted(&mut self, now: Tick) -> Vec<NodeId> {
        let mut crashes = Vec::new();
        while self.script.front().is_some_and(|s| s.at <= now) {
            let s = self.script.pop_front().expect("front exists");
            self.run_action(now, s.action, &mut crashes);
        }
        crashes
    }

    fn stats(&self) -> NetStats {
        self.stats
    }

    fn in_flight(&self) -> usize {
        self.heap.len()
    }

    fn captured_wire(&self) -> &[Vec<u8>] {
        self.wire.as_deref().unwrap_or(&[])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::adversary::FaultParams;

    fn frame(i: u8) -> Frame {
        Frame {
            from: NodeId(0),
            to: NodeId(1),
            bytes: vec![i; 80],
        }
    }

    fn drain(net: &mut SimNet, until: Tick) -> Vec<(Tick, Frame)> {
        let mut out = Vec::new();
        for t in 0..=until {
            for f in net.deliver(t) {
                out.push((t, f));
            }
        }
        out
    }

    #[test]
    fn benign_delivery_within_delta_fifo_per_seed() {
        let mut net = SimNet::new(1, 5, 0, AdversaryPolicy::identity());
        for i in 0..20 {
            net.send(0, frame(i));
        }
        let got = drain(&mut net, 10);
        assert_eq!(got.len(), 20);
        assert!(got.iter().all(|(t, _)| *t >= 1 && *t <= 5));
    }

    #[test]
    fn drops_only_before_gst() {
        let mut net = SimNet::new(2, 3, 100, AdversaryPolicy::drop(1.0));
        net.send(0, frame(1));
        net.send(100, frame(2));
        let got = drain(&mut net, 200);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].1.bytes[0], 2);
        assert!(got[0].0 <= 103);
    }

    #[test]
    fn reorder_is_clamped_after_gst() {
        let mut net = SimNet::new(3, 4, 50, AdversaryPolicy::reorder(40));
        for i in 0..30 {
            net.send(60, frame(i));
        }
        let got = drain(&mut net, 200);
        assert_eq!(got.len(), 30);
        assert!(got.iter().all(|(t, _)| *t <= 64));
    }

    #[test]
    fn tamper_after_gst_keeps_original() {
        let mut net = SimNet::new(4, 3, 0, AdversaryPolicy::tamper(1.0));
        net.send(0, frame(9));
        let got = drain(&mut net, 10);
        assert_eq!(got.len(), 2);
        assert!(got.iter().any(|(_, f)| f.bytes == vec![9; 80]));
        assert!(got.iter().any(|(_, f)| f.bytes != vec![9; 80]));
    }

    #[test]
    fn partition_drops_crossing_frames_even_after_gst() {
        let policy = AdversaryPolicy::partition(vec![NodeId(0)], 0, 50);
        let mut net = SimNet::new(5, 3, 0, policy);
        net.scripted(0);
        net.send(1, frame(1));
        net.scripted(50);
        net.send(51, frame(2));
        let got = drain(&mut net, 60);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].1.bytes[0], 2);
    }

    #[test]
    fn scripted_crash_is_reported_once() {
        let policy = AdversaryPolicy::identity().script(7, Action::CrashTee { node: NodeId(2) });
        let mut net = SimNet::new(6, 3, 0, policy);
        assert!(net.scripted(6).is_empty());
        assert_eq!(net.scripted(7), vec![NodeId(2)]);
        assert!(net.scripted(8).is_empty());
    }

    #[test]
    fn replay_reinjects_captured_bytes() {
        let policy = AdversaryPolicy::identity().script(
            10,
            Action::ReplayCaptured {
                from: Some(NodeId(0)),
                to: Some(NodeId(1)),
                count: 2,
            },
        );
        let mut net = SimNet::new(7, 3, 0, policy);
        net.send(0, frame(1));
        net.send(0, frame(2));
        let _ = drain(&mut net, 9);
        net.scripted(10);
        let again: Vec<u8> = drain(&mut net, 20).iter().map(|(_, f)| f.bytes[0]).collect();
        assert_eq!(again.len(), 2);
        assert!(again.contains(&1) && again.contains(&2));
    }

    #[test]
    fn same_seed_same_schedule() {
        let policy = AdversaryPolicy::with_faults(FaultParams {
            drop_prob: 0.3,
            dup_prob: 0.3,
            reorder_window: 9,
            ..Default::default()
        });
        let run = || {
            let mut net = SimNet::new(11, 4, 30, policy.clone());
            for i in 0..50u8 {
                net.send(i as Tick, frame(i));
            }
            drain(&mut net, 200)
        };
        assert_eq!(run(), run());
    }
}
