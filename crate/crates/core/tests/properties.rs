//! System-level properties over whole simulated runs and the checkers.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use trustrep::harness::{named_adversary, trace_digest, STANDARD_ADVERSARIES};
use trustrep::trace::{EventKind, Trace};
use trustrep::tracecheck::{
    check_agreement, check_channels, check_lease_exclusion, check_linearizable, linear, scan_for_secrets,
    HistoryOp, OpKind, Witness,
};
use trustrep::transport::{Frame, Network, SimNet};
use trustrep::{AdversaryPolicy, ClientId, FaultParams, NodeId, ProtocolKind, ScenarioConfig, Sim, SimOutput};

fn protocol() -> impl Strategy<Value = ProtocolKind> {
    prop::sample::select(ProtocolKind::ALL.to_vec())
}

fn adversary() -> impl Strategy<Value = &'static str> {
    prop::sample::select(STANDARD_ADVERSARIES.to_vec())
}

fn config(kind: ProtocolKind, seed: u64, adv: &str) -> ScenarioConfig {
    let mut c = ScenarioConfig::new(kind, seed);
    c.adversary = named_adversary(adv).unwrap();
    c.gst = 1_000;
    c.tick_budget = 15_000;
    c.workload.op_count = 60;
    c.workload.key_count = 16;
    c.workload.client_count = 4;
    c
}

fn simulate(cfg: ScenarioConfig) -> SimOutput {
    let mut sim = Sim::new(cfg).unwrap();
    sim.run();
    sim.finish()
}

/// Trusted events precede any traffic of the node, views only grow, and
/// time never runs backwards.
fn structural(trace: &Trace) -> Result<(), String> {
    let mut trusted = BTreeSet::new();
    let mut views: BTreeMap<NodeId, u64> = BTreeMap::new();
    let mut last = (0, 0);
    for e in trace.iter() {
        if (e.at, e.seq) < last {
            return Err(format!("event {} goes back in time", e.seq));
        }
        last = (e.at, e.seq);
        match &e.kind {
            EventKind::Trusted { node } => {
                if !trusted.insert(*node) {
                    return Err(format!("{node} trusted twice"));
                }
            }
            EventKind::Send { node, .. } | EventKind::Accept { node, .. } if !trusted.contains(node) => {
                return Err(format!("{node} talks before being trusted"));
            }
            EventKind::ViewChange { node, view } => {
                if let Some(prev) = views.insert(*node, *view) {
                    if *view <= prev {
                        return Err(format!("{node} view {view} after {prev}"));
                    }
                }
            }
            _ => {}
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn safety_holds_under_any_standard_adversary(kind in protocol(), adv in adversary(), seed in 0u64..1_000) {
        let cfg = config(kind, seed, adv);
        let out = simulate(cfg.clone());
        prop_assert_eq!(check_channels(&out.trace), vec![]);
        prop_assert_eq!(check_agreement(&out.trace, kind.totally_ordered()), vec![]);
        prop_assert_eq!(check_lease_exclusion(&out.lease_claims), vec![]);
        if let Err(e) = structural(&out.trace) {
            prop_assert!(false, "{}", e);
        }
        prop_assert!(out.history.len() <= cfg.workload.op_count);
        if kind == ProtocolKind::AllConcur {
            prop_assert_eq!(linear::check_sequential(&out.history, &linear::commit_order(&out.trace)), vec![]);
        } else {
            prop_assert_eq!(check_linearizable(&out.history).unwrap(), vec![]);
        }
    }

    #[test]
    fn runs_are_pure_functions_of_the_config(kind in protocol(), adv in adversary(), seed in 0u64..1_000) {
        let cfg = config(kind, seed, adv);
        let a = simulate(cfg.clone());
        let b = simulate(cfg);
        prop_assert_eq!(trace_digest(&a.trace), trace_digest(&b.trace));
        prop_assert_eq!(a.history, b.history);
    }

    #[test]
    fn keys_never_reach_the_wire(kind in protocol(), seed in 0u64..1_000, confidential in any::<bool>()) {
        let mut cfg = config(kind, seed, "replay");
        cfg.confidential = confidential;
        cfg.capture_wire = true;
        let out = simulate(cfg);
        let keys: Vec<Vec<u8>> = out.issued_keys.iter().map(|k| k.to_vec()).collect();
        let wire = out.wire.iter().map(|f| ("wire".to_string(), f.as_slice()));
        prop_assert_eq!(scan_for_secrets(wire, &keys), vec![]);
    }

    #[test]
    fn delivery_is_bounded_after_gst(seed in any::<u64>(), window in 0u64..8, drop in 0.0f64..0.5,
                                     sends in prop::collection::vec((0u64..200, 0u32..3, 0u32..3), 1..60)) {
        const DELTA: u64 = 5;
        const GST: u64 = 100;
        let policy = AdversaryPolicy::with_faults(FaultParams {
            drop_prob: drop,
            reorder_window: window,
            ..Default::default()
        });
        let mut net = SimNet::new(seed, DELTA, GST, policy);
        let mut sends = sends;
        sends.sort();
        let mut due: Vec<(u64, Vec<u8>)> = Vec::new();
        let mut got: BTreeSet<Vec<u8>> = BTreeSet::new();
        let mut si = 0;
        for now in 0..=300 {
            while si < sends.len() && sends[si].0 == now {
                let (_, a, b) = sends[si];
                let bytes = (si as u64).to_le_bytes().to_vec();
                if now >= GST {
                    due.push((now + DELTA, bytes.clone()));
                }
                net.send(now, Frame { from: NodeId(a), to: NodeId(b), bytes });
                si += 1;
            }
            for f in net.deliver(now) {
                got.insert(f.bytes);
            }
            for (by, bytes) in &due {
                if *by == now {
                    prop_assert!(got.contains(bytes), "frame sent at {} not delivered by {}", by - DELTA, by);
                }
            }
        }
    }
}

fn sequential_history(ops: &[(bool, u8)]) -> Vec<HistoryOp> {
    let mut current: Option<Vec<u8>> = None;
    ops.iter()
        .enumerate()
        .map(|(i, &(write, client))| {
            let t = 10 * i as u64;
            let value = if write {
                let v = vec![i as u8; 4];
                current = Some(v.clone());
                Some(v)
            } else {
                current.clone()
            };
            HistoryOp {
                client: ClientId(u32::from(client)),
                rid: i as u64 + 1,
                kind: if write { OpKind::Write } else { OpKind::Read },
                key: b"k".to_vec(),
                value,
                invoke: t,
                response: Some(t + 5),
                served_by: None,
            }
        })
        .collect()
}

proptest! {
    #[test]
    fn sequential_register_histories_pass(ops in prop::collection::vec((any::<bool>(), 0u8..4), 1..40)) {
        let h = sequential_history(&ops);
        prop_assert_eq!(check_linearizable(&h).unwrap(), vec![]);
    }

    /// A read that returns an overwritten value is caught, and the witness
    /// alone reproduces the violation.
    #[test]
    fn stale_reads_are_caught_with_replayable_witness(ops in prop::collection::vec((any::<bool>(), 0u8..4), 3..40),
                                                     pick in any::<prop::sample::Index>()) {
        let mut h = sequential_history(&ops);
        let writes: Vec<usize> = (0..h.len()).filter(|i| h[*i].is_write()).collect();
        let stale_reads: Vec<usize> = (0..h.len())
            .filter(|&i| !h[i].is_write() && writes.iter().filter(|w| **w < i).count() >= 2)
            .collect();
        prop_assume!(!stale_reads.is_empty());
        let r = stale_reads[pick.index(stale_reads.len())];
        let older = writes.iter().filter(|w| **w < r).rev().nth(1).copied().unwrap();
        h[r].value = h[older].value.clone();
        let first = check_linearizable(&h).unwrap();
        prop_assert_eq!(first.len(), 1);
        prop_assert_eq!(&first, &check_linearizable(&h).unwrap());
        let Witness::History(w) = &first[0].witness else { panic!("history witness expected") };
        prop_assert!(w.len() <= h.len());
        prop_assert_eq!(check_linearizable(w).unwrap().len(), 1);
    }
}

#[test]
fn identity_network_is_fifo_and_reject_free() {
    for kind in ProtocolKind::ALL {
        let out = simulate(config(kind, 3, "identity"));
        assert!(out.completed, "{kind}");
        assert_eq!(out.trace.count(|e| matches!(e, EventKind::Reject { .. })), 0, "{kind}");
        let mut sent: BTreeMap<_, Vec<u64>> = BTreeMap::new();
        let mut accepted: BTreeMap<_, Vec<u64>> = BTreeMap::new();
        for e in out.trace.iter() {
            match &e.kind {
                EventKind::Send { channel, view, cnt, .. } => sent.entry((*channel, *view)).or_default().push(*cnt),
                EventKind::Accept { channel, view, cnt, .. } => {
                    accepted.entry((*channel, *view)).or_default().push(*cnt)
                }
                _ => {}
            }
        }
        for (ch, acc) in &accepted {
            let s = &sent[ch];
            assert_eq!(acc.as_slice(), &s[..acc.len()], "{kind} {ch:?}");
        }
    }
}
