//! Fixtures shared by the benchmarks.

use trustrep::tcb::{ChannelKeys, Provisioning, TrustedCore};
use trustrep::tracecheck::{HistoryOp, OpKind};
use trustrep::types::ChannelId;
use trustrep::{ClientId, NodeId, ProtocolKind, ScenarioConfig};

/// Two cores sharing keys for both directions of the channel between
/// node 0 and node 1.
pub fn core_pair(confidential: bool) -> (TrustedCore, TrustedCore) {
    let ab = ChannelId::new(NodeId(0), NodeId(1));
    let keys = |seed: u8| ChannelKeys {
        mac: [seed; 32],
        cipher: confidential.then_some([seed ^ 0x5a; 32]),
    };
    let prov = Provisioning {
        channel_keys: vec![(ab, keys(1)), (ab.reversed(), keys(2))],
        client_master: Some([7; 32]),
        sealing_key: None,
    };
    let mut a = TrustedCore::new(NodeId(0), confidential);
    let mut b = TrustedCore::new(NodeId(1), confidential);
    a.provision(prov.clone());
    b.provision(prov);
    (a, b)
}

/// A single-key register history of `n` ops from `clients` clients where
/// each op overlaps its neighbours, so the checker has real work to do.
pub fn register_history(n: usize, clients: u32) -> Vec<HistoryOp> {
    let mut last: Option<Vec<u8>> = None;
    (0..n)
        .map(|i| {
            let write = i % 3 != 2;
            let value = if write {
                let v = (i as u32).to_le_bytes().to_vec();
                last = Some(v.clone());
                Some(v)
            } else {
                last.clone()
            };
            let t = 4 * i as u64;
            HistoryOp {
                client: ClientId(i as u32 % clients),
                rid: i as u64 + 1,
                kind: if write { OpKind::Write } else { OpKind::Read },
                key: b"k".to_vec(),
                value,
                invoke: t,
                response: Some(t + 6),
                served_by: None,
            }
        })
        .collect()
}

/// A small fault-free scenario, sized so one run takes milliseconds.
pub fn small_scenario(kind: ProtocolKind, ops: usize) -> ScenarioConfig {
    let mut c = ScenarioConfig::new(kind, 1);
    c.workload.op_count = ops;
    c.workload.key_count = 64;
    c.workload.client_count = 4;
    c
}
