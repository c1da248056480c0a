//! Offline checks over traces, client histories and run artefacts.
//!
//! Channel properties (`check_origin`, `check_order`, `check_nodup`) look
//! only at Send/Accept events. `check_agreement` compares what replicas
//! committed. The history checkers live in [`linear`].

pub mod corpus;
pub mod history;
pub mod linear;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::crypto::Digest;
use crate::trace::{EventKind, Trace, TraceEvent};
use crate::types::{ChannelId, ClientId, Counter, NodeId, Tick, ViewId};

pub use history::{HistoryOp, LeaseClaim, OpKind};
pub use linear::{check_linearizable, check_sequential, max_window, CheckError, MAX_WINDOW};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    Origin,
    Order,
    NoDup,
    Agreement,
    Linearizability,
    SequentialConsistency,
    SecretLeak,
    LeaseExclusion,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Witness {
    Events(Vec<TraceEvent>),
    History(Vec<HistoryOp>),
    Leases(Vec<LeaseClaim>),
    Bytes { source: String, offset: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub property: Property,
    pub detail: String,
    pub witness: Witness,
}

impl Violation {
    pub fn to_json(&self) -> serde_json::Value {
        let witness = match &self.witness {
            Witness::Events(evs) => {
                serde_json::Value::Array(evs.iter().map(TraceEvent::to_json).collect())
            }
            Witness::History(ops) => serde_json::to_value(ops).expect("ops serialize"),
            Witness::Leases(ls) => serde_json::to_value(ls).expect("claims serialize"),
            Witness::Bytes { source, offset } => {
                serde_json::json!({ "source": source, "offset": offset })
            }
        };
        serde_json::json!({
            "property": self.property,
            "detail": self.detail,
            "witness": witness,
        })
    }
}

type SendKey = (ChannelId, ViewId, Counter, Digest);

/// Every accepted message was sent, earlier, by the channel's sender.
pub fn check_origin(trace: &Trace) -> Vec<Violation> {
    let mut sent: BTreeSet<SendKey> = BTreeSet::new();
    let mut out = Vec::new();
    for ev in trace.iter() {
        match &ev.kind {
            EventKind::Send {
                node,
                digest,
                channel,
                view,
                cnt,
            } if *node == channel.sender => {
                sent.insert((*channel, *view, *cnt, *digest));
            }
            EventKind::Accept {
                node,
                digest,
                channel,
                view,
                cnt,
            } => {
                let matched = *node == channel.receiver && sent.contains(&(*channel, *view, *cnt, *digest));
                if !matched {
                    out.push(Violation {
                        property: Property::Origin,
                        detail: format!("{node} accepted {channel} view {view} cnt {cnt} that was never sent"),
                        witness: Witness::Events(vec![ev.clone()]),
                    });
                }
            }
            _ => {}
        }
    }
    out
}

/// Per receiver, channel and view, accepted counters run 1, 2, 3, ...
pub fn check_order(trace: &Trace) -> Vec<Violation> {
    let mut last: BTreeMap<(NodeId, ChannelId, ViewId), &TraceEvent> = BTreeMap::new();
    let mut out = Vec::new();
    for ev in trace.iter() {
        if let EventKind::Accept {
            node,
            channel,
            view,
            cnt,
            ..
        } = &ev.kind
        {
            let key = (*node, *channel, *view);
            let prev = last.get(&key).map_or(0, |p| match p.kind {
                EventKind::Accept { cnt, .. } => cnt,
                _ => 0,
            });
            // Re-acceptance of the same counter is a duplicate, reported by
            // `check_nodup`, not an ordering fault.
            if *cnt != prev + 1 && *cnt != prev {
                let mut w: Vec<TraceEvent> = last.get(&key).map(|p| (*p).clone()).into_iter().collect();
                w.push(ev.clone());
                out.push(Violation {
                    property: Property::Order,
                    detail: format!("{node} accepted cnt {cnt} after {prev} on {channel} view {view}"),
                    witness: Witness::Events(w),
                });
            }
            if *cnt > prev {
                last.insert(key, ev);
            }
        }
    }
    out
}

/// No message is accepted twice.
pub fn check_nodup(trace: &Trace) -> Vec<Violation> {
    let mut seen: BTreeMap<(NodeId, ChannelId, ViewId, Counter), &TraceEvent> = BTreeMap::new();
    let mut out = Vec::new();
    for ev in trace.iter() {
        if let EventKind::Accept {
            node,
            channel,
            view,
            cnt,
            ..
        } = &ev.kind
        {
            if let Some(first) = seen.insert((*node, *channel, *view, *cnt), ev) {
                out.push(Violation {
                    property: Property::NoDup,
                    detail: format!("{node} accepted {channel} view {view} cnt {cnt} twice"),
                    witness: Witness::Events(vec![first.clone(), ev.clone()]),
                });
            }
        }
    }
    out
}

/// Replicas agree on what was committed.
///
/// For totally ordered protocols each node's commit indices increase and a
/// given index carries the same write everywhere. For per-key protocols the
/// pair `(key, index)` identifies one version everywhere.
pub fn check_agreement(trace: &Trace, totally_ordered: bool) -> Vec<Violation> {
    type Content = (ClientId, u64, Vec<u8>, Digest);
    let mut by_slot: BTreeMap<(Vec<u8>, u64), (Content, &TraceEvent)> = BTreeMap::new();
    let mut last: BTreeMap<NodeId, (u64, &TraceEvent)> = BTreeMap::new();
    let mut out = Vec::new();
    for ev in trace.iter() {
        let EventKind::Commit {
            node,
            client,
            request,
            key,
            digest,
            index,
        } = &ev.kind
        else {
            continue;
        };
        let content = (*client, *request, key.clone(), *digest);
        let slot_key = if totally_ordered {
            (Vec::new(), *index)
        } else {
            (key.clone(), *index)
        };
        match by_slot.get(&slot_key) {
            Some((c, first)) if *c != content => out.push(Violation {
                property: Property::Agreement,
                detail: format!("index {index} holds different writes"),
                witness: Witness::Events(vec![(*first).clone(), ev.clone()]),
            }),
            Some(_) => {}
            None => {
                by_slot.insert(slot_key, (content, ev));
            }
        }
        if totally_ordered {
            if let Some((prev, pe)) = last.get(node) {
                if index <= prev {
                    out.push(Violation {
                        property: Property::Agreement,
                        detail: format!("{node} committed index {index} after {prev}"),
                        witness: Witness::Events(vec![(*pe).clone(), ev.clone()]),
                    });
                }
            }
            last.insert(*node, (*index, ev));
        }
    }
    out
}

/// Leadership claims of different nodes never overlap in time.
pub fn check_lease_exclusion(claims: &[LeaseClaim]) -> Vec<Violation> {
    let mut sorted = claims.to_vec();
    sorted.sort_by_key(|c| (c.from, c.to, c.node));
    let mut out = Vec::new();
    for (i, a) in sorted.iter().enumerate() {
        for b in &sorted[i + 1..] {
            if b.from > a.to {
                break;
            }
            if a.node != b.node {
                out.push(Violation {
                    property: Property::LeaseExclusion,
                    detail: format!("{} and {} both claimed leadership at tick {}", a.node, b.node, b.from),
                    witness: Witness::Leases(vec![*a, *b]),
                });
            }
        }
    }
    out
}

/// Looks for any of `secrets` verbatim inside the named byte regions.
pub fn scan_for_secrets<'a>(
    regions: impl IntoIterator<Item = (String, &'a [u8])>,
    secrets: &[Vec<u8>],
) -> Vec<Violation> {
    let needles: Vec<&Vec<u8>> = secrets.iter().filter(|s| s.len() >= 8).collect();
    let mut out = Vec::new();
    for (source, hay) in regions {
        for n in &needles {
            if let Some(offset) = hay.windows(n.len()).position(|w| w == n.as_slice()) {
                out.push(Violation {
                    property: Property::SecretLeak,
                    detail: format!("{}-byte secret found in {source}", n.len()),
                    witness: Witness::Bytes {
                        source: source.clone(),
                        offset,
                    },
                });
            }
        }
    }
    out
}

/// The three channel properties at once.
pub fn check_channels(trace: &Trace) -> Vec<Violation> {
    let mut v = check_origin(trace);
    v.extend(check_order(trace));
    v.extend(check_nodup(trace));
    v
}

/// Ticks spanned by a trace.
pub fn span(trace: &Trace) -> Tick {
    trace.events.last().map_or(0, |e| e.at)
}
