//! Consistency checks over client histories.
//!
//! Linearizability is checked per key (registers compose) with a
//! Wing-Gong style search over linearization prefixes, memoised on the set
//! of linearized operations and the register value. Sequential consistency
//! is checked against the order in which writes were committed.

use std::collections::{BTreeMap, HashMap, HashSet};

use thiserror::Error;

use crate::trace::{EventKind, Trace};
use crate::types::ClientId;

use super::{HistoryOp, OpKind, Property, Violation, Witness};

/// Largest number of mutually concurrent operations on one key the
/// linearizability search accepts.
pub const MAX_WINDOW: usize = 8;

const MINIMIZE_LIMIT: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckError {
    #[error("{width} concurrent operations on key {key:?} exceed the window of {max}")]
    WindowTooWide { key: String, width: usize, max: usize },
}

#[derive(Debug, Clone, Copy)]
struct LinOp {
    invoke: u64,
    response: u64,
    write: bool,
    value: u32,
}

fn interval(h: &HistoryOp) -> (u64, u64) {
    (h.invoke, h.response.unwrap_or(u64::MAX))
}

/// Operations of one key that matter: completed ones, plus writes that may
/// or may not have taken effect.
fn relevant(ops: &[&HistoryOp]) -> Vec<HistoryOp> {
    let mut v: Vec<HistoryOp> = ops
        .iter()
        .filter(|h| h.is_complete() || h.is_write())
        .map(|h| (*h).clone())
        .collect();
    v.sort_by_key(|h| (h.invoke, h.client, h.rid));
    v
}

fn window(ops: &[HistoryOp]) -> usize {
    let mut points: Vec<(u64, i32)> = Vec::new();
    for h in ops {
        let (a, b) = interval(h);
        points.push((a, 1));
        points.push((b.saturating_add(1), -1));
    }
    points.sort();
    let (mut cur, mut best) = (0i32, 0i32);
    for (_, d) in points {
        cur += d;
        best = best.max(cur);
    }
    best as usize
}

fn encode(ops: &[HistoryOp]) -> Vec<LinOp> {
    let mut ids: HashMap<&[u8], u32> = HashMap::new();
    ops.iter()
        .map(|h| {
            let value = match &h.value {
                None => 0,
                Some(v) => {
                    let next = ids.len() as u32 + 1;
                    *ids.entry(v.as_slice()).or_insert(next)
                }
            };
            let (invoke, response) = interval(h);
            LinOp {
                invoke,
                response,
                write: h.kind == OpKind::Write,
                value,
            }
        })
        .collect()
}

struct Search<'a> {
    ops: &'a [LinOp],
    required: usize,
    memo: HashSet<(Vec<u64>, u32)>,
}

impl Search<'_> {
    fn done(bits: &[u64], i: usize) -> bool {
        bits[i / 64] & (1 << (i % 64)) != 0
    }

    fn set(bits: &mut [u64], i: usize) {
        bits[i / 64] |= 1 << (i % 64);
    }

    fn dfs(&mut self, bits: &mut Vec<u64>, state: u32, complete_done: usize) -> bool {
        if complete_done == self.required {
            return true;
        }
        if !self.memo.insert((bits.clone(), state)) {
            return false;
        }
        let min_resp = (0..self.ops.len())
            .filter(|i| !Self::done(bits, *i))
            .map(|i| self.ops[i].response)
            .min()
            .unwrap_or(u64::MAX);
        let candidates: Vec<usize> = (0..self.ops.len())
            .filter(|i| !Self::done(bits, *i) && self.ops[*i].invoke <= min_resp)
            .collect();
        // A read that matches the current value can go first without loss
        // of generality: it changes nothing and only relaxes constraints.
        if let Some(&r) = candidates
            .iter()
            .find(|i| !self.ops[**i].write && self.ops[**i].value == state)
        {
            let mut next = bits.clone();
            Self::set(&mut next, r);
            return self.dfs(&mut next, state, complete_done + 1);
        }
        for i in candidates {
            let op = self.ops[i];
            if !op.write {
                continue;
            }
            let mut next = bits.clone();
            Self::set(&mut next, i);
            let counted = usize::from(op.response != u64::MAX);
            if self.dfs(&mut next, op.value, complete_done + counted) {
                return true;
            }
        }
        false
    }
}

fn linearizable(ops: &[HistoryOp]) -> bool {
    let enc = encode(ops);
    let required = enc.iter().filter(|o| o.response != u64::MAX).count();
    let mut s = Search {
        ops: &enc,
        required,
        memo: HashSet::new(),
    };
    let mut bits = vec![0u64; enc.len().div_ceil(64).max(1)];
    s.dfs(&mut bits, 0, 0)
}

/// Drops operations one at a time while the rest still fails.
fn minimize(mut ops: Vec<HistoryOp>) -> Vec<HistoryOp> {
    if ops.len() > MINIMIZE_LIMIT {
        return ops;
    }
    let mut i = 0;
    while i < ops.len() {
        // Keep writes that a remaining read observed, so the witness never
        // degenerates into a read of a value that was never written.
        let observed = ops[i].is_write()
            && ops
                .iter()
                .any(|o| !o.is_write() && o.value.is_some() && o.value == ops[i].value);
        if observed {
            i += 1;
            continue;
        }
        let mut trial = ops.clone();
        trial.remove(i);
        if !linearizable(&trial) {
            ops = trial;
        } else {
            i += 1;
        }
    }
    ops
}

fn by_key(history: &[HistoryOp]) -> BTreeMap<&[u8], Vec<&HistoryOp>> {
    let mut m: BTreeMap<&[u8], Vec<&HistoryOp>> = BTreeMap::new();
    for h in history {
        m.entry(h.key.as_slice()).or_default().push(h);
    }
    m
}

/// Largest number of mutually concurrent operations on any single key.
pub fn max_window(history: &[HistoryOp]) -> usize {
    by_key(history)
        .values()
        .map(|ops| window(&relevant(ops)))
        .max()
        .unwrap_or(0)
}

/// One violation per key whose sub-history has no linearization. Written
/// values must be unique per key.
pub fn check_linearizable(history: &[HistoryOp]) -> Result<Vec<Violation>, CheckError> {
    let mut out = Vec::new();
    for (key, ops) in by_key(history) {
        let ops = relevant(&ops);
        let width = window(&ops);
        if width > MAX_WINDOW {
            return Err(CheckError::WindowTooWide {
                key: String::from_utf8_lossy(key).into_owned(),
                width,
                max: MAX_WINDOW,
            });
        }
        if !linearizable(&ops) {
            out.push(Violation {
                property: Property::Linearizability,
                detail: format!("no linearization for key {:?}", String::from_utf8_lossy(key)),
                witness: Witness::History(minimize(ops)),
            });
        }
    }
    Ok(out)
}

/// Committed write order: each `(client, request)` at its first commit
/// index.
pub fn commit_order(trace: &Trace) -> Vec<(ClientId, u64)> {
    let mut first: BTreeMap<(ClientId, u64), u64> = BTreeMap::new();
    for ev in trace.iter() {
        if let EventKind::Commit {
            client,
            request,
            index,
            ..
        } = &ev.kind
        {
            first.entry((*client, *request)).or_insert(*index);
        }
    }
    let mut v: Vec<((ClientId, u64), u64)> = first.into_iter().collect();
    v.sort_by_key(|(_, i)| *i);
    v.into_iter().map(|(w, _)| w).collect()
}

/// Checks that the completed operations are sequentially consistent with
/// writes taking effect in `write_order`: every client's operations can be
/// placed, in program order, so that each read returns the latest write to
/// its key.
pub fn check_sequential(history: &[HistoryOp], write_order: &[(ClientId, u64)]) -> Vec<Violation> {
    let pos: HashMap<(ClientId, u64), i64> = write_order
        .iter()
        .enumerate()
        .map(|(i, w)| (*w, 2 * i as i64 + 2))
        .collect();
    let writes: HashMap<(ClientId, u64), &HistoryOp> = history
        .iter()
        .filter(|h| h.is_write())
        .map(|h| ((h.client, h.rid), h))
        .collect();
    // Per key, positions of its writes, in order.
    let mut key_writes: HashMap<&[u8], Vec<i64>> = HashMap::new();
    let mut by_value: HashMap<(&[u8], &[u8]), i64> = HashMap::new();
    for w in write_order {
        if let Some(h) = writes.get(w) {
            let p = pos[w];
            key_writes.entry(h.key.as_slice()).or_default().push(p);
            if let Some(v) = &h.value {
                by_value.insert((h.key.as_slice(), v.as_slice()), p);
            }
        }
    }
    let next_after = |key: &[u8], p: i64| -> i64 {
        key_writes
            .get(key)
            .and_then(|ps| ps.iter().copied().find(|q| *q > p))
            .unwrap_or(i64::MAX)
    };
    let mut clients: BTreeMap<ClientId, Vec<&HistoryOp>> = BTreeMap::new();
    for h in history.iter().filter(|h| h.is_complete()) {
        clients.entry(h.client).or_default().push(h);
    }
    let mut out = Vec::new();
    for (c, mut ops) in clients {
        ops.sort_by_key(|h| h.rid);
        let mut cur = 0i64;
        for h in ops {
            let fail = |why: String| Violation {
                property: Property::SequentialConsistency,
                detail: format!("client {c}: {why}"),
                witness: Witness::History(vec![h.clone()]),
            };
            if h.is_write() {
                match pos.get(&(h.client, h.rid)) {
                    None => {
                        out.push(fail(format!("acknowledged write {} never committed", h.rid)));
                        break;
                    }
                    Some(&p) if p < cur => {
                        out.push(fail(format!("write {} ordered before an earlier operation", h.rid)));
                        break;
                    }
                    Some(&p) => cur = p,
                }
                continue;
            }
            let lo = match &h.value {
                None => 1,
                Some(v) => match by_value.get(&(h.key.as_slice(), v.as_slice())) {
                    Some(p) => p + 1,
                    None => {
                        out.push(fail(format!("read {} returned a value never committed", h.rid)));
                        break;
                    }
                },
            };
            let hi = next_after(&h.key, lo - 1);
            let p = cur.max(lo);
            if p >= hi {
                out.push(fail(format!("read {} returned a value already overwritten", h.rid)));
                break;
            }
            cur = p;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::NodeId;

    fn op(client: u32, rid: u64, kind: OpKind, v: Option<u8>, inv: u64, resp: Option<u64>) -> HistoryOp {
        HistoryOp {
            client: ClientId(client),
            rid,
            kind,
            key: b"x".to_vec(),
            value: v.map(|b| vec![b; 4]),
            invoke: inv,
            response: resp,
            served_by: Some(NodeId(0)),
        }
    }

    use OpKind::{Read as R, Write as W};

    #[test]
    fn sequential_register_is_linearizable() {
        let h = vec![
            op(0, 1, W, Some(1), 0, Some(2)),
            op(1, 1, R, Some(1), 3, Some(4)),
            op(0, 2, W, Some(2), 5, Some(6)),
            op(1, 2, R, Some(2), 7, Some(8)),
        ];
        assert!(check_linearizable(&h).unwrap().is_empty());
    }

    #[test]
    fn stale_read_is_caught_with_small_witness() {
        let h = vec![
            op(0, 1, W, Some(1), 0, Some(2)),
            op(0, 2, W, Some(2), 3, Some(4)),
            op(1, 1, R, Some(1), 5, Some(6)),
            op(2, 1, R, Some(2), 7, Some(8)),
        ];
        let v = check_linearizable(&h).unwrap();
        assert_eq!(v.len(), 1);
        let Witness::History(w) = &v[0].witness else { panic!() };
        assert_eq!(w.len(), 3, "the unrelated read is dropped: {w:?}");
    }

    #[test]
    fn concurrent_ops_may_reorder() {
        let h = vec![
            op(0, 1, W, Some(1), 0, Some(10)),
            op(1, 1, R, Some(1), 1, Some(3)),
            op(2, 1, R, None, 2, Some(4)),
        ];
        assert!(check_linearizable(&h).unwrap().is_empty());
    }

    #[test]
    fn unanswered_write_may_or_may_not_apply() {
        let seen = vec![op(0, 1, W, Some(1), 0, None), op(1, 1, R, Some(1), 5, Some(6))];
        assert!(check_linearizable(&seen).unwrap().is_empty());
        let unseen = vec![op(0, 1, W, Some(1), 0, None), op(1, 1, R, None, 5, Some(6))];
        assert!(check_linearizable(&unseen).unwrap().is_empty());
    }

    #[test]
    fn too_many_concurrent_ops_is_an_error() {
        let h: Vec<HistoryOp> = (0..9).map(|c| op(c, 1, R, None, 0, Some(100))).collect();
        assert!(matches!(
            check_linearizable(&h),
            Err(CheckError::WindowTooWide { width: 9, .. })
        ));
    }

    #[test]
    fn sequential_consistency_allows_stale_but_monotone_reads() {
        let order = [(ClientId(0), 1), (ClientId(0), 2)];
        let ok = vec![
            op(0, 1, W, Some(1), 0, Some(1)),
            op(0, 2, W, Some(2), 2, Some(3)),
            // Real time says stale, program order does not.
            op(1, 1, R, Some(1), 10, Some(11)),
            op(1, 2, R, Some(2), 12, Some(13)),
        ];
        assert!(check_sequential(&ok, &order).is_empty());
        let backwards = vec![
            op(0, 1, W, Some(1), 0, Some(1)),
            op(0, 2, W, Some(2), 2, Some(3)),
            op(1, 1, R, Some(2), 10, Some(11)),
            op(1, 2, R, Some(1), 12, Some(13)),
        ];
        assert_eq!(check_sequential(&backwards, &order).len(), 1);
    }

    #[test]
    fn own_write_must_be_visible_to_later_reads() {
        let order = [(ClientId(0), 1)];
        let h = vec![op(0, 1, W, Some(1), 0, Some(1)), op(0, 2, R, None, 2, Some(3))];
        assert_eq!(check_sequential(&h, &order).len(), 1);
    }
}
