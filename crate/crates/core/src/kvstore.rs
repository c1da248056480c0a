//! Partitioned key-value store.
//!
//! Keys and per-entry metadata (value digest, timestamp, length and the
//! location of the bytes) are trusted state. The value bytes themselves live
//! in an arena that models untrusted host memory: callers may read and even
//! overwrite it, and every `get` re-checks the bytes against the trusted
//! digest before handing them back.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, Digest, Key};
use crate::types::NodeId;
use crate::wire::{DecodeError, Reader, Writer};

/// Per-key version, ordered by counter then node.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct LamportTs {
    pub counter: u64,
    pub node: NodeId,
}

impl LamportTs {
    pub const ZERO: LamportTs = LamportTs {
        counter: 0,
        node: NodeId(0),
    };

    pub fn new(counter: u64, node: NodeId) -> Self {
        Self { counter, node }
    }

    /// Packs into one integer preserving the order (for trace records).
    pub fn pack(self) -> u64 {
        (self.counter << 32) | self.node.0 as u64
    }

    pub fn unpack(v: u64) -> Self {
        Self {
            counter: v >> 32,
            node: NodeId(v as u32),
        }
    }
}

/// Locator of a value inside the untrusted arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Handle {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
struct EntryMeta {
    value_digest: Digest,
    ts: LamportTs,
    value_len: usize,
    handle: Handle,
    /// Slot size reserved in the arena; at least `handle.len`.
    slot: usize,
    nonce: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("key must not be empty")]
    EmptyKey,
    #[error("store is full")]
    Full,
    #[error("key not found")]
    NotFound,
    #[error("value bytes do not match trusted digest")]
    IntegrityViolation,
}

/// One exported entry: plaintext value with its version.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotRecord {
    pub key: Vec<u8>,
    pub ts: LamportTs,
    pub value: Vec<u8>,
}

const STORE_NONCE_DOMAIN: u32 = 0x5354_4f52;

#[derive(Debug, Clone)]
pub struct Store {
    index: BTreeMap<Vec<u8>, EntryMeta>,
    arena: Vec<u8>,
    capacity: usize,
    cipher: Option<Key>,
    writes: u64,
}

fn entry_digest(key: &[u8], ts: LamportTs, stored: &[u8]) -> Digest {
    crypto::digest_parts(&[
        key,
        &ts.counter.to_le_bytes(),
        &ts.node.0.to_le_bytes(),
        stored,
    ])
}

impl Store {
    /// `capacity` bounds the arena in bytes. With a cipher, values are
    /// encrypted before they leave trusted memory.
    pub fn new(capacity: usize, cipher: Option<Key>) -> Self {
        Self {
            index: BTreeMap::new(),
            arena: Vec::new(),
            capacity,
            cipher,
            writes: 0,
        }
    }

    pub fn is_confidential(&self) -> bool {
        self.cipher.is_some()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, key: &[u8]) -> bool {
        self.index.contains_key(key)
    }

    /// Trusted timestamp of `key`, without touching the arena.
    pub fn ts_of(&self, key: &[u8]) -> Option<LamportTs> {
        self.index.get(key).map(|m| m.ts)
    }

    /// Keys in ascending order.
    pub fn keys(&self) -> impl Iterator<Item = &[u8]> {
        self.index.keys().map(|k| k.as_slice())
    }

    /// The untrusted region, as the host sees it.
    pub fn arena(&self) -> &[u8] {
        &self.arena
    }

    /// Host-side write access, used to model corrupted memory.
    pub fn arena_mut(&mut self) -> &mut [u8] {
        &mut self.arena
    }

    /// Arena location of a key's bytes.
    pub fn handle(&self, key: &[u8]) -> Option<Handle> {
        self.index.get(key).map(|m| m.handle)
    }

    fn live_bytes(&self) -> usize {
        self.index.values().map(|m| m.slot).sum()
    }

    fn compact(&mut self) {
        let mut arena = Vec::with_capacity(self.live_bytes());
        for meta in self.index.values_mut() {
            let start = arena.len();
            arena.extend_from_slice(&self.arena[meta.handle.offset..meta.handle.offset + meta.handle.len]);
            arena.resize(start + meta.slot, 0);
            meta.handle.offset = start;
        }
        self.arena = arena;
    }

    fn allocate(&mut self, key: &[u8], len: usize) -> Result<(usize, usize), StoreError> {
        if let Some(m) = self.index.get(key) {
            if m.slot >= len {
                return Ok((m.handle.offset, m.slot));
            }
        }
        let freed = self.index.get(key).map_or(0, |m| m.slot);
        if self.live_bytes() - freed + len > self.capacity {
            return Err(StoreError::Full);
        }
        if self.arena.len() + len > self.capacity {
            if let Some(m) = self.index.get_mut(key) {
                // Give the old slot up before compacting so it is reclaimed.
                m.slot = 0;
                m.handle.len = 0;
            }
            self.compact();
        }
        let offset = self.arena.len();
        self.arena.resize(offset + len, 0);
        Ok((offset, len))
    }

    pub fn write(&mut self, key: &[u8], value: &[u8], ts: LamportTs) -> Result<(), StoreError> {
        if key.is_empty() {
            return Err(StoreError::EmptyKey);
        }
        let nonce = self.writes;
        let stored = match &self.cipher {
            Some(k) => crypto::seal(k, STORE_NONCE_DOMAIN, nonce, key, value),
            None => value.to_vec(),
        };
        let (offset, slot) = self.allocate(key, stored.len())?;
        self.writes += 1;
        self.arena[offset..offset + stored.len()].copy_from_slice(&stored);
        self.index.insert(
            key.to_vec(),
            EntryMeta {
                value_digest: entry_digest(key, ts, &stored),
                ts,
                value_len: value.len(),
                handle: Handle {
                    offset,
                    len: stored.len(),
                },
                slot,
                nonce,
            },
        );
        Ok(())
    }

    /// Reads and verifies a value against its trusted digest.
    pub fn get(&self, key: &[u8]) -> Result<(Vec<u8>, LamportTs), StoreError> {
        let meta = self.index.get(key).ok_or(StoreError::NotFound)?;
        let h = meta.handle;
        let stored = self
            .arena
            .get(h.offset..h.offset + h.len)
            .ok_or(StoreError::IntegrityViolation)?
            .to_vec();
        if entry_digest(key, meta.ts, &stored) != meta.value_digest {
            return Err(StoreError::IntegrityViolation);
        }
        let value = match &self.cipher {
            Some(k) => crypto::open(k, STORE_NONCE_DOMAIN, meta.nonce, key, &stored)
                .ok_or(StoreError::IntegrityViolation)?,
            None => stored,
        };
        if value.len() != meta.value_len {
            return Err(StoreError::IntegrityViolation);
        }
        Ok((value, meta.ts))
    }

    /// Verified copy of every entry in key order.
    pub fn export_snapshot(&self) -> Result<Vec<SnapshotRecord>, StoreError> {
        self.index
            .keys()
            .map(|k| {
                let (value, ts) = self.get(k)?;
                Ok(SnapshotRecord {
                    key: k.clone(),
                    ts,
                    value,
                })
            })
            .collect()
    }

    /// Installs records whose timestamp is newer than what is stored.
    pub fn import_snapshot(&mut self, records: &[SnapshotRecord]) -> Result<usize, StoreError> {
        let mut applied = 0;
        for r in records {
            if self.ts_of(&r.key).map_or(true, |cur| r.ts > cur) {
                self.write(&r.key, &r.value, r.ts)?;
                applied += 1;
            }
        }
        Ok(applied)
    }
}

pub fn encode_snapshot(records: &[SnapshotRecord], w: &mut Writer) {
    w.u32(records.len() as u32);
    for r in records {
        w.bytes(&r.key)
            .u64(r.ts.counter)
            .u32(r.ts.node.0)
            .bytes(&r.value);
    }
}

pub fn decode_snapshot(r: &mut Reader<'_>) -> Result<Vec<SnapshotRecord>, DecodeError> {
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        out.push(SnapshotRecord {
            key: r.bytes()?,
            ts: LamportTs {
                counter: r.u64()?,
                node: NodeId(r.u32()?),
            },
            value: r.bytes()?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ts(c: u64) -> LamportTs {
        LamportTs::new(c, NodeId(1))
    }

    #[test]
    fn fresh_store_has_nothing() {
        let s = Store::new(1024, None);
        assert_eq!(s.get(b"k"), Err(StoreError::NotFound));
    }

    #[test]
    fn zero_capacity_rejects_first_write() {
        let mut s = Store::new(0, None);
        assert_eq!(s.write(b"k", b"v", ts(1)), Err(StoreError::Full));
        assert!(s.is_empty());
    }

    #[test]
    fn write_get_and_overwrite() {
        let mut s = Store::new(1024, None);
        s.write(b"k", b"v1", ts(1)).unwrap();
        assert_eq!(s.get(b"k").unwrap(), (b"v1".to_vec(), ts(1)));
        s.write(b"k", b"value-two", ts(2)).unwrap();
        assert_eq!(s.get(b"k").unwrap(), (b"value-two".to_vec(), ts(2)));
        assert_eq!(s.write(b"", b"x", ts(3)), Err(StoreError::EmptyKey));
    }

    #[test]
    fn flipped_arena_byte_is_detected() {
        let mut s = Store::new(1024, None);
        s.write(b"k", b"hello world", ts(1)).unwrap();
        let h = s.handle(b"k").unwrap();
        s.arena_mut()[h.offset + 3] ^= 0x01;
        assert_eq!(s.get(b"k"), Err(StoreError::IntegrityViolation));
    }

    #[test]
    fn stale_version_splice_is_detected() {
        // Old bytes copied back over a newer version must not verify.
        let mut s = Store::new(1024, None);
        s.write(b"k", b"aaaa", ts(1)).unwrap();
        let h = s.handle(b"k").unwrap();
        let old = s.arena()[h.offset..h.offset + h.len].to_vec();
        s.write(b"k", b"bbbb", ts(2)).unwrap();
        let h = s.handle(b"k").unwrap();
        s.arena_mut()[h.offset..h.offset + h.len].copy_from_slice(&old);
        assert_eq!(s.get(b"k"), Err(StoreError::IntegrityViolation));
    }

    #[test]
    fn confidential_arena_holds_no_plaintext() {
        let mut s = Store::new(1 << 16, Some([4; 32]));
        let values: Vec<Vec<u8>> = (0..20u8).map(|i| vec![i.wrapping_mul(37) | 1; 24]).collect();
        for (i, v) in values.iter().enumerate() {
            s.write(format!("key{i}").as_bytes(), v, ts(1)).unwrap();
        }
        for v in &values {
            assert!(!s.arena().windows(v.len()).any(|w| w == v.as_slice()));
        }
        assert_eq!(s.get(b"key3").unwrap().0, values[3]);
    }

    #[test]
    fn compaction_reclaims_overwritten_slots() {
        let mut s = Store::new(64, None);
        for i in 0..50u8 {
            let v = vec![i; (i as usize % 20) + 1];
            s.write(b"a", &v, ts(i as u64)).unwrap();
            s.write(b"b", b"fixed", ts(1)).unwrap();
            assert_eq!(s.get(b"a").unwrap().0, v);
        }
        assert_eq!(s.get(b"b").unwrap().0, b"fixed");
        assert_eq!(s.write(b"c", &[0; 60], ts(1)), Err(StoreError::Full));
    }

    #[test]
    fn snapshot_round_trip_keeps_newer_entries() {
        let mut a = Store::new(4096, None);
        a.write(b"x", b"1", ts(1)).unwrap();
        a.write(b"y", b"2", ts(5)).unwrap();
        let recs = a.export_snapshot().unwrap();
        let mut w = Writer::new();
        encode_snapshot(&recs, &mut w);
        let bytes = w.finish();
        let back = decode_snapshot(&mut Reader::new(&bytes)).unwrap();
        assert_eq!(back, recs);
        let mut b = Store::new(4096, None);
        b.write(b"y", b"newer", ts(9)).unwrap();
        assert_eq!(b.import_snapshot(&back).unwrap(), 1);
        assert_eq!(b.get(b"x").unwrap().0, b"1");
        assert_eq!(b.get(b"y").unwrap().0, b"newer");
    }

    #[test]
    fn lamport_order_and_packing() {
        assert!(LamportTs::new(2, NodeId(9)) < LamportTs::new(3, NodeId(0)));
        assert!(LamportTs::new(3, NodeId(1)) < LamportTs::new(3, NodeId(2)));
        let t = LamportTs::new(77, NodeId(4));
        assert_eq!(LamportTs::unpack(t.pack()), t);
    }

    proptest! {
        #[test]
        fn every_bit_flip_is_detected(value in proptest::collection::vec(any::<u8>(), 1..64),
                                      bit in any::<usize>(), confidential in any::<bool>()) {
            let mut s = Store::new(4096, confidential.then_some([8; 32]));
            s.write(b"key", &value, ts(3)).unwrap();
            let h = s.handle(b"key").unwrap();
            let bit = bit % (h.len * 8);
            s.arena_mut()[h.offset + bit / 8] ^= 1 << (bit % 8);
            prop_assert_eq!(s.get(b"key"), Err(StoreError::IntegrityViolation));
        }

        #[test]
        fn iteration_is_strictly_ascending(keys in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 1..8), 0..40)) {
            let mut s = Store::new(1 << 16, None);
            for k in &keys {
                s.write(k, b"v", ts(1)).unwrap();
            }
            let listed: Vec<&[u8]> = s.keys().collect();
            prop_assert!(listed.windows(2).all(|w| w[0] < w[1]));
            let mut expected = keys.clone();
            expected.sort();
            expected.dedup();
            prop_assert_eq!(listed.len(), expected.len());
        }
    }
}
