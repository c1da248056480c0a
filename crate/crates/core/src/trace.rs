//! Append-only execution trace and its line-delimited JSON file format.
//!
//! Each event becomes one JSON object per line. The common fields are
//! `at`, `seq`, `kind`, `node`, `channel`, `cnt`, `digest`, `view` and
//! `reason`; commit records additionally carry `client`, `request`, `key`
//! and `index`. Absent fields are omitted.

use std::fmt;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::Digest;
use crate::types::{ChannelId, ClientId, Counter, NodeId, Tick, ViewId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    BadMac,
    StaleCounter,
    WrongView,
    Malformed,
    BufferFull,
    NoKey,
    NotOperational,
    StaleTerm,
    BadAuth,
    JoinDenied,
    IntegrityViolation,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("enum serializes");
        write!(f, "{}", s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum EventKind {
    /// Node finished attestation and holds provisioned secrets.
    Trusted { node: NodeId },
    Send {
        node: NodeId,
        digest: Digest,
        channel: ChannelId,
        view: ViewId,
        cnt: Counter,
    },
    Accept {
        node: NodeId,
        digest: Digest,
        channel: ChannelId,
        view: ViewId,
        cnt: Counter,
    },
    /// A write applied to a replica's store at position `index` of its
    /// committed order. Per-key protocols pack their timestamp into `index`.
    Commit {
        node: NodeId,
        client: ClientId,
        request: u64,
        key: Vec<u8>,
        digest: Digest,
        index: u64,
    },
    Crash { node: NodeId },
    ViewChange { node: NodeId, view: ViewId },
    Reject { node: NodeId, reason: RejectReason },
}

impl EventKind {
    pub fn node(&self) -> NodeId {
        match self {
            EventKind::Trusted { node }
            | EventKind::Send { node, .. }
            | EventKind::Accept { node, .. }
            | EventKind::Commit { node, .. }
            | EventKind::Crash { node }
            | EventKind::ViewChange { node, .. }
            | EventKind::Reject { node, .. } => *node,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            EventKind::Trusted { .. } => "trusted",
            EventKind::Send { .. } => "send",
            EventKind::Accept { .. } => "accept",
            EventKind::Commit { .. } => "commit",
            EventKind::Crash { .. } => "crash",
            EventKind::ViewChange { .. } => "view_change",
            EventKind::Reject { .. } => "reject",
        }
    }
}

/// `(at, seq)` totally orders events; `seq` is unique within a trace.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TraceEvent {
    pub at: Tick,
    pub seq: u64,
    pub kind: EventKind,
}

impl TraceEvent {
    /// The event as it appears on one line of a trace file.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(Record::from(self)).expect("records serialize")
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends with the next sequence number.
    pub fn push(&mut self, at: Tick, kind: EventKind) {
        debug_assert!(self.events.last().map_or(true, |e| e.at <= at));
        let seq = self.events.len() as u64;
        self.events.push(TraceEvent { at, seq, kind });
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for ev in &self.events {
            let rec = Record::from(ev);
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, TraceParseError> {
        let mut events = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| TraceParseError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| TraceParseError::Line(i + 1, e.to_string()))?;
            events.push(rec.into_event().map_err(|m| TraceParseError::Line(i + 1, m))?);
        }
        Ok(Self { events })
    }

    pub fn count(&self, pred: impl Fn(&EventKind) -> bool) -> usize {
        self.events.iter().filter(|e| pred(&e.kind)).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceParseError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("line {0}: {1}")]
    Line(usize, String),
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    at: Tick,
    seq: u64,
    kind: String,
    node: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    channel: Option<ChannelId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cnt: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    view: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reason: Option<RejectReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    client: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    request: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    index: Option<u64>,
}

impl From<&TraceEvent> for Record {
    fn from(ev: &TraceEvent) -> Self {
        let mut r = Record {
            at: ev.at,
            seq: ev.seq,
            kind: ev.kind.tag().to_string(),
            node: ev.kind.node().0,
            channel: None,
            cnt: None,
            digest: None,
            view: None,
            reason: None,
            client: None,
            request: None,
            key: None,
            index: None,
        };
        match &ev.kind {
            EventKind::Trusted { .. } | EventKind::Crash { .. } => {}
            EventKind::Send {
                digest,
                channel,
                view,
                cnt,
                ..
            }
            | EventKind::Accept {
                digest,
                channel,
                view,
                cnt,
                ..
            } => {
                r.digest = Some(hex::encode(digest));
                r.channel = Some(*channel);
                r.view = Some(*view);
                r.cnt = Some(*cnt);
            }
            EventKind::Commit {
                client,
                request,
                key,
                digest,
                index,
                ..
            } => {
                r.client = Some(client.0);
                r.request = Some(*request);
                r.key = Some(hex::encode(key));
                r.digest = Some(hex::encode(digest));
                r.index = Some(*index);
            }
            EventKind::ViewChange { view, .. } => r.view = Some(*view),
            EventKind::Reject { reason, .. } => r.reason = Some(*reason),
        }
        r
    }
}

fn parse_digest(s: Option<String>) -> Result<Digest, String> {
    let s = s.ok_or("missing digest")?;
    let v = hex::decode(s).map_err(|e| e.to_string())?;
    v.try_into().map_err(|_| "digest must be 32 bytes".to_string())
}

impl Record {
    fn into_event(self) -> Result<TraceEvent, String> {
        let node = NodeId(self.node);
        let kind = match self.kind.as_str() {
            "trusted" => EventKind::Trusted { node },
            "crash" => EventKind::Crash { node },
            "send" | "accept" => {
                let digest = parse_digest(self.digest)?;
                let channel = self.channel.ok_or("missing channel")?;
                let view = self.view.ok_or("missing view")?;
                let cnt = self.cnt.ok_or("missing cnt")?;
                if self.kind == "send" {
                    EventKind::Send {
                        node,
                        digest,
                        channel,
                        view,
                        cnt,
                    }
                } else {
                    EventKind::Accept {
                        node,
                        digest,
                        channel,
                        view,
                        cnt,
                    }
                }
            }
            "commit" => EventKind::Commit {
                node,
                client: ClientId(self.client.ok_or("missing client")?),
                request: self.request.ok_or("missing request")?,
                key: hex::decode(self.key.ok_or("missing key")?).map_err(|e| e.to_string())?,
                digest: parse_digest(self.digest)?,
                index: self.index.ok_or("missing index")?,
            },
            "view_change" => EventKind::ViewChange {
                node,
                view: self.view.ok_or("missing view")?,
            },
            "reject" => EventKind::Reject {
                node,
                reason: self.reason.ok_or("missing reason")?,
            },
            other => return Err(format!("unknown event kind {other:?}")),
        };
        Ok(TraceEvent {
            at: self.at,
            seq: self.seq,
            kind,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Trace {
        let ch = ChannelId::new(NodeId(0), NodeId(1));
        let mut t = Trace::new();
        t.push(0, EventKind::Trusted { node: NodeId(0) });
        t.push(
            3,
            EventKind::Send {
                node: NodeId(0),
                digest: [1; 32],
                channel: ch,
                view: 0,
                cnt: 1,
            },
        );
        t.push(
            5,
            EventKind::Accept {
                node: NodeId(1),
                digest: [1; 32],
                channel: ch,
                view: 0,
                cnt: 1,
            },
        );
        t.push(
            6,
            EventKind::Commit {
                node: NodeId(1),
                client: ClientId(2),
                request: 7,
                key: b"k".to_vec(),
                digest: [2; 32],
                index: 1,
            },
        );
        t.push(
            7,
            EventKind::Reject {
                node: NodeId(1),
                reason: RejectReason::StaleCounter,
            },
        );
        t.push(8, EventKind::ViewChange { node: NodeId(2), view: 3 });
        t.push(9, EventKind::Crash { node: NodeId(2) });
        t
    }

    #[test]
    fn jsonl_round_trip() {
        let t = sample();
        let bytes = t.to_jsonl();
        let back = Trace::read_jsonl(&bytes[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn record_uses_fixed_field_names() {
        let t = sample();
        let text = String::from_utf8(t.to_jsonl()).unwrap();
        let first_send = text.lines().nth(1).unwrap();
        let v: serde_json::Value = serde_json::from_str(first_send).unwrap();
        for field in ["at", "seq", "kind", "node", "channel", "cnt", "digest", "view"] {
            assert!(v.get(field).is_some(), "missing {field}");
        }
        let reject: serde_json::Value = serde_json::from_str(text.lines().nth(4).unwrap()).unwrap();
        assert_eq!(reject["reason"], "stale_counter");
    }

    #[test]
    fn unknown_kind_is_a_parse_error() {
        let line = br#"{"at":0,"seq":0,"kind":"bogus","node":1}"#;
        assert!(matches!(
            Trace::read_jsonl(&line[..]),
            Err(TraceParseError::Line(1, _))
        ));
    }
}
