//! Small hand-built traces, each breaking exactly one channel property.
//! Used to make sure the checkers fire, and fire once.

use crate::crypto::Digest;
use crate::trace::{EventKind, Trace};
use crate::types::{ChannelId, Counter, NodeId};

use super::Property;

const A: NodeId = NodeId(0);
const B: NodeId = NodeId(1);

fn digest(cnt: Counter) -> Digest {
    let mut d = [0u8; 32];
    d[..8].copy_from_slice(&cnt.to_le_bytes());
    d
}

fn send(t: &mut Trace, at: u64, cnt: Counter) {
    t.push(
        at,
        EventKind::Send {
            node: A,
            digest: digest(cnt),
            channel: ChannelId::new(A, B),
            view: 0,
            cnt,
        },
    );
}

fn accept_with(t: &mut Trace, at: u64, cnt: Counter, d: Digest) {
    t.push(
        at,
        EventKind::Accept {
            node: B,
            digest: d,
            channel: ChannelId::new(A, B),
            view: 0,
            cnt,
        },
    );
}

fn accept(t: &mut Trace, at: u64, cnt: Counter) {
    accept_with(t, at, cnt, digest(cnt));
}

/// A labelled trace and the single property it breaks.
pub struct Case {
    pub name: &'static str,
    pub breaks: Property,
    pub trace: Trace,
}

pub fn corpus() -> Vec<Case> {
    let mut out = Vec::new();

    let mut t = Trace::new();
    send(&mut t, 1, 1);
    accept(&mut t, 2, 1);
    accept(&mut t, 3, 2);
    out.push(Case { name: "accept_never_sent", breaks: Property::Origin, trace: t });

    let mut t = Trace::new();
    send(&mut t, 1, 1);
    accept_with(&mut t, 2, 1, [0xee; 32]);
    out.push(Case { name: "accept_altered_payload", breaks: Property::Origin, trace: t });

    let mut t = Trace::new();
    for c in 1..=3 {
        send(&mut t, c, c);
    }
    accept(&mut t, 4, 1);
    accept(&mut t, 5, 3);
    out.push(Case { name: "counter_gap", breaks: Property::Order, trace: t });

    let mut t = Trace::new();
    send(&mut t, 1, 1);
    send(&mut t, 2, 2);
    accept(&mut t, 3, 2);
    out.push(Case { name: "first_message_lost", breaks: Property::Order, trace: t });

    let mut t = Trace::new();
    send(&mut t, 1, 1);
    accept(&mut t, 2, 1);
    accept(&mut t, 3, 1);
    out.push(Case { name: "replayed_message", breaks: Property::NoDup, trace: t });

    let mut t = Trace::new();
    send(&mut t, 1, 1);
    send(&mut t, 2, 2);
    accept(&mut t, 3, 1);
    accept(&mut t, 4, 2);
    accept(&mut t, 9, 2);
    out.push(Case { name: "late_replay", breaks: Property::NoDup, trace: t });

    out
}
