//! Network adversary policies.
//!
//! The adversary sees and controls every frame on the wire: it can drop,
//! duplicate, delay, reorder and corrupt frames, replay anything it has
//! captured and inject frames of its own. It never sees trusted-core state.
//! After GST it keeps delivering within the bound on channels that are not
//! partitioned; corrupted and replayed copies may still be injected then.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::types::{NodeId, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FaultParams {
    #[serde(default)]
    pub drop_prob: f64,
    #[serde(default)]
    pub dup_prob: f64,
    #[serde(default)]
    pub tamper_prob: f64,
    /// Probability of also injecting a previously captured frame of the same
    /// channel whenever a frame is sent.
    #[serde(default)]
    pub replay_prob: f64,
    /// Extra delay drawn uniformly from `0..=reorder_window`.
    #[serde(default)]
    pub reorder_window: Tick,
}

impl FaultParams {
    pub fn is_identity(&self) -> bool {
        *self == FaultParams::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelFaults {
    pub from: NodeId,
    pub to: NodeId,
    #[serde(flatten)]
    pub params: FaultParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    /// Cuts every link between `nodes` and the rest.
    Partition { nodes: Vec<NodeId> },
    Heal,
    /// Re-injects the latest `count` captured frames (of one channel, or of
    /// any channel when unspecified).
    ReplayCaptured {
        #[serde(default)]
        from: Option<NodeId>,
        #[serde(default)]
        to: Option<NodeId>,
        count: usize,
    },
    /// Corrupts one payload byte of the next frame on the channel.
    TamperNext { from: NodeId, to: NodeId },
    /// Holds back frames in flight on the channel.
    DelayAll { from: NodeId, to: NodeId, ticks: Tick },
    /// Crashes the node hosting `node`.
    CrashTee { node: NodeId },
    /// Injects a well-formed frame authenticated under a key the adversary
    /// made up.
    InjectForged { from: NodeId, to: NodeId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedAction {
    pub at: Tick,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdversaryPolicy {
    #[serde(default, flatten)]
    pub faults: FaultParams,
    #[serde(default)]
    pub channels: Vec<ChannelFaults>,
    #[serde(default)]
    pub scripted: Vec<ScriptedAction>,
}

impl AdversaryPolicy {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn with_faults(faults: FaultParams) -> Self {
        Self {
            faults,
            ..Default::default()
        }
    }

    pub fn drop(p: f64) -> Self {
        Self::with_faults(FaultParams {
            drop_prob: p,
            ..Default::default()
        })
    }

    pub fn reorder(window: Tick) -> Self {
        Self::with_faults(FaultParams {
            reorder_window: window,
            ..Default::default()
        })
    }

    pub fn replay_all() -> Self {
        Self::with_faults(FaultParams {
            replay_prob: 1.0,
            ..Default::default()
        })
    }

    pub fn tamper(p: f64) -> Self {
        Self::with_faults(FaultParams {
            tamper_prob: p,
            ..Default::default()
        })
    }

    /// Isolates `nodes` during `[from, until)`.
    pub fn partition(nodes: Vec<NodeId>, from: Tick, until: Tick) -> Self {
        Self::default()
            .script(from, Action::Partition { nodes })
            .script(until, Action::Heal)
    }

    pub fn script(mut self, at: Tick, action: Action) -> Self {
        self.scripted.push(ScriptedAction { at, action });
        self
    }

    pub fn params_for(&self, from: NodeId, to: NodeId) -> FaultParams {
        self.channels
            .iter()
            .find(|c| c.from == from && c.to == to)
            .map(|c| c.params)
            .unwrap_or(self.faults)
    }

    pub fn is_identity(&self) -> bool {
        self.faults.is_identity() && self.channels.is_empty() && self.scripted.is_empty()
    }
}

/// Active partition: links crossing the boundary of `side` are cut.
#[derive(Debug, Clone, Default)]
pub struct Partition {
    side: Option<BTreeSet<NodeId>>,
}

impl Partition {
    pub fn set(&mut self, nodes: &[NodeId]) {
        self.side = Some(nodes.iter().copied().collect());
    }

    pub fn heal(&mut self) {
        self.side = None;
    }

    pub fn cuts(&self, a: NodeId, b: NodeId) -> bool {
        match &self.side {
            Some(s) => s.contains(&a) != s.contains(&b),
            None => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_file_format() {
        let json = r#"{
            "drop_prob": 0.2,
            "channels": [{"from": 0, "to": 1, "tamper_prob": 1.0}],
            "scripted": [
                {"at": 10, "action": "partition", "nodes": [0]},
                {"at": 50, "action": "heal"},
                {"at": 60, "action": "replay_captured", "count": 3},
                {"at": 70, "action": "crash_tee", "node": 2}
            ]
        }"#;
        let p: AdversaryPolicy = serde_json::from_str(json).unwrap();
        assert_eq!(p.faults.drop_prob, 0.2);
        assert_eq!(p.params_for(NodeId(0), NodeId(1)).tamper_prob, 1.0);
        assert_eq!(p.params_for(NodeId(1), NodeId(0)).drop_prob, 0.2);
        assert_eq!(p.scripted.len(), 4);
        assert_eq!(p.scripted[3].action, Action::CrashTee { node: NodeId(2) });
        let back: AdversaryPolicy = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn partition_cuts_only_crossing_links() {
        let mut p = Partition::default();
        p.set(&[NodeId(0)]);
        assert!(p.cuts(NodeId(0), NodeId(1)));
        assert!(p.cuts(NodeId(2), NodeId(0)));
        assert!(!p.cuts(NodeId(1), NodeId(2)));
        p.heal();
        assert!(!p.cuts(NodeId(0), NodeId(1)));
    }

    #[test]
    fn identity_detection() {
        assert!(AdversaryPolicy::identity().is_identity());
        assert!(!AdversaryPolicy::drop(0.1).is_identity());
        assert!(!AdversaryPolicy::partition(vec![NodeId(0)], 1, 2).is_identity());
    }
}
