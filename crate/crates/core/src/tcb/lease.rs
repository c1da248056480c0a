use serde::{Deserialize, Serialize};

use crate::types::{NodeId, Tick};

/// What a lease grants. `Leadership` is exclusive per granter; a
/// `Liveness` lease only vouches that its holder was recently heard from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LeaseRole {
    Leadership,
    Liveness(NodeId),
}

/// Time-bounded grant. The granter treats it as held for
/// `[granted_at, granted_at + duration + granter_slack]`, the holder for
/// `[granted_at, granted_at + duration]`, so the granter's interval always
/// covers the holder's. Both bounds are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub holder: NodeId,
    pub granted_at: Tick,
    pub duration: Tick,
    pub granter_slack: Tick,
}

impl Lease {
    pub fn holder_expiry(&self) -> Tick {
        self.granted_at.saturating_add(self.duration)
    }

    pub fn granter_expiry(&self) -> Tick {
        self.holder_expiry().saturating_add(self.granter_slack)
    }

    pub fn is_valid(&self, now: Tick, as_granter: bool) -> bool {
        lease_valid(self, now, as_granter)
    }
}

pub fn lease_valid(l: &Lease, now: Tick, as_granter: bool) -> bool {
    let end = if as_granter {
        l.granter_expiry()
    } else {
        l.holder_expiry()
    };
    now >= l.granted_at && now <= end
}
