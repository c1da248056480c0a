//! Simulated remote attestation and the configuration service (CAS).
//!
//! A machine proves which code it runs by MACing a measurement of that code
//! together with a CAS-chosen nonce under its hardware key. CAS holds the
//! hardware keys of all machines registered at setup, checks the quote and,
//! only then, assigns a fresh node id and hands out channel keys.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, Digest, Key, Tag};
use crate::tcb::{client_key_from_master, ChannelKeys, Provisioning};
use crate::types::{ChannelId, ClientId, NodeId, ViewId};

pub type Nonce = [u8; 16];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodeIdentity {
    pub name: String,
    pub version: u32,
    pub flags: u32,
}

impl CodeIdentity {
    /// The replica build every genuine machine runs.
    pub fn replica() -> Self {
        Self {
            name: "trustrep-replica".into(),
            version: 1,
            flags: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Measurement(pub Digest);

/// Deterministic digest of a code identity.
pub fn attest(code: &CodeIdentity) -> Measurement {
    Measurement(crypto::digest_parts(&[
        code.name.as_bytes(),
        &code.version.to_le_bytes(),
        &code.flags.to_le_bytes(),
    ]))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedQuote {
    pub measurement: Measurement,
    pub hw_tag: Tag,
    pub outer_sig: Tag,
    pub nonce: Nonce,
}

fn quote_body(mu: &Measurement, nonce: &Nonce) -> Vec<u8> {
    let mut b = b"quote".to_vec();
    b.extend_from_slice(&mu.0);
    b.extend_from_slice(nonce);
    b
}

fn binding_body(challenger_pub: &[u8; 32], hw_tag: &Tag) -> Vec<u8> {
    let mut b = b"bind".to_vec();
    b.extend_from_slice(challenger_pub);
    b.extend_from_slice(hw_tag);
    b
}

pub fn generate_quote(
    mu: Measurement,
    challenger_pub: &[u8; 32],
    nonce: Nonce,
    hw_key: &Key,
) -> SignedQuote {
    let hw_tag = crypto::mac(hw_key, &quote_body(&mu, &nonce));
    let outer_sig = crypto::mac(hw_key, &binding_body(challenger_pub, &hw_tag));
    SignedQuote {
        measurement: mu,
        hw_tag,
        outer_sig,
        nonce,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MachineId(pub u32);

/// A physical host. Without a registered hardware key it can only sign
/// quotes with a key of its own making.
#[derive(Debug, Clone)]
pub struct Machine {
    pub id: MachineId,
    pub code: CodeIdentity,
    pub hw_key: Option<Key>,
    /// Key used when no hardware key is present.
    pub rogue_key: Key,
}

impl Machine {
    pub fn respond(&self, session: &AttestationSession) -> SignedQuote {
        let mu = attest(&self.code);
        let key = self.hw_key.unwrap_or(self.rogue_key);
        generate_quote(mu, &session.ephemeral_key, session.nonce, &key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionState {
    Challenged,
    Quoted,
    Provisioned,
    Failed,
}

#[derive(Debug, Clone)]
pub struct AttestationSession {
    pub machine: MachineId,
    pub nonce: Nonce,
    pub ephemeral_key: [u8; 32],
    pub state: SessionState,
}

impl AttestationSession {
    fn advance(&mut self, next: SessionState) {
        use SessionState::*;
        let ok = matches!(
            (self.state, next),
            (Challenged, Quoted) | (Quoted, Provisioned) | (Challenged | Quoted, Failed)
        );
        debug_assert!(ok, "session may only move forward");
        if ok {
            self.state = next;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum DenyReason {
    #[error("quote signature does not verify")]
    BadQuote,
    #[error("quote nonce is stale or foreign")]
    BadNonce,
    #[error("measurement is not an expected replica build")]
    UnknownMeasurement,
}

#[derive(Debug, Clone)]
pub struct Provisioned {
    pub node_id: NodeId,
    pub provisioning: Provisioning,
    pub membership: Vec<NodeId>,
    pub epoch: ViewId,
}

#[derive(Debug, Clone)]
pub enum AttestOutcome {
    Provisioned(Provisioned),
    Denied(DenyReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MembershipError {
    #[error("{0} is not attested")]
    NotAttested(NodeId),
    #[error("{0} is already a member")]
    AlreadyMember(NodeId),
    #[error("{0} is not a member")]
    NotMember(NodeId),
}

/// New configuration pushed to every member over the CAS channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MembershipUpdate {
    pub epoch: ViewId,
    pub members: Vec<NodeId>,
}

#[derive(Debug)]
pub struct CasState {
    expected: BTreeSet<Measurement>,
    hw_keys: BTreeMap<MachineId, Key>,
    attested: BTreeMap<NodeId, MachineId>,
    revoked: BTreeSet<NodeId>,
    admitted_epoch: BTreeMap<NodeId, ViewId>,
    membership: Vec<NodeId>,
    epoch: ViewId,
    master: Key,
    client_master: Key,
    next_fresh_id: u32,
    used_nonces: BTreeSet<Nonce>,
    confidential: bool,
    rng: ChaCha20Rng,
}

impl CasState {
    pub fn new(seed: u64, confidential: bool) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xca5_ca5_ca5);
        let master = rng.gen();
        let client_master = rng.gen();
        Self {
            expected: BTreeSet::new(),
            hw_keys: BTreeMap::new(),
            attested: BTreeMap::new(),
            revoked: BTreeSet::new(),
            admitted_epoch: BTreeMap::new(),
            membership: Vec::new(),
            epoch: 0,
            master,
            client_master,
            next_fresh_id: 0,
            used_nonces: BTreeSet::new(),
            confidential,
            rng,
        }
    }

    pub fn expect(&mut self, mu: Measurement) {
        self.expected.insert(mu);
    }

    /// Registers the hardware key of a machine (done at deployment).
    pub fn register_machine(&mut self, id: MachineId, hw_key: Key) {
        self.hw_keys.insert(id, hw_key);
    }

    pub fn epoch(&self) -> ViewId {
        self.epoch
    }

    pub fn members(&self) -> &[NodeId] {
        &self.membership
    }

    pub fn is_attested(&self, n: NodeId) -> bool {
        self.attested.contains_key(&n) && !self.revoked.contains(&n)
    }

    pub fn attested_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.attested.keys().copied().filter(|n| !self.revoked.contains(n))
    }

    pub fn machine_of(&self, n: NodeId) -> Option<MachineId> {
        self.attested.get(&n).copied()
    }

    pub fn next_fresh_id(&self) -> NodeId {
        NodeId(self.next_fresh_id)
    }

    pub fn challenge(&mut self, machine: MachineId) -> AttestationSession {
        AttestationSession {
            machine,
            nonce: self.rng.gen(),
            ephemeral_key: self.rng.gen(),
            state: SessionState::Challenged,
        }
    }

    pub fn verify_quote(
        &mut self,
        session: &mut AttestationSession,
        quote: &SignedQuote,
    ) -> Result<(), DenyReason> {
        let r = self.check_quote(session, quote);
        session.advance(if r.is_ok() {
            SessionState::Quoted
        } else {
            SessionState::Failed
        });
        r
    }

    fn check_quote(&mut self, session: &AttestationSession, quote: &SignedQuote) -> Result<(), DenyReason> {
        if session.state != SessionState::Challenged {
            return Err(DenyReason::BadNonce);
        }
        if quote.nonce != session.nonce || self.used_nonces.contains(&quote.nonce) {
            return Err(DenyReason::BadNonce);
        }
        self.used_nonces.insert(quote.nonce);
        let hw = self
            .hw_keys
            .get(&session.machine)
            .ok_or(DenyReason::BadQuote)?;
        if !crypto::verify_mac(hw, &quote_body(&quote.measurement, &quote.nonce), &quote.hw_tag)
            || !crypto::verify_mac(
                hw,
                &binding_body(&session.ephemeral_key, &quote.hw_tag),
                &quote.outer_sig,
            )
        {
            return Err(DenyReason::BadQuote);
        }
        if !self.expected.contains(&quote.measurement) {
            return Err(DenyReason::UnknownMeasurement);
        }
        Ok(())
    }

    fn channel_keys(&self, cq: ChannelId) -> ChannelKeys {
        let epoch = self
            .admitted_epoch
            .get(&cq.sender)
            .copied()
            .unwrap_or(0)
            .max(self.admitted_epoch.get(&cq.receiver).copied().unwrap_or(0));
        let mut info = Vec::with_capacity(32);
        info.extend_from_slice(&cq.sender.0.to_le_bytes());
        info.extend_from_slice(&cq.receiver.0.to_le_bytes());
        info.extend_from_slice(&cq.lane.to_le_bytes());
        info.extend_from_slice(&epoch.to_le_bytes());
        let mut mac_info = b"chan-mac/".to_vec();
        mac_info.extend_from_slice(&info);
        let mut enc_info = b"chan-enc/".to_vec();
        enc_info.extend_from_slice(&info);
        ChannelKeys {
            mac: crypto::derive_key(&self.master, &mac_info),
            cipher: self
                .confidential
                .then(|| crypto::derive_key(&self.master, &enc_info)),
        }
    }

    fn sealing_key(&self, n: NodeId) -> Key {
        let mut info = b"store/".to_vec();
        info.extend_from_slice(&n.0.to_le_bytes());
        crypto::derive_key(&self.master, &info)
    }

    /// Keys for both directions of every channel between `node` and `peers`.
    fn keys_between(&self, node: NodeId, peers: impl IntoIterator<Item = NodeId>) -> Vec<(ChannelId, ChannelKeys)> {
        let mut out = Vec::new();
        for p in peers {
            if p == node {
                continue;
            }
            for cq in [ChannelId::new(node, p), ChannelId::new(p, node)] {
                out.push((cq, self.channel_keys(cq)));
            }
        }
        out
    }

    /// Completes a verified session: fresh id plus secrets. Returns `None`
    /// if the session did not pass quote verification.
    pub fn provision(&mut self, session: &mut AttestationSession) -> Option<Provisioned> {
        if session.state != SessionState::Quoted {
            return None;
        }
        session.advance(SessionState::Provisioned);
        let id = NodeId(self.next_fresh_id);
        self.next_fresh_id += 1;
        self.attested.insert(id, session.machine);
        self.admitted_epoch.insert(id, self.epoch);
        let peers: Vec<NodeId> = self.attested_nodes().collect();
        Some(Provisioned {
            node_id: id,
            provisioning: Provisioning {
                channel_keys: self.keys_between(id, peers),
                client_master: Some(self.client_master),
                sealing_key: Some(self.sealing_key(id)),
            },
            membership: self.membership.clone(),
            epoch: self.epoch,
        })
    }

    /// Algorithm: challenge, collect the quote, verify, send secrets.
    pub fn remote_attestation(&mut self, machine: &Machine) -> AttestOutcome {
        let mut session = self.challenge(machine.id);
        let quote = machine.respond(&session);
        match self.verify_quote(&mut session, &quote) {
            Err(r) => AttestOutcome::Denied(r),
            Ok(()) => AttestOutcome::Provisioned(
                self.provision(&mut session)
                    .expect("verified session provisions"),
            ),
        }
    }

    /// Keys an existing attested node needs to talk to `newcomer`.
    pub fn keys_for_peer(&self, peer: NodeId, newcomer: NodeId) -> Provisioning {
        if !self.is_attested(peer) || !self.is_attested(newcomer) {
            return Provisioning::default();
        }
        Provisioning {
            channel_keys: self.keys_between(peer, [newcomer]),
            ..Default::default()
        }
    }

    /// Client credential, handed out to authorized clients.
    pub fn client_key(&self, c: ClientId) -> Key {
        client_key_from_master(&self.client_master, c)
    }

    /// Every channel key issued so far (used by leak scans).
    pub fn issued_keys(&self) -> Vec<Key> {
        let nodes: Vec<NodeId> = self.attested.keys().copied().collect();
        let mut out = Vec::new();
        for &a in &nodes {
            for &b in &nodes {
                if a != b {
                    let k = self.channel_keys(ChannelId::new(a, b));
                    out.push(k.mac);
                    out.extend(k.cipher);
                }
            }
        }
        out
    }

    /// Adds an attested node to the initial membership without bumping the
    /// epoch (deployment time).
    pub fn bootstrap_member(&mut self, n: NodeId) -> Result<(), MembershipError> {
        if !self.is_attested(n) {
            return Err(MembershipError::NotAttested(n));
        }
        if self.membership.contains(&n) {
            return Err(MembershipError::AlreadyMember(n));
        }
        self.membership.push(n);
        Ok(())
    }

    pub fn commit_join(&mut self, n: NodeId) -> Result<MembershipUpdate, MembershipError> {
        if !self.is_attested(n) {
            return Err(MembershipError::NotAttested(n));
        }
        if self.membership.contains(&n) {
            return Err(MembershipError::AlreadyMember(n));
        }
        self.membership.push(n);
        self.epoch += 1;
        Ok(self.update())
    }

    pub fn remove(&mut self, n: NodeId) -> Result<MembershipUpdate, MembershipError> {
        let pos = self
            .membership
            .iter()
            .position(|m| *m == n)
            .ok_or(MembershipError::NotMember(n))?;
        self.membership.remove(pos);
        self.epoch += 1;
        Ok(self.update())
    }

    /// Withdraws an aborted joiner's attestation; its id stays burned.
    pub fn revoke(&mut self, n: NodeId) {
        self.revoked.insert(n);
    }

    fn update(&self) -> MembershipUpdate {
        MembershipUpdate {
            epoch: self.epoch,
            members: self.membership.clone(),
        }
    }
}
