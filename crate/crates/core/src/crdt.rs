//! Grow-only message store replicated across devices, lights and the
//! command center.
//!
//! [`CrdtState`] is the join-semilattice: a set of messages keyed by
//! `(author, seq)`, a per-author version map and a purge horizon. Merge is a
//! union filtered by the larger horizon with a pointwise-max version map.
//!
//! [`Replica`] wraps a state with the per-node review ledger that decides
//! which messages may be offered onwards. Review decisions are local and
//! never travel in the lattice.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{NodeId, SimTime};

pub const HEADER_BYTES: usize = 8 + 4;
pub const AUTHOR_ENTRY_BYTES: usize = 32 + 8;
pub const MESSAGE_OVERHEAD_BYTES: usize = 32 + 8 + 8 + 4 + 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CrdtError {
    #[error("message {id} rejected: expected seq {expected}")]
    OutOfSequence { id: MsgId, expected: u64 },
    #[error("message {id} is older than the purge horizon {horizon}")]
    BeforeHorizon { id: MsgId, horizon: SimTime },
    #[error("unknown message {0}")]
    UnknownMessage(MsgId),
    #[error("message {0} is not held for review")]
    NotHeld(MsgId),
    #[error("purge horizon may not move backwards ({requested} < {current})")]
    HorizonRegression {
        requested: SimTime,
        current: SimTime,
    },
    #[error("malformed state encoding: {0}")]
    Decode(&'static str),
}

/// Opaque 32-byte author key identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeyId(pub [u8; 32]);

impl KeyId {
    /// Stable identifier derived from a human-readable key name.
    pub fn derive(name: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"citymesh-author-key:");
        hasher.update(name.as_bytes());
        KeyId(hasher.finalize().into())
    }

    pub fn short(&self) -> String {
        self.0[..4].iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({})", self.short())
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.short())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthorKey {
    pub key_id: KeyId,
    /// Pre-shared first-responder key.
    pub trusted: bool,
}

impl AuthorKey {
    pub fn named(name: &str, trusted: bool) -> Self {
        Self {
            key_id: KeyId::derive(name),
            trusted,
        }
    }
}

/// Keys a replica learned ahead of time.
pub type KnownKeys = BTreeMap<KeyId, AuthorKey>;

pub fn known_keys<I: IntoIterator<Item = AuthorKey>>(keys: I) -> KnownKeys {
    keys.into_iter().map(|k| (k.key_id, k)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MsgId {
    pub author: KeyId,
    pub seq: u64,
}

impl fmt::Display for MsgId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.author, self.seq)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Message {
    pub id: MsgId,
    pub time: SimTime,
    pub body: Vec<u8>,
    pub signature_valid: bool,
}

impl Message {
    pub fn encoded_len(&self) -> usize {
        MESSAGE_OVERHEAD_BYTES + self.body.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrdtState {
    messages: BTreeMap<MsgId, Message>,
    version: BTreeMap<KeyId, u64>,
    purge_horizon: SimTime,
}

impl CrdtState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn messages(&self) -> impl Iterator<Item = &Message> {
        self.messages.values()
    }

    pub fn message(&self, id: &MsgId) -> Option<&Message> {
        self.messages.get(id)
    }

    pub fn contains(&self, id: &MsgId) -> bool {
        self.messages.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty() && self.version.is_empty()
    }

    pub fn version(&self) -> &BTreeMap<KeyId, u64> {
        &self.version
    }

    pub fn version_of(&self, author: &KeyId) -> u64 {
        self.version.get(author).copied().unwrap_or(0)
    }

    pub fn purge_horizon(&self) -> SimTime {
        self.purge_horizon
    }

    /// Join of two states. Commutative, associative and idempotent.
    pub fn merge(&self, other: &CrdtState) -> CrdtState {
        let mut out = self.clone();
        out.absorb(other);
        out
    }

    /// In-place join.
    pub fn absorb(&mut self, other: &CrdtState) {
        if other.purge_horizon > self.purge_horizon {
            self.purge_horizon = other.purge_horizon;
            let horizon = self.purge_horizon;
            self.messages.retain(|_, m| m.time >= horizon);
        }
        for (id, m) in &other.messages {
            if m.time < self.purge_horizon {
                continue;
            }
            match self.messages.get_mut(id) {
                None => {
                    self.messages.insert(*id, m.clone());
                }
                // ids are unique by construction; keep a deterministic winner
                // if a forged duplicate ever shows up
                Some(existing) if m > existing => *existing = m.clone(),
                Some(_) => {}
            }
        }
        for (author, seq) in &other.version {
            let slot = self.version.entry(*author).or_insert(0);
            *slot = (*slot).max(*seq);
        }
    }

    /// Inserts a locally authored message. The sequence number must be the
    /// author's next one.
    pub fn add_message(&mut self, m: Message) -> Result<(), CrdtError> {
        let expected = self.version_of(&m.id.author) + 1;
        if m.id.seq != expected {
            return Err(CrdtError::OutOfSequence { id: m.id, expected });
        }
        if m.time < self.purge_horizon {
            return Err(CrdtError::BeforeHorizon {
                id: m.id,
                horizon: self.purge_horizon,
            });
        }
        self.version.insert(m.id.author, m.id.seq);
        self.messages.insert(m.id, m);
        Ok(())
    }

    /// Smallest sub-state that brings a replica with `remote_version` up to
    /// this one.
    pub fn delta(&self, remote_version: &BTreeMap<KeyId, u64>) -> CrdtState {
        let mut out = CrdtState {
            purge_horizon: self.purge_horizon,
            ..CrdtState::default()
        };
        for (author, &seq) in &self.version {
            let known = remote_version.get(author).copied().unwrap_or(0);
            if seq <= known {
                continue;
            }
            out.version.insert(*author, seq);
            for (id, m) in self.author_range(author, known + 1, seq) {
                out.messages.insert(*id, m.clone());
            }
        }
        out
    }

    fn author_range(
        &self,
        author: &KeyId,
        from_seq: u64,
        to_seq: u64,
    ) -> impl Iterator<Item = (&MsgId, &Message)> {
        let lo = MsgId {
            author: *author,
            seq: from_seq,
        };
        let hi = MsgId {
            author: *author,
            seq: to_seq,
        };
        self.messages.range(lo..=hi)
    }

    /// Drops every message older than `horizon`. Versions are kept so that
    /// purged messages are not re-requested.
    pub fn purge(&mut self, horizon: SimTime) -> Result<(), CrdtError> {
        if horizon < self.purge_horizon {
            return Err(CrdtError::HorizonRegression {
                requested: horizon,
                current: self.purge_horizon,
            });
        }
        self.purge_horizon = horizon;
        self.messages.retain(|_, m| m.time >= horizon);
        Ok(())
    }

    pub fn encoded_size(&self) -> usize {
        HEADER_BYTES
            + self.version.len() * AUTHOR_ENTRY_BYTES
            + self
                .messages
                .values()
                .map(Message::encoded_len)
                .sum::<usize>()
    }

    /// Big-endian binary encoding: header, author table, message records.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_size());
        out.extend_from_slice(&self.purge_horizon.millis().to_be_bytes());
        out.extend_from_slice(&(self.version.len() as u32).to_be_bytes());
        for (author, seq) in &self.version {
            out.extend_from_slice(&author.0);
            out.extend_from_slice(&seq.to_be_bytes());
        }
        for m in self.messages.values() {
            out.extend_from_slice(&m.id.author.0);
            out.extend_from_slice(&m.id.seq.to_be_bytes());
            out.extend_from_slice(&m.time.millis().to_be_bytes());
            out.extend_from_slice(&(m.body.len() as u32).to_be_bytes());
            out.extend_from_slice(&m.body);
            out.push(u8::from(m.signature_valid));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<CrdtState, CrdtError> {
        let mut r = Reader(bytes);
        let purge_horizon = SimTime(r.u64()?);
        let authors = r.u32()?;
        let mut version = BTreeMap::new();
        for _ in 0..authors {
            let key = KeyId(r.array()?);
            version.insert(key, r.u64()?);
        }
        let mut messages = BTreeMap::new();
        while !r.0.is_empty() {
            let author = KeyId(r.array()?);
            let seq = r.u64()?;
            let time = SimTime(r.u64()?);
            let len = r.u32()? as usize;
            let body = r.take(len)?.to_vec();
            let signature_valid = match r.take(1)?[0] {
                0 => false,
                1 => true,
                _ => return Err(CrdtError::Decode("signature flag must be 0 or 1")),
            };
            let id = MsgId { author, seq };
            messages.insert(
                id,
                Message {
                    id,
                    time,
                    body,
                    signature_valid,
                },
            );
        }
        Ok(CrdtState {
            messages,
            version,
            purge_horizon,
        })
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CrdtError> {
        if self.0.len() < n {
            return Err(CrdtError::Decode("truncated input"));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CrdtError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u64(&mut self) -> Result<u64, CrdtError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, CrdtError> {
        Ok(u32::from_be_bytes(self.array()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForwardDecision {
    AutoForward,
    HoldForReview,
}

pub fn forward_decision(m: &Message, known: &KnownKeys) -> ForwardDecision {
    match known.get(&m.id.author) {
        Some(key) if key.trusted && m.signature_valid => ForwardDecision::AutoForward,
        _ => ForwardDecision::HoldForReview,
    }
}

/// Local review status of a stored message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReviewStatus {
    /// Authored on this replica.
    Own,
    AutoForward,
    Approved,
    Held,
    Denied,
}

impl ReviewStatus {
    pub fn forwardable(self) -> bool {
        matches!(
            self,
            ReviewStatus::Own | ReviewStatus::AutoForward | ReviewStatus::Approved
        )
    }
}

/// How the user of a replica answers review prompts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReviewPolicy {
    /// Held messages wait for an explicit approve/deny.
    #[default]
    Manual,
    /// The user approves every held message on arrival.
    ApproveAll,
}

/// A message that arrived through [`Replica::receive`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Received {
    pub id: MsgId,
    pub status: ReviewStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replica {
    owner: NodeId,
    state: CrdtState,
    known: KnownKeys,
    review: BTreeMap<MsgId, ReviewStatus>,
    policy: ReviewPolicy,
}

impl Replica {
    pub fn new(owner: NodeId, known: KnownKeys, policy: ReviewPolicy) -> Self {
        Self {
            owner,
            state: CrdtState::new(),
            known,
            review: BTreeMap::new(),
            policy,
        }
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn state(&self) -> &CrdtState {
        &self.state
    }

    pub fn policy(&self) -> ReviewPolicy {
        self.policy
    }

    pub fn known(&self) -> &KnownKeys {
        &self.known
    }

    pub fn status(&self, id: &MsgId) -> Option<ReviewStatus> {
        self.review.get(id).copied()
    }

    pub fn held(&self) -> impl Iterator<Item = MsgId> + '_ {
        self.review
            .iter()
            .filter(|(_, s)| **s == ReviewStatus::Held)
            .map(|(id, _)| *id)
    }

    /// Authors a new message with the next sequence number of `author`.
    pub fn post(
        &mut self,
        author: KeyId,
        time: SimTime,
        body: Vec<u8>,
        signature_valid: bool,
    ) -> Result<Message, CrdtError> {
        let id = MsgId {
            author,
            seq: self.state.version_of(&author) + 1,
        };
        let m = Message {
            id,
            time,
            body,
            signature_valid,
        };
        self.state.add_message(m.clone())?;
        self.review.insert(id, ReviewStatus::Own);
        Ok(m)
    }

    /// Merges an incoming (delta) state and classifies every message that
    /// was new to this replica.
    pub fn receive(&mut self, incoming: &CrdtState) -> Vec<Received> {
        let horizon = self.state.purge_horizon.max(incoming.purge_horizon);
        let mut fresh = Vec::new();
        for (id, m) in &incoming.messages {
            if m.time < horizon || self.state.contains(id) {
                continue;
            }
            let status = match (forward_decision(m, &self.known), self.policy) {
                (ForwardDecision::AutoForward, _) => ReviewStatus::AutoForward,
                (ForwardDecision::HoldForReview, ReviewPolicy::ApproveAll) => {
                    ReviewStatus::Approved
                }
                (ForwardDecision::HoldForReview, ReviewPolicy::Manual) => ReviewStatus::Held,
            };
            fresh.push(Received { id: *id, status });
        }
        self.state.absorb(incoming);
        self.prune_review();
        for r in &fresh {
            self.review.insert(r.id, r.status);
        }
        fresh
    }

    /// Records the user's decision for a held message.
    pub fn approve(&mut self, id: &MsgId, approved: bool) -> Result<ReviewStatus, CrdtError> {
        match self.review.get_mut(id) {
            None => Err(CrdtError::UnknownMessage(*id)),
            Some(status) if *status == ReviewStatus::Held => {
                *status = if approved {
                    ReviewStatus::Approved
                } else {
                    ReviewStatus::Denied
                };
                Ok(*status)
            }
            Some(_) => Err(CrdtError::NotHeld(*id)),
        }
    }

    fn forwardable(&self, id: &MsgId) -> bool {
        self.review.get(id).is_some_and(|s| s.forwardable())
    }

    /// The part of [`CrdtState::delta`] this replica is willing to pass on.
    ///
    /// Per author, messages are offered in sequence order up to the first one
    /// that is held or denied here; the offered version entry stops just
    /// before it, so the receiver never claims a sequence it did not get.
    pub fn offer(&self, remote_version: &BTreeMap<KeyId, u64>) -> CrdtState {
        let mut out = CrdtState {
            purge_horizon: self.state.purge_horizon,
            ..CrdtState::default()
        };
        for (author, &seq) in &self.state.version {
            let known = remote_version.get(author).copied().unwrap_or(0);
            if seq <= known {
                continue;
            }
            let mut cap = seq;
            for (id, m) in self.state.author_range(author, known + 1, seq) {
                if !self.forwardable(id) {
                    cap = id.seq - 1;
                    break;
                }
                out.messages.insert(*id, m.clone());
            }
            if cap > known {
                out.version.insert(*author, cap);
            }
        }
        out
    }

    pub fn purge(&mut self, horizon: SimTime) -> Result<(), CrdtError> {
        self.state.purge(horizon)?;
        self.prune_review();
        Ok(())
    }

    fn prune_review(&mut self) {
        let state = &self.state;
        self.review.retain(|id, _| state.contains(id));
    }
}
