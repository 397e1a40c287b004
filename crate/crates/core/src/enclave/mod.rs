//! Simulated enclave: a shielded call interface over the matching engine,
//! charged in simulated nanoseconds by an LRU model of the protected page
//! cache.
//!
//! Everything entering goes through an ecall as serialized bytes and is
//! copied in, size-checked and authenticated before use. Everything leaving
//! is an owned [`EcallResult`] holding sealed envelopes, handshake messages
//! or public metadata (ids, counts, rejection codes).

mod cost;
mod layout;
mod pager;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::{self, Write as _};

use ed25519_dalek::VerifyingKey;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub use cost::{CostModel, CostModelError, MIB};
pub use layout::{Layout, ARENA_TOUCHES};
pub use pager::{PageStats, Pager, Touch};

use crate::envelope::{declared_ct_len, Context, EnvelopeError, Identity, KeyRing, SealedEnvelope};
use crate::filter::{decode_publication, parse_filter, FilterError};
use crate::ids::{FilterId, KeyId, PubId, SenderId, SubscriberId};
use crate::index::{subscription_bytes, ContainmentIndex, IndexError, Subscription};
use crate::provisioning::{open_scf, HandshakeError, Initiator, Responder, StartupConfig};

/// Largest serialized envelope accepted by any ecall.
pub const MAX_ECALL_INPUT: usize = 64 * 1024;
pub const FILTER_GRAMMAR_VERSION: u32 = 1;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Measurement(pub [u8; 32]);

impl Measurement {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        hex::decode(s.trim()).ok()?.try_into().ok().map(Self)
    }
}

impl fmt::Debug for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Measurement({})", self.to_hex())
    }
}

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// SHA-256 over the build manifest.
pub fn measure(build_manifest: &[u8]) -> Measurement {
    Measurement(Sha256::digest(build_manifest).into())
}

/// Code identity of the matching engine under `model`.
pub fn build_manifest(model: &CostModel) -> Vec<u8> {
    format!(
        "ecbr-enclave {}\nfilter-grammar {}\n{}",
        env!("CARGO_PKG_VERSION"),
        FILTER_GRAMMAR_VERSION,
        model.to_config()
    )
    .into_bytes()
}

/// Plaintext carried by subscription-context envelopes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SubscriptionOp {
    Subscribe { filter_id: FilterId, filter: String },
    Unsubscribe { filter_id: FilterId },
}

impl SubscriptionOp {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            SubscriptionOp::Subscribe { filter_id, filter } => {
                let mut out = vec![0];
                out.extend_from_slice(filter_id.as_bytes());
                out.extend_from_slice(filter.as_bytes());
                out
            }
            SubscriptionOp::Unsubscribe { filter_id } => {
                let mut out = vec![1];
                out.extend_from_slice(filter_id.as_bytes());
                out
            }
        }
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        let (&op, rest) = b.split_first()?;
        if rest.len() < 16 {
            return None;
        }
        let filter_id = FilterId::from_slice(&rest[..16])?;
        match op {
            0 => Some(SubscriptionOp::Subscribe {
                filter_id,
                filter: String::from_utf8(rest[16..].to_vec()).ok()?,
            }),
            1 if rest.len() == 16 => Some(SubscriptionOp::Unsubscribe { filter_id }),
            _ => None,
        }
    }
}

/// Why an ecall refused its input. Only the code crosses the boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Reject {
    TooLarge,
    Malformed,
    UnknownKey,
    BadTag,
    UnknownSender,
    BadSignature,
    ContextMismatch,
    MalformedEncoding,
    FilterSyntax,
    UnsupportedOperator,
    Unsatisfiable,
    InvalidFilter,
    DuplicateFilterId,
    UnknownFilterId,
    NotOwner,
    NoSession,
    HandshakeFailed,
    UnknownMeasurement,
    CounterExhausted,
    NoPendingHandshake,
}

impl Reject {
    pub const ALL: [Reject; 20] = [
        Reject::TooLarge,
        Reject::Malformed,
        Reject::UnknownKey,
        Reject::BadTag,
        Reject::UnknownSender,
        Reject::BadSignature,
        Reject::ContextMismatch,
        Reject::MalformedEncoding,
        Reject::FilterSyntax,
        Reject::UnsupportedOperator,
        Reject::Unsatisfiable,
        Reject::InvalidFilter,
        Reject::DuplicateFilterId,
        Reject::UnknownFilterId,
        Reject::NotOwner,
        Reject::NoSession,
        Reject::HandshakeFailed,
        Reject::UnknownMeasurement,
        Reject::CounterExhausted,
        Reject::NoPendingHandshake,
    ];

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&r| r == self).unwrap() as u8 + 1
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get((c as usize).checked_sub(1)?).copied()
    }
}

impl fmt::Display for Reject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl From<EnvelopeError> for Reject {
    fn from(e: EnvelopeError) -> Self {
        match e {
            EnvelopeError::Malformed(_) => Reject::Malformed,
            EnvelopeError::UnknownKey(_) => Reject::UnknownKey,
            EnvelopeError::BadTag => Reject::BadTag,
            EnvelopeError::UnknownSender(_) => Reject::UnknownSender,
            EnvelopeError::BadSignature => Reject::BadSignature,
            EnvelopeError::ContextMismatch { .. } => Reject::ContextMismatch,
            EnvelopeError::CounterExhausted(_) => Reject::CounterExhausted,
            EnvelopeError::IncompleteHandshake => Reject::HandshakeFailed,
        }
    }
}

impl From<FilterError> for Reject {
    fn from(e: FilterError) -> Self {
        match e {
            FilterError::Syntax { .. } => Reject::FilterSyntax,
            FilterError::UnsupportedOperator { .. } => Reject::UnsupportedOperator,
            FilterError::Unsatisfiable { .. } => Reject::Unsatisfiable,
            _ => Reject::InvalidFilter,
        }
    }
}

impl From<HandshakeError> for Reject {
    fn from(e: HandshakeError) -> Self {
        match e {
            HandshakeError::UnknownMeasurement => Reject::UnknownMeasurement,
            HandshakeError::Envelope(e) => e.into(),
            _ => Reject::HandshakeFailed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delivery {
    pub subscriber: SubscriberId,
    /// Serialized envelope sealed under the subscriber's session key.
    pub envelope: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Accepted { filter_id: FilterId },
    Removed { filter_id: FilterId },
    Published { pub_id: PubId, deliveries: Vec<Delivery>, skipped: Vec<SubscriberId> },
    /// A handshake message to pass back to the peer.
    HandshakeReply { peer: SenderId, message: Vec<u8> },
    SessionEstablished { peer: SenderId, key_id: KeyId },
    SessionDropped { peer: SenderId, removed: usize },
    /// A handshake message for the provisioner.
    ProvisionMessage(Vec<u8>),
    Provisioned,
    Rejected(Reject),
}

#[derive(Clone, Debug)]
pub struct EcallResult {
    pub op: &'static str,
    pub outcome: Outcome,
    pub sim_ns: u64,
    pub stats: PageStats,
}

impl EcallResult {
    pub fn is_rejected(&self) -> bool {
        matches!(self.outcome, Outcome::Rejected(_))
    }

    pub fn rejection(&self) -> Option<Reject> {
        match self.outcome {
            Outcome::Rejected(r) => Some(r),
            _ => None,
        }
    }

    /// Every byte this result carries out of the enclave.
    pub fn boundary_bytes(&self) -> Vec<u8> {
        let mut out = self.op.as_bytes().to_vec();
        match &self.outcome {
            Outcome::Accepted { filter_id } | Outcome::Removed { filter_id } => {
                out.extend_from_slice(filter_id.as_bytes())
            }
            Outcome::Published { pub_id, deliveries, skipped } => {
                out.extend_from_slice(pub_id.as_bytes());
                for d in deliveries {
                    out.extend_from_slice(d.subscriber.as_bytes());
                    out.extend_from_slice(&d.envelope);
                }
                for s in skipped {
                    out.extend_from_slice(s.as_bytes());
                }
            }
            Outcome::HandshakeReply { peer, message } => {
                out.extend_from_slice(peer.as_bytes());
                out.extend_from_slice(message);
            }
            Outcome::SessionEstablished { peer, key_id } => {
                out.extend_from_slice(peer.as_bytes());
                out.extend_from_slice(key_id.as_bytes());
            }
            Outcome::SessionDropped { peer, removed } => {
                out.extend_from_slice(peer.as_bytes());
                out.extend_from_slice(&(*removed as u64).to_be_bytes());
            }
            Outcome::ProvisionMessage(m) => out.extend_from_slice(m),
            Outcome::Provisioned => {}
            Outcome::Rejected(r) => out.push(r.code()),
        }
        out.extend_from_slice(&self.sim_ns.to_be_bytes());
        out
    }
}

/// One row of the per-ecall statistics log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StatRow {
    pub op: &'static str,
    pub sim_ns: u64,
    pub hits: u64,
    pub misses: u64,
    pub swaps: u64,
    pub resident_bytes: u64,
}

pub fn stats_csv(rows: &[StatRow]) -> String {
    let mut out = String::from("op,sim_ns,hits,misses,swaps,resident_bytes\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{},{}", r.op, r.sim_ns, r.hits, r.misses, r.swaps, r.resident_bytes).unwrap();
    }
    out
}

pub struct Enclave {
    model: CostModel,
    measurement: Measurement,
    ring: KeyRing,
    rng: ChaCha20Rng,
    index: ContainmentIndex,
    layout: Layout,
    pager: Pager,
    clock: u64,
    ecalls: u64,
    sessions: HashMap<SenderId, KeyId>,
    owned: HashMap<SenderId, HashSet<FilterId>>,
    pending: HashMap<SenderId, Responder>,
    provisioning: Option<Initiator>,
    provision_key: Option<KeyId>,
    scf: Option<StartupConfig>,
    stats_log: Option<Vec<StatRow>>,
}

impl Enclave {
    /// `seed` drives the enclave identity and handshake randomness.
    pub fn new(model: CostModel, seed: u64) -> Result<Self, CostModelError> {
        model.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let identity = Identity::generate(&mut rng);
        Ok(Self {
            measurement: measure(&build_manifest(&model)),
            ring: KeyRing::new(identity),
            rng,
            index: ContainmentIndex::new(),
            layout: Layout::new(model.page_size, model.arena_bytes),
            pager: Pager::for_model(&model),
            clock: 0,
            ecalls: 0,
            sessions: HashMap::new(),
            owned: HashMap::new(),
            pending: HashMap::new(),
            provisioning: None,
            provision_key: None,
            scf: None,
            stats_log: None,
            model,
        })
    }

    pub fn model(&self) -> &CostModel {
        &self.model
    }

    pub fn measurement(&self) -> Measurement {
        self.measurement
    }

    pub fn sender_id(&self) -> SenderId {
        self.ring.sender_id()
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.ring.identity().verifying_key()
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn page_stats(&self) -> PageStats {
        self.pager.stats()
    }

    /// Bytes of protected memory currently holding enclave pages.
    pub fn resident_bytes(&self) -> u64 {
        self.pager.resident_pages() * self.model.page_size
    }

    /// Footprint of the stored subscriptions by the index byte schedule.
    pub fn index_bytes(&self) -> u64 {
        self.index.resident_bytes()
    }

    pub fn subscription_count(&self) -> usize {
        self.index.len()
    }

    /// Read access to the stored index, for inspection in tests and tools.
    pub fn index(&self) -> &ContainmentIndex {
        &self.index
    }

    pub fn is_provisioned(&self) -> bool {
        self.scf.is_some()
    }

    pub fn startup_config(&self) -> Option<&StartupConfig> {
        self.scf.as_ref()
    }

    pub fn has_session(&self, peer: SenderId) -> bool {
        self.sessions.contains_key(&peer)
    }

    pub fn enable_stats_log(&mut self) {
        self.stats_log.get_or_insert_with(Vec::new);
    }

    pub fn take_stats_log(&mut self) -> Vec<StatRow> {
        self.stats_log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn enter(&mut self) -> PageStats {
        let before = self.pager.stats();
        let n = self.ecalls;
        self.ecalls += 1;
        for p in self.layout.arena_pages(n) {
            self.pager.touch(p);
        }
        before
    }

    fn leave(&mut self, op: &'static str, before: PageStats, envelopes: u64, outcome: Outcome) -> EcallResult {
        let stats = self.pager.stats().since(&before);
        let sim_ns = stats.cost(&self.model) + envelopes * self.model.envelope_ns;
        self.clock += sim_ns;
        let resident_bytes = self.resident_bytes();
        if let Some(log) = self.stats_log.as_mut() {
            log.push(StatRow { op, sim_ns, hits: stats.hits, misses: stats.misses, swaps: stats.swaps, resident_bytes });
        }
        EcallResult { op, outcome, sim_ns, stats }
    }

    fn gate(bytes: &[u8]) -> Result<SealedEnvelope, Reject> {
        if bytes.len() > MAX_ECALL_INPUT || declared_ct_len(bytes).is_some_and(|n| n as usize > MAX_ECALL_INPUT) {
            return Err(Reject::TooLarge);
        }
        Ok(SealedEnvelope::from_bytes(bytes)?)
    }

    /// Opens an envelope that must come from an established session.
    fn open_session(&self, bytes: &[u8], ctx: Context) -> Result<(SenderId, Vec<u8>), Reject> {
        let env = Self::gate(bytes)?;
        let plain = self.ring.open(&env, ctx)?;
        if self.sessions.get(&env.sender_id) != Some(&env.key_id) {
            return Err(Reject::NoSession);
        }
        Ok((env.sender_id, plain))
    }

    fn touch_extent(&mut self, id: FilterId) {
        for p in self.layout.pages(id) {
            self.pager.touch(p);
        }
    }

    pub fn ecall_submit_subscription(&mut self, input: &[u8]) -> EcallResult {
        let before = self.enter();
        let outcome = match self.subscribe(input) {
            Ok(filter_id) => Outcome::Accepted { filter_id },
            Err(r) => Outcome::Rejected(r),
        };
        let env = u64::from(!matches!(outcome, Outcome::Rejected(Reject::TooLarge)));
        self.leave("subscribe", before, env, outcome)
    }

    fn subscribe(&mut self, input: &[u8]) -> Result<FilterId, Reject> {
        let (sender, plain) = self.open_session(input, Context::Sub)?;
        let Some(SubscriptionOp::Subscribe { filter_id, filter }) = SubscriptionOp::decode(&plain) else {
            return Err(Reject::MalformedEncoding);
        };
        let filter = parse_filter(&filter)?.with_id(filter_id);
        let bytes = subscription_bytes(&filter);
        self.index.insert(Subscription::new(filter, sender)).map_err(|e| match e {
            IndexError::DuplicateFilterId(_) => Reject::DuplicateFilterId,
            IndexError::UnknownFilterId(_) => Reject::UnknownFilterId,
        })?;
        self.layout.alloc(filter_id, bytes);
        self.touch_extent(filter_id);
        self.owned.entry(sender).or_default().insert(filter_id);
        Ok(filter_id)
    }

    pub fn ecall_unsubscribe(&mut self, input: &[u8]) -> EcallResult {
        let before = self.enter();
        let outcome = match self.unsubscribe(input) {
            Ok(filter_id) => Outcome::Removed { filter_id },
            Err(r) => Outcome::Rejected(r),
        };
        self.leave("unsubscribe", before, 1, outcome)
    }

    fn unsubscribe(&mut self, input: &[u8]) -> Result<FilterId, Reject> {
        let (sender, plain) = self.open_session(input, Context::Sub)?;
        let Some(SubscriptionOp::Unsubscribe { filter_id }) = SubscriptionOp::decode(&plain) else {
            return Err(Reject::MalformedEncoding);
        };
        match self.index.get(filter_id) {
            None => return Err(Reject::UnknownFilterId),
            Some(s) if s.subscriber != sender => return Err(Reject::NotOwner),
            Some(_) => {}
        }
        self.touch_extent(filter_id);
        self.remove_filter(sender, filter_id);
        Ok(filter_id)
    }

    fn remove_filter(&mut self, owner: SenderId, id: FilterId) {
        if self.index.remove(id).is_ok() {
            self.layout.free(id);
        }
        if let Some(set) = self.owned.get_mut(&owner) {
            set.remove(&id);
        }
    }

    pub fn ecall_publish(&mut self, input: &[u8]) -> EcallResult {
        let before = self.enter();
        let (outcome, envelopes) = match self.publish(input) {
            Ok((pub_id, deliveries, skipped)) => {
                let n = 1 + deliveries.len() as u64;
                (Outcome::Published { pub_id, deliveries, skipped }, n)
            }
            Err(r) => (Outcome::Rejected(r), 1),
        };
        self.leave("publish", before, envelopes, outcome)
    }

    #[allow(clippy::type_complexity)]
    fn publish(&mut self, input: &[u8]) -> Result<(PubId, Vec<Delivery>, Vec<SubscriberId>), Reject> {
        let (_, plain) = self.open_session(input, Context::Pub)?;
        let publication = decode_publication(&plain).map_err(|_| Reject::MalformedEncoding)?;
        let (index, layout, pager) = (&self.index, &self.layout, &mut self.pager);
        let result = index.match_with(&publication, |entries| {
            for e in entries {
                for p in layout.pages(e.filter_id()) {
                    pager.touch(p);
                }
            }
        });
        let subscribers: BTreeSet<SubscriberId> = result.matches.iter().map(|m| m.subscriber).collect();
        let mut deliveries = Vec::with_capacity(subscribers.len());
        let mut skipped = Vec::new();
        for s in subscribers {
            match self.sessions.get(&s) {
                Some(&key) => {
                    let env = self.ring.seal(key, Context::Pub, &plain)?;
                    deliveries.push(Delivery { subscriber: s, envelope: env.to_bytes() });
                }
                None => skipped.push(s),
            }
        }
        Ok((publication.id(), deliveries, skipped))
    }

    /// First step of a client session; the enclave answers as responder and
    /// reports its measurement.
    pub fn ecall_session_hello(&mut self, hello: &[u8]) -> EcallResult {
        let before = self.enter();
        let outcome = match Responder::accept(self.ring.identity().clone(), self.measurement, hello, &mut self.rng) {
            Ok((resp, message)) => {
                let peer = resp.peer();
                self.pending.insert(peer, resp);
                Outcome::HandshakeReply { peer, message }
            }
            Err(e) => Outcome::Rejected(e.into()),
        };
        self.leave("session_hello", before, 0, outcome)
    }

    pub fn ecall_session_finish(&mut self, peer: SenderId, finished: &[u8]) -> EcallResult {
        let before = self.enter();
        let outcome = match self.pending.remove(&peer) {
            None => Outcome::Rejected(Reject::NoPendingHandshake),
            Some(resp) => match Self::gate(finished).map(|_| resp.finish(finished, &mut self.ring)) {
                Err(r) => Outcome::Rejected(r),
                Ok(Err(e)) => Outcome::Rejected(e.into()),
                Ok(Ok(session)) => {
                    if let Some(old) = self.sessions.insert(session.peer, session.key_id) {
                        self.ring.remove_key(old);
                    }
                    Outcome::SessionEstablished { peer: session.peer, key_id: session.key_id }
                }
            },
        };
        self.leave("session_finish", before, 1, outcome)
    }

    /// Drops the session of `peer` and every filter it still owns.
    pub fn ecall_drop_session(&mut self, peer: SenderId) -> EcallResult {
        let before = self.enter();
        self.pending.remove(&peer);
        if let Some(key) = self.sessions.remove(&peer) {
            self.ring.remove_key(key);
        }
        let ids: Vec<FilterId> = self.owned.remove(&peer).map(|s| s.into_iter().collect()).unwrap_or_default();
        for &id in &ids {
            self.touch_extent(id);
            self.remove_filter(peer, id);
        }
        self.leave("drop_session", before, 0, Outcome::SessionDropped { peer, removed: ids.len() })
    }

    /// Starts provisioning; the enclave is the initiator and will present
    /// its measurement.
    pub fn ecall_provision_begin(&mut self) -> EcallResult {
        let before = self.enter();
        let init = Initiator::new(self.ring.identity().clone(), &mut self.rng).presenting(self.measurement);
        let hello = init.hello().to_vec();
        self.provisioning = Some(init);
        self.leave("provision_begin", before, 0, Outcome::ProvisionMessage(hello))
    }

    pub fn ecall_provision_reply(&mut self, reply: &[u8]) -> EcallResult {
        let before = self.enter();
        let outcome = match self.provisioning.take() {
            None => Outcome::Rejected(Reject::NoPendingHandshake),
            Some(init) => match init.finish(reply, &mut self.ring) {
                Ok((finished, session)) => {
                    self.provision_key = Some(session.key_id);
                    Outcome::ProvisionMessage(finished)
                }
                Err(e) => Outcome::Rejected(e.into()),
            },
        };
        self.leave("provision_reply", before, 1, outcome)
    }

    pub fn ecall_provision_complete(&mut self, released: &[u8]) -> EcallResult {
        let before = self.enter();
        let outcome = match self.provision_key.take() {
            None => Outcome::Rejected(Reject::NoPendingHandshake),
            Some(key) => {
                let r = Self::gate(released).map(|_| open_scf(&self.ring, released));
                self.ring.remove_key(key);
                match r {
                    Err(r) => Outcome::Rejected(r),
                    Ok(Err(e)) => Outcome::Rejected(e.into()),
                    Ok(Ok(scf)) => {
                        self.scf = Some(scf);
                        Outcome::Provisioned
                    }
                }
            }
        };
        self.leave("provision_complete", before, 1, outcome)
    }

    /// Abandons an in-flight provisioning attempt (for example after a refusal).
    pub fn ecall_provision_abort(&mut self) -> EcallResult {
        let before = self.enter();
        self.provisioning = None;
        if let Some(k) = self.provision_key.take() {
            self.ring.remove_key(k);
        }
        self.leave("provision_abort", before, 0, Outcome::Provisioned)
    }
}
