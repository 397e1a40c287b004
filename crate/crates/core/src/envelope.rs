//! Sealed envelopes: ChaCha20-Poly1305 under a shared key, signed with the
//! sender's Ed25519 key.
//!
//! Wire layout (big-endian):
//! `u8 version | u8 context | key_id[16] | nonce[12] | sender_id[16] | u32 ct_len | ct | tag[16] | sig[64]`.

use std::collections::HashMap;

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce, Tag};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::Reader;
use crate::ids::{KeyId, SenderId};

pub const VERSION: u8 = 1;
pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const SIG_LEN: usize = 64;
/// Bytes before the ciphertext.
pub const HEADER_LEN: usize = 1 + 1 + 16 + NONCE_LEN + 16 + 4;
/// Fixed envelope size on top of the ciphertext.
pub const OVERHEAD: usize = HEADER_LEN + TAG_LEN + SIG_LEN;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Context {
    Pub,
    Sub,
    Scf,
}

impl Context {
    pub const ALL: [Context; 3] = [Context::Pub, Context::Sub, Context::Scf];

    pub fn label(self) -> &'static [u8] {
        match self {
            Context::Pub => b"pub",
            Context::Sub => b"sub",
            Context::Scf => b"scf",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Context::Pub => 0,
            Context::Sub => 1,
            Context::Scf => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.code() == c)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("malformed envelope: {0}")]
    Malformed(&'static str),
    #[error("unknown key {0}")]
    UnknownKey(KeyId),
    #[error("authentication tag mismatch")]
    BadTag,
    #[error("unknown sender {0}")]
    UnknownSender(SenderId),
    #[error("signature verification failed")]
    BadSignature,
    #[error("context mismatch: expected {expected:?}, found {found:?}")]
    ContextMismatch { expected: Context, found: Context },
    #[error("nonce counter exhausted for key {0}")]
    CounterExhausted(KeyId),
    #[error("handshake transcript incomplete")]
    IncompleteHandshake,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedEnvelope {
    pub context: Context,
    pub key_id: KeyId,
    pub nonce: [u8; NONCE_LEN],
    pub sender_id: SenderId,
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
    pub signature: [u8; SIG_LEN],
}

fn associated_data(ctx: Context, sender: SenderId) -> Vec<u8> {
    let mut ad = ctx.label().to_vec();
    ad.extend_from_slice(sender.as_bytes());
    ad
}

impl SealedEnvelope {
    fn signed_bytes(&self) -> Vec<u8> {
        let mut m = Vec::with_capacity(16 + NONCE_LEN + self.ciphertext.len() + TAG_LEN + 16 + 3);
        m.extend_from_slice(self.key_id.as_bytes());
        m.extend_from_slice(&self.nonce);
        m.extend_from_slice(&self.ciphertext);
        m.extend_from_slice(&self.tag);
        m.extend_from_slice(self.sender_id.as_bytes());
        m.extend_from_slice(self.context.label());
        m
    }

    pub fn wire_len(&self) -> usize {
        OVERHEAD + self.ciphertext.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.push(VERSION);
        out.push(self.context.code());
        out.extend_from_slice(self.key_id.as_bytes());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(self.sender_id.as_bytes());
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        let trunc = |_| EnvelopeError::Malformed("truncated");
        let mut r = Reader::new(bytes);
        if r.u8().map_err(trunc)? != VERSION {
            return Err(EnvelopeError::Malformed("unsupported version"));
        }
        let context = Context::from_code(r.u8().map_err(trunc)?).ok_or(EnvelopeError::Malformed("unknown context"))?;
        let key_id = KeyId(r.array().map_err(trunc)?);
        let nonce = r.array().map_err(trunc)?;
        let sender_id = SenderId(r.array().map_err(trunc)?);
        let ct_len = r.u32().map_err(trunc)? as usize;
        if r.remaining() != ct_len + TAG_LEN + SIG_LEN {
            return Err(EnvelopeError::Malformed("length mismatch"));
        }
        let ciphertext = r.take(ct_len).map_err(trunc)?.to_vec();
        let tag = r.array().map_err(trunc)?;
        let signature = r.array().map_err(trunc)?;
        Ok(Self { context, key_id, nonce, sender_id, ciphertext, tag, signature })
    }
}

/// Ciphertext length declared in a serialized envelope, read without
/// parsing the rest.
pub fn declared_ct_len(bytes: &[u8]) -> Option<u32> {
    let b = bytes.get(HEADER_LEN - 4..HEADER_LEN)?;
    Some(u32::from_be_bytes(b.try_into().unwrap()))
}

pub fn sender_id_of(vk: &VerifyingKey) -> SenderId {
    let d = Sha256::digest(vk.as_bytes());
    SenderId::from_slice(&d[..16]).unwrap()
}

/// A signing identity.
#[derive(Clone)]
pub struct Identity {
    key: SigningKey,
}

impl Identity {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self { key: SigningKey::from_bytes(&seed) }
    }

    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self { key: SigningKey::generate(rng) }
    }

    pub fn seed(&self) -> [u8; 32] {
        self.key.to_bytes()
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    pub fn sender_id(&self) -> SenderId {
        sender_id_of(&self.key.verifying_key())
    }

    pub fn sign(&self, msg: &[u8]) -> [u8; SIG_LEN] {
        self.key.sign(msg).to_bytes()
    }
}

impl std::fmt::Debug for Identity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Identity({})", self.sender_id())
    }
}

pub fn verify_signature(vk: &VerifyingKey, msg: &[u8], sig: &[u8; SIG_LEN]) -> bool {
    vk.verify(msg, &Signature::from_bytes(sig)).is_ok()
}

struct KeyEntry {
    key: [u8; KEY_LEN],
    counter: u64,
}

/// Symmetric keys with per-key send counters, the local signing identity and
/// the verifying keys of known senders.
pub struct KeyRing {
    identity: Identity,
    keys: HashMap<KeyId, KeyEntry>,
    senders: HashMap<SenderId, VerifyingKey>,
}

impl KeyRing {
    pub fn new(identity: Identity) -> Self {
        let mut senders = HashMap::new();
        senders.insert(identity.sender_id(), identity.verifying_key());
        Self { identity, keys: HashMap::new(), senders }
    }

    pub fn identity(&self) -> &Identity {
        &self.identity
    }

    pub fn sender_id(&self) -> SenderId {
        self.identity.sender_id()
    }

    pub fn add_key(&mut self, id: KeyId, key: [u8; KEY_LEN]) {
        self.keys.insert(id, KeyEntry { key, counter: 0 });
    }

    pub fn remove_key(&mut self, id: KeyId) -> bool {
        self.keys.remove(&id).is_some()
    }

    pub fn has_key(&self, id: KeyId) -> bool {
        self.keys.contains_key(&id)
    }

    /// Positions the send counter of `id`; used to exercise exhaustion.
    pub fn set_counter(&mut self, id: KeyId, counter: u64) -> Result<(), EnvelopeError> {
        self.keys.get_mut(&id).ok_or(EnvelopeError::UnknownKey(id))?.counter = counter;
        Ok(())
    }

    pub fn add_sender(&mut self, vk: VerifyingKey) -> SenderId {
        let id = sender_id_of(&vk);
        self.senders.insert(id, vk);
        id
    }

    pub fn remove_sender(&mut self, id: SenderId) {
        if id != self.identity.sender_id() {
            self.senders.remove(&id);
        }
    }

    pub fn sender(&self, id: SenderId) -> Option<&VerifyingKey> {
        self.senders.get(&id)
    }

    pub fn seal(&mut self, key_id: KeyId, ctx: Context, plaintext: &[u8]) -> Result<SealedEnvelope, EnvelopeError> {
        let sender_id = self.identity.sender_id();
        let entry = self.keys.get_mut(&key_id).ok_or(EnvelopeError::UnknownKey(key_id))?;
        if entry.counter == u64::MAX {
            return Err(EnvelopeError::CounterExhausted(key_id));
        }
        let mut nonce = [0u8; NONCE_LEN];
        nonce[..4].copy_from_slice(&sender_id.as_bytes()[..4]);
        nonce[4..].copy_from_slice(&entry.counter.to_be_bytes());
        entry.counter += 1;

        let cipher = ChaCha20Poly1305::new(Key::from_slice(&entry.key));
        let mut ciphertext = plaintext.to_vec();
        let tag = cipher
            .encrypt_in_place_detached(Nonce::from_slice(&nonce), &associated_data(ctx, sender_id), &mut ciphertext)
            .expect("plaintext within AEAD limits");
        let mut env = SealedEnvelope {
            context: ctx,
            key_id,
            nonce,
            sender_id,
            ciphertext,
            tag: tag.into(),
            signature: [0; SIG_LEN],
        };
        env.signature = self.identity.sign(&env.signed_bytes());
        Ok(env)
    }

    /// Checks the AEAD tag, then the sender signature, then the context.
    pub fn open(&self, env: &SealedEnvelope, expected: Context) -> Result<Vec<u8>, EnvelopeError> {
        let entry = self.keys.get(&env.key_id).ok_or(EnvelopeError::UnknownKey(env.key_id))?;
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&entry.key));
        let mut plaintext = env.ciphertext.clone();
        cipher
            .decrypt_in_place_detached(
                Nonce::from_slice(&env.nonce),
                &associated_data(env.context, env.sender_id),
                &mut plaintext,
                Tag::from_slice(&env.tag),
            )
            .map_err(|_| EnvelopeError::BadTag)?;
        let vk = self.senders.get(&env.sender_id).ok_or(EnvelopeError::UnknownSender(env.sender_id))?;
        if !verify_signature(vk, &env.signed_bytes(), &env.signature) {
            return Err(EnvelopeError::BadSignature);
        }
        if env.context != expected {
            return Err(EnvelopeError::ContextMismatch { expected, found: env.context });
        }
        Ok(plaintext)
    }

    pub fn open_bytes(&self, bytes: &[u8], expected: Context) -> Result<Vec<u8>, EnvelopeError> {
        self.open(&SealedEnvelope::from_bytes(bytes)?, expected)
    }
}

/// Handshake messages in order plus the agreed Diffie-Hellman secret.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Transcript {
    pub messages: Vec<u8>,
    pub shared_secret: Vec<u8>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one handshake message, length-prefixed so boundaries are bound.
    pub fn push(&mut self, msg: &[u8]) {
        self.messages.extend_from_slice(&(msg.len() as u32).to_be_bytes());
        self.messages.extend_from_slice(msg);
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(&self.messages).into()
    }
}

pub fn derive_session_key(t: &Transcript) -> Result<(KeyId, [u8; KEY_LEN]), EnvelopeError> {
    if t.messages.is_empty() || t.shared_secret.is_empty() {
        return Err(EnvelopeError::IncompleteHandshake);
    }
    let mut h = Sha256::new();
    h.update(b"ecbr key id");
    h.update((t.messages.len() as u64).to_be_bytes());
    h.update(&t.messages);
    h.update(&t.shared_secret);
    let id = KeyId::from_slice(&h.finalize()[..16]).unwrap();
    let mut key = [0u8; KEY_LEN];
    Hkdf::<Sha256>::new(Some(&t.hash()), &t.shared_secret)
        .expand(b"ecbr session key", &mut key)
        .expect("32 bytes is a valid HKDF length");
    Ok((id, key))
}
