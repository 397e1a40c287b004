//! Measurement-gated session establishment and startup-configuration
//! release.
//!
//! Three messages establish a session key between an initiator and a
//! responder, both holding Ed25519 identities:
//!
//! 1. `Hello`: version, initiator verifying key, X25519 ephemeral key, nonce.
//! 2. `Reply`: the same fields for the responder plus the responder's
//!    measurement, signed over `Hello ‖ Reply-body`.
//! 3. `Finished`: a sealed envelope (context `scf`) under the derived key
//!    carrying the transcript hash and, optionally, the initiator's
//!    measurement.
//!
//! The provisioner is a responder that answers `Finished` with the startup
//! configuration registered for the presented measurement, sealed under the
//! session key, or with a fixed-shape refusal.

use std::collections::{BTreeMap, HashMap};

use rand::{CryptoRng, RngCore};
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

use crate::codec::Reader;
use crate::enclave::Measurement;
use crate::envelope::{
    derive_session_key, verify_signature, Context, EnvelopeError, Identity, KeyRing, SealedEnvelope, Transcript,
};
use crate::ids::{KeyId, SenderId};

pub const HANDSHAKE_VERSION: u8 = 1;
pub const HELLO_LEN: usize = 1 + 32 + 32 + 32;
const REPLY_BODY_LEN: usize = HELLO_LEN + 32;
pub const REPLY_LEN: usize = REPLY_BODY_LEN + 64;
pub const SCF_VERSION: u8 = 1;
pub const MAX_SCF_BYTES: usize = 64 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScfError {
    #[error("malformed startup configuration: {0}")]
    Malformed(&'static str),
    #[error("startup configuration exceeds {MAX_SCF_BYTES} bytes")]
    TooLarge,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HandshakeError {
    #[error("malformed handshake message: {0}")]
    Malformed(&'static str),
    #[error("handshake signature invalid")]
    BadSignature,
    #[error("peer measurement does not match the expected identity")]
    MeasurementMismatch,
    #[error("key agreement produced a non-contributory secret")]
    NonContributory,
    #[error("finished message does not bind this transcript")]
    TranscriptMismatch,
    #[error("finished message signed by an unexpected sender")]
    WrongPeer,
    #[error("no startup configuration registered for the presented measurement")]
    UnknownMeasurement,
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error(transparent)]
    Scf(#[from] ScfError),
}

/// Keys, manifest credentials, arguments and environment released to a
/// verified enclave.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StartupConfig {
    pub stream_keys: BTreeMap<String, [u8; 32]>,
    pub manifest_hash: [u8; 32],
    pub manifest_key: [u8; 32],
    pub args: Vec<String>,
    pub env: BTreeMap<String, String>,
}

fn put_u16_bytes(out: &mut Vec<u8>, b: &[u8]) -> Result<(), ScfError> {
    let n = u16::try_from(b.len()).map_err(|_| ScfError::TooLarge)?;
    out.extend_from_slice(&n.to_be_bytes());
    out.extend_from_slice(b);
    Ok(())
}

pub fn encode_scf(scf: &StartupConfig) -> Result<Vec<u8>, ScfError> {
    let count = |n: usize| u16::try_from(n).map_err(|_| ScfError::TooLarge);
    let mut out = vec![SCF_VERSION];
    out.extend_from_slice(&count(scf.stream_keys.len())?.to_be_bytes());
    for (label, key) in &scf.stream_keys {
        let n = u8::try_from(label.len()).map_err(|_| ScfError::Malformed("stream label longer than 255 bytes"))?;
        out.push(n);
        out.extend_from_slice(label.as_bytes());
        out.extend_from_slice(key);
    }
    out.extend_from_slice(&scf.manifest_hash);
    out.extend_from_slice(&scf.manifest_key);
    out.extend_from_slice(&count(scf.args.len())?.to_be_bytes());
    for a in &scf.args {
        put_u16_bytes(&mut out, a.as_bytes())?;
    }
    out.extend_from_slice(&count(scf.env.len())?.to_be_bytes());
    for (k, v) in &scf.env {
        put_u16_bytes(&mut out, k.as_bytes())?;
        put_u16_bytes(&mut out, v.as_bytes())?;
    }
    if out.len() > MAX_SCF_BYTES {
        return Err(ScfError::TooLarge);
    }
    Ok(out)
}

pub fn decode_scf(bytes: &[u8]) -> Result<StartupConfig, ScfError> {
    if bytes.len() > MAX_SCF_BYTES {
        return Err(ScfError::TooLarge);
    }
    let t = |_| ScfError::Malformed("truncated");
    let utf8 = |b: &[u8]| String::from_utf8(b.to_vec()).map_err(|_| ScfError::Malformed("invalid UTF-8"));
    let mut r = Reader::new(bytes);
    if r.u8().map_err(t)? != SCF_VERSION {
        return Err(ScfError::Malformed("unsupported version"));
    }
    let mut scf = StartupConfig::default();
    let mut last: Option<String> = None;
    for _ in 0..r.u16().map_err(t)? {
        let n = r.u8().map_err(t)? as usize;
        let label = utf8(r.take(n).map_err(t)?)?;
        if last.as_ref().is_some_and(|l| *l >= label) {
            return Err(ScfError::Malformed("stream labels not strictly sorted"));
        }
        scf.stream_keys.insert(label.clone(), r.array().map_err(t)?);
        last = Some(label);
    }
    scf.manifest_hash = r.array().map_err(t)?;
    scf.manifest_key = r.array().map_err(t)?;
    for _ in 0..r.u16().map_err(t)? {
        let n = r.u16().map_err(t)? as usize;
        scf.args.push(utf8(r.take(n).map_err(t)?)?);
    }
    let mut last: Option<String> = None;
    for _ in 0..r.u16().map_err(t)? {
        let n = r.u16().map_err(t)? as usize;
        let k = utf8(r.take(n).map_err(t)?)?;
        let n = r.u16().map_err(t)? as usize;
        let v = utf8(r.take(n).map_err(t)?)?;
        if last.as_ref().is_some_and(|l| *l >= k) {
            return Err(ScfError::Malformed("environment keys not strictly sorted"));
        }
        scf.env.insert(k.clone(), v);
        last = Some(k);
    }
    if r.remaining() != 0 {
        return Err(ScfError::Malformed("trailing bytes"));
    }
    Ok(scf)
}

/// Measurement → startup configuration registrations.
#[derive(Clone, Debug, Default)]
pub struct ScfTable {
    entries: HashMap<Measurement, StartupConfig>,
}

impl ScfTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, m: Measurement, scf: StartupConfig) -> Option<StartupConfig> {
        self.entries.insert(m, scf)
    }

    pub fn get(&self, m: &Measurement) -> Option<&StartupConfig> {
        self.entries.get(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One registration per line: `<measurement-hex> <scf-hex>`; `#` comments.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut t = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(m), Some(s), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(format!("line {}: expected `<measurement-hex> <scf-hex>`", i + 1));
            };
            let m = Measurement::from_hex(m).ok_or_else(|| format!("line {}: bad measurement", i + 1))?;
            let bytes = hex::decode(s).map_err(|e| format!("line {}: {e}", i + 1))?;
            let scf = decode_scf(&bytes).map_err(|e| format!("line {}: {e}", i + 1))?;
            if t.register(m, scf).is_some() {
                return Err(format!("line {}: measurement registered twice", i + 1));
            }
        }
        Ok(t)
    }

    pub fn render(&self) -> Result<String, ScfError> {
        let mut rows: Vec<String> = Vec::with_capacity(self.entries.len());
        for (m, scf) in &self.entries {
            rows.push(format!("{} {}\n", m.to_hex(), hex::encode(encode_scf(scf)?)));
        }
        rows.sort();
        Ok(rows.concat())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct HelloMsg {
    vk: [u8; 32],
    eph: [u8; 32],
    nonce: [u8; 32],
}

fn parse_hello(b: &[u8]) -> Result<HelloMsg, HandshakeError> {
    if b.len() != HELLO_LEN {
        return Err(HandshakeError::Malformed("hello length"));
    }
    let mut r = Reader::new(b);
    if r.u8().unwrap() != HANDSHAKE_VERSION {
        return Err(HandshakeError::Malformed("hello version"));
    }
    Ok(HelloMsg { vk: r.array().unwrap(), eph: r.array().unwrap(), nonce: r.array().unwrap() })
}

fn hello_bytes(vk: &[u8; 32], eph: &[u8; 32], nonce: &[u8; 32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HELLO_LEN);
    out.push(HANDSHAKE_VERSION);
    out.extend_from_slice(vk);
    out.extend_from_slice(eph);
    out.extend_from_slice(nonce);
    out
}

fn verifying_key(b: &[u8; 32]) -> Result<ed25519_dalek::VerifyingKey, HandshakeError> {
    ed25519_dalek::VerifyingKey::from_bytes(b).map_err(|_| HandshakeError::Malformed("verifying key"))
}

fn agree(secret: &StaticSecret, peer: &[u8; 32]) -> Result<Vec<u8>, HandshakeError> {
    let shared = secret.diffie_hellman(&PublicKey::from(*peer));
    if !shared.was_contributory() {
        return Err(HandshakeError::NonContributory);
    }
    Ok(shared.as_bytes().to_vec())
}

fn finished_plaintext(transcript: &Transcript, presented: Option<&Measurement>) -> Vec<u8> {
    let mut out = vec![presented.is_some() as u8];
    out.extend_from_slice(&transcript.hash());
    if let Some(m) = presented {
        out.extend_from_slice(&m.0);
    }
    out
}

/// An established session as seen by one endpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub key_id: KeyId,
    pub peer: SenderId,
    /// Measurement the responder reported in its reply.
    pub peer_measurement: Measurement,
    /// Measurement the initiator presented in `Finished`, if any.
    pub presented: Option<Measurement>,
}

/// Initiator side; holds the ephemeral secret until the reply arrives.
pub struct Initiator {
    identity: Identity,
    eph: StaticSecret,
    hello: Vec<u8>,
    expect: Option<Measurement>,
    present: Option<Measurement>,
}

impl Initiator {
    pub fn new<R: RngCore + CryptoRng>(identity: Identity, rng: &mut R) -> Self {
        let eph = StaticSecret::random_from_rng(&mut *rng);
        let mut nonce = [0u8; 32];
        rng.fill_bytes(&mut nonce);
        let hello = hello_bytes(identity.verifying_key().as_bytes(), PublicKey::from(&eph).as_bytes(), &nonce);
        Self { identity, eph, hello, expect: None, present: None }
    }

    /// Refuse responders whose reported measurement differs from `m`.
    pub fn expecting(mut self, m: Measurement) -> Self {
        self.expect = Some(m);
        self
    }

    /// Present `m` inside the `Finished` message.
    pub fn presenting(mut self, m: Measurement) -> Self {
        self.present = Some(m);
        self
    }

    pub fn hello(&self) -> &[u8] {
        &self.hello
    }

    /// Consumes the responder's reply, installs the session key and the
    /// responder's verifying key into `ring`, and returns `Finished`.
    pub fn finish(self, reply: &[u8], ring: &mut KeyRing) -> Result<(Vec<u8>, Session), HandshakeError> {
        if reply.len() != REPLY_LEN {
            return Err(HandshakeError::Malformed("reply length"));
        }
        let body = parse_hello(&reply[..HELLO_LEN])?;
        let measurement = Measurement(reply[HELLO_LEN..REPLY_BODY_LEN].try_into().unwrap());
        let sig: [u8; 64] = reply[REPLY_BODY_LEN..].try_into().unwrap();
        let vk = verifying_key(&body.vk)?;
        let mut signed = self.hello.clone();
        signed.extend_from_slice(&reply[..REPLY_BODY_LEN]);
        if !verify_signature(&vk, &signed, &sig) {
            return Err(HandshakeError::BadSignature);
        }
        if self.expect.is_some_and(|m| m != measurement) {
            return Err(HandshakeError::MeasurementMismatch);
        }
        let mut t = Transcript::new();
        t.push(&self.hello);
        t.push(reply);
        t.shared_secret = agree(&self.eph, &body.eph)?;
        let (key_id, key) = derive_session_key(&t)?;

        let mut local = KeyRing::new(self.identity.clone());
        local.add_key(key_id, key);
        let finished = local.seal(key_id, Context::Scf, &finished_plaintext(&t, self.present.as_ref()))?;

        ring.add_key(key_id, key);
        let peer = ring.add_sender(vk);
        let session = Session { key_id, peer, peer_measurement: measurement, presented: self.present };
        Ok((finished.to_bytes(), session))
    }
}

/// Responder side between `Reply` and `Finished`.
pub struct Responder {
    transcript: Transcript,
    peer_vk: ed25519_dalek::VerifyingKey,
    identity: Identity,
    measurement: Measurement,
}

impl Responder {
    pub fn accept<R: RngCore + CryptoRng>(
        identity: Identity,
        measurement: Measurement,
        hello: &[u8],
        rng: &mut R,
    ) -> Result<(Self, Vec<u8>), HandshakeError> {
        let h = parse_hello(hello)?;
        let peer_vk = verifying_key(&h.vk)?;
        let eph = StaticSecret::random_from_rng(&mut *rng);
        let mut nonce = [0u8; 32];
        rng.fill_bytes(&mut nonce);
        let mut reply = hello_bytes(identity.verifying_key().as_bytes(), PublicKey::from(&eph).as_bytes(), &nonce);
        reply.extend_from_slice(&measurement.0);
        let mut signed = hello.to_vec();
        signed.extend_from_slice(&reply);
        reply.extend_from_slice(&identity.sign(&signed));

        let mut transcript = Transcript::new();
        transcript.push(hello);
        transcript.push(&reply);
        transcript.shared_secret = agree(&eph, &h.eph)?;
        Ok((Self { transcript, peer_vk, identity, measurement }, reply))
    }

    pub fn peer(&self) -> SenderId {
        crate::envelope::sender_id_of(&self.peer_vk)
    }

    /// Verifies `Finished`; on success installs the session key and the
    /// initiator's verifying key into `ring`.
    pub fn finish(self, finished: &[u8], ring: &mut KeyRing) -> Result<Session, HandshakeError> {
        let (key_id, key) = derive_session_key(&self.transcript)?;
        let env = SealedEnvelope::from_bytes(finished)?;
        let peer = crate::envelope::sender_id_of(&self.peer_vk);
        if env.sender_id != peer {
            return Err(HandshakeError::WrongPeer);
        }
        let mut local = KeyRing::new(self.identity.clone());
        local.add_key(key_id, key);
        local.add_sender(self.peer_vk);
        let body = local.open(&env, Context::Scf)?;
        let presented = match (body.first(), body.len()) {
            (Some(0), 33) => None,
            (Some(1), 65) => Some(Measurement(body[33..].try_into().unwrap())),
            _ => return Err(HandshakeError::Malformed("finished body")),
        };
        if body[1..33] != self.transcript.hash() {
            return Err(HandshakeError::TranscriptMismatch);
        }
        ring.add_key(key_id, key);
        ring.add_sender(self.peer_vk);
        Ok(Session { key_id, peer, peer_measurement: self.measurement, presented })
    }
}

/// Releases startup configurations to initiators presenting a registered
/// measurement.
pub struct Provisioner {
    ring: KeyRing,
    table: ScfTable,
}

/// Measurement value a provisioner reports about itself.
pub const PROVISIONER_MEASUREMENT: Measurement = Measurement([0; 32]);

impl Provisioner {
    pub fn new(identity: Identity, table: ScfTable) -> Self {
        Self { ring: KeyRing::new(identity), table }
    }

    pub fn table(&self) -> &ScfTable {
        &self.table
    }

    pub fn accept<R: RngCore + CryptoRng>(&self, hello: &[u8], rng: &mut R) -> Result<(Responder, Vec<u8>), HandshakeError> {
        Responder::accept(self.ring.identity().clone(), PROVISIONER_MEASUREMENT, hello, rng)
    }

    /// Returns the configuration sealed under the session key, or
    /// `UnknownMeasurement` with nothing sealed at all.
    pub fn release(&mut self, responder: Responder, finished: &[u8]) -> Result<Vec<u8>, HandshakeError> {
        let session = responder.finish(finished, &mut self.ring)?;
        let result = match session.presented.as_ref().and_then(|m| self.table.get(m)) {
            Some(scf) => {
                let body = encode_scf(scf)?;
                self.ring.seal(session.key_id, Context::Scf, &body).map(|e| e.to_bytes()).map_err(Into::into)
            }
            None => Err(HandshakeError::UnknownMeasurement),
        };
        self.ring.remove_key(session.key_id);
        self.ring.remove_sender(session.peer);
        result
    }
}

/// Opens a released configuration on the initiator side.
pub fn open_scf(ring: &KeyRing, released: &[u8]) -> Result<StartupConfig, HandshakeError> {
    let body = ring.open_bytes(released, Context::Scf)?;
    Ok(decode_scf(&body)?)
}
