//! Protected file trees.
//!
//! On disk a bundle holds `header.bin`, then either `manifest.sealed`
//! (encrypted mode) or `manifest.signed` (sign-only mode), and
//! `data/<path>.enc` for every file.
//!
//! Every file gets a key derived from the bundle master key and a digest of
//! its path. Each chunk is stored (encrypted or not, depending on mode) and
//! MACed with HMAC-SHA256 over `path_digest ‖ index ‖ stored chunk`. In
//! encrypted mode the chunk AEAD also binds the path digest and chunk index
//! as associated data. The header signs the manifest digest and mode.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Component, Path, PathBuf};
use std::sync::Mutex;

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce, Tag};
use ed25519_dalek::VerifyingKey;
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::Reader;
use crate::envelope::{verify_signature, Identity};

pub const BUNDLE_VERSION: u8 = 1;
pub const DEFAULT_CHUNK_SIZE: u32 = 64 * 1024;
pub const HEADER_FILE: &str = "header.bin";
pub const SEALED_MANIFEST: &str = "manifest.sealed";
pub const SIGNED_MANIFEST: &str = "manifest.signed";
pub const DATA_DIR: &str = "data";
const HEADER_LEN: usize = 1 + 1 + 32 + 32 + 64;
const TAG_LEN: usize = 16;

type HmacSha256 = Hmac<Sha256>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Encrypted,
    SignedOnly,
}

impl Mode {
    fn code(self) -> u8 {
        match self {
            Mode::Encrypted => 0,
            Mode::SignedOnly => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Mode::Encrypted),
            1 => Some(Mode::SignedOnly),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("header signature invalid")]
    BadHeaderSig,
    #[error("manifest rejected: {0}")]
    BadManifest(&'static str),
    #[error("chunk {0} failed verification")]
    ChunkMacMismatch(u64),
    #[error("no such path in bundle: {0}")]
    UnknownPath(String),
    #[error("symbolic link not allowed: {0}")]
    SymlinkRejected(PathBuf),
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("encrypted bundles cannot be customized")]
    NotCustomizable,
    #[error("path already present in bundle: {0}")]
    PathCollision(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FileEntry {
    pub path: String,
    pub file_key: [u8; 32],
    pub file_len: u64,
    pub chunk_macs: Vec<[u8; 32]>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtectionManifest {
    pub mode: Mode,
    pub chunk_size: u32,
    /// Sorted by path.
    pub files: Vec<FileEntry>,
}

pub fn chunk_count(len: u64, chunk_size: u32) -> u64 {
    len.div_ceil(chunk_size as u64)
}

impl ProtectionManifest {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![BUNDLE_VERSION, self.mode.code()];
        out.extend_from_slice(&self.chunk_size.to_be_bytes());
        out.extend_from_slice(&(self.files.len() as u32).to_be_bytes());
        for f in &self.files {
            out.extend_from_slice(&(f.path.len() as u16).to_be_bytes());
            out.extend_from_slice(f.path.as_bytes());
            out.extend_from_slice(&f.file_key);
            out.extend_from_slice(&f.file_len.to_be_bytes());
            for m in &f.chunk_macs {
                out.extend_from_slice(m);
            }
        }
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self, BundleError> {
        let bad = |_| BundleError::BadManifest("truncated");
        let mut r = Reader::new(b);
        if r.u8().map_err(bad)? != BUNDLE_VERSION {
            return Err(BundleError::BadManifest("unsupported version"));
        }
        let mode = Mode::from_code(r.u8().map_err(bad)?).ok_or(BundleError::BadManifest("unknown mode"))?;
        let chunk_size = r.u32().map_err(bad)?;
        if chunk_size == 0 {
            return Err(BundleError::BadManifest("zero chunk size"));
        }
        let n = r.u32().map_err(bad)?;
        let mut files: Vec<FileEntry> = Vec::new();
        for _ in 0..n {
            let plen = r.u16().map_err(bad)? as usize;
            let path = String::from_utf8(r.take(plen).map_err(bad)?.to_vec())
                .map_err(|_| BundleError::BadManifest("path not UTF-8"))?;
            if files.last().is_some_and(|l| l.path >= path) || normalize(Path::new(&path)).ok().as_ref() != Some(&path) {
                return Err(BundleError::BadManifest("paths not normalized and sorted"));
            }
            let file_key = r.array().map_err(bad)?;
            let file_len = r.u64().map_err(bad)?;
            let chunks = chunk_count(file_len, chunk_size);
            if chunks > r.remaining() as u64 / 32 {
                return Err(BundleError::BadManifest("truncated"));
            }
            let chunk_macs = (0..chunks).map(|_| r.array().map_err(bad)).collect::<Result<_, _>>()?;
            files.push(FileEntry { path, file_key, file_len, chunk_macs });
        }
        if r.remaining() != 0 {
            return Err(BundleError::BadManifest("trailing bytes"));
        }
        Ok(Self { mode, chunk_size, files })
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.encode()).into()
    }

    pub fn get(&self, path: &str) -> Option<&FileEntry> {
        self.files.binary_search_by(|f| f.path.as_str().cmp(path)).ok().map(|i| &self.files[i])
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BundleHeader {
    pub mode: Mode,
    pub creator: [u8; 32],
    pub manifest_digest: [u8; 32],
    pub signature: [u8; 64],
}

impl BundleHeader {
    fn signed_bytes(digest: &[u8; 32], mode: Mode) -> Vec<u8> {
        let mut m = digest.to_vec();
        m.push(mode.code());
        m
    }

    fn new(mode: Mode, digest: [u8; 32], creator: &Identity) -> Self {
        Self {
            mode,
            creator: creator.verifying_key().to_bytes(),
            manifest_digest: digest,
            signature: creator.sign(&Self::signed_bytes(&digest, mode)),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![BUNDLE_VERSION, self.mode.code()];
        out.extend_from_slice(&self.creator);
        out.extend_from_slice(&self.manifest_digest);
        out.extend_from_slice(&self.signature);
        out
    }

    /// Parses and checks the signature against the embedded creator key.
    pub fn decode_verified(b: &[u8]) -> Result<Self, BundleError> {
        if b.len() != HEADER_LEN || b[0] != BUNDLE_VERSION {
            return Err(BundleError::BadHeaderSig);
        }
        let mode = Mode::from_code(b[1]).ok_or(BundleError::BadHeaderSig)?;
        let h = Self {
            mode,
            creator: b[2..34].try_into().unwrap(),
            manifest_digest: b[34..66].try_into().unwrap(),
            signature: b[66..].try_into().unwrap(),
        };
        let vk = VerifyingKey::from_bytes(&h.creator).map_err(|_| BundleError::BadHeaderSig)?;
        if !verify_signature(&vk, &Self::signed_bytes(&h.manifest_digest, mode), &h.signature) {
            return Err(BundleError::BadHeaderSig);
        }
        Ok(h)
    }
}

/// What a verifier anchors trust in. At least one of `creator` or
/// `manifest_hash` must be set; encrypted bundles also need `manifest_key`.
#[derive(Clone, Debug, Default)]
pub struct Trust {
    pub creator: Option<VerifyingKey>,
    pub manifest_key: Option<[u8; 32]>,
    pub manifest_hash: Option<[u8; 32]>,
}

impl Trust {
    pub fn creator(vk: VerifyingKey) -> Self {
        Self { creator: Some(vk), ..Default::default() }
    }

    /// The credentials a startup configuration carries.
    pub fn manifest(key: [u8; 32], hash: [u8; 32]) -> Self {
        Self { manifest_key: Some(key), manifest_hash: Some(hash), creator: None }
    }
}

/// Credentials produced when a bundle is written.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BundleInfo {
    pub mode: Mode,
    pub manifest_hash: [u8; 32],
    /// Present in encrypted mode.
    pub manifest_key: Option<[u8; 32]>,
    pub files: usize,
}

fn path_digest(path: &str) -> [u8; 32] {
    Sha256::digest(path.as_bytes()).into()
}

fn file_key(master: &[u8; 32], path: &str) -> [u8; 32] {
    let mut info = b"ecbr file key".to_vec();
    info.extend_from_slice(&path_digest(path));
    let mut k = [0u8; 32];
    Hkdf::<Sha256>::new(None, master).expand(&info, &mut k).expect("valid length");
    k
}

fn chunk_nonce(index: u64) -> [u8; 12] {
    let mut n = [0u8; 12];
    n[4..].copy_from_slice(&index.to_be_bytes());
    n
}

fn chunk_ad(pd: &[u8; 32], index: u64) -> Vec<u8> {
    let mut ad = b"ecbr chunk".to_vec();
    ad.extend_from_slice(pd);
    ad.extend_from_slice(&index.to_be_bytes());
    ad
}

fn chunk_mac(key: &[u8; 32], pd: &[u8; 32], index: u64, stored: &[u8]) -> [u8; 32] {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(key).expect("any key length");
    mac.update(pd);
    mac.update(&index.to_be_bytes());
    mac.update(stored);
    mac.finalize().into_bytes().into()
}

fn stored_chunk_len(mode: Mode, chunk_size: u32) -> usize {
    chunk_size as usize + if mode == Mode::Encrypted { TAG_LEN } else { 0 }
}

/// Produces the stored form of a file and its manifest entry.
fn seal_file(mode: Mode, chunk_size: u32, path: &str, key: [u8; 32], data: &[u8]) -> (Vec<u8>, FileEntry) {
    let pd = path_digest(path);
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key));
    let mut stored = Vec::with_capacity(data.len() + TAG_LEN * data.len().div_ceil(chunk_size as usize));
    let mut macs = Vec::new();
    for (i, chunk) in data.chunks(chunk_size as usize).enumerate() {
        let i = i as u64;
        let start = stored.len();
        stored.extend_from_slice(chunk);
        if mode == Mode::Encrypted {
            let tag = cipher
                .encrypt_in_place_detached(Nonce::from_slice(&chunk_nonce(i)), &chunk_ad(&pd, i), &mut stored[start..])
                .expect("chunk within AEAD limits");
            stored.extend_from_slice(&tag);
        }
        macs.push(chunk_mac(&key, &pd, i, &stored[start..]));
    }
    (stored, FileEntry { path: path.to_string(), file_key: key, file_len: data.len() as u64, chunk_macs: macs })
}

/// Relative path with `/` separators and only normal components.
pub fn normalize(p: &Path) -> Result<String, BundleError> {
    let mut parts = Vec::new();
    for c in p.components() {
        match c {
            Component::Normal(s) => {
                parts.push(s.to_str().ok_or_else(|| BundleError::InvalidPath(p.display().to_string()))?)
            }
            Component::CurDir => {}
            _ => return Err(BundleError::InvalidPath(p.display().to_string())),
        }
    }
    if parts.is_empty() {
        return Err(BundleError::InvalidPath(p.display().to_string()));
    }
    Ok(parts.join("/"))
}

/// Lists regular files under `root` as (normalized relative path, absolute
/// path), sorted. Symlinks anywhere in the tree are rejected.
pub fn scan_tree(root: &Path) -> Result<Vec<(String, PathBuf)>, BundleError> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).follow_links(false).sort_by_file_name() {
        let entry = entry.map_err(|e| BundleError::Io(e.into()))?;
        let ft = entry.file_type();
        if ft.is_symlink() {
            return Err(BundleError::SymlinkRejected(entry.path().to_path_buf()));
        }
        if ft.is_file() {
            let rel = entry.path().strip_prefix(root).expect("walk stays under root");
            out.push((normalize(rel)?, entry.path().to_path_buf()));
        }
    }
    out.sort();
    Ok(out)
}

fn data_path(bundle: &Path, rel: &str) -> PathBuf {
    bundle.join(DATA_DIR).join(format!("{rel}.enc"))
}

fn write_file(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)
}

/// Writes header and manifest for `manifest`, returning the credentials.
fn write_metadata<R: RngCore + CryptoRng>(
    out: &Path,
    manifest: &ProtectionManifest,
    creator: &Identity,
    rng: &mut R,
) -> Result<BundleInfo, BundleError> {
    let plain = manifest.encode();
    let digest: [u8; 32] = Sha256::digest(&plain).into();
    let header = BundleHeader::new(manifest.mode, digest, creator);
    let header_bytes = header.encode();
    let manifest_key = match manifest.mode {
        Mode::Encrypted => {
            let mut key = [0u8; 32];
            rng.fill_bytes(&mut key);
            let mut nonce = [0u8; 12];
            rng.fill_bytes(&mut nonce);
            let mut body = plain;
            let tag = ChaCha20Poly1305::new(Key::from_slice(&key))
                .encrypt_in_place_detached(Nonce::from_slice(&nonce), &header_bytes, &mut body)
                .expect("manifest within AEAD limits");
            let mut sealed = vec![BUNDLE_VERSION];
            sealed.extend_from_slice(&nonce);
            sealed.extend_from_slice(&body);
            sealed.extend_from_slice(&tag);
            fs::write(out.join(SEALED_MANIFEST), sealed)?;
            let _ = fs::remove_file(out.join(SIGNED_MANIFEST));
            Some(key)
        }
        Mode::SignedOnly => {
            fs::write(out.join(SIGNED_MANIFEST), plain)?;
            let _ = fs::remove_file(out.join(SEALED_MANIFEST));
            None
        }
    };
    fs::write(out.join(HEADER_FILE), header_bytes)?;
    Ok(BundleInfo { mode: manifest.mode, manifest_hash: digest, manifest_key, files: manifest.files.len() })
}

/// Protects every regular file under `tree` into the bundle directory `out`.
pub fn protect<R: RngCore + CryptoRng>(
    tree: &Path,
    out: &Path,
    mode: Mode,
    creator: &Identity,
    chunk_size: u32,
    rng: &mut R,
) -> Result<BundleInfo, BundleError> {
    assert!(chunk_size > 0, "chunk size must be positive");
    let files = scan_tree(tree)?;
    let mut master = [0u8; 32];
    rng.fill_bytes(&mut master);
    fs::create_dir_all(out)?;
    let entries = crate::par::map(&files, |(rel, abs)| -> Result<FileEntry, BundleError> {
        let data = fs::read(abs)?;
        let (stored, entry) = seal_file(mode, chunk_size, rel, file_key(&master, rel), &data);
        write_file(&data_path(out, rel), &stored)?;
        Ok(entry)
    });
    let manifest = ProtectionManifest { mode, chunk_size, files: entries.into_iter().collect::<Result<_, _>>()? };
    write_metadata(out, &manifest, creator, rng)
}

/// A bundle directory opened for verification. Optionally records every
/// file read, so tests can check which chunks were touched.
pub struct Bundle {
    root: PathBuf,
    trace: Option<Mutex<Vec<String>>>,
}

impl Bundle {
    pub fn open(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), trace: None }
    }

    pub fn traced(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), trace: Some(Mutex::new(Vec::new())) }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Bundle-relative paths read so far (traced bundles only).
    pub fn read_trace(&self) -> Vec<String> {
        self.trace.as_ref().map(|t| t.lock().unwrap().clone()).unwrap_or_default()
    }

    pub fn clear_trace(&self) {
        if let Some(t) = &self.trace {
            t.lock().unwrap().clear();
        }
    }

    fn read(&self, rel: &str) -> io::Result<Vec<u8>> {
        if let Some(t) = &self.trace {
            t.lock().unwrap().push(rel.to_string());
        }
        fs::read(self.root.join(rel))
    }

    /// Checks the header and loads the manifest it vouches for.
    pub fn load_manifest(&self, trust: &Trust) -> Result<(BundleHeader, ProtectionManifest), BundleError> {
        if trust.creator.is_none() && trust.manifest_hash.is_none() {
            return Err(BundleError::BadHeaderSig);
        }
        let header_bytes = self.read(HEADER_FILE).map_err(|_| BundleError::BadHeaderSig)?;
        let header = BundleHeader::decode_verified(&header_bytes)?;
        if trust.creator.is_some_and(|vk| vk.to_bytes() != header.creator) {
            return Err(BundleError::BadHeaderSig);
        }
        let plain = match header.mode {
            Mode::SignedOnly => self.read(SIGNED_MANIFEST).map_err(|_| BundleError::BadManifest("missing"))?,
            Mode::Encrypted => {
                let key = trust.manifest_key.ok_or(BundleError::BadManifest("manifest key required"))?;
                let sealed = self.read(SEALED_MANIFEST).map_err(|_| BundleError::BadManifest("missing"))?;
                if sealed.len() < 1 + 12 + TAG_LEN || sealed[0] != BUNDLE_VERSION {
                    return Err(BundleError::BadManifest("malformed sealed manifest"));
                }
                let nonce = &sealed[1..13];
                let (body, tag) = sealed[13..].split_at(sealed.len() - 13 - TAG_LEN);
                let mut body = body.to_vec();
                ChaCha20Poly1305::new(Key::from_slice(&key))
                    .decrypt_in_place_detached(Nonce::from_slice(nonce), &header_bytes, &mut body, Tag::from_slice(tag))
                    .map_err(|_| BundleError::BadManifest("authentication failed"))?;
                body
            }
        };
        let digest: [u8; 32] = Sha256::digest(&plain).into();
        if digest != header.manifest_digest || trust.manifest_hash.is_some_and(|h| h != digest) {
            return Err(BundleError::BadManifest("digest mismatch"));
        }
        let manifest = ProtectionManifest::decode(&plain)?;
        if manifest.mode != header.mode {
            return Err(BundleError::BadManifest("mode mismatch"));
        }
        Ok((header, manifest))
    }

    /// Verifies and returns one file. No plaintext is returned unless every
    /// chunk verifies.
    pub fn verify_and_load(&self, trust: &Trust, path: &str) -> Result<Vec<u8>, BundleError> {
        let (_, manifest) = self.load_manifest(trust)?;
        self.load_file(&manifest, path)
    }

    pub fn load_file(&self, manifest: &ProtectionManifest, path: &str) -> Result<Vec<u8>, BundleError> {
        let entry = manifest.get(path).ok_or_else(|| BundleError::UnknownPath(path.to_string()))?;
        let stored = self.read(&format!("{DATA_DIR}/{path}.enc")).map_err(|_| BundleError::ChunkMacMismatch(0))?;
        let pd = path_digest(path);
        let step = stored_chunk_len(manifest.mode, manifest.chunk_size);
        let n = entry.chunk_macs.len();
        let mut out = Vec::with_capacity(entry.file_len as usize);
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&entry.file_key));
        let mut pos = 0usize;
        for (i, mac) in entry.chunk_macs.iter().enumerate() {
            let idx = i as u64;
            let plain_len = if i + 1 == n {
                (entry.file_len - idx * manifest.chunk_size as u64) as usize
            } else {
                manifest.chunk_size as usize
            };
            let len = step - manifest.chunk_size as usize + plain_len;
            let chunk = stored.get(pos..pos + len).ok_or(BundleError::ChunkMacMismatch(idx))?;
            let mut check = <HmacSha256 as Mac>::new_from_slice(&entry.file_key).expect("any key length");
            check.update(&pd);
            check.update(&idx.to_be_bytes());
            check.update(chunk);
            check.verify_slice(mac).map_err(|_| BundleError::ChunkMacMismatch(idx))?;
            match manifest.mode {
                Mode::SignedOnly => out.extend_from_slice(chunk),
                Mode::Encrypted => {
                    let (ct, tag) = chunk.split_at(plain_len);
                    let mut buf = ct.to_vec();
                    cipher
                        .decrypt_in_place_detached(
                            Nonce::from_slice(&chunk_nonce(idx)),
                            &chunk_ad(&pd, idx),
                            &mut buf,
                            Tag::from_slice(tag),
                        )
                        .map_err(|_| BundleError::ChunkMacMismatch(idx))?;
                    out.extend_from_slice(&buf);
                }
            }
            pos += len;
        }
        if pos != stored.len() {
            return Err(BundleError::ChunkMacMismatch(n as u64));
        }
        Ok(out)
    }

    /// Verifies every file, returning path → contents.
    pub fn verify_all(&self, trust: &Trust) -> Result<BTreeMap<String, Vec<u8>>, BundleError> {
        let (_, manifest) = self.load_manifest(trust)?;
        manifest.files.iter().map(|f| Ok((f.path.clone(), self.load_file(&manifest, &f.path)?))).collect()
    }
}

/// Adds the files under `layer` to a sign-only bundle and re-signs it with
/// `customizer`. Existing entries are kept byte-for-byte.
pub fn customize<R: RngCore + CryptoRng>(
    bundle: &Path,
    trust: &Trust,
    layer: &Path,
    customizer: &Identity,
    rng: &mut R,
) -> Result<BundleInfo, BundleError> {
    let b = Bundle::open(bundle);
    let header = BundleHeader::decode_verified(&fs::read(bundle.join(HEADER_FILE)).map_err(|_| BundleError::BadHeaderSig)?)?;
    if header.mode != Mode::SignedOnly {
        return Err(BundleError::NotCustomizable);
    }
    let (_, mut manifest) = b.load_manifest(trust)?;
    let added = scan_tree(layer)?;
    for (rel, _) in &added {
        if manifest.get(rel).is_some() {
            return Err(BundleError::PathCollision(rel.clone()));
        }
    }
    let mut master = [0u8; 32];
    rng.fill_bytes(&mut master);
    for (rel, abs) in &added {
        let data = fs::read(abs)?;
        let (stored, entry) = seal_file(Mode::SignedOnly, manifest.chunk_size, rel, file_key(&master, rel), &data);
        write_file(&data_path(bundle, rel), &stored)?;
        manifest.files.push(entry);
    }
    manifest.files.sort_by(|a, b| a.path.cmp(&b.path));
    write_metadata(bundle, &manifest, customizer, rng)
}

/// Converts a verified sign-only bundle to encrypted mode in place, under a
/// fresh master key.
pub fn finalize<R: RngCore + CryptoRng>(
    bundle: &Path,
    trust: &Trust,
    creator: &Identity,
    rng: &mut R,
) -> Result<BundleInfo, BundleError> {
    let b = Bundle::open(bundle);
    let (header, manifest) = b.load_manifest(trust)?;
    if header.mode != Mode::SignedOnly {
        return Err(BundleError::NotCustomizable);
    }
    let mut master = [0u8; 32];
    rng.fill_bytes(&mut master);
    let mut files = Vec::with_capacity(manifest.files.len());
    for f in &manifest.files {
        let data = b.load_file(&manifest, &f.path)?;
        let (stored, entry) = seal_file(Mode::Encrypted, manifest.chunk_size, &f.path, file_key(&master, &f.path), &data);
        write_file(&data_path(bundle, &f.path), &stored)?;
        files.push(entry);
    }
    let manifest = ProtectionManifest { mode: Mode::Encrypted, chunk_size: manifest.chunk_size, files };
    write_metadata(bundle, &manifest, creator, rng)
}
