//! Shared helpers for the `bench`, `bundle` and `scf` command-line tools.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use ecbr_core::{CostModel, Identity};
use ed25519_dalek::VerifyingKey;

/// Parses exactly 32 bytes of hex.
pub fn hex32(s: &str) -> anyhow::Result<[u8; 32]> {
    let v = hex::decode(s.trim()).with_context(|| format!("invalid hex {s:?}"))?;
    v.try_into().map_err(|v: Vec<u8>| anyhow!("expected 32 bytes, got {}", v.len()))
}

pub fn verifying_key(s: &str) -> anyhow::Result<VerifyingKey> {
    VerifyingKey::from_bytes(&hex32(s)?).map_err(|e| anyhow!("invalid public key: {e}"))
}

/// Loads a signing identity stored as a hex seed, creating the file with a
/// fresh identity when it does not exist.
pub fn load_or_create_identity(path: &Path) -> anyhow::Result<Identity> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(Identity::from_seed(hex32(&text).with_context(|| format!("reading {}", path.display()))?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            let id = Identity::generate(&mut rand::rngs::OsRng);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, format!("{}\n", hex::encode(id.seed())))
                .with_context(|| format!("writing {}", path.display()))?;
            Ok(id)
        }
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}

pub fn load_model(path: Option<&Path>) -> anyhow::Result<CostModel> {
    match path {
        None => Ok(CostModel::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            CostModel::parse(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

/// Parses a single size such as `200MiB`.
pub fn parse_size(s: &str) -> anyhow::Result<u64> {
    match ecbr_core::workload::parse_sizes(s).map_err(anyhow::Error::msg)?.as_slice() {
        [n] => Ok(*n),
        _ => bail!("expected a single size, got {s:?}"),
    }
}
