//! Client key directory: `identity` holds the hex Ed25519 seed, the
//! optional `measurement` file pins the enclave the client will talk to.

use std::fs;
use std::io;
use std::path::Path;

use ecbr_core::{Identity, Measurement};
use thiserror::Error;

pub const IDENTITY_FILE: &str = "identity";
pub const MEASUREMENT_FILE: &str = "measurement";

#[derive(Debug, Error)]
pub enum KeyDirError {
    #[error("{0}: {1}")]
    Io(String, io::Error),
    #[error("{0}: expected {1} hex characters")]
    BadHex(String, usize),
}

#[derive(Debug)]
pub struct KeyDir {
    pub identity: Identity,
    pub measurement: Option<Measurement>,
}

impl KeyDir {
    /// Loads the directory, generating and storing a fresh identity when
    /// none exists yet.
    pub fn load_or_create(dir: &Path) -> Result<Self, KeyDirError> {
        let io_err = |p: &Path| {
            let p = p.display().to_string();
            move |e| KeyDirError::Io(p, e)
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let id_path = dir.join(IDENTITY_FILE);
        let identity = match fs::read_to_string(&id_path) {
            Ok(text) => {
                let seed: [u8; 32] = hex::decode(text.trim())
                    .ok()
                    .and_then(|v| v.try_into().ok())
                    .ok_or_else(|| KeyDirError::BadHex(id_path.display().to_string(), 64))?;
                Identity::from_seed(seed)
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                let id = Identity::generate(&mut rand::rngs::OsRng);
                fs::write(&id_path, format!("{}\n", hex::encode(id.seed()))).map_err(io_err(&id_path))?;
                id
            }
            Err(e) => return Err(io_err(&id_path)(e)),
        };
        let m_path = dir.join(MEASUREMENT_FILE);
        let measurement = match fs::read_to_string(&m_path) {
            Ok(text) => Some(
                Measurement::from_hex(text.trim())
                    .ok_or_else(|| KeyDirError::BadHex(m_path.display().to_string(), 64))?,
            ),
            Err(e) if e.kind() == io::ErrorKind::NotFound => None,
            Err(e) => return Err(io_err(&m_path)(e)),
        };
        Ok(Self { identity, measurement })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_persists() {
        let dir = tempfile::tempdir().unwrap();
        let a = KeyDir::load_or_create(dir.path()).unwrap();
        let b = KeyDir::load_or_create(dir.path()).unwrap();
        assert_eq!(a.identity.sender_id(), b.identity.sender_id());
        assert!(a.measurement.is_none());
        let m = Measurement([0xab; 32]);
        fs::write(dir.path().join(MEASUREMENT_FILE), m.to_hex()).unwrap();
        assert_eq!(KeyDir::load_or_create(dir.path()).unwrap().measurement, Some(m));
        fs::write(dir.path().join(IDENTITY_FILE), "zz").unwrap();
        assert!(matches!(KeyDir::load_or_create(dir.path()), Err(KeyDirError::BadHex(..))));
    }
}
