use std::fs;
use std::io;
use std::path::Path;

use rand::rngs::OsRng;
use rand::RngCore;
use zeroize::Zeroizing;

use super::ClientError;
use crate::crypto::{self, KEY_LEN, WRAPPED_KEY_LEN};
use crate::ids::ClientId;
use crate::wire::envelope::{decode_envelope, EncryptedEnvelope};

/// A client's 256-bit payload key.
#[derive(Clone)]
pub struct SymmetricKey(Zeroizing<[u8; KEY_LEN]>);

impl std::fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

impl SymmetricKey {
    pub fn generate() -> Self {
        let mut k = Zeroizing::new([0u8; KEY_LEN]);
        OsRng.fill_bytes(k.as_mut());
        SymmetricKey(k)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ClientError> {
        let arr: [u8; KEY_LEN] = bytes.try_into().map_err(|_| ClientError::BadKeyLength(bytes.len()))?;
        Ok(SymmetricKey(Zeroizing::new(arr)))
    }

    pub fn from_hex(s: &str) -> Result<Self, ClientError> {
        let raw = Zeroizing::new(hex::decode(s.trim()).map_err(|_| ClientError::BadKeyEncoding)?);
        Self::from_bytes(&raw)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    /// Reads a 64-hex-character key file, creating one with a fresh key if
    /// it does not exist.
    pub fn load_or_generate(path: &Path) -> Result<Self, ClientError> {
        match fs::read_to_string(path) {
            Ok(text) => Self::from_hex(&Zeroizing::new(text)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                let key = Self::generate();
                key.save(path)?;
                Ok(key)
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ClientError> {
        let mut opts = fs::OpenOptions::new();
        opts.write(true).create(true).truncate(true);
        #[cfg(unix)]
        std::os::unix::fs::OpenOptionsExt::mode(&mut opts, 0o600);
        let mut f = opts.open(path)?;
        io::Write::write_all(&mut f, Zeroizing::new(hex::encode(*self.0)).as_bytes())?;
        Ok(())
    }
}

/// Encrypts `sym_key` to the broker's trusted-core public key. Each call
/// uses a fresh ephemeral keypair and nonce.
pub fn wrap_key(
    sym_key: &[u8],
    tee_public: &[u8; 32],
    client_id: &ClientId,
) -> Result<[u8; WRAPPED_KEY_LEN], ClientError> {
    let key = SymmetricKey::from_bytes(sym_key)?;
    let padded = client_id.padded().ok_or(ClientError::IdTooLong)?;
    Ok(crypto::wrap(key.as_bytes(), tee_public, &padded))
}

/// Builds the publish payload: an envelope naming `origin`, sealed under
/// `key` with a fresh random nonce.
pub fn seal_payload(key: &SymmetricKey, origin: &ClientId, plaintext: &[u8]) -> Result<EncryptedEnvelope, ClientError> {
    let padded = origin.padded().ok_or(ClientError::IdTooLong)?;
    Ok(crypto::seal_envelope(key.as_bytes(), &padded, crypto::random_nonce(), plaintext))
}

/// Decodes and decrypts a received payload.
pub fn open_payload(key: &SymmetricKey, payload: &[u8]) -> Result<Vec<u8>, ClientError> {
    let envelope = decode_envelope(payload)?;
    let plain = crypto::open_envelope(key.as_bytes(), &envelope).map_err(|_| ClientError::AuthFailure)?;
    Ok(plain.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::envelope::ENVELOPE_OVERHEAD;

    #[test]
    fn key_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.hex");
        let a = SymmetricKey::load_or_generate(&path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().len(), 64);
        let b = SymmetricKey::load_or_generate(&path).unwrap();
        assert_eq!(a.as_bytes(), b.as_bytes());
        assert!(matches!(SymmetricKey::from_hex("abcd"), Err(ClientError::BadKeyLength(2))));
    }

    #[test]
    fn wrap_freshness_and_length_check() {
        let id = ClientId::new("p01").unwrap();
        let a = wrap_key(&[1; 32], &[9; 32], &id).unwrap();
        let b = wrap_key(&[1; 32], &[9; 32], &id).unwrap();
        assert_ne!(a, b);
        assert!(matches!(wrap_key(&[1; 31], &[9; 32], &id), Err(ClientError::BadKeyLength(31))));
    }

    #[test]
    fn payload_round_trip_and_freshness() {
        let key = SymmetricKey::generate();
        let id = ClientId::new("p01").unwrap();
        let empty = seal_payload(&key, &id, b"").unwrap().encode();
        assert_eq!(empty.len(), ENVELOPE_OVERHEAD);
        let sealed = seal_payload(&key, &id, b"ecg").unwrap().encode();
        assert_eq!(open_payload(&key, &sealed).unwrap(), b"ecg");
        let other = SymmetricKey::generate();
        assert!(matches!(open_payload(&other, &sealed), Err(ClientError::AuthFailure)));
        let nonces: std::collections::HashSet<_> =
            (0..100).map(|_| seal_payload(&key, &id, b"x").unwrap().nonce).collect();
        assert_eq!(nonces.len(), 100);
    }
}
