//! Authenticated-encrypted key records on disk.
//!
//! One file per client: name = lowercase hex of the 16-byte padded id,
//! content = nonce(12) | AES-256-GCM(key)(32) | tag(16), with the padded id
//! as associated data.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;
use zeroize::Zeroizing;

use crate::crypto::{self, SecretKey, KEY_LEN};
use crate::wire::envelope::{NONCE_LEN, TAG_LEN};

const RECORD_LEN: usize = NONCE_LEN + KEY_LEN + TAG_LEN;

#[derive(Debug, Error)]
pub(crate) enum StorageError {
    #[error("secure storage I/O: {0}")]
    Io(#[from] io::Error),
    #[error("stored record failed authentication")]
    Tampered,
}

pub(crate) struct SecureStore {
    dir: PathBuf,
    key: SecretKey,
}

impl SecureStore {
    /// Creates `dir` if needed and checks that it is writable.
    pub fn open(dir: &Path, key: SecretKey) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        if !fs::metadata(dir)?.is_dir() {
            return Err(io::Error::new(io::ErrorKind::NotADirectory, "storage path is not a directory"));
        }
        let probe = dir.join(".mqttz-probe");
        fs::write(&probe, b"")?;
        fs::remove_file(&probe)?;
        Ok(SecureStore { dir: dir.to_path_buf(), key })
    }

    pub fn record_path(&self, padded_id: &[u8; 16]) -> PathBuf {
        self.dir.join(hex::encode(padded_id))
    }

    pub fn store(&self, padded_id: &[u8; 16], key: &[u8; KEY_LEN]) -> Result<(), StorageError> {
        let nonce = crypto::random_nonce();
        let (ct, tag) = crypto::seal(&self.key, &nonce, padded_id, key);
        let mut record = Zeroizing::new(Vec::with_capacity(RECORD_LEN));
        record.extend_from_slice(&nonce);
        record.extend_from_slice(&ct);
        record.extend_from_slice(&tag);

        let path = self.record_path(padded_id);
        let tmp = path.with_extension("tmp");
        {
            let mut opts = fs::OpenOptions::new();
            opts.write(true).create(true).truncate(true);
            #[cfg(unix)]
            std::os::unix::fs::OpenOptionsExt::mode(&mut opts, 0o600);
            let mut f = opts.open(&tmp)?;
            f.write_all(&record)?;
        }
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    /// `Ok(None)` if no record exists for the id.
    pub fn load(&self, padded_id: &[u8; 16]) -> Result<Option<SecretKey>, StorageError> {
        let record = match fs::read(self.record_path(padded_id)) {
            Ok(r) => Zeroizing::new(r),
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        if record.len() != RECORD_LEN {
            return Err(StorageError::Tampered);
        }
        let nonce: [u8; NONCE_LEN] = record[..NONCE_LEN].try_into().expect("fixed width");
        let tag: [u8; TAG_LEN] = record[NONCE_LEN + KEY_LEN..].try_into().expect("fixed width");
        let plain = crypto::open(&self.key, &nonce, padded_id, &record[NONCE_LEN..NONCE_LEN + KEY_LEN], &tag)
            .map_err(|_| StorageError::Tampered)?;
        let mut key = Zeroizing::new([0u8; KEY_LEN]);
        key.copy_from_slice(&plain);
        Ok(Some(key))
    }

    /// Number of key records currently on disk.
    pub fn count(&self) -> io::Result<usize> {
        let mut n = 0;
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if name.len() == 32 && name.bytes().all(|b| b.is_ascii_hexdigit()) {
                n += 1;
            }
        }
        Ok(n)
    }
}
