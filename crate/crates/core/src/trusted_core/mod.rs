//! Emulated trusted execution environment.
//!
//! The trusted core owns the identity keypair derived from the device root
//! key, every client key, the LRU key cache and the secure store. It runs on
//! its own thread; [`TrustedCore`] is a handle that submits one command at a
//! time across a channel, standing in for the secure-monitor world switch.
//! Nothing that crosses this boundary is key material or plaintext: callers
//! get envelopes, the public identity, counters and timings.

mod cache;
mod state;
mod storage;

use std::path::Path;
use std::sync::mpsc;
use std::thread;

use thiserror::Error;
use tokio::sync::oneshot;
use zeroize::Zeroizing;

pub use crate::crypto::WRAPPED_KEY_LEN;
pub use cache::CacheOutcome;

use crate::ids::ClientId;
use crate::wire::envelope::EncryptedEnvelope;
use state::TrustedCoreState;

/// Environment variable holding the hex-encoded device root key.
pub const ROOT_KEY_ENV: &str = "MQTTZ_ROOT_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TrustedCoreError {
    #[error("device root key must be 32 bytes, got {0}")]
    BadRootLength(usize),
    #[error("device root key is not valid hex")]
    BadRootEncoding,
    #[error("cache capacity must be at least 1")]
    BadCacheCapacity,
    #[error("secure storage unavailable: {0}")]
    StorageUnavailable(String),
    #[error("wrapped key blob must be {WRAPPED_KEY_LEN} bytes, got {0}")]
    BadBlobLength(usize),
    #[error("wrapped key failed authentication")]
    AuthFailure,
    #[error("client id {0} is too long to own a key")]
    IdTooLong(ClientId),
    #[error("secure storage failure: {0}")]
    StorageFailure(String),
    #[error("stored key for {0} failed authentication")]
    StorageTampered(ClientId),
    #[error("no key provisioned for {0}")]
    KeyNotFound(ClientId),
    #[error("envelope origin does not match the claimed origin")]
    OriginMismatch,
    #[error("envelope failed authentication")]
    DecryptAuthFailure,
    #[error("trusted core is not running")]
    Unavailable,
}

/// Per-phase cost of one re-encryption, measured inside the core.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseTimings {
    pub retrieve_dec_key_ns: u64,
    pub decrypt_ns: u64,
    pub retrieve_enc_key_ns: u64,
    pub encrypt_ns: u64,
    pub dec_key_cached: bool,
    pub enc_key_cached: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CoreCounters {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub stored_keys: u64,
    /// Keys currently held in memory; never exceeds the cache capacity.
    pub cached_keys: u64,
}

/// Operator-provisioned 32-byte device secret.
pub struct DeviceRootKey(Zeroizing<[u8; 32]>);

impl DeviceRootKey {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrustedCoreError> {
        let arr: [u8; 32] = bytes.try_into().map_err(|_| TrustedCoreError::BadRootLength(bytes.len()))?;
        Ok(DeviceRootKey(Zeroizing::new(arr)))
    }

    pub fn from_hex(s: &str) -> Result<Self, TrustedCoreError> {
        let raw = Zeroizing::new(hex::decode(s.trim()).map_err(|_| TrustedCoreError::BadRootEncoding)?);
        Self::from_bytes(&raw)
    }

    pub fn from_file(path: &Path) -> Result<Self, TrustedCoreError> {
        let text = Zeroizing::new(
            std::fs::read_to_string(path).map_err(|e| TrustedCoreError::StorageUnavailable(e.to_string()))?,
        );
        Self::from_hex(&text)
    }

    /// Reads [`ROOT_KEY_ENV`]; `None` if unset.
    pub fn from_env() -> Option<Result<Self, TrustedCoreError>> {
        std::env::var(ROOT_KEY_ENV).ok().map(|v| Self::from_hex(&Zeroizing::new(v)))
    }

    pub fn generate() -> Self {
        use rand::RngCore;
        let mut k = Zeroizing::new([0u8; 32]);
        rand::rngs::OsRng.fill_bytes(k.as_mut());
        DeviceRootKey(k)
    }

    pub fn to_hex(&self) -> Zeroizing<String> {
        Zeroizing::new(hex::encode(*self.0))
    }

    /// The X25519 public identity a trusted core started from this root
    /// will present.
    pub fn public_identity(&self) -> [u8; 32] {
        let secret = crate::crypto::x25519_secret(crate::crypto::hkdf32(&self.0[..], crate::crypto::CTX_IDENTITY));
        *x25519_dalek::PublicKey::from(&secret).as_bytes()
    }

    pub(crate) fn bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

type Reply<T> = oneshot::Sender<Result<T, TrustedCoreError>>;

enum Command {
    Provision {
        client: ClientId,
        blob: Vec<u8>,
        reply: Reply<()>,
    },
    Reencrypt {
        origin: ClientId,
        dest: ClientId,
        envelope: EncryptedEnvelope,
        reply: Reply<(EncryptedEnvelope, PhaseTimings)>,
    },
    Probe {
        client: ClientId,
        reply: Reply<CacheOutcome>,
    },
    Counters {
        reply: oneshot::Sender<CoreCounters>,
    },
}

/// Cloneable handle to the trusted core. Every request executes alone inside
/// the core; concurrent callers queue.
#[derive(Clone)]
pub struct TrustedCore {
    tx: mpsc::Sender<Command>,
    public: [u8; 32],
}

impl TrustedCore {
    /// Derives the identity keypair, opens secure storage and starts the
    /// core's thread.
    pub fn init(root: &DeviceRootKey, storage_dir: &Path, cache_capacity: usize) -> Result<Self, TrustedCoreError> {
        let state = TrustedCoreState::init(root, storage_dir, cache_capacity)?;
        let public = state.public_identity();
        let (tx, rx) = mpsc::channel();
        thread::Builder::new()
            .name("trusted-core".into())
            .spawn(move || serve(state, rx))
            .map_err(|e| TrustedCoreError::StorageUnavailable(e.to_string()))?;
        Ok(TrustedCore { tx, public })
    }

    /// X25519 public key clients wrap their symmetric key to.
    pub fn public_identity(&self) -> [u8; 32] {
        self.public
    }

    fn submit<T>(&self, make: impl FnOnce(Reply<T>) -> Command) -> oneshot::Receiver<Result<T, TrustedCoreError>> {
        let (reply, rx) = oneshot::channel();
        // A closed channel surfaces as a dropped reply below.
        let _ = self.tx.send(make(reply));
        rx
    }

    fn flatten<T>(r: Result<Result<T, TrustedCoreError>, oneshot::error::RecvError>) -> Result<T, TrustedCoreError> {
        r.unwrap_or(Err(TrustedCoreError::Unavailable))
    }

    /// Unwraps a key blob addressed to this core and stores it for `client`.
    pub async fn provision_key(&self, client: &ClientId, blob: &[u8]) -> Result<(), TrustedCoreError> {
        let rx = self.submit(|reply| Command::Provision { client: client.clone(), blob: blob.to_vec(), reply });
        Self::flatten(rx.await)
    }

    /// Decrypts `envelope` under `origin`'s key and re-encrypts it for
    /// `dest` with a fresh nonce. The result's origin field names `dest`.
    pub async fn reencrypt(
        &self,
        origin: &ClientId,
        dest: &ClientId,
        envelope: EncryptedEnvelope,
    ) -> Result<(EncryptedEnvelope, PhaseTimings), TrustedCoreError> {
        let rx =
            self.submit(|reply| Command::Reencrypt { origin: origin.clone(), dest: dest.clone(), envelope, reply });
        Self::flatten(rx.await)
    }

    /// Cache inspection hook: performs one key lookup and reports whether it
    /// hit and what was evicted. Never reveals the key.
    pub async fn probe_key(&self, client: &ClientId) -> Result<CacheOutcome, TrustedCoreError> {
        let rx = self.submit(|reply| Command::Probe { client: client.clone(), reply });
        Self::flatten(rx.await)
    }

    pub async fn export_counters(&self) -> CoreCounters {
        let (reply, rx) = oneshot::channel();
        let _ = self.tx.send(Command::Counters { reply });
        rx.await.unwrap_or_default()
    }

    pub fn provision_key_blocking(&self, client: &ClientId, blob: &[u8]) -> Result<(), TrustedCoreError> {
        let rx = self.submit(|reply| Command::Provision { client: client.clone(), blob: blob.to_vec(), reply });
        Self::flatten(rx.blocking_recv())
    }

    pub fn reencrypt_blocking(
        &self,
        origin: &ClientId,
        dest: &ClientId,
        envelope: EncryptedEnvelope,
    ) -> Result<(EncryptedEnvelope, PhaseTimings), TrustedCoreError> {
        let rx =
            self.submit(|reply| Command::Reencrypt { origin: origin.clone(), dest: dest.clone(), envelope, reply });
        Self::flatten(rx.blocking_recv())
    }

    pub fn probe_key_blocking(&self, client: &ClientId) -> Result<CacheOutcome, TrustedCoreError> {
        let rx = self.submit(|reply| Command::Probe { client: client.clone(), reply });
        Self::flatten(rx.blocking_recv())
    }

    pub fn export_counters_blocking(&self) -> CoreCounters {
        let (reply, rx) = oneshot::channel();
        let _ = self.tx.send(Command::Counters { reply });
        rx.blocking_recv().unwrap_or_default()
    }
}

fn serve(mut state: TrustedCoreState, rx: mpsc::Receiver<Command>) {
    while let Ok(cmd) = rx.recv() {
        match cmd {
            Command::Provision { client, blob, reply } => {
                let _ = reply.send(state.provision_key(&client, &blob));
            }
            Command::Reencrypt { origin, dest, envelope, reply } => {
                let _ = reply.send(state.reencrypt(&origin, &dest, &envelope));
            }
            Command::Probe { client, reply } => {
                let _ = reply.send(state.probe_key(&client));
            }
            Command::Counters { reply } => {
                let _ = reply.send(state.counters());
            }
        }
    }
}
