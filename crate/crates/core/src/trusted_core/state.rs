use std::path::Path;
use std::time::Instant;

use x25519_dalek::{PublicKey, StaticSecret};

use super::cache::{CacheOutcome, KeyCache};
use super::storage::{SecureStore, StorageError};
use super::{CoreCounters, DeviceRootKey, PhaseTimings, TrustedCoreError};
use crate::crypto::{self, SecretKey, CTX_IDENTITY, CTX_STORAGE, WRAPPED_KEY_LEN};
use crate::ids::ClientId;
use crate::wire::envelope::EncryptedEnvelope;

/// Everything that lives inside the trusted boundary. Only reachable through
/// the command channel in [`super::TrustedCore`].
pub(crate) struct TrustedCoreState {
    identity: StaticSecret,
    public: [u8; 32],
    cache: KeyCache,
    store: SecureStore,
}

fn elapsed_ns(start: Instant) -> u64 {
    start.elapsed().as_nanos() as u64
}

impl TrustedCoreState {
    pub fn init(root: &DeviceRootKey, storage_dir: &Path, cache_capacity: usize) -> Result<Self, TrustedCoreError> {
        if cache_capacity == 0 {
            return Err(TrustedCoreError::BadCacheCapacity);
        }
        let identity = crypto::x25519_secret(crypto::hkdf32(root.bytes(), CTX_IDENTITY));
        let public = *PublicKey::from(&identity).as_bytes();
        let store = SecureStore::open(storage_dir, crypto::hkdf32(root.bytes(), CTX_STORAGE))
            .map_err(|e| TrustedCoreError::StorageUnavailable(e.to_string()))?;
        Ok(TrustedCoreState { identity, public, cache: KeyCache::new(cache_capacity), store })
    }

    pub fn public_identity(&self) -> [u8; 32] {
        self.public
    }

    pub fn provision_key(&mut self, client: &ClientId, blob: &[u8]) -> Result<(), TrustedCoreError> {
        let blob: &[u8; WRAPPED_KEY_LEN] = blob.try_into().map_err(|_| TrustedCoreError::BadBlobLength(blob.len()))?;
        let padded = client.padded().ok_or_else(|| TrustedCoreError::IdTooLong(client.clone()))?;
        let key = crypto::unwrap(blob, &self.identity, &padded).map_err(|_| TrustedCoreError::AuthFailure)?;
        self.store.store(&padded, &key).map_err(|e| TrustedCoreError::StorageFailure(e.to_string()))?;
        self.cache.insert(client.clone(), key);
        Ok(())
    }

    /// Cache first, then secure storage; a storage load is inserted as most
    /// recent and may evict.
    pub(super) fn get_key(&mut self, client: &ClientId) -> Result<(SecretKey, CacheOutcome), TrustedCoreError> {
        if let Some(key) = self.cache.get(client) {
            return Ok((key, CacheOutcome { hit: true, evicted: None }));
        }
        let padded = client.padded().ok_or_else(|| TrustedCoreError::KeyNotFound(client.clone()))?;
        let key = match self.store.load(&padded) {
            Ok(Some(key)) => key,
            Ok(None) => return Err(TrustedCoreError::KeyNotFound(client.clone())),
            Err(StorageError::Tampered) => return Err(TrustedCoreError::StorageTampered(client.clone())),
            Err(e) => return Err(TrustedCoreError::StorageFailure(e.to_string())),
        };
        let evicted = self.cache.insert(client.clone(), key.clone());
        Ok((key, CacheOutcome { hit: false, evicted }))
    }

    pub fn probe_key(&mut self, client: &ClientId) -> Result<CacheOutcome, TrustedCoreError> {
        self.get_key(client).map(|(_, outcome)| outcome)
    }

    pub fn reencrypt(
        &mut self,
        origin: &ClientId,
        dest: &ClientId,
        envelope: &EncryptedEnvelope,
    ) -> Result<(EncryptedEnvelope, PhaseTimings), TrustedCoreError> {
        if origin.padded() != Some(envelope.origin) {
            return Err(TrustedCoreError::OriginMismatch);
        }
        let dest_padded = dest.padded().ok_or_else(|| TrustedCoreError::KeyNotFound(dest.clone()))?;

        let t = Instant::now();
        let (dec_key, dec_outcome) = self.get_key(origin)?;
        let retrieve_dec_key_ns = elapsed_ns(t);

        let t = Instant::now();
        let plaintext = crypto::open_envelope(&dec_key, envelope).map_err(|_| TrustedCoreError::DecryptAuthFailure)?;
        let decrypt_ns = elapsed_ns(t);
        drop(dec_key);

        let t = Instant::now();
        let (enc_key, enc_outcome) = self.get_key(dest)?;
        let retrieve_enc_key_ns = elapsed_ns(t);

        let t = Instant::now();
        let out = crypto::seal_envelope(&enc_key, &dest_padded, crypto::random_nonce(), &plaintext);
        let encrypt_ns = elapsed_ns(t);
        // `plaintext` and both keys are zeroized on drop.

        Ok((
            out,
            PhaseTimings {
                retrieve_dec_key_ns,
                decrypt_ns,
                retrieve_enc_key_ns,
                encrypt_ns,
                dec_key_cached: dec_outcome.hit,
                enc_key_cached: enc_outcome.hit,
            },
        ))
    }

    pub fn counters(&self) -> CoreCounters {
        let c = self.cache.counters();
        CoreCounters {
            hits: c.hits,
            misses: c.misses,
            evictions: c.evictions,
            stored_keys: self.store.count().unwrap_or(0) as u64,
            cached_keys: self.cache.len() as u64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::envelope::decode_envelope;

    fn id(s: &str) -> ClientId {
        ClientId::new(s).unwrap()
    }

    fn setup(cap: usize) -> (tempfile::TempDir, TrustedCoreState) {
        let dir = tempfile::tempdir().unwrap();
        let root = DeviceRootKey::from_bytes(&[1u8; 32]).unwrap();
        let state = TrustedCoreState::init(&root, dir.path(), cap).unwrap();
        (dir, state)
    }

    fn provision(state: &mut TrustedCoreState, name: &str, key: [u8; 32]) {
        let blob = crypto::wrap(&key, &state.public_identity(), &id(name).padded().unwrap());
        state.provision_key(&id(name), &blob).unwrap();
    }

    #[test]
    fn get_key_returns_provisioned_key() {
        let (_d, mut s) = setup(4);
        provision(&mut s, "p01", [0xA5; 32]);
        let (key, outcome) = s.get_key(&id("p01")).unwrap();
        assert_eq!(*key, [0xA5; 32]);
        assert!(outcome.hit);
        assert!(matches!(s.get_key(&id("zzz")), Err(TrustedCoreError::KeyNotFound(_))));
    }

    #[test]
    fn capacity_two_eviction_then_cold_read() {
        let (_d, mut s) = setup(2);
        provision(&mut s, "A", [1; 32]);
        provision(&mut s, "B", [2; 32]);
        assert!(s.get_key(&id("A")).unwrap().1.hit);
        provision(&mut s, "C", [3; 32]);
        let (key, outcome) = s.get_key(&id("B")).unwrap();
        assert_eq!(*key, [2; 32]);
        assert!(!outcome.hit);
        assert_eq!(outcome.evicted, Some(id("A")));
        let c = s.counters();
        assert_eq!((c.hits, c.misses, c.evictions, c.stored_keys, c.cached_keys), (1, 1, 2, 3, 2));
    }

    #[test]
    fn reprovision_rekeys() {
        let (_d, mut s) = setup(1);
        provision(&mut s, "p01", [1; 32]);
        provision(&mut s, "p02", [9; 32]);
        provision(&mut s, "p01", [2; 32]);
        assert_eq!(*s.get_key(&id("p01")).unwrap().0, [2; 32]);
        provision(&mut s, "p02", [9; 32]);
        // cold path reads the re-keyed record
        assert_eq!(*s.get_key(&id("p01")).unwrap().0, [2; 32]);
    }

    #[test]
    fn reencrypt_changes_key_and_origin() {
        let (_d, mut s) = setup(4);
        provision(&mut s, "p01", [1; 32]);
        provision(&mut s, "p02", [2; 32]);
        let env = crypto::seal_envelope(&[1; 32], &id("p01").padded().unwrap(), crypto::random_nonce(), b"hello");
        let (out, timings) = s.reencrypt(&id("p01"), &id("p02"), &env).unwrap();
        assert_eq!(out.origin_id().unwrap(), id("p02"));
        assert_eq!(&**crypto::open_envelope(&[2; 32], &out).unwrap(), b"hello");
        assert!(timings.dec_key_cached && timings.enc_key_cached);
        let round = decode_envelope(&out.encode()).unwrap();
        assert_eq!(round, out);

        assert!(matches!(s.reencrypt(&id("p02"), &id("p01"), &env), Err(TrustedCoreError::OriginMismatch)));
        assert!(matches!(s.reencrypt(&id("p01"), &id("p03"), &env), Err(TrustedCoreError::KeyNotFound(_))));
    }
}
