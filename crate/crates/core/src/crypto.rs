//! Symmetric primitives shared by the trusted core and the client library.
//! The broker never links against this module.

use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::{Aes256Gcm, Nonce, Tag};
use hkdf::Hkdf;
use rand::rngs::OsRng;
use rand::RngCore;
use sha2::Sha256;
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};
use zeroize::Zeroizing;

use crate::wire::envelope::{header_for, EncryptedEnvelope, NONCE_LEN, TAG_LEN};

pub(crate) const KEY_LEN: usize = 32;

pub(crate) const CTX_IDENTITY: &[u8] = b"mqttz-tee-identity-v1";
pub(crate) const CTX_STORAGE: &[u8] = b"mqttz-secure-storage-v1";
pub(crate) const CTX_HANDSHAKE: &[u8] = b"mqttz-handshake-v1";

/// ephemeral public key | nonce | wrapped key | tag
pub const WRAPPED_KEY_LEN: usize = 32 + NONCE_LEN + KEY_LEN + TAG_LEN;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("authentication failed")]
pub(crate) struct AuthError;

pub(crate) type SecretKey = Zeroizing<[u8; KEY_LEN]>;

pub(crate) fn hkdf32(ikm: &[u8], context: &[u8]) -> SecretKey {
    let mut out = Zeroizing::new([0u8; KEY_LEN]);
    Hkdf::<Sha256>::new(None, ikm)
        .expand(context, out.as_mut())
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    out
}

pub(crate) fn random_nonce() -> [u8; NONCE_LEN] {
    let mut n = [0u8; NONCE_LEN];
    OsRng.fill_bytes(&mut n);
    n
}

/// AES-256-GCM with detached tag. Returns (ciphertext, tag).
pub(crate) fn seal(
    key: &[u8; KEY_LEN],
    nonce: &[u8; NONCE_LEN],
    aad: &[u8],
    plaintext: &[u8],
) -> (Vec<u8>, [u8; TAG_LEN]) {
    let cipher = Aes256Gcm::new(key.into());
    let mut buf = plaintext.to_vec();
    let tag = cipher
        .encrypt_in_place_detached(Nonce::from_slice(nonce), aad, &mut buf)
        .expect("plaintext length within AES-GCM limits");
    (buf, tag.into())
}

pub(crate) fn open(
    key: &[u8; KEY_LEN],
    nonce: &[u8; NONCE_LEN],
    aad: &[u8],
    ciphertext: &[u8],
    tag: &[u8; TAG_LEN],
) -> Result<Zeroizing<Vec<u8>>, AuthError> {
    let cipher = Aes256Gcm::new(key.into());
    let mut buf = Zeroizing::new(ciphertext.to_vec());
    cipher
        .decrypt_in_place_detached(Nonce::from_slice(nonce), aad, &mut buf, Tag::from_slice(tag))
        .map_err(|_| AuthError)?;
    Ok(buf)
}

pub(crate) fn seal_envelope(
    key: &[u8; KEY_LEN],
    origin: &[u8; 16],
    nonce: [u8; NONCE_LEN],
    plaintext: &[u8],
) -> EncryptedEnvelope {
    let (ciphertext, tag) = seal(key, &nonce, &header_for(origin), plaintext);
    EncryptedEnvelope { origin: *origin, nonce, ciphertext, tag }
}

pub(crate) fn open_envelope(
    key: &[u8; KEY_LEN],
    envelope: &EncryptedEnvelope,
) -> Result<Zeroizing<Vec<u8>>, AuthError> {
    open(key, &envelope.nonce, &envelope.header(), &envelope.ciphertext, &envelope.tag)
}

/// X25519 secret from KDF output, clamped per RFC 7748.
pub(crate) fn x25519_secret(mut bytes: SecretKey) -> StaticSecret {
    bytes[0] &= 248;
    bytes[31] &= 127;
    bytes[31] |= 64;
    StaticSecret::from(*bytes)
}

/// Wraps `key` for the holder of `recipient`: fresh ephemeral X25519 key,
/// HKDF over the shared secret, AES-256-GCM with the padded id as AAD.
pub(crate) fn wrap(key: &[u8; KEY_LEN], recipient: &[u8; 32], padded_id: &[u8; 16]) -> [u8; WRAPPED_KEY_LEN] {
    let ephemeral = StaticSecret::random_from_rng(OsRng);
    let ephemeral_pub = PublicKey::from(&ephemeral);
    let shared = ephemeral.diffie_hellman(&PublicKey::from(*recipient));
    let wrap_key = hkdf32(shared.as_bytes(), CTX_HANDSHAKE);
    let nonce = random_nonce();
    let (ct, tag) = seal(&wrap_key, &nonce, padded_id, key);

    let mut blob = [0u8; WRAPPED_KEY_LEN];
    blob[..32].copy_from_slice(ephemeral_pub.as_bytes());
    blob[32..44].copy_from_slice(&nonce);
    blob[44..76].copy_from_slice(&ct);
    blob[76..].copy_from_slice(&tag);
    blob
}

pub(crate) fn unwrap(
    blob: &[u8; WRAPPED_KEY_LEN],
    identity: &StaticSecret,
    padded_id: &[u8; 16],
) -> Result<SecretKey, AuthError> {
    let ephemeral: [u8; 32] = blob[..32].try_into().expect("fixed width");
    let shared = identity.diffie_hellman(&PublicKey::from(ephemeral));
    if !shared.was_contributory() {
        return Err(AuthError);
    }
    let wrap_key = hkdf32(shared.as_bytes(), CTX_HANDSHAKE);
    let nonce: [u8; NONCE_LEN] = blob[32..44].try_into().expect("fixed width");
    let tag: [u8; TAG_LEN] = blob[76..].try_into().expect("fixed width");
    let plain = open(&wrap_key, &nonce, padded_id, &blob[44..76], &tag)?;
    let mut key = Zeroizing::new([0u8; KEY_LEN]);
    key.copy_from_slice(&plain);
    Ok(key)
}

#[cfg(test)]
mod tests {
    use super::*;

    // AES-256-GCM reference vectors (McGrew & Viega test cases 14 and 16),
    // cross-checked with the Python `cryptography` package.
    const K: &str = "feffe9928665731c6d6a8f9467308308feffe9928665731c6d6a8f9467308308";
    const IV: &str = "cafebabefacedbaddecaf888";
    const P60: &str = "d9313225f88406e5a55909c5aff5269a86a7a9531534f7da2e4c303d8a318a72\
                       1c3c0c95956809532fcf0e2449a6b525b16aedf5aa0de657ba637b39";
    const A: &str = "feedfacedeadbeeffeedfacedeadbeefabaddad2";
    const C60: &str = "522dc1f099567d07f47f37a32a84427d643a8cdcbfe5c0c97598a2bd2555d1aa\
                       8cb08e48590dbb3da7b08b1056828838c5f61e6393ba7a0abcc9f662";
    const T16: &str = "76fc6ece0f4e1768cddf8853bb2d551b";

    fn h(s: &str) -> Vec<u8> {
        hex::decode(s.replace(char::is_whitespace, "")).unwrap()
    }

    #[test]
    fn gcm_known_answer() {
        let key: [u8; 32] = h(K).try_into().unwrap();
        let nonce: [u8; 12] = h(IV).try_into().unwrap();
        let (ct, tag) = seal(&key, &nonce, &h(A), &h(P60));
        assert_eq!(ct, h(C60));
        assert_eq!(tag.to_vec(), h(T16));
        assert_eq!(*open(&key, &nonce, &h(A), &ct, &tag).unwrap(), h(P60));

        let (ct, tag) = seal(&[0u8; 32], &[0u8; 12], &[], &[0u8; 16]);
        assert_eq!(ct, h("cea7403d4d606b6e074ec5d3baf39d18"));
        assert_eq!(tag.to_vec(), h("d0d1c8a799996bf0265b98b5d48ab919"));
    }

    #[test]
    fn wrap_unwrap() {
        let identity = x25519_secret(hkdf32(&[9u8; 32], CTX_IDENTITY));
        let public = PublicKey::from(&identity);
        let id = *b"p01\0\0\0\0\0\0\0\0\0\0\0\0\0";
        let key = [0x5Au8; 32];
        let blob = wrap(&key, public.as_bytes(), &id);
        assert_eq!(*unwrap(&blob, &identity, &id).unwrap(), key);

        let other = *b"p02\0\0\0\0\0\0\0\0\0\0\0\0\0";
        assert_eq!(unwrap(&blob, &identity, &other), Err(AuthError));
    }

    #[test]
    fn low_order_ephemeral_rejected() {
        let identity = x25519_secret(hkdf32(&[9u8; 32], CTX_IDENTITY));
        let blob = [0u8; WRAPPED_KEY_LEN];
        assert_eq!(unwrap(&blob, &identity, &[0; 16]), Err(AuthError));
    }
}
