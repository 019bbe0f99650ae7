//! Application-layer envelope carried as the PUBLISH payload.
//!
//! ```text
//! magic(2) "MT" | version(1) | origin-id(16, zero padded) | nonce(12) | ciphertext(n) | tag(16)
//! ```
//!
//! The first 19 bytes are bound as AEAD associated data.

use thiserror::Error;

use crate::ids::{ClientId, InvalidClientId, ORIGIN_ID_LEN};

pub const MAGIC: [u8; 2] = [0x4D, 0x54];
pub const VERSION: u8 = 0x01;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
/// magic + version + origin-id
pub const HEADER_LEN: usize = 2 + 1 + ORIGIN_ID_LEN;
/// Size of an envelope with an empty ciphertext.
pub const ENVELOPE_OVERHEAD: usize = HEADER_LEN + NONCE_LEN + TAG_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvelopeError {
    #[error("envelope is {0} bytes, minimum is {ENVELOPE_OVERHEAD}")]
    Truncated(usize),
    #[error("bad envelope magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported envelope version {0:#04x}")]
    BadVersion(u8),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedEnvelope {
    pub origin: [u8; ORIGIN_ID_LEN],
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl EncryptedEnvelope {
    /// Associated data for the AEAD: magic, version and the padded origin.
    pub fn header(&self) -> [u8; HEADER_LEN] {
        header_for(&self.origin)
    }

    pub fn origin_id(&self) -> Result<ClientId, InvalidClientId> {
        ClientId::from_padded(&self.origin)
    }

    pub fn encoded_len(&self) -> usize {
        ENVELOPE_OVERHEAD + self.ciphertext.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_envelope(&self.origin, &self.nonce, &self.ciphertext, &self.tag)
    }
}

pub fn header_for(origin: &[u8; ORIGIN_ID_LEN]) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..2].copy_from_slice(&MAGIC);
    h[2] = VERSION;
    h[3..].copy_from_slice(origin);
    h
}

pub fn encode_envelope(
    origin: &[u8; ORIGIN_ID_LEN],
    nonce: &[u8; NONCE_LEN],
    ciphertext: &[u8],
    tag: &[u8; TAG_LEN],
) -> Vec<u8> {
    let mut out = Vec::with_capacity(ENVELOPE_OVERHEAD + ciphertext.len());
    out.extend_from_slice(&header_for(origin));
    out.extend_from_slice(nonce);
    out.extend_from_slice(ciphertext);
    out.extend_from_slice(tag);
    out
}

pub fn decode_envelope(bytes: &[u8]) -> Result<EncryptedEnvelope, EnvelopeError> {
    if bytes.len() < ENVELOPE_OVERHEAD {
        return Err(EnvelopeError::Truncated(bytes.len()));
    }
    if bytes[..2] != MAGIC {
        return Err(EnvelopeError::BadMagic([bytes[0], bytes[1]]));
    }
    if bytes[2] != VERSION {
        return Err(EnvelopeError::BadVersion(bytes[2]));
    }
    let (head, rest) = bytes.split_at(HEADER_LEN);
    let (nonce, rest) = rest.split_at(NONCE_LEN);
    let (ciphertext, tag) = rest.split_at(rest.len() - TAG_LEN);
    Ok(EncryptedEnvelope {
        origin: head[3..].try_into().expect("fixed width"),
        nonce: nonce.try_into().expect("fixed width"),
        ciphertext: ciphertext.to_vec(),
        tag: tag.try_into().expect("fixed width"),
    })
}
