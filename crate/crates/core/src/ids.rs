//! Client identifiers.
//!
//! MQTT allows up to 23 bytes for a client identifier. Only identifiers of at
//! most [`ORIGIN_ID_LEN`] bytes fit the envelope origin field and can therefore
//! own a provisioned key.

use std::fmt;

use thiserror::Error;

/// Longest client id accepted in a CONNECT.
pub const MAX_CLIENT_ID_LEN: usize = 23;

/// Width of the zero-padded id carried in envelopes, storage records and
/// handshake associated data.
pub const ORIGIN_ID_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvalidClientId {
    #[error("client id is empty")]
    Empty,
    #[error("client id is {0} bytes, limit is {1}")]
    TooLong(usize, usize),
    #[error("client id contains invalid character {0:?}")]
    BadChar(char),
}

/// A validated client identifier: 1..=23 characters from `[0-9a-zA-Z_-]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClientId(String);

impl ClientId {
    pub fn new(id: impl Into<String>) -> Result<Self, InvalidClientId> {
        let id = id.into();
        if id.is_empty() {
            return Err(InvalidClientId::Empty);
        }
        if id.len() > MAX_CLIENT_ID_LEN {
            return Err(InvalidClientId::TooLong(id.len(), MAX_CLIENT_ID_LEN));
        }
        if let Some(c) = id.chars().find(|c| !(c.is_ascii_alphanumeric() || *c == '_' || *c == '-')) {
            return Err(InvalidClientId::BadChar(c));
        }
        Ok(ClientId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The id zero-padded to 16 bytes, or `None` if it is longer than that.
    pub fn padded(&self) -> Option<[u8; ORIGIN_ID_LEN]> {
        let bytes = self.0.as_bytes();
        if bytes.len() > ORIGIN_ID_LEN {
            return None;
        }
        let mut out = [0u8; ORIGIN_ID_LEN];
        out[..bytes.len()].copy_from_slice(bytes);
        Some(out)
    }

    /// Inverse of [`ClientId::padded`]. Padding must be trailing zeros only.
    pub fn from_padded(raw: &[u8; ORIGIN_ID_LEN]) -> Result<Self, InvalidClientId> {
        let end = raw.iter().position(|&b| b == 0).unwrap_or(ORIGIN_ID_LEN);
        if raw[end..].iter().any(|&b| b != 0) {
            return Err(InvalidClientId::BadChar('\0'));
        }
        let s = std::str::from_utf8(&raw[..end]).map_err(|_| InvalidClientId::BadChar('\u{fffd}'))?;
        ClientId::new(s)
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for ClientId {
    type Err = InvalidClientId;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ClientId::new(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(ClientId::new("p01").is_ok());
        assert!(ClientId::new("a-b_C9").is_ok());
        assert_eq!(ClientId::new(""), Err(InvalidClientId::Empty));
        assert_eq!(ClientId::new("x".repeat(24)), Err(InvalidClientId::TooLong(24, 23)));
        assert!(ClientId::new("x".repeat(23)).is_ok());
        assert_eq!(ClientId::new("a/b"), Err(InvalidClientId::BadChar('/')));
    }

    #[test]
    fn padding() {
        let id = ClientId::new("p01").unwrap();
        let p = id.padded().unwrap();
        assert_eq!(&p[..3], b"p01");
        assert!(p[3..].iter().all(|&b| b == 0));
        assert_eq!(ClientId::from_padded(&p).unwrap(), id);
        assert!(ClientId::new("x".repeat(17)).unwrap().padded().is_none());

        let mut gap = p;
        gap[10] = b'z';
        assert!(ClientId::from_padded(&gap).is_err());
        assert!(ClientId::from_padded(&[0u8; 16]).is_err());
    }
}
