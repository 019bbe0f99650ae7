//! Topic names, topic filters and MQTT wildcard matching.

use std::fmt;

use thiserror::Error;

/// Write-only topic clients publish their wrapped key to.
pub const HANDSHAKE_TOPIC: &str = "$mqttz/handshake";
/// Prefix of the per-client provisioning reply topic.
pub const RESPONSE_TOPIC_PREFIX: &str = "$mqttz/resp/";
/// Every topic under this prefix is reserved for the broker.
pub const RESERVED_PREFIX: &str = "$mqttz/";

const MAX_TOPIC_LEN: usize = u16::MAX as usize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopicError {
    #[error("topic is empty")]
    Empty,
    #[error("topic exceeds 65535 bytes")]
    TooLong,
    #[error("topic contains NUL")]
    Nul,
    #[error("topic name contains a wildcard")]
    WildcardInName,
    #[error("'+' must occupy a whole level")]
    BadSingleLevel,
    #[error("'#' must be the whole final level")]
    BadMultiLevel,
}

fn check_common(s: &str) -> Result<(), TopicError> {
    if s.is_empty() {
        return Err(TopicError::Empty);
    }
    if s.len() > MAX_TOPIC_LEN {
        return Err(TopicError::TooLong);
    }
    if s.contains('\0') {
        return Err(TopicError::Nul);
    }
    Ok(())
}

/// A concrete topic a message is published to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicName(String);

impl TopicName {
    pub fn parse(s: impl Into<String>) -> Result<Self, TopicError> {
        let s = s.into();
        check_common(&s)?;
        if s.contains(['+', '#']) {
            return Err(TopicError::WildcardInName);
        }
        Ok(TopicName(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// A subscription pattern, possibly containing `+` and `#` wildcards.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicFilter(String);

impl TopicFilter {
    pub fn parse(s: impl Into<String>) -> Result<Self, TopicError> {
        let s = s.into();
        check_common(&s)?;
        let mut levels = s.split('/').peekable();
        while let Some(level) = levels.next() {
            if level.contains('+') && level != "+" {
                return Err(TopicError::BadSingleLevel);
            }
            if level.contains('#') && (level != "#" || levels.peek().is_some()) {
                return Err(TopicError::BadMultiLevel);
            }
        }
        Ok(TopicFilter(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Reply topic a given client receives its provisioning status on.
pub fn response_topic_for(client_id: &str) -> String {
    format!("{RESPONSE_TOPIC_PREFIX}{client_id}")
}

fn root_wildcard(s: &str) -> bool {
    s.starts_with(['+', '#'])
}

/// MQTT matching. A name whose first level starts with `$` (which includes
/// the reserved `$mqttz/` space) is never matched by a filter whose first
/// level is a wildcard.
pub fn topic_matches(filter: &TopicFilter, name: &TopicName) -> bool {
    matches_str(filter.as_str(), name.as_str())
}

/// [`topic_matches`] over unvalidated strings; both are assumed well formed.
pub fn matches_str(filter: &str, name: &str) -> bool {
    if name.starts_with('$') && root_wildcard(filter) {
        return false;
    }

    let mut f = filter.split('/');
    let mut n = name.split('/');
    loop {
        match (f.next(), n.next()) {
            (Some("#"), _) => return true,
            (Some("+"), Some(_)) => {}
            (Some(fl), Some(nl)) if fl == nl => {}
            (None, None) => return true,
            _ => return false,
        }
    }
}

/// True if every name matched by `inner` is also matched by `outer`.
///
/// Used for subscribe-time authorization: a client may subscribe to `inner`
/// only if a permitting rule's filter covers it.
pub fn filter_covers(outer: &str, inner: &str) -> bool {
    // A literal `$x` first level only matches `$` names, which a root
    // wildcard never reaches.
    if root_wildcard(outer) && inner.starts_with('$') {
        return false;
    }
    let outer: Vec<&str> = outer.split('/').collect();
    let inner: Vec<&str> = inner.split('/').collect();
    covers_levels(&outer, &inner)
}

fn covers_levels(outer: &[&str], inner: &[&str]) -> bool {
    match (outer.first(), inner.first()) {
        (Some(&"#"), _) => true,
        (None, None) => true,
        (Some(_), None) | (None, Some(_)) => false,
        (Some(_), Some(&"#")) => false,
        (Some(&"+"), Some(_)) => covers_levels(&outer[1..], &inner[1..]),
        (Some(o), Some(i)) => o == i && covers_levels(&outer[1..], &inner[1..]),
    }
}
