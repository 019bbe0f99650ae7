//! Topic access control.
//!
//! File format, one rule per line:
//!
//! ```text
//! # comment
//! <client-id|*> <pub|sub|pubsub> <topic-filter>
//! ```
//!
//! Default deny. The handshake topics are governed by built-in rules that
//! are evaluated before the file: `$mqttz/handshake` is publish-only for
//! everyone, `$mqttz/resp/<id>` is subscribe-only for `<id>`, and the rest of
//! `$mqttz/` is closed.

use std::path::Path;

use thiserror::Error;

use crate::ids::ClientId;
use crate::wire::topic::{
    filter_covers, matches_str, response_topic_for, TopicFilter, HANDSHAKE_TOPIC, RESERVED_PREFIX,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Publish,
    Subscribe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleAction {
    Pub,
    Sub,
    PubSub,
}

impl RuleAction {
    fn permits(self, action: Action) -> bool {
        matches!(
            (self, action),
            (RuleAction::PubSub, _) | (RuleAction::Pub, Action::Publish) | (RuleAction::Sub, Action::Subscribe)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Principal {
    Any,
    Client(ClientId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AclRule {
    pub principal: Principal,
    pub action: RuleAction,
    pub filter: TopicFilter,
}

#[derive(Debug, Error)]
pub enum AclError {
    #[error("cannot read ACL file: {0}")]
    Io(#[from] std::io::Error),
    #[error("ACL line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AclRuleSet {
    rules: Vec<AclRule>,
}

impl AclRuleSet {
    pub fn new(rules: Vec<AclRule>) -> Self {
        AclRuleSet { rules }
    }

    pub fn rules(&self) -> &[AclRule] {
        &self.rules
    }

    pub fn load(path: &Path) -> Result<Self, AclError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, AclError> {
        let mut rules = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| AclError::Parse { line: idx + 1, reason };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [principal, action, filter] = fields[..] else {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            };
            let principal = match principal {
                "*" => Principal::Any,
                id => Principal::Client(ClientId::new(id).map_err(|e| err(e.to_string()))?),
            };
            let action = match action {
                "pub" => RuleAction::Pub,
                "sub" => RuleAction::Sub,
                "pubsub" => RuleAction::PubSub,
                other => return Err(err(format!("unknown action {other:?}"))),
            };
            let filter = TopicFilter::parse(filter).map_err(|e| err(e.to_string()))?;
            rules.push(AclRule { principal, action, filter });
        }
        Ok(AclRuleSet { rules })
    }

    /// For [`Action::Publish`] `topic` is a topic name; for
    /// [`Action::Subscribe`] it is the requested filter, which must be fully
    /// covered by a permitting rule.
    pub fn check(&self, client: &str, action: Action, topic: &str) -> Decision {
        if let Some(d) = builtin(client, action, topic) {
            return d;
        }
        let permitted = self.rules.iter().find(|r| {
            let who = match &r.principal {
                Principal::Any => true,
                Principal::Client(id) => id.as_str() == client,
            };
            who && r.action.permits(action)
                && match action {
                    Action::Publish => matches_str(r.filter.as_str(), topic),
                    Action::Subscribe => filter_covers(r.filter.as_str(), topic),
                }
        });
        if permitted.is_some() {
            Decision::Allow
        } else {
            Decision::Deny
        }
    }
}

fn builtin(client: &str, action: Action, topic: &str) -> Option<Decision> {
    if !topic.starts_with(RESERVED_PREFIX) {
        return None;
    }
    let allowed = match action {
        Action::Publish => topic == HANDSHAKE_TOPIC,
        Action::Subscribe => topic == response_topic_for(client),
    };
    Some(if allowed { Decision::Allow } else { Decision::Deny })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_deny() {
        let acl = AclRuleSet::parse("").unwrap();
        assert_eq!(acl.check("p01", Action::Publish, "x"), Decision::Deny);
        assert_eq!(acl.check("p01", Action::Subscribe, "x"), Decision::Deny);
    }

    #[test]
    fn file_rules() {
        let acl = AclRuleSet::parse("# telemetry\n* pub ecg/#\n\np02 sub ecg/#\np03 pubsub lab/+/temp\n").unwrap();
        assert_eq!(acl.rules().len(), 3);
        assert_eq!(acl.check("p01", Action::Publish, "ecg/p01"), Decision::Allow);
        assert_eq!(acl.check("p01", Action::Subscribe, "ecg/p01"), Decision::Deny);
        assert_eq!(acl.check("p02", Action::Subscribe, "ecg/p01"), Decision::Allow);
        assert_eq!(acl.check("p02", Action::Subscribe, "#"), Decision::Deny);
        assert_eq!(acl.check("p03", Action::Subscribe, "lab/1/temp"), Decision::Allow);
        assert_eq!(acl.check("p03", Action::Publish, "lab/1/temp"), Decision::Allow);
        assert_eq!(acl.check("p03", Action::Subscribe, "lab/#"), Decision::Deny);
    }

    #[test]
    fn builtins() {
        let acl = AclRuleSet::parse("* pubsub #\n* pubsub $mqttz/#").unwrap();
        assert_eq!(acl.check("p01", Action::Subscribe, "$mqttz/resp/p01"), Decision::Allow);
        assert_eq!(acl.check("p01", Action::Subscribe, "$mqttz/resp/p02"), Decision::Deny);
        assert_eq!(acl.check("p01", Action::Subscribe, "$mqttz/resp/+"), Decision::Deny);
        assert_eq!(acl.check("p01", Action::Publish, "$mqttz/resp/p01"), Decision::Deny);
        assert_eq!(acl.check("p02", Action::Subscribe, "$mqttz/handshake"), Decision::Deny);
        assert_eq!(acl.check("p02", Action::Publish, "$mqttz/handshake"), Decision::Allow);
        assert_eq!(acl.check("p02", Action::Subscribe, "$mqttz/#"), Decision::Deny);
        let empty = AclRuleSet::default();
        assert_eq!(empty.check("p01", Action::Subscribe, "$mqttz/resp/p01"), Decision::Allow);
        assert_eq!(empty.check("p01", Action::Publish, "$mqttz/handshake"), Decision::Allow);
    }

    #[test]
    fn parse_errors() {
        for bad in ["p01 pub", "p01 write a", "p/1 pub a", "* sub a/#/b", "* pub a b c"] {
            assert!(matches!(AclRuleSet::parse(bad), Err(AclError::Parse { line: 1, .. })), "{bad}");
        }
    }
}
