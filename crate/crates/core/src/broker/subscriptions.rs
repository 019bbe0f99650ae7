use std::collections::{BTreeSet, HashMap, HashSet};

use crate::ids::ClientId;
use crate::wire::topic::matches_str;

/// Topic filter to subscriber mapping, with a reverse index so a closing
/// session can be dropped in one call.
#[derive(Debug, Default)]
pub struct SubscriptionTable {
    by_filter: HashMap<String, HashSet<ClientId>>,
    by_client: HashMap<ClientId, HashSet<String>>,
}

impl SubscriptionTable {
    pub fn subscribe(&mut self, filter: &str, client: &ClientId) {
        self.by_filter.entry(filter.to_owned()).or_default().insert(client.clone());
        self.by_client.entry(client.clone()).or_default().insert(filter.to_owned());
    }

    pub fn remove_client(&mut self, client: &ClientId) {
        let Some(filters) = self.by_client.remove(client) else {
            return;
        };
        for f in filters {
            if let Some(set) = self.by_filter.get_mut(&f) {
                set.remove(client);
                if set.is_empty() {
                    self.by_filter.remove(&f);
                }
            }
        }
    }

    /// Distinct clients holding at least one filter that matches `topic`.
    pub fn lookup(&self, topic: &str) -> BTreeSet<ClientId> {
        self.by_filter
            .iter()
            .filter(|(f, _)| matches_str(f, topic))
            .flat_map(|(_, clients)| clients.iter().cloned())
            .collect()
    }

    pub fn filters_of(&self, client: &ClientId) -> BTreeSet<String> {
        self.by_client.get(client).map(|s| s.iter().cloned().collect()).unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.by_filter.values().map(HashSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_filter.is_empty()
    }
}
