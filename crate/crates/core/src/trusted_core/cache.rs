//! In-memory LRU of client keys. Evicted keys are only dropped: their
//! authoritative copy already lives in secure storage.

use std::collections::{BTreeMap, HashMap};

use crate::crypto::SecretKey;
use crate::ids::ClientId;

/// What a single cache lookup did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheOutcome {
    pub hit: bool,
    /// Entry dropped to make room, if any.
    pub evicted: Option<ClientId>,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub(crate) struct CacheCounters {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

pub(crate) struct KeyCache {
    capacity: usize,
    tick: u64,
    entries: HashMap<ClientId, (SecretKey, u64)>,
    recency: BTreeMap<u64, ClientId>,
    counters: CacheCounters,
}

impl KeyCache {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "cache capacity must be positive");
        KeyCache {
            capacity,
            tick: 0,
            entries: HashMap::with_capacity(capacity),
            recency: BTreeMap::new(),
            counters: CacheCounters::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn counters(&self) -> CacheCounters {
        self.counters
    }

    fn next_tick(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }

    /// Looks up `id`, marking it most recent on a hit. Counts hit or miss.
    pub fn get(&mut self, id: &ClientId) -> Option<SecretKey> {
        let tick = self.next_tick();
        match self.entries.get_mut(id) {
            Some((key, last)) => {
                self.recency.remove(last);
                *last = tick;
                self.recency.insert(tick, id.clone());
                self.counters.hits += 1;
                Some(key.clone())
            }
            None => {
                self.counters.misses += 1;
                None
            }
        }
    }

    /// Inserts or replaces `id` as most recent, evicting the least recently
    /// used entry if a new id does not fit.
    pub fn insert(&mut self, id: ClientId, key: SecretKey) -> Option<ClientId> {
        let tick = self.next_tick();
        if let Some((old_key, last)) = self.entries.get_mut(&id) {
            *old_key = key;
            self.recency.remove(last);
            *last = tick;
            self.recency.insert(tick, id);
            return None;
        }
        let mut evicted = None;
        if self.entries.len() == self.capacity {
            let (_, victim) = self.recency.pop_first().expect("full cache has entries");
            self.entries.remove(&victim);
            self.counters.evictions += 1;
            evicted = Some(victim);
        }
        self.recency.insert(tick, id.clone());
        self.entries.insert(id, (key, tick));
        evicted
    }

    #[cfg(test)]
    pub fn contains(&self, id: &ClientId) -> bool {
        self.entries.contains_key(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use zeroize::Zeroizing;

    fn id(s: &str) -> ClientId {
        ClientId::new(s).unwrap()
    }

    fn key(b: u8) -> SecretKey {
        Zeroizing::new([b; 32])
    }

    #[test]
    fn lru_victim() {
        let mut c = KeyCache::new(2);
        assert_eq!(c.insert(id("A"), key(1)), None);
        assert_eq!(c.insert(id("B"), key(2)), None);
        assert!(c.get(&id("A")).is_some());
        assert_eq!(c.insert(id("C"), key(3)), Some(id("B")));
        assert!(!c.contains(&id("B")));
        assert_eq!(c.len(), 2);
        assert_eq!(c.counters(), CacheCounters { hits: 1, misses: 0, evictions: 1 });
    }

    #[test]
    fn reinsert_refreshes() {
        let mut c = KeyCache::new(2);
        c.insert(id("A"), key(1));
        c.insert(id("B"), key(2));
        assert_eq!(c.insert(id("A"), key(9)), None);
        assert_eq!(*c.get(&id("A")).unwrap(), [9; 32]);
        assert_eq!(c.insert(id("C"), key(3)), Some(id("B")));
    }
}
