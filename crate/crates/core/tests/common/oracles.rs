//! Slow, obviously-correct reference models.

use std::collections::HashMap;

/// Filter syntax: levels split on '/', '+' and '#' only as whole levels,
/// '#' only last.
pub fn filter_valid(filter: &str) -> bool {
    if filter.is_empty() {
        return false;
    }
    let levels: Vec<&str> = filter.split('/').collect();
    levels.iter().enumerate().all(|(i, l)| match *l {
        "#" => i == levels.len() - 1,
        "+" => true,
        other => !other.contains('+') && !other.contains('#'),
    })
}

pub fn name_valid(name: &str) -> bool {
    !name.is_empty() && !name.contains('+') && !name.contains('#')
}

pub fn matches(filter: &str, name: &str) -> bool {
    let f: Vec<&str> = filter.split('/').collect();
    let n: Vec<&str> = name.split('/').collect();
    if name.starts_with('$') && (f[0] == "+" || f[0] == "#") {
        return false;
    }
    fn rec(f: &[&str], n: &[&str]) -> bool {
        match (f.first(), n.first()) {
            (None, None) => true,
            (Some(&"#"), _) => true,
            (Some(&"+"), Some(_)) => rec(&f[1..], &n[1..]),
            (Some(a), Some(b)) => a == b && rec(&f[1..], &n[1..]),
            _ => false,
        }
    }
    rec(&f, &n)
}

/// Every sequence of `min..=max` levels drawn from `alphabet`, joined by '/'.
pub fn corpus(alphabet: &[&str], min: usize, max: usize) -> Vec<String> {
    let mut out = Vec::new();
    let mut layer: Vec<Vec<&str>> = vec![vec![]];
    for depth in 1..=max {
        layer = layer
            .iter()
            .flat_map(|p| alphabet.iter().map(move |a| p.iter().copied().chain([*a]).collect::<Vec<_>>()))
            .collect();
        if depth >= min {
            out.extend(layer.iter().map(|l| l.join("/")));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Rule {
    /// `None` means any client.
    pub principal: Option<String>,
    pub publish: bool,
    pub subscribe: bool,
    pub filter: String,
}

impl Rule {
    pub fn to_line(&self) -> String {
        let who = self.principal.as_deref().unwrap_or("*");
        let what = match (self.publish, self.subscribe) {
            (true, true) => "pubsub",
            (true, false) => "pub",
            _ => "sub",
        };
        format!("{who} {what} {}", self.filter)
    }
}

/// Decides coverage by enumerating every topic name in a finite universe
/// and checking that whatever `inner` matches, `outer` matches too.
pub struct CoverOracle {
    universe: Vec<String>,
    memo: HashMap<(String, String), bool>,
}

impl CoverOracle {
    /// `levels` should contain every literal used in filters plus one
    /// literal that appears in none; `depth` one more than the deepest
    /// filter.
    pub fn new(levels: &[&str], depth: usize) -> Self {
        CoverOracle { universe: corpus(levels, 1, depth), memo: HashMap::new() }
    }

    pub fn covers(&mut self, outer: &str, inner: &str) -> bool {
        let key = (outer.to_string(), inner.to_string());
        if let Some(&v) = self.memo.get(&key) {
            return v;
        }
        let v = self.universe.iter().all(|n| !matches(inner, n) || matches(outer, n));
        self.memo.insert(key, v);
        v
    }
}

pub enum Act {
    Publish,
    Subscribe,
}

pub fn permits(rules: &[Rule], covers: &mut CoverOracle, client: &str, act: Act, topic: &str) -> bool {
    if topic.starts_with("$mqttz/") {
        return match act {
            Act::Publish => topic == "$mqttz/handshake",
            Act::Subscribe => topic == format!("$mqttz/resp/{client}"),
        };
    }
    rules.iter().any(|r| {
        let who = r.principal.as_deref().is_none_or(|p| p == client);
        who && match act {
            Act::Publish => r.publish && matches(&r.filter, topic),
            Act::Subscribe => r.subscribe && covers.covers(&r.filter, topic),
        }
    })
}

/// List-based LRU: most recently used at the end.
#[derive(Debug, Default)]
pub struct ListLru {
    pub capacity: usize,
    pub entries: Vec<String>,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

impl ListLru {
    pub fn new(capacity: usize) -> Self {
        ListLru { capacity, ..Default::default() }
    }

    /// Insert or refresh; returns the evicted id.
    pub fn insert(&mut self, id: &str) -> Option<String> {
        if let Some(pos) = self.entries.iter().position(|e| e == id) {
            let e = self.entries.remove(pos);
            self.entries.push(e);
            return None;
        }
        let evicted = if self.entries.len() == self.capacity {
            self.evictions += 1;
            Some(self.entries.remove(0))
        } else {
            None
        };
        self.entries.push(id.to_string());
        evicted
    }

    /// Lookup that falls back to storage (`stored`) on a miss. Returns
    /// (hit, evicted).
    pub fn get(&mut self, id: &str, stored: bool) -> (bool, Option<String>) {
        if let Some(pos) = self.entries.iter().position(|e| e == id) {
            self.hits += 1;
            let e = self.entries.remove(pos);
            self.entries.push(e);
            return (true, None);
        }
        self.misses += 1;
        if stored {
            (false, self.insert(id))
        } else {
            (false, None)
        }
    }
}
