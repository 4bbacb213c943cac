//! Weight-bounded least-recently-used cache.
//!
//! [`LruCache`] is the single-threaded core; [`SharedLru`] wraps it behind a
//! mutex and keeps hit/miss/eviction counters in atomics so statistics can be
//! read without taking the lock.

use std::borrow::Borrow;
use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::Serialize;

struct Entry<V> {
    value: V,
    weight: u64,
    stamp: u64,
}

/// Outcome of an insertion.
#[derive(Debug, PartialEq, Eq)]
pub struct InsertOutcome<K> {
    /// Keys evicted to make room, least recently used first.
    pub evicted: Vec<K>,
    /// False when the entry alone is heavier than the capacity.
    pub stored: bool,
}

pub struct LruCache<K, V> {
    map: HashMap<K, Entry<V>>,
    // stamp -> key; the smallest stamp is the least recently used entry.
    order: BTreeMap<u64, K>,
    next_stamp: u64,
    capacity: u64,
    weight: u64,
}

impl<K: Hash + Eq + Clone, V> LruCache<K, V> {
    pub fn new(capacity: u64) -> Self {
        assert!(capacity > 0, "LRU capacity must be positive");
        LruCache {
            map: HashMap::new(),
            order: BTreeMap::new(),
            next_stamp: 0,
            capacity,
            weight: 0,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn weight(&self) -> u64 {
        self.weight
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains<Q>(&self, key: &Q) -> bool
    where
        K: Borrow<Q>,
        Q: Hash + Eq + ?Sized,
    {
        self.map.contains_key(key)
    }

    fn bump(&mut self) -> u64 {
        self.next_stamp += 1;
        self.next_stamp
    }

    /// Looks up `key` and marks it most recently used.
    pub fn get<Q>(&mut self, key: &Q) -> Option<&V>
    where
        K: Borrow<Q>,
        Q: Hash + Eq + ?Sized,
    {
        let stamp = self.next_stamp + 1;
        let entry = self.map.get_mut(key)?;
        self.next_stamp = stamp;
        let k = self.order.remove(&entry.stamp).expect("order tracks every entry");
        entry.stamp = stamp;
        self.order.insert(stamp, k);
        Some(&entry.value)
    }

    /// Inserts or replaces `key`, then evicts from the cold end until the
    /// total weight fits.
    pub fn insert(&mut self, key: K, value: V, weight: u64) -> InsertOutcome<K> {
        if let Some(old) = self.map.remove(&key) {
            self.order.remove(&old.stamp);
            self.weight -= old.weight;
        }
        if weight > self.capacity {
            return InsertOutcome {
                evicted: Vec::new(),
                stored: false,
            };
        }
        let mut evicted = Vec::new();
        while self.weight + weight > self.capacity {
            let (_, cold) = self.order.pop_first().expect("non-empty while over capacity");
            let e = self.map.remove(&cold).expect("order and map agree");
            self.weight -= e.weight;
            evicted.push(cold);
        }
        let stamp = self.bump();
        self.order.insert(stamp, key.clone());
        self.map.insert(key, Entry { value, weight, stamp });
        self.weight += weight;
        InsertOutcome { evicted, stored: true }
    }

    pub fn remove<Q>(&mut self, key: &Q) -> Option<V>
    where
        K: Borrow<Q>,
        Q: Hash + Eq + ?Sized,
    {
        let e = self.map.remove(key)?;
        self.order.remove(&e.stamp);
        self.weight -= e.weight;
        Some(e.value)
    }

    /// Drops every entry whose key matches `pred`.
    pub fn retain(&mut self, mut keep: impl FnMut(&K) -> bool) {
        let doomed: Vec<K> = self.map.keys().filter(|k| !keep(k)).cloned().collect();
        for k in doomed {
            self.remove(&k);
        }
    }

    /// Keys from least to most recently used.
    pub fn keys_lru_order(&self) -> impl Iterator<Item = &K> {
        self.order.values()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub current_bytes: u64,
    pub current_entries: u64,
    pub capacity: u64,
}

impl CacheStats {
    pub fn lookups(&self) -> u64 {
        self.hits + self.misses
    }

    pub fn hit_rate(&self) -> f64 {
        if self.lookups() == 0 {
            0.0
        } else {
            self.hits as f64 / self.lookups() as f64
        }
    }
}

/// Thread-safe LRU with atomic counters. Values are cloned out, so `V`
/// should be cheap to clone (`Bytes`, `Arc<_>`).
pub struct SharedLru<K, V> {
    inner: Mutex<LruCache<K, V>>,
    hits: AtomicU64,
    misses: AtomicU64,
    evictions: AtomicU64,
}

impl<K: Hash + Eq + Clone, V: Clone> SharedLru<K, V> {
    pub fn new(capacity: u64) -> Self {
        SharedLru {
            inner: Mutex::new(LruCache::new(capacity)),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
        }
    }

    /// Counted lookup.
    pub fn get<Q>(&self, key: &Q) -> Option<V>
    where
        K: Borrow<Q>,
        Q: Hash + Eq + ?Sized,
    {
        let found = self.inner.lock().get(key).cloned();
        let counter = if found.is_some() { &self.hits } else { &self.misses };
        counter.fetch_add(1, Ordering::Relaxed);
        found
    }

    /// Uncounted check that does not touch recency.
    pub fn contains<Q>(&self, key: &Q) -> bool
    where
        K: Borrow<Q>,
        Q: Hash + Eq + ?Sized,
    {
        self.inner.lock().contains(key)
    }

    pub fn insert(&self, key: K, value: V, weight: u64) -> InsertOutcome<K> {
        let out = self.inner.lock().insert(key, value, weight);
        self.evictions.fetch_add(out.evicted.len() as u64, Ordering::Relaxed);
        out
    }

    pub fn invalidate(&self, keep: impl FnMut(&K) -> bool) {
        self.inner.lock().retain(keep);
    }

    pub fn stats(&self) -> CacheStats {
        let (current_bytes, current_entries, capacity) = {
            let g = self.inner.lock();
            (g.weight(), g.len() as u64, g.capacity())
        };
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
            current_bytes,
            current_entries,
            capacity,
        }
    }
}
