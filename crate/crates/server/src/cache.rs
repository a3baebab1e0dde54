//! Least-recently-used embedding cache bounded by total bytes.

use std::collections::HashMap;
use std::sync::Arc;

use promptseg::model::ImageEmbedding;

#[derive(Debug)]
pub struct EmbeddingCache {
    budget: usize,
    used: usize,
    tick: u64,
    evictions: u64,
    entries: HashMap<String, (Arc<ImageEmbedding>, u64)>,
}

impl EmbeddingCache {
    pub fn new(budget: usize) -> Self {
        Self { budget, used: 0, tick: 0, evictions: 0, entries: HashMap::new() }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn used_bytes(&self) -> usize {
        self.used
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Marks the entry as most recently used.
    pub fn get(&mut self, key: &str) -> Option<Arc<ImageEmbedding>> {
        self.tick += 1;
        let tick = self.tick;
        self.entries.get_mut(key).map(|(emb, t)| {
            *t = tick;
            emb.clone()
        })
    }

    /// Inserts and evicts older entries until the budget holds. An embedding
    /// larger than the whole budget is not stored.
    pub fn insert(&mut self, key: &str, emb: Arc<ImageEmbedding>) {
        self.remove(key);
        let size = emb.size_bytes();
        if size > self.budget {
            return;
        }
        while self.used + size > self.budget {
            let oldest = self.entries.iter().min_by_key(|(_, (_, t))| *t).map(|(k, _)| k.clone());
            match oldest {
                Some(k) => {
                    self.remove(&k);
                    self.evictions += 1;
                }
                None => break,
            }
        }
        self.tick += 1;
        self.used += size;
        self.entries.insert(key.to_string(), (emb, self.tick));
    }

    pub fn remove(&mut self, key: &str) -> bool {
        match self.entries.remove(key) {
            Some((emb, _)) => {
                self.used -= emb.size_bytes();
                true
            }
            None => false,
        }
    }
}
