use super::hash::{reduce, Hasher64, KeyHash};
use super::SketchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Stored,
    Updated,
    TableFull,
}

/// d-left hash table of 16-bit fingerprints and 64-bit values.
///
/// Every key has one candidate bucket in each of the `d` subtables. Inserts
/// go to the least-loaded candidate, ties broken towards the leftmost
/// subtable. Keys are identified by fingerprint only: two keys sharing a
/// fingerprint and a candidate bucket are treated as the same key.
#[derive(Debug, Clone, PartialEq)]
pub struct DLeftHashTable {
    subtables: usize,
    buckets: usize,
    cells: usize,
    // Cells of one bucket are contiguous and packed: occupied cells first.
    fps: Vec<u16>,
    values: Vec<u64>,
    loads: Vec<u8>,
    occupied: usize,
    hasher: Hasher64,
}

impl DLeftHashTable {
    pub fn new(subtables: usize, buckets: usize, cells: usize) -> Result<Self, SketchError> {
        Self::with_hasher(subtables, buckets, cells, Hasher64::default())
    }

    pub fn with_hasher(subtables: usize, buckets: usize, cells: usize, hasher: Hasher64) -> Result<Self, SketchError> {
        Self::check(subtables, buckets, cells)?;
        let n = subtables * buckets * cells;
        Ok(DLeftHashTable {
            subtables,
            buckets,
            cells,
            fps: vec![0; n],
            values: vec![0; n],
            loads: vec![0; subtables * buckets],
            occupied: 0,
            hasher,
        })
    }

    pub fn check(subtables: usize, buckets: usize, cells: usize) -> Result<(), SketchError> {
        if !(2..=16).contains(&subtables) {
            return Err(SketchError::Sizing(format!("d-left subtables {subtables} not in 2..=16")));
        }
        if buckets == 0 || buckets > 1 << 24 {
            return Err(SketchError::Sizing(format!("d-left buckets {buckets} not in 1..=2^24")));
        }
        if cells == 0 || cells > 64 {
            return Err(SketchError::Sizing(format!("d-left cells {cells} not in 1..=64")));
        }
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.fps.len()
    }

    pub fn len(&self) -> usize {
        self.occupied
    }

    pub fn is_empty(&self) -> bool {
        self.occupied == 0
    }

    pub fn load_factor(&self) -> f64 {
        self.occupied as f64 / self.capacity() as f64
    }

    pub fn hasher(&self) -> &Hasher64 {
        &self.hasher
    }

    #[inline]
    fn fingerprint(&self, h: &KeyHash) -> u16 {
        ((h.nth(self.subtables as u64) % 0xffff) + 1) as u16
    }

    #[inline]
    fn bucket(&self, h: &KeyHash, table: usize) -> usize {
        table * self.buckets + reduce(h.nth(table as u64), self.buckets)
    }

    fn find(&self, h: &KeyHash, fp: u16) -> Option<usize> {
        for t in 0..self.subtables {
            let b = self.bucket(h, t);
            let base = b * self.cells;
            for cell in base..base + self.loads[b] as usize {
                if self.fps[cell] == fp {
                    return Some(cell);
                }
            }
        }
        None
    }

    pub fn insert(&mut self, key: &[u8], value: u64) -> InsertOutcome {
        let h = self.hasher.hash(key);
        self.insert_hashed(&h, value)
    }

    pub fn lookup(&self, key: &[u8]) -> Option<u64> {
        self.lookup_hashed(&self.hasher.hash(key))
    }

    pub fn remove(&mut self, key: &[u8]) -> bool {
        let h = self.hasher.hash(key);
        self.remove_hashed(&h)
    }

    pub fn insert_hashed(&mut self, h: &KeyHash, value: u64) -> InsertOutcome {
        let fp = self.fingerprint(h);
        if let Some(cell) = self.find(h, fp) {
            self.values[cell] = value;
            return InsertOutcome::Updated;
        }
        let mut best = self.bucket(h, 0);
        for t in 1..self.subtables {
            let b = self.bucket(h, t);
            if self.loads[b] < self.loads[best] {
                best = b;
            }
        }
        let load = self.loads[best] as usize;
        if load == self.cells {
            return InsertOutcome::TableFull;
        }
        let cell = best * self.cells + load;
        self.fps[cell] = fp;
        self.values[cell] = value;
        self.loads[best] += 1;
        self.occupied += 1;
        InsertOutcome::Stored
    }

    pub fn lookup_hashed(&self, h: &KeyHash) -> Option<u64> {
        self.find(h, self.fingerprint(h)).map(|c| self.values[c])
    }

    pub fn remove_hashed(&mut self, h: &KeyHash) -> bool {
        let Some(cell) = self.find(h, self.fingerprint(h)) else {
            return false;
        };
        let b = cell / self.cells;
        let last = b * self.cells + self.loads[b] as usize - 1;
        self.fps[cell] = self.fps[last];
        self.values[cell] = self.values[last];
        self.fps[last] = 0;
        self.values[last] = 0;
        self.loads[b] -= 1;
        self.occupied -= 1;
        true
    }

    /// Adds `inc` to the key's value, storing it if absent.
    pub fn add_hashed(&mut self, h: &KeyHash, inc: u64) -> InsertOutcome {
        let v = self.lookup_hashed(h).unwrap_or(0).saturating_add(inc);
        self.insert_hashed(h, v)
    }

    pub fn clear(&mut self) {
        self.fps.fill(0);
        self.values.fill(0);
        self.loads.fill(0);
        self.occupied = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    #[test]
    fn empty_lookup_is_absent() {
        let t = DLeftHashTable::new(4, 16, 4).unwrap();
        assert_eq!(t.lookup(b"k"), None);
    }

    #[test]
    fn insert_lookup_remove() {
        let mut t = DLeftHashTable::new(4, 16, 4).unwrap();
        assert_eq!(t.insert(b"k", 7), InsertOutcome::Stored);
        assert_eq!(t.lookup(b"k"), Some(7));
        assert_eq!(t.insert(b"k", 9), InsertOutcome::Updated);
        assert_eq!(t.len(), 1);
        assert!(t.remove(b"k"));
        assert_eq!(t.lookup(b"k"), None);
        assert!(!t.remove(b"k"));
    }

    #[test]
    fn fills_until_table_full() {
        let mut t = DLeftHashTable::new(2, 1, 2).unwrap();
        let mut stored = 0;
        for i in 0u32..100 {
            match t.insert(&i.to_le_bytes(), i as u64) {
                InsertOutcome::Stored => stored += 1,
                InsertOutcome::TableFull => break,
                InsertOutcome::Updated => {}
            }
        }
        assert_eq!(stored, 4);
        assert_eq!(t.load_factor(), 1.0);
    }

    #[test]
    fn requires_two_subtables() {
        assert!(DLeftHashTable::new(1, 8, 8).is_err());
        assert!(DLeftHashTable::new(2, 0, 8).is_err());
        assert!(DLeftHashTable::new(2, 8, 0).is_err());
    }

    #[test]
    fn distinct_keys_all_stored() {
        let t = DLeftHashTable::with_hasher(4, 256, 8, Hasher64::new(77)).unwrap();
        let sig = |k: u32| {
            let h = t.hasher.hash(&k.to_le_bytes());
            (t.fingerprint(&h), (0..4).map(|i| t.bucket(&h, i)).collect::<Vec<_>>())
        };
        for a in 0u32..200 {
            let (fa, ba) = sig(a);
            for b in a + 1..200 {
                let (fb, bb) = sig(b);
                assert!(fa != fb || ba.iter().all(|x| !bb.contains(x)), "{a} aliases {b}");
            }
        }
    }

    proptest! {
        #[test]
        fn agrees_with_map_oracle(ops in proptest::collection::vec((0u8..3, 0u32..200, any::<u64>()), 0..500)) {
            // Fixed seed: keys 0..200 never alias (see distinct_keys_all_stored).
            let mut t = DLeftHashTable::with_hasher(4, 256, 8, Hasher64::new(77)).unwrap();
            let mut oracle: HashMap<u32, u64> = HashMap::new();
            for (op, k, v) in ops {
                let key = k.to_le_bytes();
                match op {
                    0 => {
                        let out = t.insert(&key, v);
                        prop_assert_ne!(out, InsertOutcome::TableFull);
                        let expected = if oracle.insert(k, v).is_some() { InsertOutcome::Updated } else { InsertOutcome::Stored };
                        prop_assert_eq!(out, expected);
                    }
                    1 => prop_assert_eq!(t.lookup(&key), oracle.get(&k).copied()),
                    _ => prop_assert_eq!(t.remove(&key), oracle.remove(&k).is_some()),
                }
            }
            prop_assert_eq!(t.len(), oracle.len());
        }
    }
}
