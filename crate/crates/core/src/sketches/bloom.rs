use super::hash::{reduce, Hasher64, KeyHash};
use super::SketchError;

/// Standard Bloom filter over `m` bits with `k` double-hashed probes.
#[derive(Debug, Clone, PartialEq)]
pub struct BloomFilter {
    bits: Vec<u64>,
    m: usize,
    k: u32,
    inserted: u64,
    hasher: Hasher64,
}

impl BloomFilter {
    pub fn new(m: usize, k: u32) -> Result<Self, SketchError> {
        Self::with_hasher(m, k, Hasher64::default())
    }

    pub fn with_hasher(m: usize, k: u32, hasher: Hasher64) -> Result<Self, SketchError> {
        Self::check(m, k)?;
        Ok(BloomFilter { bits: vec![0; m.div_ceil(64)], m, k, inserted: 0, hasher })
    }

    pub fn check(m: usize, k: u32) -> Result<(), SketchError> {
        if m < 8 {
            return Err(SketchError::Sizing(format!("bloom bits {m} < 8")));
        }
        if m > 1 << 32 {
            return Err(SketchError::Sizing(format!("bloom bits {m} exceed 2^32")));
        }
        if !(1..=16).contains(&k) {
            return Err(SketchError::Sizing(format!("bloom hash count {k} not in 1..=16")));
        }
        Ok(())
    }

    pub fn bits(&self) -> usize {
        self.m
    }

    pub fn hashes(&self) -> u32 {
        self.k
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn hasher(&self) -> &Hasher64 {
        &self.hasher
    }

    /// Analytic false-positive probability `(1 − e^(−kn/m))^k`.
    pub fn expected_fp_rate(m: usize, k: u32, n: u64) -> f64 {
        (1.0 - (-(k as f64) * n as f64 / m as f64).exp()).powi(k as i32)
    }

    pub fn insert(&mut self, key: &[u8]) {
        let h = self.hasher.hash(key);
        self.insert_hashed(&h);
    }

    pub fn contains(&self, key: &[u8]) -> bool {
        self.contains_hashed(&self.hasher.hash(key))
    }

    pub fn insert_hashed(&mut self, h: &KeyHash) {
        for i in 0..self.k as u64 {
            let bit = reduce(h.nth(i), self.m);
            self.bits[bit / 64] |= 1 << (bit % 64);
        }
        self.inserted += 1;
    }

    pub fn contains_hashed(&self, h: &KeyHash) -> bool {
        (0..self.k as u64).all(|i| {
            let bit = reduce(h.nth(i), self.m);
            self.bits[bit / 64] & (1 << (bit % 64)) != 0
        })
    }

    pub fn clear(&mut self) {
        self.bits.fill(0);
        self.inserted = 0;
    }
}
