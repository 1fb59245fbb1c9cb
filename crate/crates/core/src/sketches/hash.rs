//! Seeded 64-bit hashing. One base hash per key is double-hashed into as many
//! row/probe positions as a sketch needs.

const M1: u64 = 0x9e37_79b9_7f4a_7c15;
const M2: u64 = 0xbf58_476d_1ce4_e5b9;
const M3: u64 = 0x94d0_49bb_1331_11eb;

#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(M2);
    x ^= x >> 27;
    x = x.wrapping_mul(M3);
    x ^ (x >> 31)
}

/// Maps `x` uniformly onto `0..n` with a multiply-shift.
#[inline]
pub fn reduce(x: u64, n: usize) -> usize {
    ((x as u128 * n as u128) >> 64) as usize
}

/// Base hash of a key, carrying the two halves used for double hashing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyHash {
    pub h1: u64,
    pub h2: u64,
}

impl KeyHash {
    /// The i-th derived position hash.
    #[inline]
    pub fn nth(&self, i: u64) -> u64 {
        mix64(self.h1.wrapping_add(i.wrapping_mul(self.h2)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hasher64 {
    seed: u64,
}

impl Default for Hasher64 {
    fn default() -> Self {
        Hasher64::new(0)
    }
}

impl Hasher64 {
    pub fn new(seed: u64) -> Self {
        Hasher64 { seed: mix64(seed ^ M1) }
    }

    /// Derive an independent hasher, e.g. one per metric.
    pub fn derive(&self, index: u64) -> Self {
        Hasher64 { seed: mix64(self.seed ^ index.wrapping_add(1).wrapping_mul(M1)) }
    }

    pub fn hash(&self, bytes: &[u8]) -> KeyHash {
        let mut acc = self.seed ^ (bytes.len() as u64).wrapping_mul(M1);
        let mut chunks = bytes.chunks_exact(8);
        for c in &mut chunks {
            let w = u64::from_le_bytes(c.try_into().expect("8-byte chunk"));
            acc = (acc ^ w).wrapping_mul(M1).rotate_left(29);
        }
        let rest = chunks.remainder();
        if !rest.is_empty() {
            let mut tail = [0u8; 8];
            tail[..rest.len()].copy_from_slice(rest);
            acc = (acc ^ u64::from_le_bytes(tail)).wrapping_mul(M1).rotate_left(29);
        }
        let h1 = mix64(acc);
        let h2 = mix64(h1 ^ M3) | 1;
        KeyHash { h1, h2 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_change_hashes() {
        let a = Hasher64::new(1).hash(b"10.0.0.1");
        let b = Hasher64::new(2).hash(b"10.0.0.1");
        assert_ne!(a, b);
        assert_eq!(a, Hasher64::new(1).hash(b"10.0.0.1"));
    }

    #[test]
    fn length_is_part_of_the_hash() {
        let h = Hasher64::new(0);
        assert_ne!(h.hash(&[0]), h.hash(&[0, 0]));
        assert_ne!(h.hash(&[]), h.hash(&[0]));
    }

    #[test]
    fn reduce_stays_in_range_and_spreads() {
        let h = Hasher64::new(3);
        let mut buckets = [0u32; 16];
        for i in 0u32..16_000 {
            let k = h.hash(&i.to_be_bytes());
            buckets[reduce(k.nth(0), 16)] += 1;
        }
        for b in buckets {
            assert!((800..1200).contains(&b), "bucket load {b}");
        }
    }
}
