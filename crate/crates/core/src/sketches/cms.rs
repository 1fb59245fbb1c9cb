use super::hash::{reduce, Hasher64, KeyHash};
use super::SketchError;

/// Count-min sketch with `depth` rows of `width` counters.
///
/// Estimates never undercount. With `w = ceil(e/ε)` and `d = ceil(ln(1/δ))`
/// an estimate exceeds the true count by more than `ε·N` with probability at
/// most `δ`, where `N` is the sum of all increments.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMinSketch {
    width: usize,
    depth: usize,
    counters: Vec<u64>,
    total: u64,
    conservative: bool,
    hasher: Hasher64,
}

impl CountMinSketch {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self, SketchError> {
        Self::with_hasher(epsilon, delta, Hasher64::default())
    }

    pub fn with_hasher(epsilon: f64, delta: f64, hasher: Hasher64) -> Result<Self, SketchError> {
        let (width, depth) = Self::dimensions(epsilon, delta)?;
        Ok(Self::with_dimensions(width, depth, hasher))
    }

    /// Width and depth for an (ε, δ) guarantee.
    pub fn dimensions(epsilon: f64, delta: f64) -> Result<(usize, usize), SketchError> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(SketchError::Sizing(format!("epsilon {epsilon} not in (0,1)")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(SketchError::Sizing(format!("delta {delta} not in (0,1)")));
        }
        let width = (std::f64::consts::E / epsilon).ceil() as usize;
        let depth = ((1.0 / delta).ln().ceil() as usize).max(1);
        if width.saturating_mul(depth) > 1 << 28 {
            return Err(SketchError::Sizing(format!("{width}x{depth} counters exceed the size limit")));
        }
        Ok((width, depth))
    }

    pub fn with_dimensions(width: usize, depth: usize, hasher: Hasher64) -> Self {
        CountMinSketch { width, depth, counters: vec![0; width * depth], total: 0, conservative: false, hasher }
    }

    /// Conservative update only raises counters up to the new estimate.
    pub fn set_conservative(&mut self, on: bool) {
        self.conservative = on;
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn hasher(&self) -> &Hasher64 {
        &self.hasher
    }

    pub fn update(&mut self, key: &[u8], inc: u64) {
        let h = self.hasher.hash(key);
        self.update_hashed(&h, inc);
    }

    pub fn query(&self, key: &[u8]) -> u64 {
        self.query_hashed(&self.hasher.hash(key))
    }

    #[inline]
    fn slot(&self, h: &KeyHash, row: usize) -> usize {
        row * self.width + reduce(h.nth(row as u64), self.width)
    }

    pub fn update_hashed(&mut self, h: &KeyHash, inc: u64) {
        self.total = self.total.saturating_add(inc);
        if self.conservative {
            let target = self.query_hashed(h).saturating_add(inc);
            for row in 0..self.depth {
                let s = self.slot(h, row);
                if self.counters[s] < target {
                    self.counters[s] = target;
                }
            }
        } else {
            for row in 0..self.depth {
                let s = self.slot(h, row);
                self.counters[s] = self.counters[s].saturating_add(inc);
            }
        }
    }

    pub fn query_hashed(&self, h: &KeyHash) -> u64 {
        (0..self.depth).map(|row| self.counters[self.slot(h, row)]).min().unwrap_or(0)
    }

    pub fn clear(&mut self) {
        self.counters.fill(0);
        self.total = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    #[test]
    fn fresh_sketch_reads_zero() {
        let s = CountMinSketch::new(0.01, 0.01).unwrap();
        assert_eq!(s.query(b"anything"), 0);
    }

    #[test]
    fn single_key_is_exact() {
        let mut s = CountMinSketch::new(0.01, 0.01).unwrap();
        s.update(b"k", 5);
        assert_eq!(s.query(b"k"), 5);
        assert_eq!(s.total(), 5);
    }

    #[test]
    fn dimensions_follow_epsilon_delta() {
        let s = CountMinSketch::new(0.01, 0.01).unwrap();
        assert_eq!(s.width(), 272);
        assert_eq!(s.depth(), 5);
    }

    #[test]
    fn out_of_range_parameters_are_sizing_errors() {
        for (e, d) in [(0.0, 0.1), (1.0, 0.1), (0.1, 0.0), (0.1, 1.5), (f64::NAN, 0.1)] {
            assert!(matches!(CountMinSketch::new(e, d), Err(SketchError::Sizing(_))));
        }
    }

    proptest! {
        #[test]
        fn never_undercounts(updates in proptest::collection::vec((0u16..64, 1u64..10), 0..400), conservative in any::<bool>()) {
            let mut s = CountMinSketch::with_hasher(0.1, 0.1, Hasher64::new(9)).unwrap();
            s.set_conservative(conservative);
            let mut exact: HashMap<u16, u64> = HashMap::new();
            for (k, inc) in &updates {
                s.update(&k.to_be_bytes(), *inc);
                *exact.entry(*k).or_default() += inc;
            }
            for k in 0u16..64 {
                let truth = exact.get(&k).copied().unwrap_or(0);
                prop_assert!(s.query(&k.to_be_bytes()) >= truth);
            }
        }
    }
}
