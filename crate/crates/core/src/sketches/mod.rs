//! Hash-based metric primitives updated on every packet: count-min sketches,
//! Bloom filters and d-left hash tables, each optionally windowed in time.

mod bloom;
mod cms;
mod dleft;
pub mod hash;
mod window;

pub use bloom::BloomFilter;
pub use cms::CountMinSketch;
pub use dleft::{DLeftHashTable, InsertOutcome};
pub use hash::{Hasher64, KeyHash};
pub use window::{window_wrap, WindowMode, WindowSpec, WindowedMetric, DEFAULT_PANES};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SketchError {
    #[error("sizing error: {0}")]
    Sizing(String),
}

/// Metric kind names as used in programs and probe capabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    CountMin,
    Bloom,
    Dleft,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::CountMin, MetricKind::Bloom, MetricKind::Dleft];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::CountMin => "count_min",
            MetricKind::Bloom => "bloom",
            MetricKind::Dleft => "dleft",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        MetricKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Kind-specific sizing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MetricParams {
    CountMin { epsilon: f64, delta: f64, conservative: bool },
    Bloom { bits: u64, hashes: u32 },
    Dleft { subtables: u32, buckets: u32, cells: u32 },
}

impl MetricParams {
    pub fn kind(&self) -> MetricKind {
        match self {
            MetricParams::CountMin { .. } => MetricKind::CountMin,
            MetricParams::Bloom { .. } => MetricKind::Bloom,
            MetricParams::Dleft { .. } => MetricKind::Dleft,
        }
    }

    pub fn check(&self) -> Result<(), SketchError> {
        match *self {
            MetricParams::CountMin { epsilon, delta, .. } => CountMinSketch::dimensions(epsilon, delta).map(|_| ()),
            MetricParams::Bloom { bits, hashes } => BloomFilter::check(bits as usize, hashes),
            MetricParams::Dleft { subtables, buckets, cells } => {
                DLeftHashTable::check(subtables as usize, buckets as usize, cells as usize)
            }
        }
    }

    pub fn build(&self, hasher: Hasher64) -> Result<Sketch, SketchError> {
        Ok(match *self {
            MetricParams::CountMin { epsilon, delta, conservative } => {
                let mut s = CountMinSketch::with_hasher(epsilon, delta, hasher)?;
                s.set_conservative(conservative);
                Sketch::CountMin(s)
            }
            MetricParams::Bloom { bits, hashes } => {
                Sketch::Bloom(BloomFilter::with_hasher(bits as usize, hashes, hasher)?)
            }
            MetricParams::Dleft { subtables, buckets, cells } => Sketch::DLeft(DLeftHashTable::with_hasher(
                subtables as usize,
                buckets as usize,
                cells as usize,
                hasher,
            )?),
        })
    }
}

/// One metric structure. Queries are numeric: estimated count, membership as
/// 0/1, or the stored value (0 when absent).
#[derive(Debug, Clone, PartialEq)]
pub enum Sketch {
    CountMin(CountMinSketch),
    Bloom(BloomFilter),
    DLeft(DLeftHashTable),
}

impl Sketch {
    pub fn hasher(&self) -> &Hasher64 {
        match self {
            Sketch::CountMin(s) => s.hasher(),
            Sketch::Bloom(s) => s.hasher(),
            Sketch::DLeft(s) => s.hasher(),
        }
    }

    pub fn update_hashed(&mut self, h: &KeyHash, inc: u64) {
        match self {
            Sketch::CountMin(s) => s.update_hashed(h, inc),
            Sketch::Bloom(s) => s.insert_hashed(h),
            Sketch::DLeft(s) => {
                // TableFull leaves the table unchanged; queries then read 0.
                let _ = s.add_hashed(h, inc);
            }
        }
    }

    pub fn query_hashed(&self, h: &KeyHash) -> f64 {
        match self {
            Sketch::CountMin(s) => s.query_hashed(h) as f64,
            Sketch::Bloom(s) => {
                if s.contains_hashed(h) {
                    1.0
                } else {
                    0.0
                }
            }
            Sketch::DLeft(s) => s.lookup_hashed(h).unwrap_or(0) as f64,
        }
    }

    pub fn clear(&mut self) {
        match self {
            Sketch::CountMin(s) => s.clear(),
            Sketch::Bloom(s) => s.clear(),
            Sketch::DLeft(s) => s.clear(),
        }
    }
}
