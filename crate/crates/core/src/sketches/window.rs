//! Time scoping for metrics: periodic reset or pane-aggregated sliding windows.

use serde::{Deserialize, Serialize};

use super::hash::{Hasher64, KeyHash};
use super::{Sketch, SketchError};

pub const DEFAULT_PANES: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowMode {
    PeriodicReset,
    Sliding { panes: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub length_ms: u64,
    pub mode: WindowMode,
}

impl WindowSpec {
    pub fn periodic(length_ms: u64) -> Self {
        WindowSpec { length_ms, mode: WindowMode::PeriodicReset }
    }

    pub fn sliding(length_ms: u64, panes: u32) -> Self {
        WindowSpec { length_ms, mode: WindowMode::Sliding { panes } }
    }

    pub fn check(&self) -> Result<(), SketchError> {
        if self.length_ms == 0 {
            return Err(SketchError::Sizing("window length must be > 0 ms".into()));
        }
        if let WindowMode::Sliding { panes } = self.mode {
            if !(1..=64).contains(&panes) {
                return Err(SketchError::Sizing(format!("window panes {panes} not in 1..=64")));
            }
        }
        Ok(())
    }
}

/// A sketch scoped in time. Without a window it accumulates forever.
///
/// Sliding windows keep `p + 1` pane sketches in a ring: the partially filled
/// current pane plus the `p` most recent complete ones, so a query covers
/// between `length` and `length·(1 + 1/p)` of history.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedMetric {
    window: Option<WindowSpec>,
    panes: Vec<Sketch>,
    current: usize,
    epoch: Option<u64>,
    hasher: Hasher64,
}

impl WindowedMetric {
    pub fn new(sketch: Sketch, window: Option<WindowSpec>) -> Result<Self, SketchError> {
        let n = match window {
            Some(w) => {
                w.check()?;
                match w.mode {
                    WindowMode::PeriodicReset => 1,
                    WindowMode::Sliding { panes } => panes as usize + 1,
                }
            }
            None => 1,
        };
        let hasher = *sketch.hasher();
        Ok(WindowedMetric { window, panes: vec![sketch; n], current: 0, epoch: None, hasher })
    }

    pub fn window(&self) -> Option<WindowSpec> {
        self.window
    }

    pub fn hasher(&self) -> &Hasher64 {
        &self.hasher
    }

    /// Advance the window to `now` (microseconds). Time never moves backwards.
    pub fn tick(&mut self, now: u64) {
        let Some(w) = self.window else { return };
        let len_us = w.length_ms as u128 * 1000;
        match w.mode {
            WindowMode::PeriodicReset => {
                let idx = (now as u128 / len_us) as u64;
                match self.epoch {
                    Some(e) if idx > e => {
                        self.panes[0].clear();
                        self.epoch = Some(idx);
                    }
                    None => self.epoch = Some(idx),
                    _ => {}
                }
            }
            WindowMode::Sliding { panes } => {
                let idx = (now as u128 * panes as u128 / len_us) as u64;
                match self.epoch {
                    Some(e) if idx > e => {
                        let ring = self.panes.len();
                        let steps = (idx - e).min(ring as u64) as usize;
                        for _ in 0..steps {
                            self.current = (self.current + 1) % ring;
                            self.panes[self.current].clear();
                        }
                        self.epoch = Some(idx);
                    }
                    None => self.epoch = Some(idx),
                    _ => {}
                }
            }
        }
    }

    pub fn update(&mut self, key: &[u8], inc: u64) {
        let h = self.hasher.hash(key);
        self.update_hashed(&h, inc);
    }

    pub fn query(&self, key: &[u8]) -> f64 {
        self.query_hashed(&self.hasher.hash(key))
    }

    pub fn update_hashed(&mut self, h: &KeyHash, inc: u64) {
        self.panes[self.current].update_hashed(h, inc);
    }

    pub fn query_hashed(&self, h: &KeyHash) -> f64 {
        if self.panes.len() == 1 {
            return self.panes[0].query_hashed(h);
        }
        match &self.panes[0] {
            Sketch::Bloom(_) => {
                if self.panes.iter().any(|p| p.query_hashed(h) > 0.0) {
                    1.0
                } else {
                    0.0
                }
            }
            _ => self.panes.iter().map(|p| p.query_hashed(h)).sum(),
        }
    }

    pub fn clear(&mut self) {
        for p in &mut self.panes {
            p.clear();
        }
    }
}

/// Wrap a sketch in a window.
pub fn window_wrap(sketch: Sketch, spec: WindowSpec) -> Result<WindowedMetric, SketchError> {
    WindowedMetric::new(sketch, Some(spec))
}
