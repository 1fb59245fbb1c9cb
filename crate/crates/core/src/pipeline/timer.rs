//! Timeout scheduling on a monotone (virtual or wall) clock.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use super::key::EntityKey;
use super::PipelineError;

/// Identifies a scheduled timeout. Handles are issued in schedule order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TimeoutHandle(pub u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeoutEvent {
    pub fire_at: u64,
    pub entity: EntityKey,
    pub tag: u32,
    pub handle: TimeoutHandle,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TimerCounters {
    pub scheduled: u64,
    pub fired: u64,
    pub cancelled: u64,
}

/// Min-heap of pending timeouts ordered by (fire_at, schedule order).
/// Cancellation is lazy: cancelled entries are skipped when popped.
#[derive(Debug, Default)]
pub struct TimerQueue {
    heap: BinaryHeap<Reverse<(u64, u64)>>,
    pending: HashMap<u64, (EntityKey, u32)>,
    next_handle: u64,
    counters: TimerCounters,
}

impl TimerQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn schedule(
        &mut self,
        entity: EntityKey,
        delay_ms: u64,
        tag: u32,
        now: u64,
    ) -> Result<TimeoutHandle, PipelineError> {
        if delay_ms < 1 {
            return Err(PipelineError::InvalidDelay(delay_ms));
        }
        let handle = self.next_handle;
        self.next_handle += 1;
        let fire_at = now.saturating_add(delay_ms.saturating_mul(1000));
        self.heap.push(Reverse((fire_at, handle)));
        self.pending.insert(handle, (entity, tag));
        self.counters.scheduled += 1;
        Ok(TimeoutHandle(handle))
    }

    /// Returns whether the timeout was still pending.
    pub fn cancel(&mut self, handle: TimeoutHandle) -> bool {
        if self.pending.remove(&handle.0).is_some() {
            self.counters.cancelled += 1;
            true
        } else {
            false
        }
    }

    /// Pop every timeout with `fire_at <= now`, in (fire_at, schedule order).
    pub fn advance(&mut self, now: u64) -> Vec<TimeoutEvent> {
        let mut due = Vec::new();
        while let Some(&Reverse((fire_at, handle))) = self.heap.peek() {
            if fire_at > now {
                break;
            }
            self.heap.pop();
            if let Some((entity, tag)) = self.pending.remove(&handle) {
                self.counters.fired += 1;
                due.push(TimeoutEvent { fire_at, entity, tag, handle: TimeoutHandle(handle) });
            }
        }
        due
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn counters(&self) -> TimerCounters {
        self.counters
    }

    pub fn clear(&mut self) {
        self.counters.cancelled += self.pending.len() as u64;
        self.pending.clear();
        self.heap.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn key(n: u8) -> EntityKey {
        EntityKey::new(0, vec![n])
    }

    #[test]
    fn fires_when_clock_reaches_deadline() {
        let mut t = TimerQueue::new();
        t.schedule(key(1), 100, 1, 0).unwrap();
        assert!(t.advance(99_000).is_empty());
        let fired = t.advance(100_000);
        assert_eq!(fired.len(), 1);
        assert_eq!(fired[0].entity, key(1));
        assert_eq!(fired[0].tag, 1);
    }

    #[test]
    fn cancelled_never_fires() {
        let mut t = TimerQueue::new();
        let h = t.schedule(key(1), 10, 0, 0).unwrap();
        assert!(t.cancel(h));
        assert!(!t.cancel(h));
        assert!(t.advance(1_000_000).is_empty());
    }

    #[test]
    fn zero_delay_is_invalid() {
        let mut t = TimerQueue::new();
        assert!(matches!(t.schedule(key(1), 0, 0, 0), Err(PipelineError::InvalidDelay(0))));
    }

    #[test]
    fn random_timeouts_fire_in_sorted_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = TimerQueue::new();
        let mut expected = Vec::new();
        for i in 0..10_000u64 {
            let delay = rng.gen_range(1..=500);
            let h = t.schedule(key((i % 251) as u8), delay, i as u32, 0).unwrap();
            expected.push((delay * 1000, h.0));
        }
        expected.sort();
        let mut fired = Vec::new();
        let mut now = 0;
        while now <= 600_000 {
            now += rng.gen_range(0..7_000);
            fired.extend(t.advance(now).into_iter().map(|e| (e.fire_at, e.handle.0)));
        }
        assert_eq!(fired, expected);
    }

    #[test]
    fn conservation_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = TimerQueue::new();
        let mut handles = Vec::new();
        let mut now = 0;
        for _ in 0..2_000 {
            match rng.gen_range(0..3) {
                0 => handles.push(t.schedule(key(0), rng.gen_range(1..50), 0, now).unwrap()),
                1 if !handles.is_empty() => {
                    let h = handles.swap_remove(rng.gen_range(0..handles.len()));
                    t.cancel(h);
                }
                _ => {
                    now += rng.gen_range(0..5_000);
                    t.advance(now);
                }
            }
            let c = t.counters();
            assert_eq!(c.fired + c.cancelled + t.pending() as u64, c.scheduled);
        }
    }
}
