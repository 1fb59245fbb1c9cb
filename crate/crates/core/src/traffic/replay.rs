//! Rate-controlled replay of a packet source into a pipeline.

use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use crossbeam_channel::bounded;

use crate::pipeline::Pipeline;
use crate::xfsm::EmittedAction;

/// Fraction of the offered rate below which a run is flagged.
pub const SUSTAINABLE_FRACTION: f64 = 0.95;
const BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rate {
    Unlimited,
    Pps(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayMode {
    /// Source and pipeline share the calling thread.
    Synchronous,
    /// A reader thread feeds the pipeline through a bounded queue.
    Queued,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayPlan {
    pub rate: Rate,
    pub max_packets: Option<u64>,
    pub max_duration: Option<Duration>,
    /// Drive the timeout clock from trace timestamps instead of the wall clock.
    pub virtual_time: bool,
    pub mode: ReplayMode,
    /// Keep every per-packet processing time for percentile reporting.
    pub record_costs: bool,
}

impl Default for ReplayPlan {
    fn default() -> Self {
        ReplayPlan {
            rate: Rate::Unlimited,
            max_packets: None,
            max_duration: None,
            virtual_time: true,
            mode: ReplayMode::Synchronous,
            record_costs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunStats {
    pub packets: u64,
    pub actions: u64,
    pub wall: Duration,
    /// Time spent inside the pipeline only.
    pub pipeline_time: Duration,
    pub achieved_pps: f64,
    pub offered_pps: Option<f64>,
    pub rate_unsustainable: bool,
    /// Per-packet processing times in nanoseconds, when recorded.
    pub costs_ns: Vec<u32>,
}

impl RunStats {
    /// Mean per-packet pipeline cost; `None` for an empty run.
    pub fn mean_cost_ns(&self) -> Option<f64> {
        (self.packets > 0).then(|| self.pipeline_time.as_nanos() as f64 / self.packets as f64)
    }

    pub fn p95_cost_ns(&self) -> Option<f64> {
        if self.costs_ns.is_empty() {
            return None;
        }
        let mut v = self.costs_ns.clone();
        let idx = ((v.len() as f64 * 0.95).ceil() as usize).clamp(1, v.len()) - 1;
        let (_, x, _) = v.select_nth_unstable(idx);
        Some(*x as f64)
    }
}

/// Token bucket refilled once per millisecond, starting empty so a run never
/// exceeds its offered rate.
struct TokenBucket {
    per_ms: f64,
    burst: f64,
    tokens: f64,
    start: Instant,
    last_ms: u128,
}

impl TokenBucket {
    fn new(rate: f64, start: Instant) -> Self {
        let per_ms = rate / 1000.0;
        TokenBucket { per_ms, burst: per_ms.max(1.0), tokens: 0.0, start, last_ms: 0 }
    }

    fn take(&mut self) {
        loop {
            let ms = self.start.elapsed().as_millis();
            if ms > self.last_ms {
                self.tokens = (self.tokens + (ms - self.last_ms) as f64 * self.per_ms).min(self.burst);
                self.last_ms = ms;
            }
            if self.tokens >= 1.0 {
                self.tokens -= 1.0;
                return;
            }
            let next = self.start + Duration::from_millis(self.last_ms as u64 + 1);
            let now = Instant::now();
            if next > now {
                thread::sleep(next - now);
            }
        }
    }
}

fn wall_us() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_micros() as u64).unwrap_or(0)
}

struct Runner<'a, F> {
    pipeline: &'a mut Pipeline,
    plan: &'a ReplayPlan,
    on_action: F,
    bucket: Option<TokenBucket>,
    start: Instant,
    stats: RunStats,
}

impl<F: FnMut(EmittedAction)> Runner<'_, F> {
    /// Returns false once a cap is reached.
    fn feed(&mut self, ts: u64, frame: &[u8]) -> bool {
        if self.plan.max_packets.is_some_and(|m| self.stats.packets >= m) {
            return false;
        }
        if self.plan.max_duration.is_some_and(|d| self.start.elapsed() >= d) {
            return false;
        }
        if let Some(b) = &mut self.bucket {
            b.take();
        }
        let ts = if self.plan.virtual_time { ts } else { wall_us() };
        let t0 = Instant::now();
        let actions = self.pipeline.process_frame(frame, ts);
        let dt = t0.elapsed();
        self.stats.pipeline_time += dt;
        if self.plan.record_costs {
            self.stats.costs_ns.push(dt.as_nanos().min(u32::MAX as u128) as u32);
        }
        self.stats.packets += 1;
        self.stats.actions += actions.len() as u64;
        for a in actions {
            (self.on_action)(a);
        }
        true
    }
}

/// Replay `source` into `pipeline`, handing every emitted action to
/// `on_action` in emission order.
pub fn replay<I, F>(source: I, pipeline: &mut Pipeline, plan: &ReplayPlan, on_action: F) -> RunStats
where
    I: IntoIterator<Item = (u64, Vec<u8>)>,
    I::IntoIter: Send,
    F: FnMut(EmittedAction),
{
    let start = Instant::now();
    let offered = match plan.rate {
        Rate::Pps(r) if r > 0.0 => Some(r),
        _ => None,
    };
    let mut r = Runner {
        pipeline,
        plan,
        on_action,
        bucket: offered.map(|rate| TokenBucket::new(rate, start)),
        start,
        stats: RunStats {
            packets: 0,
            actions: 0,
            wall: Duration::ZERO,
            pipeline_time: Duration::ZERO,
            achieved_pps: 0.0,
            offered_pps: offered,
            rate_unsustainable: false,
            costs_ns: Vec::new(),
        },
    };
    let source = source.into_iter();
    match plan.mode {
        ReplayMode::Synchronous => {
            for (ts, f) in source {
                if !r.feed(ts, &f) {
                    break;
                }
            }
        }
        ReplayMode::Queued => {
            let (tx, rx) = bounded::<Vec<(u64, Vec<u8>)>>(64);
            thread::scope(|s| {
                s.spawn(move || {
                    let mut batch = Vec::with_capacity(BATCH);
                    for item in source {
                        batch.push(item);
                        if batch.len() == BATCH && tx.send(std::mem::take(&mut batch)).is_err() {
                            return;
                        }
                    }
                    let _ = tx.send(batch);
                });
                'outer: for batch in rx.iter() {
                    for (ts, f) in batch {
                        if !r.feed(ts, &f) {
                            break 'outer;
                        }
                    }
                }
                drop(rx);
            });
        }
    }
    let mut stats = r.stats;
    stats.wall = start.elapsed();
    let secs = stats.wall.as_secs_f64();
    stats.achieved_pps = if secs > 0.0 { stats.packets as f64 / secs } else { 0.0 };
    if let Some(o) = offered {
        stats.rate_unsustainable = stats.packets > 0 && stats.achieved_pps < SUSTAINABLE_FRACTION * o;
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::load;
    use crate::traffic::SyntheticSpec;

    fn program() -> crate::dsl::ProbeProgram {
        load(
            r#"<app name="u" initial="s">
  <event name="u" match="ip.proto == UDP" key="ip.src, l4.sport"/>
  <metric name="c" kind="count_min" epsilon="0.01" delta="0.01"/>
  <feature name="f" expr="c"/>
  <export topic="features.u" kind="features"/>
  <state name="s"><rule when="f == 50 or f == 500"><export topic="features.u"/></rule></state>
</app>"#,
        )
        .unwrap()
    }

    #[test]
    fn modes_produce_identical_logs() {
        let spec = SyntheticSpec::default();
        let mut logs = Vec::new();
        for mode in [ReplayMode::Synchronous, ReplayMode::Queued] {
            let mut p = Pipeline::new(program()).unwrap();
            let mut log = Vec::new();
            let plan = ReplayPlan { mode, ..ReplayPlan::default() };
            let s = replay(spec.generate(5_000).unwrap(), &mut p, &plan, |a| log.push(a));
            assert_eq!(s.packets, 5_000);
            logs.push(log);
        }
        assert!(!logs[0].is_empty());
        assert_eq!(logs[0], logs[1]);
    }

    #[test]
    fn caps_and_empty_runs() {
        let mut p = Pipeline::new(program()).unwrap();
        let plan = ReplayPlan { max_packets: Some(10), ..ReplayPlan::default() };
        let s = replay(SyntheticSpec::default().generate(100).unwrap(), &mut p, &plan, |_| {});
        assert_eq!(s.packets, 10);
        let s = replay(Vec::new(), &mut p, &ReplayPlan::default(), |_| {});
        assert_eq!(s.packets, 0);
        assert_eq!(s.mean_cost_ns(), None);
        assert_eq!(s.p95_cost_ns(), None);
    }

    #[test]
    fn paced_run_does_not_exceed_the_offered_rate() {
        let mut p = Pipeline::new(program()).unwrap();
        let plan = ReplayPlan { rate: Rate::Pps(5_000.0), ..ReplayPlan::default() };
        let s = replay(SyntheticSpec::default().generate(1_000).unwrap(), &mut p, &plan, |_| {});
        assert!(s.wall >= Duration::from_millis(199), "{:?}", s.wall);
        assert!(s.achieved_pps <= 5_000.0);
    }
}
