//! Per-packet front end and runtime: frames are parsed, matched against the
//! program's events, keyed to entities, and pushed through the metric,
//! feature and decision stages in that order.

mod key;
mod packet;
mod timer;

pub use key::{derive_key, EntityKey, KeySpec};
pub use packet::{
    build, format_field, parse_field_text, parse_packet, Direction, Field, Layers, PacketView, ETHERTYPE_ARP,
    ETHERTYPE_IPV4, ETH_HEADER_LEN, PROTO_ICMP, PROTO_TCP, PROTO_UDP,
};
pub use timer::{TimeoutEvent, TimeoutHandle, TimerCounters, TimerQueue};

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::dsl::{EventSource, ProbeProgram};
use crate::features::{
    eval_all, eval_condition, eval_feature, EvalContext, FeatureVector, KeyRef, MetricSource, Trigger,
};
use crate::sketches::{Hasher64, SketchError, WindowedMetric};
use crate::xfsm::{step, Effect, EmittedAction, EntityRecord, StepInput};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("frame of {0} bytes is shorter than an Ethernet header")]
    TruncatedFrame(usize),
    #[error("packet has no {0} field")]
    MissingLayer(Field),
    #[error("timeout delay {0} ms is below 1 ms")]
    InvalidDelay(u64),
    #[error("metric construction failed: {0}")]
    Sketch(#[from] SketchError),
}

/// Pipeline stages, reported to an optional observer as they run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Event(u32),
    Metric(u32),
    Feature,
    Decision,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PipelineCounters {
    pub packets: u64,
    pub truncated: u64,
    pub events_matched: u64,
    pub actions_emitted: u64,
    pub timeouts_fired: u64,
    pub stale_timeouts: u64,
    pub evictions: u64,
    pub remote_triggers: u64,
}

/// A trigger injected from a remote probe's published message.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteTrigger {
    pub event: u32,
    pub key: EntityKey,
    /// Indexed by the program's input table; `None` when absent.
    pub inputs: Vec<Option<f64>>,
    pub ts: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntitySnapshot {
    pub key: EntityKey,
    pub key_text: String,
    pub event: String,
    pub state: String,
    pub registers: Vec<f64>,
    pub last_seen: u64,
}

struct Slot {
    record: EntityRecord,
    stamp: u64,
}

/// Answers feature-level metric queries for the entity being processed.
struct MetricView<'a> {
    metrics: &'a [WindowedMetric],
    primary: &'a [u8],
    secondary: &'a [(u32, Vec<u8>)],
    packet: Option<&'a PacketView>,
}

impl MetricSource for MetricView<'_> {
    fn query(&self, metric: u32, key: &KeyRef) -> Option<f64> {
        let m = self.metrics.get(metric as usize)?;
        match key {
            KeyRef::Primary => Some(m.query(self.primary)),
            KeyRef::Secondary(id) => {
                let (_, bytes) = self.secondary.iter().find(|(s, _)| s == id)?;
                Some(m.query(bytes))
            }
            KeyRef::Fields(spec) => {
                let mut buf = Vec::with_capacity(spec.width());
                spec.encode(self.packet?, &mut buf).ok()?;
                Some(m.query(&buf))
            }
        }
    }
}

type Observer = Box<dyn FnMut(Stage) + Send>;

/// One single-threaded pipeline instance running an installed program.
pub struct Pipeline {
    program: ProbeProgram,
    metrics: Vec<WindowedMetric>,
    metrics_by_event: Vec<Vec<u32>>,
    entities: HashMap<EntityKey, Slot>,
    lru: BTreeMap<u64, EntityKey>,
    stamp: u64,
    timers: TimerQueue,
    clock: u64,
    counters: PipelineCounters,
    observer: Option<Observer>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("program", &self.program.name)
            .field("version", &self.program.version)
            .field("entities", &self.entities.len())
            .field("clock", &self.clock)
            .finish()
    }
}

fn build_metrics(program: &ProbeProgram) -> Result<(Vec<WindowedMetric>, Vec<Vec<u32>>), PipelineError> {
    let base = Hasher64::new(program.seed);
    let mut metrics = Vec::with_capacity(program.metrics.len());
    let mut by_event = vec![Vec::new(); program.events.len()];
    for (i, m) in program.metrics.iter().enumerate() {
        let sketch = m.params.build(base.derive(i as u64))?;
        metrics.push(WindowedMetric::new(sketch, m.window)?);
        for &e in &m.events {
            if let Some(v) = by_event.get_mut(e as usize) {
                v.push(i as u32);
            }
        }
    }
    Ok((metrics, by_event))
}

impl Pipeline {
    pub fn new(program: ProbeProgram) -> Result<Self, PipelineError> {
        let (metrics, metrics_by_event) = build_metrics(&program)?;
        Ok(Pipeline {
            program,
            metrics,
            metrics_by_event,
            entities: HashMap::new(),
            lru: BTreeMap::new(),
            stamp: 0,
            timers: TimerQueue::new(),
            clock: 0,
            counters: PipelineCounters::default(),
            observer: None,
        })
    }

    /// Replace the running program. All entity, metric and timer state is
    /// discarded; the clock is kept.
    pub fn install(&mut self, program: ProbeProgram) -> Result<(), PipelineError> {
        let (metrics, metrics_by_event) = build_metrics(&program)?;
        self.program = program;
        self.metrics = metrics;
        self.metrics_by_event = metrics_by_event;
        self.entities.clear();
        self.lru.clear();
        self.timers.clear();
        Ok(())
    }

    pub fn program(&self) -> &ProbeProgram {
        &self.program
    }

    pub fn counters(&self) -> PipelineCounters {
        self.counters
    }

    pub fn timer_counters(&self) -> TimerCounters {
        self.timers.counters()
    }

    pub fn pending_timeouts(&self) -> usize {
        self.timers.pending()
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn set_observer(&mut self, f: impl FnMut(Stage) + Send + 'static) {
        self.observer = Some(Box::new(f));
    }

    fn observe(&mut self, s: Stage) {
        if let Some(o) = &mut self.observer {
            o(s);
        }
    }

    pub fn entity(&self, key: &EntityKey) -> Option<&EntityRecord> {
        self.entities.get(key).map(|s| &s.record)
    }

    /// Query a metric directly by raw key bytes.
    pub fn query_metric(&self, metric: u32, key: &[u8]) -> Option<f64> {
        self.metrics.get(metric as usize).map(|m| m.query(key))
    }

    /// Every event whose predicate holds for `pkt`, in declaration order,
    /// with its primary key. Events whose key cannot be derived are skipped.
    pub fn match_events(&self, pkt: &PacketView) -> Vec<(u32, EntityKey)> {
        match_events(pkt, &self.program)
    }

    /// Parse a raw frame and process it. Truncated frames are counted and
    /// otherwise ignored.
    pub fn process_frame(&mut self, frame: &[u8], ts: u64) -> Vec<EmittedAction> {
        match parse_packet(frame, ts) {
            Ok(p) => self.process_packet(&p),
            Err(_) => {
                self.counters.truncated += 1;
                self.advance_clock(ts)
            }
        }
    }

    pub fn process_packet(&mut self, pkt: &PacketView) -> Vec<EmittedAction> {
        self.counters.packets += 1;
        let mut out = self.advance_clock(pkt.capture_ts);
        let matches = self.match_events(pkt);
        for (e, key) in matches {
            self.counters.events_matched += 1;
            self.observe(Stage::Event(e));
            let secondary = self.secondary_keys(e, pkt);
            self.trigger(key, Trigger::Event(e), Some(pkt), &secondary, &[], &mut out);
        }
        self.counters.actions_emitted += out.len() as u64;
        out
    }

    /// Process a trigger translated from a remote message.
    pub fn process_remote(&mut self, t: &RemoteTrigger) -> Vec<EmittedAction> {
        self.counters.remote_triggers += 1;
        let mut out = self.advance_clock(t.ts);
        if (t.event as usize) < self.program.events.len() {
            self.observe(Stage::Event(t.event));
            let mut inputs = t.inputs.clone();
            inputs.resize(self.program.inputs.len(), None);
            self.trigger(t.key.clone(), Trigger::Event(t.event), None, &[], &inputs, &mut out);
        }
        self.counters.actions_emitted += out.len() as u64;
        out
    }

    /// Move the clock forward (never backwards), rolling metric windows and
    /// firing due timeouts.
    pub fn advance_clock(&mut self, now: u64) -> Vec<EmittedAction> {
        if now > self.clock {
            self.clock = now;
        }
        let now = self.clock;
        for m in &mut self.metrics {
            m.tick(now);
        }
        let mut out = Vec::new();
        for ev in self.timers.advance(now) {
            let live = self
                .entities
                .get_mut(&ev.entity)
                .and_then(|s| {
                    let pos = s.record.pending_timeouts.iter().position(|(h, _)| *h == ev.handle)?;
                    s.record.pending_timeouts.remove(pos);
                    Some(())
                })
                .is_some();
            if !live {
                self.counters.stale_timeouts += 1;
                continue;
            }
            self.counters.timeouts_fired += 1;
            self.run_step(&ev.entity, Trigger::Timeout(ev.tag), None, &[], &[], &mut out);
        }
        self.counters.actions_emitted += out.len() as u64;
        out
    }

    fn secondary_keys(&self, e: u32, pkt: &PacketView) -> Vec<(u32, Vec<u8>)> {
        match &self.program.events[e as usize].source {
            EventSource::Packet { secondary, .. } => secondary
                .iter()
                .filter_map(|(id, spec)| {
                    let mut b = Vec::with_capacity(spec.width());
                    spec.encode(pkt, &mut b).ok().map(|_| (*id, b))
                })
                .collect(),
            EventSource::Remote { .. } => Vec::new(),
        }
    }

    fn trigger(
        &mut self,
        key: EntityKey,
        trigger: Trigger,
        pkt: Option<&PacketView>,
        secondary: &[(u32, Vec<u8>)],
        inputs: &[Option<f64>],
        out: &mut Vec<EmittedAction>,
    ) {
        let now = self.clock;
        if let Some(slot) = self.entities.get_mut(&key) {
            self.lru.remove(&slot.stamp);
            self.stamp += 1;
            slot.stamp = self.stamp;
            slot.record.last_seen = now;
            self.lru.insert(self.stamp, key.clone());
        } else {
            while self.entities.len() as u64 >= self.program.entity_capacity.max(1) {
                self.evict_oldest(out);
            }
            self.stamp += 1;
            let record = EntityRecord::new(key.clone(), &self.program.xfsm, now);
            self.entities.insert(key.clone(), Slot { record, stamp: self.stamp });
            self.lru.insert(self.stamp, key.clone());
        }

        if let Trigger::Event(e) = trigger {
            let ids = self.metrics_by_event[e as usize].clone();
            for m in ids {
                self.observe(Stage::Metric(m));
                self.update_metric(m, &key, pkt, secondary, inputs);
            }
        }
        self.run_step(&key, trigger, pkt, secondary, inputs, out);
    }

    fn update_metric(
        &mut self,
        m: u32,
        key: &EntityKey,
        pkt: Option<&PacketView>,
        secondary: &[(u32, Vec<u8>)],
        inputs: &[Option<f64>],
    ) {
        let spec = &self.program.metrics[m as usize];
        let inc = match &spec.inc {
            None => 1,
            Some(expr) => {
                let ctx = EvalContext {
                    metrics: &crate::features::NoMetrics,
                    registers: &[],
                    packet: pkt,
                    inputs,
                    trigger: Trigger::Evicted,
                    now: self.clock,
                };
                match eval_feature(expr, &ctx, &FeatureVector::default()) {
                    Ok(v) if v >= 0.5 => v.round() as u64,
                    _ => return,
                }
            }
        };
        let mut buf = Vec::new();
        let bytes: &[u8] = match &spec.key {
            KeyRef::Primary => &key.key_bytes,
            KeyRef::Secondary(id) => match secondary.iter().find(|(s, _)| s == id) {
                Some((_, b)) => b,
                None => return,
            },
            KeyRef::Fields(ks) => {
                let Some(p) = pkt else { return };
                if ks.encode(p, &mut buf).is_err() {
                    return;
                }
                &buf
            }
        };
        self.metrics[m as usize].update(bytes, inc);
    }

    fn run_step(
        &mut self,
        key: &EntityKey,
        trigger: Trigger,
        pkt: Option<&PacketView>,
        secondary: &[(u32, Vec<u8>)],
        inputs: &[Option<f64>],
        out: &mut Vec<EmittedAction>,
    ) {
        self.observe(Stage::Feature);
        let Some(slot) = self.entities.get_mut(key) else { return };
        let view = MetricView { metrics: &self.metrics, primary: &key.key_bytes, secondary, packet: pkt };
        let ctx = EvalContext {
            metrics: &view,
            registers: &slot.record.registers,
            packet: pkt,
            inputs,
            trigger,
            now: self.clock,
        };
        let features = eval_all(&self.program.features, &ctx);
        let entity_text = entity_text(&self.program, key);
        let input =
            StepInput { metrics: &view, packet: pkt, inputs, trigger, now: self.clock, entity_text: &entity_text };
        if let Some(o) = &mut self.observer {
            o(Stage::Decision);
        }
        let result = step(&self.program.xfsm, &mut slot.record, &features, &input);
        out.extend(result.emitted);
        self.apply(key, result.effects);
    }

    fn apply(&mut self, key: &EntityKey, effects: Vec<Effect>) {
        let mut drop_entity = false;
        for eff in effects {
            match eff {
                Effect::Schedule { delay_ms, tag } => {
                    if let Ok(h) = self.timers.schedule(key.clone(), delay_ms, tag, self.clock) {
                        if let Some(s) = self.entities.get_mut(key) {
                            s.record.pending_timeouts.push((h, tag));
                        }
                    }
                }
                Effect::Cancel { tag } => {
                    if let Some(s) = self.entities.get_mut(key) {
                        let timers = &mut self.timers;
                        s.record.pending_timeouts.retain(|&(h, t)| {
                            if tag.is_none() || tag == Some(t) {
                                timers.cancel(h);
                                false
                            } else {
                                true
                            }
                        });
                    }
                }
                Effect::ResetMetrics(ids) => {
                    for m in ids {
                        if let Some(x) = self.metrics.get_mut(m as usize) {
                            x.clear();
                        }
                    }
                }
                Effect::Drop => drop_entity = true,
            }
        }
        if drop_entity {
            self.remove_entity(key);
        }
    }

    fn remove_entity(&mut self, key: &EntityKey) {
        if let Some(slot) = self.entities.remove(key) {
            self.lru.remove(&slot.stamp);
            for (h, _) in slot.record.pending_timeouts {
                self.timers.cancel(h);
            }
        }
    }

    fn evict_oldest(&mut self, out: &mut Vec<EmittedAction>) {
        let Some((_, key)) = self.lru.pop_first() else { return };
        self.counters.evictions += 1;
        // Re-insert so the step sees a live entity, then remove for good.
        if let Some(slot) = self.entities.get(&key) {
            self.lru.insert(slot.stamp, key.clone());
        }
        self.run_step(&key, Trigger::Evicted, None, &[], &[], out);
        self.remove_entity(&key);
    }

    /// All live entities, ordered by key.
    pub fn snapshot_entities(&self) -> Vec<EntitySnapshot> {
        let mut v: Vec<EntitySnapshot> = self
            .entities
            .values()
            .map(|s| {
                let r = &s.record;
                EntitySnapshot {
                    key: r.key.clone(),
                    key_text: entity_text(&self.program, &r.key),
                    event: self
                        .program
                        .events
                        .get(r.key.event_index as usize)
                        .map(|e| e.name.clone())
                        .unwrap_or_default(),
                    state: self.program.xfsm.state_name(r.state).to_string(),
                    registers: r.registers.clone(),
                    last_seen: r.last_seen,
                }
            })
            .collect();
        v.sort_by(|a, b| a.key.cmp(&b.key));
        v
    }
}

/// Text form of an entity key, using its event's key layout.
pub fn entity_text(program: &ProbeProgram, key: &EntityKey) -> String {
    match program.events.get(key.event_index as usize).map(|e| &e.source) {
        Some(EventSource::Packet { primary, .. }) => primary.format(&key.key_bytes),
        Some(EventSource::Remote { key: spec, .. }) => spec.format(&key.key_bytes),
        None => key.to_string(),
    }
}

/// Every packet event whose predicate holds, in declaration order, with its
/// primary key. Predicates reading absent fields are false.
pub fn match_events(pkt: &PacketView, program: &ProbeProgram) -> Vec<(u32, EntityKey)> {
    let mut out = Vec::new();
    let ctx = EvalContext { packet: Some(pkt), ..EvalContext::bare(Trigger::Evicted, pkt.capture_ts) };
    let none = FeatureVector::default();
    for (i, ev) in program.events.iter().enumerate() {
        if let EventSource::Packet { predicate, primary, .. } = &ev.source {
            if eval_condition(predicate, &ctx, &none) {
                if let Ok(k) = derive_key(pkt, primary, i as u32) {
                    out.push((i as u32, k));
                }
            }
        }
    }
    out
}
