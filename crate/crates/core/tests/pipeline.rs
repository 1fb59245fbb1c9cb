use std::collections::VecDeque;
use std::net::Ipv4Addr;
use std::path::Path;
use std::sync::{Arc, Mutex};

use dstreamon::dsl::{load, ProbeProgram};
use dstreamon::pipeline::build::{arp_frame, ipv4_frame, L4};
use dstreamon::pipeline::{
    derive_key, parse_packet, EntityKey, Field, KeySpec, Layers, Pipeline, PipelineError, Stage, TimerQueue,
};
use dstreamon::xfsm::EmittedAction;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SYN: u8 = 0x02;
const ACK: u8 = 0x10;

fn synflood() -> ProbeProgram {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/apps/valid/synflood.smon.xml");
    load(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn tcp(src: [u8; 4], flags: u8) -> Vec<u8> {
    ipv4_frame(
        [2; 6],
        [4; 6],
        Ipv4Addr::from(src),
        Ipv4Addr::new(192, 168, 0, 1),
        L4::Tcp { sport: 40000, dport: 80, flags },
        100,
    )
}

fn udp(src: [u8; 4], dst: [u8; 4], sport: u16, dport: u16) -> Vec<u8> {
    ipv4_frame([2; 6], [4; 6], Ipv4Addr::from(src), Ipv4Addr::from(dst), L4::Udp { sport, dport }, 100)
}

#[test]
fn udp_frame_header_arithmetic() {
    let p = parse_packet(&udp([10, 0, 0, 1], [10, 0, 0, 2], 5001, 5001), 7).unwrap();
    assert_eq!(p.ip_proto, 17);
    assert_eq!(p.l4_sport, 5001);
    assert_eq!(p.payload_len, 100 - 14 - 20 - 8);
    assert!(p.valid_layers.contains(Layers::L4));
}

#[test]
fn arp_and_truncated_frames() {
    let p = parse_packet(&arp_frame([1; 6]), 0).unwrap();
    assert_eq!(p.eth_type, 0x0806);
    assert!(!p.valid_layers.contains(Layers::L3));
    let key = KeySpec::new(vec![Field::L4Sport]);
    assert_eq!(derive_key(&p, &key, 0), Err(PipelineError::MissingLayer(Field::L4Sport)));
    assert_eq!(parse_packet(&[0u8; 13], 0), Err(PipelineError::TruncatedFrame(13)));
}

#[test]
fn ip_total_length_beyond_capture_is_malformed_l3() {
    let mut f = udp([10, 0, 0, 1], [10, 0, 0, 2], 1, 2);
    f.truncate(60);
    let p = parse_packet(&f, 0).unwrap();
    assert!(p.malformed_l3);
    assert!(!p.valid_layers.contains(Layers::L3));
    assert!(p.valid_layers.contains(Layers::L2));
}

#[test]
fn first_syn_creates_idle_entity_with_count_one() {
    let mut pl = Pipeline::new(synflood()).unwrap();
    let out = pl.process_frame(&tcp([10, 0, 0, 9], SYN), 1_000_000);
    assert!(out.is_empty());
    let key = EntityKey::new(0, vec![10, 0, 0, 9]);
    let rec = pl.entity(&key).expect("entity created");
    assert_eq!(pl.program().xfsm.state_name(rec.state), "idle");
    assert_eq!(pl.query_metric(0, &[10, 0, 0, 9]), Some(1.0));
}

/// Independent oracle: SYN count for the source over the trailing second.
fn oracle_first_alert(times: &[u64], threshold: usize) -> Option<usize> {
    let mut win: VecDeque<u64> = VecDeque::new();
    for (i, &t) in times.iter().enumerate() {
        win.push_back(t);
        while let Some(&f) = win.front() {
            if f + 1_000_000 <= t {
                win.pop_front();
            } else {
                break;
            }
        }
        if win.len() > threshold {
            return Some(i);
        }
    }
    None
}

#[test]
fn hundred_and_first_syn_raises_the_alert() {
    let mut pl = Pipeline::new(synflood()).unwrap();
    let times: Vec<u64> = (0..150).map(|i| 5_000_000 + i * 4_000).collect();
    let mut alerts = Vec::new();
    for (i, &t) in times.iter().enumerate() {
        for a in pl.process_frame(&tcp([10, 0, 0, 9], SYN), t) {
            alerts.push((i, a));
        }
    }
    assert_eq!(alerts.len(), 1);
    assert_eq!(Some(alerts[0].0), oracle_first_alert(&times, 100));
    assert_eq!(alerts[0].0, 100);
    let a = &alerts[0].1;
    assert_eq!(a.topic, "alerts.synflood");
    assert_eq!(a.entity_text, "10.0.0.9");
    assert_eq!(a.message.as_deref(), Some("SYN flood from 10.0.0.9: 101 SYN/s"));
}

#[test]
fn unmatched_packet_mutates_nothing() {
    let mut pl = Pipeline::new(synflood()).unwrap();
    assert!(pl.process_frame(&udp([1, 1, 1, 1], [2, 2, 2, 2], 1, 2), 10).is_empty());
    assert!(pl.process_frame(&tcp([1, 1, 1, 1], SYN | ACK), 20).is_empty());
    assert_eq!(pl.entity_count(), 0);
    assert_eq!(pl.counters().events_matched, 0);
    assert_eq!(pl.query_metric(0, &[1, 1, 1, 1]), Some(0.0));
}

#[test]
fn two_matching_events_run_in_declaration_order() {
    let prog = load(
        r#"<app name="two" initial="s">
  <event name="any_tcp" match="ip.proto == TCP" key="ip.src"/>
  <event name="syn" match="tcp.flags & SYN != 0" key="ip.src"/>
  <state name="s"/>
</app>"#,
    )
    .unwrap();
    let p = parse_packet(&tcp([1, 2, 3, 4], SYN), 0).unwrap();
    let m = dstreamon::pipeline::match_events(&p, &prog);
    assert_eq!(m.iter().map(|(e, _)| *e).collect::<Vec<_>>(), vec![0, 1]);
    let u = parse_packet(&udp([1, 2, 3, 4], [5, 6, 7, 8], 1, 2), 0).unwrap();
    assert!(dstreamon::pipeline::match_events(&u, &prog).is_empty());
}

#[test]
fn stages_run_in_order_for_every_packet() {
    let log = Arc::new(Mutex::new(Vec::new()));
    let mut pl = Pipeline::new(synflood()).unwrap();
    let sink = log.clone();
    pl.set_observer(move |s| sink.lock().unwrap().push(s));
    for i in 0..20u64 {
        pl.process_frame(&tcp([10, 0, 0, (i % 3) as u8], SYN), i * 1000);
    }
    let log = log.lock().unwrap();
    assert_eq!(log.len(), 20 * 4);
    for chunk in log.chunks(4) {
        assert_eq!(chunk, &[Stage::Event(0), Stage::Metric(0), Stage::Feature, Stage::Decision]);
    }
}

#[test]
fn feature_sees_the_current_packet_update() {
    let prog = load(
        r#"<app name="see" initial="s">
  <event name="e" match="true" key="ip.src"/>
  <metric name="c" kind="count_min" epsilon="0.01" delta="0.01"/>
  <feature name="f" expr="c"/>
  <export topic="alerts.see"/>
  <state name="s"><rule when="f == 1"><alert topic="alerts.see" message="{f}"/></rule></state>
</app>"#,
    )
    .unwrap();
    let mut pl = Pipeline::new(prog).unwrap();
    let out = pl.process_frame(&udp([9, 9, 9, 9], [1, 1, 1, 1], 1, 1), 0);
    assert_eq!(out.len(), 1);
    assert!(pl.process_frame(&udp([9, 9, 9, 9], [1, 1, 1, 1], 1, 1), 1).is_empty());
}

fn random_trace(seed: u64, n: usize) -> Vec<(u64, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0u64;
    (0..n)
        .map(|_| {
            t += rng.gen_range(0..2_000);
            let src = [10, 0, 0, rng.gen_range(0..4)];
            let frame = match rng.gen_range(0..4) {
                0 => udp(src, [10, 0, 1, 1], 5, 6),
                1 => tcp(src, SYN | ACK),
                _ => tcp(src, SYN),
            };
            (t, frame)
        })
        .collect()
}

fn run(prog: ProbeProgram, trace: &[(u64, Vec<u8>)]) -> Vec<EmittedAction> {
    let mut pl = Pipeline::new(prog).unwrap();
    let mut out = Vec::new();
    for (t, f) in trace {
        out.extend(pl.process_frame(f, *t));
    }
    out.extend(pl.advance_clock(trace.last().map(|x| x.0).unwrap_or(0) + 60_000_000));
    out
}

#[test]
fn identical_input_gives_identical_actions() {
    let trace = random_trace(3, 5_000);
    let a = run(synflood(), &trace);
    let b = run(synflood(), &trace);
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn least_recently_seen_entity_is_evicted_with_a_hook() {
    let prog = load(
        r#"<app name="ev" initial="s" capacity="2">
  <event name="p" match="ip.proto == UDP" key="ip.src"/>
  <export topic="alerts.evicted"/>
  <state name="s">
    <rule when="evicted()"><alert topic="alerts.evicted" message="bye {entity}"/></rule>
    <rule when="event(p)"><schedule delay="1000" tag="2"/></rule>
  </state>
</app>"#,
    )
    .unwrap();
    let mut pl = Pipeline::new(prog).unwrap();
    let f = |s: u8| udp([10, 0, 0, s], [1, 1, 1, 1], 1, 2);
    assert!(pl.process_frame(&f(1), 0).is_empty());
    assert!(pl.process_frame(&f(2), 10).is_empty());
    assert!(pl.process_frame(&f(1), 20).is_empty());
    let out = pl.process_frame(&f(3), 30);
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].message.as_deref(), Some("bye 10.0.0.2"));
    assert_eq!(pl.entity_count(), 2);
    assert_eq!(pl.counters().evictions, 1);
    // The evicted entity's timer never fires; a returning source starts fresh.
    assert!(pl.entity(&EntityKey::new(0, vec![10, 0, 0, 2])).is_none());
    pl.advance_clock(10_000_000);
    assert_eq!(pl.counters().timeouts_fired, 3);
    let tc = pl.timer_counters();
    assert_eq!(tc.fired + tc.cancelled + pl.pending_timeouts() as u64, tc.scheduled);
}

#[test]
fn timeouts_fire_on_the_boundary() {
    let mut q = TimerQueue::new();
    let k = EntityKey::new(0, vec![1]);
    q.schedule(k.clone(), 100, 1, 0).unwrap();
    assert!(q.advance(99_000).is_empty());
    let ev = q.advance(100_000);
    assert_eq!(ev.len(), 1);
    assert_eq!((ev[0].tag, &ev[0].entity), (1, &k));
    let h = q.schedule(k.clone(), 5, 1, 100_000).unwrap();
    assert!(q.cancel(h));
    assert!(q.advance(1_000_000).is_empty());
    assert_eq!(q.schedule(k, 0, 1, 0), Err(PipelineError::InvalidDelay(0)));
}

#[test]
fn ten_thousand_timeouts_fire_in_sorted_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut q = TimerQueue::new();
    let mut expected = Vec::new();
    let mut now = 0u64;
    let mut fired = Vec::new();
    for i in 0..10_000u64 {
        let delay = rng.gen_range(1..500);
        let h = q.schedule(EntityKey::new(0, i.to_be_bytes().to_vec()), delay, 0, now).unwrap();
        expected.push((now + delay * 1000, h));
        if i % 7 == 0 {
            now += rng.gen_range(0..50_000);
            fired.extend(q.advance(now).into_iter().map(|e| (e.fire_at, e.handle)));
        }
    }
    fired.extend(q.advance(u64::MAX).into_iter().map(|e| (e.fire_at, e.handle)));
    expected.sort();
    let mut sorted_fired = fired.clone();
    sorted_fired.sort();
    assert_eq!(sorted_fired, expected);
    // Each advance batch is itself ordered, and batches never go backwards.
    assert!(fired.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn pipeline_timeout_conservation_over_a_trace() {
    let mut pl = Pipeline::new(synflood()).unwrap();
    let mut t = 0;
    for (i, (ts, f)) in random_trace(5, 3_000).into_iter().enumerate() {
        // Bursts push sources over the threshold so timers get scheduled and cancelled.
        let burst = if i % 500 < 150 { 0 } else { ts };
        t = t.max(burst + i as u64 * 10);
        pl.process_frame(&f, t);
        let c = pl.timer_counters();
        assert_eq!(c.fired + c.cancelled + pl.pending_timeouts() as u64, c.scheduled);
    }
    assert!(pl.timer_counters().scheduled > 0);
}

proptest! {
    #[test]
    fn bidirectional_keys_are_symmetric(a in any::<u32>(), b in any::<u32>(), sp in any::<u16>(), dp in any::<u16>()) {
        let spec = KeySpec::bidirectional(vec![Field::IpSrc, Field::IpDst, Field::L4Sport, Field::L4Dport]);
        let fwd = parse_packet(&udp(a.to_be_bytes(), b.to_be_bytes(), sp, dp), 0).unwrap();
        let rev = parse_packet(&udp(b.to_be_bytes(), a.to_be_bytes(), dp, sp), 0).unwrap();
        prop_assert_eq!(derive_key(&fwd, &spec, 0).unwrap(), derive_key(&rev, &spec, 0).unwrap());
    }

    #[test]
    fn arbitrary_bytes_never_crash_the_pipeline(frames in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..120), 1..20)) {
        let mut pl = Pipeline::new(synflood()).unwrap();
        for (i, f) in frames.iter().enumerate() {
            pl.process_frame(f, i as u64);
        }
        let c = pl.counters();
        prop_assert_eq!(c.packets + c.truncated, frames.len() as u64);
    }

    #[test]
    fn timer_conservation(ops in prop::collection::vec((0u8..3, 1u64..50), 1..200)) {
        let mut q = TimerQueue::new();
        let mut handles = Vec::new();
        let mut now = 0;
        for (op, x) in ops {
            match op {
                0 => handles.push(q.schedule(EntityKey::new(0, vec![]), x, 0, now).unwrap()),
                1 => if let Some(h) = handles.get(x as usize % handles.len().max(1)) { q.cancel(*h); },
                _ => { now += x * 1000; q.advance(now); }
            }
            let c = q.counters();
            prop_assert_eq!(c.fired + c.cancelled + q.pending() as u64, c.scheduled);
        }
    }
}

#[test]
fn entity_snapshots_are_sorted_and_readable() {
    let mut pl = Pipeline::new(synflood()).unwrap();
    for s in [5u8, 1, 3] {
        pl.process_frame(&tcp([10, 0, 0, s], SYN), 1);
    }
    let snap = pl.snapshot_entities();
    let keys: Vec<_> = snap.iter().map(|s| s.key_text.clone()).collect();
    assert_eq!(keys, vec!["10.0.0.1", "10.0.0.3", "10.0.0.5"]);
    assert!(snap.iter().all(|s| s.state == "idle" && s.event == "tcp_syn"));
    assert!(snap.iter().all(|s| s.last_seen == 1));
}
