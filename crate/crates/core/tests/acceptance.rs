//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fs;
use std::net::Ipv4Addr;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crossbeam_channel::unbounded;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use dstreamon::bus::{decode_message, encode_message, BusMessage, Publisher, PublisherConfig, Subscriber};
use dstreamon::control::{Agent, AgentConfig};
use dstreamon::dsl::{compile, deserialize_program, load, parse, render, serialize_program, validate, ProbeProgram};
use dstreamon::features::{BinaryOp, CmpOp, Expr, FeatureVector, NoMetrics, Trigger, TriggerTest};
use dstreamon::pipeline::build::{ipv4_frame, L4};
use dstreamon::pipeline::{EntityKey, Pipeline};
use dstreamon::sketches::{BloomFilter, CountMinSketch, DLeftHashTable, Hasher64, InsertOutcome};
use dstreamon::traffic::{bench, replay, synflood_trace, Rate, ReplayPlan, SynFloodSpec, SyntheticSpec};
use dstreamon::xfsm::{
    step, ActionSpec, Effect, EmittedKind, EntityRecord, ExportBinding, ExportKind, Rule, StateTable, StepInput,
    Template, TemplatePart, XfsmTable,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, u64);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn apps(kind: &str) -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/apps").join(kind);
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(".smon.xml"))
        .collect();
    v.sort();
    v
}

fn app(name: &str) -> ProbeProgram {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/apps/valid").join(name);
    load(&fs::read_to_string(p).unwrap()).unwrap()
}

// 1. Count-min error bounds against exact counts.
fn cms_guarantee() -> Outcome {
    const N: u64 = 100_000;
    let zipf = Zipf::new(1_000_000, 1.1).unwrap();
    let mut worst = 1.0f64;
    let mut underestimates = 0usize;
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut cms = CountMinSketch::with_hasher(0.01, 0.01, Hasher64::new(seed)).unwrap();
        let mut exact: HashMap<u64, u64> = HashMap::new();
        for _ in 0..N {
            let k = zipf.sample(&mut rng) as u64;
            cms.update(&k.to_be_bytes(), 1);
            *exact.entry(k).or_default() += 1;
        }
        let bound = 0.01 * N as f64;
        let mut within = 0usize;
        for (k, &c) in &exact {
            let est = cms.query(&k.to_be_bytes());
            if est < c {
                underestimates += 1;
            }
            if est as f64 <= c as f64 + bound {
                within += 1;
            }
        }
        worst = worst.min(within as f64 / exact.len() as f64);
    }
    check(
        worst >= 0.99 && underestimates == 0,
        format!("worst within-bound fraction {:.4} over 30 seeds, {underestimates} underestimates", worst),
    )
}

// 2. Bloom false-positive rate against the closed form.
fn bloom_fp() -> Outcome {
    let (n, m, k) = (10_000u64, 100_000usize, 7u32);
    let mut bf = BloomFilter::with_hasher(m, k, Hasher64::new(42)).unwrap();
    for i in 0..n {
        bf.insert(&i.to_be_bytes());
    }
    let negatives = (0..n).filter(|i| !bf.contains(&i.to_be_bytes())).count();
    let probes = 100_000u64;
    let fps = (0..probes).filter(|i| bf.contains(&(1_000_000_000 + i).to_be_bytes())).count();
    let observed = fps as f64 / probes as f64;
    let expected = (1.0 - (-(k as f64) * n as f64 / m as f64).exp()).powi(k as i32);
    let rel = (observed - expected).abs() / expected;
    check(
        rel <= 0.2 && negatives == 0,
        format!("fp {observed:.5} vs {expected:.5} (rel err {:.1}%), {negatives} false negatives", rel * 100.0),
    )
}

// 3. d-left load at the first failed insert.
fn dleft_load() -> Outcome {
    let mut min_load = 1.0f64;
    let mut sum = 0.0;
    for trial in 0..100u64 {
        let mut t = DLeftHashTable::with_hasher(4, 1024, 8, Hasher64::new(trial)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        loop {
            let key: u64 = rng.gen();
            if t.insert(&key.to_be_bytes(), 1) == InsertOutcome::TableFull {
                break;
            }
        }
        min_load = min_load.min(t.load_factor());
        sum += t.load_factor();
    }
    check(
        min_load >= 0.9,
        format!("load factor at first full insert: min {min_load:.4}, mean {:.4} over 100 trials", sum / 100.0),
    )
}

// 4. XFSM engine against a naive reference interpreter.

fn ref_num(e: &Expr, feats: &[Option<f64>], regs: &[f64]) -> Option<f64> {
    match e {
        Expr::Const(c) => Some(*c),
        Expr::Feature(i) => feats[*i as usize],
        Expr::Register(i) => Some(regs[*i as usize]),
        Expr::Binary(op, a, b) => {
            let (x, y) = (ref_num(a, feats, regs)?, ref_num(b, feats, regs)?);
            let r = match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div => {
                    if y == 0.0 {
                        return None;
                    }
                    x / y
                }
                BinaryOp::Min => x.min(y),
                BinaryOp::Max => x.max(y),
                BinaryOp::BitAnd => unreachable!(),
            };
            r.is_finite().then_some(r)
        }
        _ => unreachable!(),
    }
}

fn ref_bool(e: &Expr, feats: &[Option<f64>], regs: &[f64], trig: Trigger) -> Option<bool> {
    match e {
        Expr::Bool(b) => Some(*b),
        Expr::Compare(op, a, b) => {
            let x = ref_num(a, feats, regs);
            let y = ref_num(b, feats, regs);
            let (x, y) = (x?, y?);
            Some(match op {
                CmpOp::Lt => x < y,
                CmpOp::Le => x <= y,
                CmpOp::Gt => x > y,
                CmpOp::Ge => x >= y,
                CmpOp::Eq => x == y,
                CmpOp::Ne => x != y,
            })
        }
        Expr::And(a, b) => {
            let x = ref_bool(a, feats, regs, trig);
            let y = ref_bool(b, feats, regs, trig);
            let (x, y) = (x?, y?);
            Some(x && y)
        }
        Expr::Or(a, b) => {
            let x = ref_bool(a, feats, regs, trig);
            let y = ref_bool(b, feats, regs, trig);
            let (x, y) = (x?, y?);
            Some(x || y)
        }
        Expr::Not(a) => ref_bool(a, feats, regs, trig).map(|v| !v),
        Expr::Trigger(t) => Some(match (*t, trig) {
            (TriggerTest::Event(a), Trigger::Event(b)) => a == b,
            (TriggerTest::Timeout(None), Trigger::Timeout(_)) => true,
            (TriggerTest::Timeout(Some(a)), Trigger::Timeout(b)) => a == b,
            (TriggerTest::Evicted, Trigger::Evicted) => true,
            _ => false,
        }),
        _ => unreachable!(),
    }
}

#[derive(Debug, PartialEq)]
struct Observed {
    state: u32,
    fired: Option<usize>,
    registers: Vec<f64>,
    emitted: Vec<(EmittedKind, String, Option<String>)>,
    effects: Vec<String>,
}

fn ref_message(t: &Template, feats: &[Option<f64>], regs: &[f64]) -> String {
    let show = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_else(|| "fault".into());
    let mut s = String::new();
    for p in &t.parts {
        match p {
            TemplatePart::Text(x) => s.push_str(x),
            TemplatePart::Entity => s.push('e'),
            TemplatePart::Feature(i) => s.push_str(&show(feats[*i as usize])),
            TemplatePart::Register(i) => s.push_str(&show(Some(regs[*i as usize]))),
            _ => unreachable!(),
        }
    }
    s
}

fn ref_step(t: &XfsmTable, state: &mut u32, regs: &mut [f64], feats: &[Option<f64>], trig: Trigger) -> Observed {
    let rules = &t.states[*state as usize].rules;
    let pre = regs.to_vec();
    let mut fired = None;
    for (i, r) in rules.iter().enumerate() {
        if ref_bool(&r.condition, feats, &pre, trig) == Some(true) {
            fired = Some(i);
            break;
        }
    }
    let mut obs = Observed { state: *state, fired, registers: vec![], emitted: vec![], effects: vec![] };
    if let Some(i) = fired {
        let r = &rules[i];
        for a in &r.actions {
            match a {
                ActionSpec::SetRegister { index, value } => {
                    if let Some(v) = ref_num(value, feats, regs) {
                        regs[*index as usize] = v;
                    }
                }
                ActionSpec::PublishAlert { export, template } => obs.emitted.push((
                    EmittedKind::Alert,
                    t.exports[*export as usize].topic.clone(),
                    Some(ref_message(template, feats, regs)),
                )),
                ActionSpec::ExportFeatures { export } => {
                    obs.emitted.push((EmittedKind::Features, t.exports[*export as usize].topic.clone(), None))
                }
                ActionSpec::ScheduleTimeout { delay_ms, tag } => obs.effects.push(format!("schedule {delay_ms} {tag}")),
                ActionSpec::CancelTimeouts { tag } => obs.effects.push(format!("cancel {tag:?}")),
                ActionSpec::DropEntity => obs.effects.push("drop".into()),
                ActionSpec::ResetMetrics { .. } => unreachable!(),
            }
        }
        *state = r.next_state;
    }
    obs.state = *state;
    obs.registers = regs.to_vec();
    obs
}

fn engine_observed(out: dstreamon::xfsm::StepOutput, rec: &EntityRecord) -> Observed {
    Observed {
        state: rec.state,
        fired: out.fired_rule,
        registers: rec.registers.clone(),
        emitted: out.emitted.into_iter().map(|a| (a.kind, a.topic, a.message)).collect(),
        effects: out
            .effects
            .into_iter()
            .map(|e| match e {
                Effect::Schedule { delay_ms, tag } => format!("schedule {delay_ms} {tag}"),
                Effect::Cancel { tag } => format!("cancel {tag:?}"),
                Effect::Drop => "drop".into(),
                Effect::ResetMetrics(_) => unreachable!(),
            })
            .collect(),
    }
}

const FEATURES: u32 = 3;
const REGISTERS: u32 = 2;

fn rand_num(rng: &mut ChaCha8Rng, depth: u32) -> Expr {
    match if depth == 0 { rng.gen_range(0..3) } else { rng.gen_range(0..5) } {
        0 => Expr::Const(rng.gen_range(-2..6) as f64),
        1 => Expr::Feature(rng.gen_range(0..FEATURES)),
        2 => Expr::Register(rng.gen_range(0..REGISTERS)),
        _ => {
            let op = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div, BinaryOp::Min, BinaryOp::Max]
                [rng.gen_range(0..6)];
            Expr::Binary(op, Box::new(rand_num(rng, depth - 1)), Box::new(rand_num(rng, depth - 1)))
        }
    }
}

fn rand_trigger_test(rng: &mut ChaCha8Rng) -> TriggerTest {
    match rng.gen_range(0..4) {
        0 | 1 => TriggerTest::Event(rng.gen_range(0..2)),
        2 => TriggerTest::Timeout(if rng.gen() { Some(rng.gen_range(0..2)) } else { None }),
        _ => TriggerTest::Evicted,
    }
}

fn rand_cond(rng: &mut ChaCha8Rng, depth: u32) -> Expr {
    let leaf = depth == 0 || rng.gen_bool(0.4);
    if leaf {
        return match rng.gen_range(0..5) {
            0 => Expr::Bool(rng.gen_bool(0.7)),
            1 => Expr::Trigger(rand_trigger_test(rng)),
            _ => {
                let op = [CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge, CmpOp::Eq, CmpOp::Ne][rng.gen_range(0..6)];
                Expr::Compare(op, Box::new(rand_num(rng, 2)), Box::new(rand_num(rng, 1)))
            }
        };
    }
    match rng.gen_range(0..3) {
        0 => Expr::And(Box::new(rand_cond(rng, depth - 1)), Box::new(rand_cond(rng, depth - 1))),
        1 => Expr::Or(Box::new(rand_cond(rng, depth - 1)), Box::new(rand_cond(rng, depth - 1))),
        _ => Expr::Not(Box::new(rand_cond(rng, depth - 1))),
    }
}

fn rand_action(rng: &mut ChaCha8Rng) -> ActionSpec {
    match rng.gen_range(0..6) {
        0 | 1 => ActionSpec::SetRegister { index: rng.gen_range(0..REGISTERS), value: rand_num(rng, 2) },
        2 => ActionSpec::PublishAlert {
            export: 0,
            template: Template {
                parts: vec![
                    TemplatePart::Text("at ".into()),
                    TemplatePart::Entity,
                    TemplatePart::Text(" f=".into()),
                    TemplatePart::Feature(rng.gen_range(0..FEATURES)),
                    TemplatePart::Text(" r=".into()),
                    TemplatePart::Register(rng.gen_range(0..REGISTERS)),
                ],
            },
        },
        3 => ActionSpec::ExportFeatures { export: 1 },
        4 => ActionSpec::ScheduleTimeout { delay_ms: rng.gen_range(1..100), tag: rng.gen_range(0..2) },
        _ => {
            if rng.gen_bool(0.8) {
                ActionSpec::CancelTimeouts { tag: rng.gen_bool(0.5).then(|| rng.gen_range(0..2)) }
            } else {
                ActionSpec::DropEntity
            }
        }
    }
}

fn rand_machine(rng: &mut ChaCha8Rng) -> XfsmTable {
    let n = rng.gen_range(1..=5u32);
    let states = (0..n)
        .map(|s| StateTable {
            name: format!("s{s}"),
            rules: (0..rng.gen_range(0..=3))
                .map(|_| Rule {
                    condition: rand_cond(rng, 3),
                    actions: (0..rng.gen_range(0..=3)).map(|_| rand_action(rng)).collect(),
                    next_state: rng.gen_range(0..n),
                })
                .collect(),
        })
        .collect();
    XfsmTable {
        states,
        initial_state: rng.gen_range(0..n),
        registers: REGISTERS,
        exports: vec![
            ExportBinding { topic: "alerts.x".into(), kind: ExportKind::Alert, features: None },
            ExportBinding { topic: "features.x".into(), kind: ExportKind::Features, features: None },
        ],
        feature_names: (0..FEATURES).map(|i| format!("f{i}")).collect(),
        event_names: vec!["a".into(), "b".into()],
    }
}

fn xfsm_oracle() -> Outcome {
    let mut steps = 0u64;
    let mut fired = 0u64;
    for case in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let table = rand_machine(&mut rng);
        let mut rec = EntityRecord::new(EntityKey::new(0, vec![1]), &table, 0);
        let mut state = table.initial_state;
        let mut regs = vec![0.0; REGISTERS as usize];
        for i in 0..rng.gen_range(1..=1000u64) {
            let feats: Vec<Option<f64>> = (0..FEATURES)
                .map(|_| if rng.gen_bool(0.1) { None } else { Some(rng.gen_range(-3..10) as f64) })
                .collect();
            let trigger = match rng.gen_range(0..10) {
                0..=6 => Trigger::Event(rng.gen_range(0..2)),
                7 | 8 => Trigger::Timeout(rng.gen_range(0..2)),
                _ => Trigger::Evicted,
            };
            let mut fv = FeatureVector::with_len(FEATURES as usize);
            for (j, f) in feats.iter().enumerate() {
                fv.set(
                    j,
                    f.ok_or_else(|| dstreamon::features::Fault {
                        reason: dstreamon::features::FaultReason::FaultedFeature,
                        location: String::new(),
                    }),
                );
            }
            let input =
                StepInput { metrics: &NoMetrics, packet: None, inputs: &[], trigger, now: i * 1000, entity_text: "e" };
            let got = engine_observed(step(&table, &mut rec, &fv, &input), &rec);
            let want = ref_step(&table, &mut state, &mut regs, &feats, trigger);
            if got != want {
                return Err(format!("machine {case} diverged at step {i}: engine {got:?}, reference {want:?}"));
            }
            steps += 1;
            fired += got.fired.is_some() as u64;
        }
    }
    Ok(format!("1000 machines, {steps} steps ({fired} rule firings), all trajectories identical"))
}

// 5. End-to-end SYN flood over the bus, against an exact windowed counter.

/// Sources whose SYN count over the trailing second exceeds 100, decoded
/// straight from the frame bytes.
fn oracle_flooders(trace: &[(u64, Vec<u8>)]) -> BTreeSet<Ipv4Addr> {
    let mut windows: HashMap<[u8; 4], VecDeque<u64>> = HashMap::new();
    let mut out = BTreeSet::new();
    for (ts, f) in trace {
        if f.len() < 34 || f[12..14] != [0x08, 0x00] || f[23] != 6 {
            continue;
        }
        let ihl = (f[14] & 0x0f) as usize * 4;
        let flags = f[14 + ihl + 13];
        if flags & 0x02 == 0 || flags & 0x10 != 0 {
            continue;
        }
        let src = [f[26], f[27], f[28], f[29]];
        let w = windows.entry(src).or_default();
        w.push_back(*ts);
        while w.front().is_some_and(|&t| t + 1_000_000 <= *ts) {
            w.pop_front();
        }
        if w.len() > 100 {
            out.insert(Ipv4Addr::from(src));
        }
    }
    out
}

fn alerts_over_bus(trace: Vec<(u64, Vec<u8>)>) -> Result<Vec<String>, String> {
    let mut publisher =
        Publisher::bind("127.0.0.1:0", "edge", PublisherConfig::default()).map_err(|e| e.to_string())?;
    let sub = Subscriber::connect(&publisher.local_addr().to_string(), &["alerts"], "collector")
        .map_err(|e| e.to_string())?;
    if !publisher.wait_for_subscribers(1, Duration::from_secs(5)) {
        return Err("subscriber never connected".into());
    }
    let program = app("synflood.smon.xml");
    let name = program.name.clone();
    let mut pipeline = Pipeline::new(program).unwrap();
    replay(trace, &mut pipeline, &ReplayPlan::default(), |a| {
        let payload = dstreamon::bus::action_payload(&a, "edge", &name);
        publisher.publish(&a.topic, a.ts, payload).unwrap();
    });
    publisher.flush(Duration::from_secs(5));
    let mut got = Vec::new();
    while let Some(m) = sub.recv_timeout(Duration::from_millis(300)) {
        if m.topic != "alerts.synflood" {
            return Err(format!("unexpected topic {}", m.topic));
        }
        let v = m.payload_json().ok_or("payload is not JSON")?;
        got.push(v["entity"].as_str().unwrap_or_default().to_string());
    }
    Ok(got)
}

fn synflood_end_to_end() -> Outcome {
    let attack = synflood_trace(&SynFloodSpec::default());
    let benign = synflood_trace(&SynFloodSpec { attack: None, ..SynFloodSpec::default() });
    let want: Vec<String> = oracle_flooders(&attack).iter().map(|a| a.to_string()).collect();
    let none = oracle_flooders(&benign);
    if want != ["203.0.113.66"] || !none.is_empty() {
        return Err(format!("oracle disagrees with the scenario: {want:?} / {none:?}"));
    }
    let got = alerts_over_bus(attack)?;
    let got_benign = alerts_over_bus(benign)?;
    check(
        got == want && got_benign.is_empty(),
        format!("attack trace alerts {got:?} (oracle {want:?}), benign trace alerts {}", got_benign.len()),
    )
}

// 6. Offline throughput of the SYN-flood program.
fn throughput() -> Outcome {
    let base = synflood_trace(&SynFloodSpec::default());
    let span = 10_000_000u64;
    let total = 1_000_000usize;
    let source =
        (0..).flat_map(move |k: u64| base.clone().into_iter().map(move |(ts, f)| (ts + k * span, f))).take(total);
    let mut pipeline = Pipeline::new(app("synflood.smon.xml")).unwrap();
    let mut alerts = 0u64;
    let stats =
        replay(source, &mut pipeline, &ReplayPlan { rate: Rate::Unlimited, ..ReplayPlan::default() }, |_| alerts += 1);
    check(
        stats.packets == total as u64 && stats.achieved_pps >= 68_750.0,
        format!(
            "{} packets of 100 bytes in {:.2} s: {:.0} pps ({:.0} ns/packet in pipeline, {alerts} alerts)",
            stats.packets,
            stats.wall.as_secs_f64(),
            stats.achieved_pps,
            stats.mean_cost_ns().unwrap_or(0.0)
        ),
    )
}

// 7. Per-packet cost at the top rate against the bottom rate.
fn cost_stability() -> Outcome {
    let program = app("flowstats.smon.xml");
    let report = bench(&[22_500.0, 68_750.0], &SyntheticSpec::default(), &program, 10, 10_000).unwrap();
    let lo = report.rows[0].mean_cost_ns.ok_or("no cost at 22500 pps")?;
    let hi = report.rows[1].mean_cost_ns.ok_or("no cost at 68750 pps")?;
    let ratio = hi.mean / lo.mean;
    let fmt = |r: &dstreamon::traffic::BenchRow| {
        let c = r.mean_cost_ns.unwrap();
        format!(
            "{:.0} pps: achieved {:.0} ± {:.0}, {:.0} ± {:.0} ns/packet",
            r.offered_pps, r.achieved_pps.mean, r.achieved_pps.half_width, c.mean, c.half_width
        )
    };
    check(
        (ratio - 1.0).abs() <= 0.25,
        format!("{}; {}; ratio {ratio:.3} (10 replications, 95% CI)", fmt(&report.rows[0]), fmt(&report.rows[1])),
    )
}

// 8. Two chained probes over loopback.
fn chaining() -> Outcome {
    let (up_tx, up_rx) = unbounded();
    let mut up_cfg = AgentConfig::new("upstream");
    up_cfg.publish = Some("127.0.0.1:0".into());
    let upstream = Agent::start_with(up_cfg, Some(app("synflood.smon.xml")), Some(up_tx)).map_err(|e| e.to_string())?;
    let (down_tx, down_rx) = unbounded();
    let mut down_cfg = AgentConfig::new("downstream");
    down_cfg.upstream = Some(upstream.publish_addr().unwrap().to_string());
    let downstream =
        Agent::start_with(down_cfg, Some(app("chained.smon.xml")), Some(down_tx)).map_err(|e| e.to_string())?;
    let end = Instant::now() + Duration::from_secs(5);
    while upstream.handle().status().unwrap().subscribers < 1 {
        if Instant::now() > end {
            return Err("downstream never subscribed".into());
        }
        std::thread::sleep(Duration::from_millis(10));
    }

    let sources: Vec<Ipv4Addr> =
        (0..1000u32).map(|i| Ipv4Addr::new(10, 1, (i / 250) as u8, (i % 250 + 1) as u8)).collect();
    let h = upstream.handle();
    for round in 0..101u64 {
        for (i, src) in sources.iter().enumerate() {
            let f = ipv4_frame(
                [2, 0, 0, 0, 0, 1],
                [2, 0, 0, 0, 0, 2],
                *src,
                Ipv4Addr::new(192, 168, 0, 1),
                L4::Tcp { sport: 1024 + round as u16, dport: 80, flags: 0x02 },
                100,
            );
            h.frame(1_000_000 + round * 5_000 + i as u64, f);
        }
    }
    h.sync();
    let upstream_order: Vec<String> = up_rx.try_iter().map(|a| a.entity_text).collect();
    let mut downstream_order = Vec::new();
    let end = Instant::now() + Duration::from_secs(8);
    while downstream_order.len() < upstream_order.len() && Instant::now() < end {
        if let Ok(a) = down_rx.recv_timeout(Duration::from_millis(100)) {
            downstream_order.push(a.entity_text);
        }
    }
    std::thread::sleep(Duration::from_millis(200));
    downstream_order.extend(down_rx.try_iter().map(|a| a.entity_text));
    let st = downstream.handle().status().unwrap();
    check(
        upstream_order.len() == 1000
            && downstream_order == upstream_order
            && st.remote_triggers == 1000
            && st.schema_mismatches == 0,
        format!(
            "{} upstream alerts, {} downstream triggers ({} correlated alerts, in order: {}), {} schema mismatches",
            upstream_order.len(),
            st.remote_triggers,
            downstream_order.len(),
            downstream_order == upstream_order,
            st.schema_mismatches
        ),
    )
}

// 9. Fixture corpus round trips and located diagnostics for invalid apps.
fn dsl_corpus() -> Outcome {
    let valid = apps("valid");
    for p in &valid {
        let text = fs::read_to_string(p).unwrap();
        let program = load(&text).map_err(|e| format!("{}: {e}", p.display()))?;
        let again = compile(&parse(&render(&program)).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let decoded = deserialize_program(&serialize_program(&program)).map_err(|e| e.to_string())?;
        if again != program || decoded != program {
            return Err(format!("{} does not round-trip", p.display()));
        }
    }
    let invalid = apps("invalid");
    let mut located = 0;
    for p in &invalid {
        let text = fs::read_to_string(p).unwrap();
        let header = text.lines().next().unwrap_or_default();
        let msg_start = header.find("message=\"").map(|i| i + 9).unwrap_or(0);
        let expected = &header[msg_start..msg_start + header[msg_start..].find('"').unwrap_or(0)];
        let expected = expected.replace("&quot;", "\"").replace("&lt;", "<").replace("&gt;", ">").replace("&amp;", "&");
        let ok = match parse(&text) {
            Err(e) => e.line > 1 && e.col >= 1 && e.message.contains(&expected),
            Ok(spec) => {
                let r = validate(&spec);
                r.errors().any(|d| d.span.line > 1 && d.span.col >= 1 && d.message.contains(&expected))
                    && compile(&spec).is_err()
            }
        };
        if !ok {
            return Err(format!("{} was not rejected with a located '{expected}' diagnostic", p.display()));
        }
        located += 1;
    }
    check(
        invalid.len() >= 20 && valid.len() >= 5,
        format!(
            "{} valid apps round-trip; {located}/{} invalid apps rejected with located diagnostics",
            valid.len(),
            invalid.len()
        ),
    )
}

// 10. Wire decoder robustness and exact round trips.
fn rand_message(rng: &mut ChaCha8Rng) -> BusMessage {
    let seg = |rng: &mut ChaCha8Rng| -> String {
        let alphabet = b"abcdefghijklmnopqrstuvwxyz0123456789_";
        (0..rng.gen_range(1..8)).map(|_| alphabet[rng.gen_range(0..alphabet.len())] as char).collect()
    };
    let topic = (0..rng.gen_range(1..4)).map(|_| seg(rng)).collect::<Vec<_>>().join(".");
    let probe_id: String = (0..rng.gen_range(0..12)).map(|_| rng.gen_range(b'!'..=b'~') as char).collect();
    let payload = (0..rng.gen_range(0..300)).map(|_| rng.gen()).collect();
    BusMessage { topic, probe_id, seq: rng.gen(), ts: rng.gen(), payload }
}

fn wire_conformance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..10_000 {
        let m = rand_message(&mut rng);
        let bytes = encode_message(&m);
        match decode_message(&bytes) {
            Ok(d) if d == m && encode_message(&d) == bytes => {}
            other => return Err(format!("round trip failed for {m:?}: {other:?}")),
        }
    }
    let mut accepted = 0;
    for _ in 0..10_000 {
        let mut f = encode_message(&rand_message(&mut rng));
        match rng.gen_range(0..5) {
            0 => {
                let i = rng.gen_range(0..f.len());
                f[i] ^= 1 << rng.gen_range(0..8);
            }
            1 => f.truncate(rng.gen_range(0..f.len())),
            2 => f.extend((0..rng.gen_range(1..16)).map(|_| rng.gen::<u8>())),
            3 => {
                let i = rng.gen_range(4..f.len().min(16));
                f[i] = rng.gen();
            }
            _ => f = (0..rng.gen_range(0..64)).map(|_| rng.gen()).collect(),
        }
        if let Ok(d) = decode_message(&f) {
            if encode_message(&d) != f {
                return Err(format!("accepted frame does not re-encode identically: {f:?}"));
            }
            accepted += 1;
        }
    }
    Ok(format!("10000 round trips byte-identical; 10000 fuzzed frames decoded without panic ({accepted} accepted)"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("count-min error bounds", cms_guarantee, 30),
        ("bloom false-positive rate", bloom_fp, 10),
        ("d-left load factor", dleft_load, 30),
        ("xfsm oracle equivalence", xfsm_oracle, 60),
        ("syn-flood end to end", synflood_end_to_end, 10),
        ("throughput at 68750 pps", throughput, 60),
        ("per-packet cost stability", cost_stability, 120),
        ("probe chaining", chaining, 10),
        ("dsl corpus", dsl_corpus, 60),
        ("wire conformance", wire_conformance, 60),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f, budget)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        let result = match result {
            Ok(d) if secs > *budget as f64 => Err(format!("{d}; took {secs:.1} s, budget {budget} s")),
            r => r,
        };
        match result {
            Ok(d) => println!("PASS {:>2} {name}: {d} [{secs:.1} s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {d} [{secs:.1} s]", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
