//! Program to DSL text. Compiling the rendered text yields the same program
//! (apart from the controller-assigned version).

use std::fmt::Write;

use super::program::{EventSource, ProbeProgram};
use crate::features::{BinaryOp, Expr, KeyRef, TriggerTest, UnaryOp};
use crate::pipeline::KeySpec;
use crate::sketches::{MetricParams, WindowMode};
use crate::xfsm::{ActionSpec, ExportKind, TemplatePart};

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            c => out.push(c),
        }
    }
    out
}

fn selectors(k: &KeySpec) -> String {
    k.fields.iter().map(|f| f.name()).collect::<Vec<_>>().join(", ")
}

fn normalize(k: &KeySpec) -> &'static str {
    if k.bidirectional {
        " normalize=\"bidirectional\""
    } else {
        ""
    }
}

fn key_ref(p: &ProbeProgram, k: &KeyRef) -> String {
    match k {
        KeyRef::Primary => "primary".into(),
        KeyRef::Secondary(i) => p.secondary_keys[*i as usize].clone(),
        KeyRef::Fields(spec) => selectors(spec),
    }
}

fn num(v: f64) -> String {
    if v < 0.0 {
        format!("({v})")
    } else {
        format!("{v}")
    }
}

/// Render an expression in fully parenthesized infix form.
pub fn render_expr(p: &ProbeProgram, e: &Expr) -> String {
    let r = |x: &Expr| render_expr(p, x);
    match e {
        Expr::Const(c) => num(*c),
        Expr::Bool(b) => b.to_string(),
        Expr::Metric { metric, key } => {
            let m = &p.metrics[*metric as usize];
            if *key == m.key {
                m.name.clone()
            } else {
                format!("{}[{}]", m.name, key_ref(p, key))
            }
        }
        Expr::Register(i) => format!("reg[{i}]"),
        Expr::Field(f) => f.name().to_string(),
        Expr::Feature(i) => p.xfsm.feature_names[*i as usize].clone(),
        Expr::Input(i) => format!("input.{}", p.inputs[*i as usize]),
        Expr::Now => "now".into(),
        Expr::Unary(op, x) => match op {
            UnaryOp::Neg => format!("(-{})", r(x)),
            UnaryOp::Abs => format!("abs({})", r(x)),
            UnaryOp::Log => format!("log({})", r(x)),
            UnaryOp::Sqrt => format!("sqrt({})", r(x)),
        },
        Expr::Binary(op, a, b) => {
            let sym = match op {
                BinaryOp::Min => return format!("min({}, {})", r(a), r(b)),
                BinaryOp::Max => return format!("max({}, {})", r(a), r(b)),
                BinaryOp::Add => "+",
                BinaryOp::Sub => "-",
                BinaryOp::Mul => "*",
                BinaryOp::Div => "/",
                BinaryOp::BitAnd => "&",
            };
            format!("({} {sym} {})", r(a), r(b))
        }
        Expr::Compare(op, a, b) => format!("({} {} {})", r(a), op.symbol(), r(b)),
        Expr::And(a, b) => format!("({} and {})", r(a), r(b)),
        Expr::Or(a, b) => format!("({} or {})", r(a), r(b)),
        Expr::Not(x) => format!("(not {})", r(x)),
        Expr::Trigger(t) => match t {
            TriggerTest::Event(i) => format!("event({})", p.events[*i as usize].name),
            TriggerTest::Timeout(None) => "timeout()".into(),
            TriggerTest::Timeout(Some(tag)) => format!("timeout({tag})"),
            TriggerTest::Evicted => "evicted()".into(),
        },
    }
}

/// Render a whole program as a DSL document.
pub fn render(p: &ProbeProgram) -> String {
    let mut s = String::new();
    let x = |e: &Expr| escape(&render_expr(p, e));
    let _ = writeln!(
        s,
        "<app name=\"{}\" initial=\"{}\" registers=\"{}\" seed=\"{}\" capacity=\"{}\">",
        p.name,
        p.xfsm.state_name(p.xfsm.initial_state),
        p.xfsm.registers,
        p.seed,
        p.entity_capacity
    );
    for e in &p.events {
        match &e.source {
            EventSource::Packet { predicate, primary, secondary } => {
                let head = format!(
                    "  <event name=\"{}\" match=\"{}\" key=\"{}\"{}",
                    e.name,
                    x(predicate),
                    selectors(primary),
                    normalize(primary)
                );
                if secondary.is_empty() {
                    let _ = writeln!(s, "{head}/>");
                } else {
                    let _ = writeln!(s, "{head}>");
                    for (id, k) in secondary {
                        let _ = writeln!(
                            s,
                            "    <secondary name=\"{}\" key=\"{}\"{}/>",
                            p.secondary_keys[*id as usize],
                            selectors(k),
                            normalize(k)
                        );
                    }
                    let _ = writeln!(s, "  </event>");
                }
            }
            EventSource::Remote { topic, key, entity_field, inputs } => {
                let head = format!(
                    "  <remote_event name=\"{}\" topic=\"{topic}\" key=\"{}\"{} entity_field=\"{}\"",
                    e.name,
                    selectors(key),
                    normalize(key),
                    escape(entity_field)
                );
                if inputs.is_empty() {
                    let _ = writeln!(s, "{head}/>");
                } else {
                    let _ = writeln!(s, "{head}>");
                    for (id, field) in inputs {
                        let _ =
                            writeln!(s, "    <input name=\"{}\" field=\"{}\"/>", p.inputs[*id as usize], escape(field));
                    }
                    let _ = writeln!(s, "  </remote_event>");
                }
            }
        }
    }
    for m in &p.metrics {
        let _ = write!(s, "  <metric name=\"{}\" kind=\"{}\"", m.name, m.params.kind().name());
        match &m.key {
            KeyRef::Fields(k) => {
                let _ = write!(s, " key=\"{}\"{}", selectors(k), normalize(k));
            }
            k => {
                let _ = write!(s, " key=\"{}\"", key_ref(p, k));
            }
        }
        let names: Vec<&str> = m.events.iter().map(|&i| p.events[i as usize].name.as_str()).collect();
        let _ = write!(s, " events=\"{}\"", names.join(", "));
        match m.params {
            MetricParams::CountMin { epsilon, delta, conservative } => {
                let _ = write!(s, " epsilon=\"{epsilon}\" delta=\"{delta}\" conservative=\"{conservative}\"");
            }
            MetricParams::Bloom { bits, hashes } => {
                let _ = write!(s, " bits=\"{bits}\" hashes=\"{hashes}\"");
            }
            MetricParams::Dleft { subtables, buckets, cells } => {
                let _ = write!(s, " subtables=\"{subtables}\" buckets=\"{buckets}\" cells=\"{cells}\"");
            }
        }
        if let Some(w) = m.window {
            let _ = write!(s, " window=\"{}\"", w.length_ms);
            match w.mode {
                WindowMode::PeriodicReset => {
                    let _ = write!(s, " mode=\"periodic_reset\"");
                }
                WindowMode::Sliding { panes } => {
                    let _ = write!(s, " mode=\"sliding\" panes=\"{panes}\"");
                }
            }
        }
        if let Some(inc) = &m.inc {
            let _ = write!(s, " inc=\"{}\"", x(inc));
        }
        let _ = writeln!(s, "/>");
    }
    for (name, f) in p.xfsm.feature_names.iter().zip(&p.features) {
        let _ = writeln!(s, "  <feature name=\"{name}\" expr=\"{}\"/>", x(f));
    }
    for e in &p.xfsm.exports {
        let kind = match e.kind {
            ExportKind::Alert => "alert",
            ExportKind::Features => "features",
        };
        let _ = write!(s, "  <export topic=\"{}\" kind=\"{kind}\"", e.topic);
        if let Some(ids) = &e.features {
            let names: Vec<&str> = ids.iter().map(|&i| p.xfsm.feature_names[i as usize].as_str()).collect();
            let _ = write!(s, " features=\"{}\"", names.join(", "));
        }
        let _ = writeln!(s, "/>");
    }
    for st in &p.xfsm.states {
        if st.rules.is_empty() {
            let _ = writeln!(s, "  <state name=\"{}\"/>", st.name);
            continue;
        }
        let _ = writeln!(s, "  <state name=\"{}\">", st.name);
        for r in &st.rules {
            let head = format!("    <rule when=\"{}\" next=\"{}\"", x(&r.condition), p.xfsm.state_name(r.next_state));
            if r.actions.is_empty() {
                let _ = writeln!(s, "{head}/>");
                continue;
            }
            let _ = writeln!(s, "{head}>");
            for a in &r.actions {
                let line = match a {
                    ActionSpec::PublishAlert { export, template } => {
                        let mut msg = String::new();
                        for part in &template.parts {
                            match part {
                                TemplatePart::Text(t) => msg.push_str(&t.replace('{', "{{").replace('}', "}}")),
                                TemplatePart::Entity => msg.push_str("{entity}"),
                                TemplatePart::State => msg.push_str("{state}"),
                                TemplatePart::Event => msg.push_str("{event}"),
                                TemplatePart::Feature(i) => {
                                    let _ = write!(msg, "{{{}}}", p.xfsm.feature_names[*i as usize]);
                                }
                                TemplatePart::Register(i) => {
                                    let _ = write!(msg, "{{reg[{i}]}}");
                                }
                            }
                        }
                        format!(
                            "<alert topic=\"{}\" message=\"{}\"/>",
                            p.xfsm.exports[*export as usize].topic,
                            escape(&msg)
                        )
                    }
                    ActionSpec::ExportFeatures { export } => {
                        format!("<export topic=\"{}\"/>", p.xfsm.exports[*export as usize].topic)
                    }
                    ActionSpec::SetRegister { index, value } => {
                        format!("<set reg=\"{index}\" value=\"{}\"/>", x(value))
                    }
                    ActionSpec::ScheduleTimeout { delay_ms, tag } => {
                        format!("<schedule delay=\"{delay_ms}\" tag=\"{tag}\"/>")
                    }
                    ActionSpec::CancelTimeouts { tag: Some(t) } => format!("<cancel tag=\"{t}\"/>"),
                    ActionSpec::CancelTimeouts { tag: None } => "<cancel/>".into(),
                    ActionSpec::ResetMetrics { metrics } => {
                        let names: Vec<&str> = metrics.iter().map(|&i| p.metrics[i as usize].name.as_str()).collect();
                        format!("<reset metrics=\"{}\"/>", names.join(", "))
                    }
                    ActionSpec::DropEntity => "<drop/>".into(),
                };
                let _ = writeln!(s, "      {line}");
            }
            let _ = writeln!(s, "    </rule>");
        }
        let _ = writeln!(s, "  </state>");
    }
    s.push_str("</app>\n");
    s
}
