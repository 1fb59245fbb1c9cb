//! Name resolution, checking and lowering. Validation and compilation share
//! this single pass, so a spec with no error diagnostics always compiles.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use super::ast::{self, ActionKind, BinOp, ExprKind, Ident, KeySource, Span, TemplatePiece};
use super::parse::key_source;
use super::program::{CompiledEvent, CompiledMetric, EventSource, ProbeProgram, DEFAULT_ENTITY_CAPACITY};
use crate::features::{BinaryOp, CmpOp, Expr, KeyRef, TriggerTest, UnaryOp, MAX_DEPTH};
use crate::pipeline::{Field, KeySpec};
use crate::sketches::{MetricKind, MetricParams, WindowMode, WindowSpec, DEFAULT_PANES};
use crate::xfsm::{
    ActionSpec, ExportBinding, ExportKind, Rule, StateTable, Template, TemplatePart, XfsmTable, DEFAULT_REGISTERS,
};

pub const MAX_REGISTERS: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub severity: Severity,
    pub span: Span,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{}:{}: {sev}: {}", self.span.line, self.span.col, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub diagnostics: Vec<Diagnostic>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics.iter().filter(|d| d.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics.iter().filter(|d| d.severity == Severity::Warning)
    }

    pub fn has_errors(&self) -> bool {
        self.errors().next().is_some()
    }
}

/// Named constants usable in expressions.
pub const CONSTANTS: [(&str, f64); 13] = [
    ("FIN", 0x01 as f64),
    ("SYN", 0x02 as f64),
    ("RST", 0x04 as f64),
    ("PSH", 0x08 as f64),
    ("ACK", 0x10 as f64),
    ("URG", 0x20 as f64),
    ("ECE", 0x40 as f64),
    ("CWR", 0x80 as f64),
    ("ICMP", 1.0),
    ("TCP", 6.0),
    ("UDP", 17.0),
    ("IPV4", 0x0800 as f64),
    ("ARP", 0x0806 as f64),
];

const RESERVED: [&str; 17] = [
    "now", "reg", "input", "primary", "true", "false", "and", "or", "not", "entity", "state", "event", "timeout",
    "evicted", "abs", "log", "sqrt",
];

fn constant(name: &str) -> Option<f64> {
    CONSTANTS.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Bus topic syntax: dot-separated segments of `[a-z0-9_]+`.
pub fn valid_topic(s: &str) -> bool {
    !s.is_empty()
        && s.split('.').all(|seg| {
            !seg.is_empty() && seg.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ty {
    Num,
    Bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scope {
    Match,
    Inc,
    Feature(u32),
    Condition,
    Value,
}

impl Scope {
    fn describe(self) -> &'static str {
        match self {
            Scope::Match => "an event match predicate",
            Scope::Inc => "a metric increment",
            Scope::Feature(_) => "a feature expression",
            Scope::Condition => "a rule condition",
            Scope::Value => "a register value",
        }
    }
}

struct Cx<'a> {
    spec: &'a ast::AppSpec,
    diags: Vec<Diagnostic>,
    events: HashMap<&'a str, u32>,
    metrics: HashMap<&'a str, u32>,
    features: HashMap<&'a str, u32>,
    states: HashMap<&'a str, u32>,
    exports: HashMap<&'a str, u32>,
    secondary: Vec<String>,
    /// Per event: secondary names it declares.
    event_secondary: Vec<Vec<u32>>,
    inputs: Vec<String>,
    registers: u32,
    /// Feature dependency edges by declaration index.
    feature_deps: Vec<Vec<u32>>,
}

impl<'a> Cx<'a> {
    fn error(&mut self, span: Span, message: impl Into<String>) {
        self.diags.push(Diagnostic { severity: Severity::Error, span, message: message.into() });
    }

    fn warning(&mut self, span: Span, message: impl Into<String>) {
        self.diags.push(Diagnostic { severity: Severity::Warning, span, message: message.into() });
    }

    fn declare(
        &mut self,
        table: fn(&mut Self) -> &mut HashMap<&'a str, u32>,
        what: &str,
        id: &'a Ident,
        index: u32,
        spans: &mut HashMap<&'a str, Span>,
    ) {
        if !is_ident(&id.name) {
            self.error(id.span, format!("invalid {what} name '{}'", id.name));
        }
        if let Some(first) = spans.get(id.name.as_str()) {
            let first = *first;
            self.error(id.span, format!("duplicate {what} '{}' (first declared at {first})", id.name));
            return;
        }
        spans.insert(&id.name, id.span);
        table(self).insert(&id.name, index);
    }

    fn number<T: std::str::FromStr>(&mut self, raw: &(String, Span), what: &str) -> Option<T> {
        match raw.0.parse::<T>() {
            Ok(v) => Some(v),
            Err(_) => {
                self.error(raw.1, format!("invalid {what} '{}'", raw.0));
                None
            }
        }
    }

    fn fields(&mut self, key: &ast::KeyDecl, what: &str) -> Option<KeySpec> {
        if key.selectors.is_empty() {
            self.error(key.span, format!("{what} is empty"));
            return None;
        }
        let mut out = Vec::new();
        let mut ok = true;
        for s in &key.selectors {
            match Field::from_name(&s.name) {
                Some(f) => {
                    if out.contains(&f) {
                        self.error(s.span, format!("field selector '{}' repeated in {what}", s.name));
                        ok = false;
                    }
                    out.push(f);
                }
                None => {
                    self.error(s.span, format!("unknown field selector '{}'", s.name));
                    ok = false;
                }
            }
        }
        if !ok {
            return None;
        }
        let spec = KeySpec { fields: out, bidirectional: key.bidirectional };
        if let Err(f) = spec.check_pairs() {
            self.error(key.span, format!("bidirectional {what} lists '{f}' without its counterpart"));
            return None;
        }
        Some(spec)
    }

    /// Resolve a metric key source for metric `m` updated by `events`.
    fn key_ref(&mut self, src: &KeySource, events: &[u32], for_query: bool) -> Option<KeyRef> {
        match src {
            KeySource::Primary(_) => Some(KeyRef::Primary),
            KeySource::Fields(k) => self.fields(k, "metric key").map(KeyRef::Fields),
            KeySource::Named(n) => {
                let Some(id) = self.secondary.iter().position(|s| *s == n.name) else {
                    self.error(n.span, format!("unknown secondary key '{}'", n.name));
                    return None;
                };
                if !for_query {
                    for &e in events {
                        if !self.event_secondary[e as usize].contains(&(id as u32)) {
                            let ev = &self.spec.events[e as usize].name.name;
                            self.error(n.span, format!("event '{ev}' has no secondary key '{}'", n.name));
                            return None;
                        }
                    }
                }
                Some(KeyRef::Secondary(id as u32))
            }
        }
    }

    fn lower(&mut self, e: &ast::Expr, scope: Scope) -> Option<(Expr, Ty)> {
        let denied = |cx: &mut Self, what: &str| {
            cx.error(e.span, format!("{what} cannot be used in {}", scope.describe()));
            None
        };
        Some(match &e.kind {
            ExprKind::Number(n) => (Expr::Const(*n), Ty::Num),
            ExprKind::Bool(b) => (Expr::Bool(*b), Ty::Bool),
            ExprKind::Name(name) => return self.lower_name(name, e.span, scope),
            ExprKind::Index(name, items) => {
                if name == "reg" {
                    if matches!(scope, Scope::Match | Scope::Inc) {
                        return denied(self, "registers");
                    }
                    let [item] = items.as_slice() else {
                        self.error(e.span, "register access takes exactly one index");
                        return None;
                    };
                    let idx = self.register_index(&(item.name.clone(), item.span))?;
                    (Expr::Register(idx), Ty::Num)
                } else {
                    let Some(&m) = self.metrics.get(name.as_str()) else {
                        self.error(e.span, format!("unresolved metric reference '{name}'"));
                        return None;
                    };
                    if matches!(scope, Scope::Match | Scope::Inc) {
                        return denied(self, "metric queries");
                    }
                    let src = key_source(items.clone(), e.span, false);
                    let key = self.key_ref(&src, &[], true)?;
                    (Expr::Metric { metric: m, key }, Ty::Num)
                }
            }
            ExprKind::Call(name, args) => return self.lower_call(name, args, e.span, scope),
            ExprKind::Neg(x) => {
                let x = self.numeric(x, scope)?;
                (Expr::Unary(UnaryOp::Neg, Box::new(x)), Ty::Num)
            }
            ExprKind::Not(x) => {
                let x = self.boolean(x, scope)?;
                (Expr::Not(Box::new(x)), Ty::Bool)
            }
            ExprKind::Binary(op, a, b) => {
                let op = *op;
                match op {
                    BinOp::And | BinOp::Or => {
                        let (a, b) = (self.boolean(a, scope), self.boolean(b, scope));
                        let (a, b) = (Box::new(a?), Box::new(b?));
                        let x = if op == BinOp::And { Expr::And(a, b) } else { Expr::Or(a, b) };
                        (x, Ty::Bool)
                    }
                    _ => {
                        let (a, b) = (self.numeric(a, scope), self.numeric(b, scope));
                        let (a, b) = (Box::new(a?), Box::new(b?));
                        let cmp = |c| (Expr::Compare(c, a.clone(), b.clone()), Ty::Bool);
                        let bin = |o| (Expr::Binary(o, a.clone(), b.clone()), Ty::Num);
                        match op {
                            BinOp::Eq => cmp(CmpOp::Eq),
                            BinOp::Ne => cmp(CmpOp::Ne),
                            BinOp::Lt => cmp(CmpOp::Lt),
                            BinOp::Le => cmp(CmpOp::Le),
                            BinOp::Gt => cmp(CmpOp::Gt),
                            BinOp::Ge => cmp(CmpOp::Ge),
                            BinOp::BitAnd => bin(BinaryOp::BitAnd),
                            BinOp::Add => bin(BinaryOp::Add),
                            BinOp::Sub => bin(BinaryOp::Sub),
                            BinOp::Mul => bin(BinaryOp::Mul),
                            BinOp::Div => bin(BinaryOp::Div),
                            BinOp::And | BinOp::Or => unreachable!(),
                        }
                    }
                }
            }
        })
    }

    fn numeric(&mut self, e: &ast::Expr, scope: Scope) -> Option<Expr> {
        let (x, ty) = self.lower(e, scope)?;
        if ty != Ty::Num {
            self.error(e.span, "type error: expected a numeric expression, found a boolean one");
            return None;
        }
        Some(x)
    }

    fn boolean(&mut self, e: &ast::Expr, scope: Scope) -> Option<Expr> {
        let (x, ty) = self.lower(e, scope)?;
        if ty != Ty::Bool {
            self.error(e.span, "type error: expected a boolean expression, found a numeric one");
            return None;
        }
        Some(x)
    }

    fn register_index(&mut self, raw: &(String, Span)) -> Option<u32> {
        let idx: u32 = self.number(raw, "register index")?;
        if idx >= self.registers {
            self.error(raw.1, format!("register index {idx} out of range ({} registers)", self.registers));
            return None;
        }
        Some(idx)
    }

    fn lower_name(&mut self, name: &str, span: Span, scope: Scope) -> Option<(Expr, Ty)> {
        if name == "now" {
            return Some((Expr::Now, Ty::Num));
        }
        if let Some(input) = name.strip_prefix("input.") {
            if matches!(scope, Scope::Match) {
                self.error(span, format!("remote inputs cannot be used in {}", scope.describe()));
                return None;
            }
            return match self.inputs.iter().position(|i| i == input) {
                Some(i) => Some((Expr::Input(i as u32), Ty::Num)),
                None => {
                    self.error(span, format!("unresolved input reference '{input}'"));
                    None
                }
            };
        }
        if let Some(f) = Field::from_name(name) {
            return Some((Expr::Field(f), Ty::Num));
        }
        if let Some(c) = constant(name) {
            return Some((Expr::Const(c), Ty::Num));
        }
        if let Some(&i) = self.features.get(name) {
            match scope {
                Scope::Match | Scope::Inc => {
                    self.error(span, format!("features cannot be used in {}", scope.describe()));
                    return None;
                }
                Scope::Feature(me) => self.feature_deps[me as usize].push(i),
                _ => {}
            }
            return Some((Expr::Feature(i), Ty::Num));
        }
        if let Some(&m) = self.metrics.get(name) {
            if matches!(scope, Scope::Match | Scope::Inc) {
                self.error(span, format!("metric queries cannot be used in {}", scope.describe()));
                return None;
            }
            let src = &self.spec.metrics[m as usize].key;
            let events: Vec<u32> = Vec::new();
            let key = self.key_ref(src, &events, true)?;
            return Some((Expr::Metric { metric: m, key }, Ty::Num));
        }
        if name.contains('.') {
            self.error(span, format!("unknown field selector '{name}'"));
        } else {
            self.error(span, format!("unresolved feature reference '{name}'"));
        }
        None
    }

    fn lower_call(&mut self, name: &str, args: &[ast::Expr], span: Span, scope: Scope) -> Option<(Expr, Ty)> {
        let arity = |cx: &mut Self, n: usize| {
            if args.len() != n {
                cx.error(span, format!("{name}() takes {n} argument(s), got {}", args.len()));
                false
            } else {
                true
            }
        };
        let trigger_ok = |cx: &mut Self| {
            if matches!(scope, Scope::Condition | Scope::Value) {
                true
            } else {
                cx.error(span, format!("{name}() can only be used in rule conditions"));
                false
            }
        };
        match name {
            "abs" | "log" | "sqrt" => {
                if !arity(self, 1) {
                    return None;
                }
                let op = match name {
                    "abs" => UnaryOp::Abs,
                    "log" => UnaryOp::Log,
                    _ => UnaryOp::Sqrt,
                };
                let x = self.numeric(&args[0], scope)?;
                Some((Expr::Unary(op, Box::new(x)), Ty::Num))
            }
            "min" | "max" => {
                if !arity(self, 2) {
                    return None;
                }
                let (a, b) = (self.numeric(&args[0], scope), self.numeric(&args[1], scope));
                let op = if name == "min" { BinaryOp::Min } else { BinaryOp::Max };
                Some((Expr::Binary(op, Box::new(a?), Box::new(b?)), Ty::Num))
            }
            "timeout" => {
                if !trigger_ok(self) {
                    return None;
                }
                match args {
                    [] => Some((Expr::Trigger(TriggerTest::Timeout(None)), Ty::Bool)),
                    [ast::Expr { kind: ExprKind::Number(n), span: s }] => {
                        let tag = self.number::<u32>(&(format!("{n}"), *s), "timeout tag")?;
                        Some((Expr::Trigger(TriggerTest::Timeout(Some(tag))), Ty::Bool))
                    }
                    _ => {
                        self.error(span, "timeout() takes an optional integer tag");
                        None
                    }
                }
            }
            "event" => {
                if !trigger_ok(self) {
                    return None;
                }
                match args {
                    [ast::Expr { kind: ExprKind::Name(ev), span: s }] => match self.events.get(ev.as_str()) {
                        Some(&i) => Some((Expr::Trigger(TriggerTest::Event(i)), Ty::Bool)),
                        None => {
                            self.error(*s, format!("unresolved event reference '{ev}'"));
                            None
                        }
                    },
                    _ => {
                        self.error(span, "event() takes one event name");
                        None
                    }
                }
            }
            "evicted" => {
                if !trigger_ok(self) || !arity(self, 0) {
                    return None;
                }
                Some((Expr::Trigger(TriggerTest::Evicted), Ty::Bool))
            }
            _ => {
                self.error(span, format!("unknown function '{name}'"));
                None
            }
        }
    }

    fn check_depth(&mut self, e: &ast::Expr) -> bool {
        let d = e.depth();
        if d > MAX_DEPTH {
            self.error(e.span, format!("expression depth {d} exceeds the limit of {MAX_DEPTH}"));
            false
        } else {
            true
        }
    }

    fn lower_root(&mut self, e: &ast::Expr, scope: Scope, want: Ty, what: &str) -> Option<Expr> {
        if !self.check_depth(e) {
            return None;
        }
        let (x, ty) = self.lower(e, scope)?;
        if ty != want {
            let w = if want == Ty::Num { "numeric" } else { "boolean" };
            self.error(e.span, format!("type error: {what} must be {w}"));
            return None;
        }
        Some(x)
    }
}

fn feature_cycles(deps: &[Vec<u32>]) -> Vec<Vec<u32>> {
    // Iterative DFS with colors; each back edge yields one cycle.
    let n = deps.len();
    let mut color = vec![0u8; n];
    let mut cycles = Vec::new();
    for root in 0..n {
        if color[root] != 0 {
            continue;
        }
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        color[root] = 1;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            if *next < deps[node].len() {
                let child = deps[node][*next] as usize;
                *next += 1;
                match color[child] {
                    0 => {
                        color[child] = 1;
                        stack.push((child, 0));
                    }
                    1 => {
                        let pos = stack.iter().position(|&(v, _)| v == child).unwrap();
                        let mut cyc: Vec<u32> = stack[pos..].iter().map(|&(v, _)| v as u32).collect();
                        cyc.push(child as u32);
                        cycles.push(cyc);
                    }
                    _ => {}
                }
            } else {
                color[node] = 2;
                stack.pop();
            }
        }
    }
    cycles
}

/// Kahn's algorithm, always emitting the lowest available declaration index.
fn topo_order(deps: &[Vec<u32>]) -> Vec<u32> {
    let n = deps.len();
    let mut indegree = vec![0usize; n];
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (f, ds) in deps.iter().enumerate() {
        let mut ds = ds.clone();
        ds.sort_unstable();
        ds.dedup();
        indegree[f] = ds.len();
        for d in ds {
            users[d as usize].push(f);
        }
    }
    let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut out = Vec::with_capacity(n);
    while let Some(f) = ready.pop_first() {
        out.push(f as u32);
        for &u in &users[f] {
            indegree[u] -= 1;
            if indegree[u] == 0 {
                ready.insert(u);
            }
        }
    }
    out
}

fn remap(e: &mut Expr, map: &[u32]) {
    match e {
        Expr::Feature(i) => *i = map[*i as usize],
        Expr::Unary(_, x) | Expr::Not(x) => remap(x, map),
        Expr::Binary(_, a, b) | Expr::Compare(_, a, b) | Expr::And(a, b) | Expr::Or(a, b) => {
            remap(a, map);
            remap(b, map);
        }
        _ => {}
    }
}

fn metric_params(cx: &mut Cx, m: &ast::MetricDecl, kind: MetricKind) -> Option<MetricParams> {
    let allowed: &[&str] = match kind {
        MetricKind::CountMin => &["epsilon", "delta", "conservative"],
        MetricKind::Bloom => &["bits", "hashes"],
        MetricKind::Dleft => &["subtables", "buckets", "cells"],
    };
    let mut ok = true;
    for p in &m.params {
        if !allowed.contains(&p.name.as_str()) {
            cx.error(p.span, format!("parameter '{}' does not apply to {} metrics", p.name, kind.name()));
            ok = false;
        }
    }
    let get = |name: &str| m.params.iter().find(|p| p.name == name).map(|p| (p.value.clone(), p.span));
    let mut req = |cx: &mut Cx, name: &str| -> Option<(String, Span)> {
        let v = get(name);
        if v.is_none() {
            cx.error(m.span, format!("{} metric '{}' requires parameter '{name}'", kind.name(), m.name.name));
            ok = false;
        }
        v
    };
    let params = match kind {
        MetricKind::CountMin => {
            let eps = req(cx, "epsilon").and_then(|r| cx.number::<f64>(&r, "epsilon"));
            let delta = req(cx, "delta").and_then(|r| cx.number::<f64>(&r, "delta"));
            let conservative = match get("conservative") {
                None => Some(false),
                Some(r) => cx.number::<bool>(&r, "conservative flag"),
            };
            MetricParams::CountMin { epsilon: eps?, delta: delta?, conservative: conservative? }
        }
        MetricKind::Bloom => {
            let bits = req(cx, "bits").and_then(|r| cx.number::<u64>(&r, "bit count"));
            let hashes = req(cx, "hashes").and_then(|r| cx.number::<u32>(&r, "hash count"));
            MetricParams::Bloom { bits: bits?, hashes: hashes? }
        }
        MetricKind::Dleft => {
            let subtables = match get("subtables") {
                None => Some(4),
                Some(r) => cx.number::<u32>(&r, "subtable count"),
            };
            let buckets = req(cx, "buckets").and_then(|r| cx.number::<u32>(&r, "bucket count"));
            let cells = match get("cells") {
                None => Some(8),
                Some(r) => cx.number::<u32>(&r, "cell count"),
            };
            MetricParams::Dleft { subtables: subtables?, buckets: buckets?, cells: cells? }
        }
    };
    if !ok {
        return None;
    }
    if let Err(e) = params.check() {
        cx.error(m.span, format!("invalid sizing for metric '{}': {e}", m.name.name));
        return None;
    }
    Some(params)
}

fn window(cx: &mut Cx, w: &ast::WindowDecl) -> Option<WindowSpec> {
    let length: u64 = cx.number(&w.length, "window length")?;
    let mode = match w.mode.as_ref().map(|m| m.name.as_str()) {
        None | Some("sliding") => {
            let panes = match &w.panes {
                Some(p) => cx.number::<u32>(p, "pane count")?,
                None => DEFAULT_PANES,
            };
            WindowMode::Sliding { panes }
        }
        Some("periodic_reset") => {
            if let Some(p) = &w.panes {
                cx.error(p.1, "panes only apply to sliding windows");
                return None;
            }
            WindowMode::PeriodicReset
        }
        Some(other) => {
            let span = w.mode.as_ref().unwrap().span;
            cx.error(span, format!("unknown window mode '{other}' (expected sliding or periodic_reset)"));
            return None;
        }
    };
    let spec = WindowSpec { length_ms: length, mode };
    if let Err(e) = spec.check() {
        cx.error(w.length.1, format!("invalid window: {e}"));
        return None;
    }
    Some(spec)
}

fn template(cx: &mut Cx, pieces: &[TemplatePiece]) -> Option<Template> {
    let mut parts = Vec::new();
    let mut ok = true;
    for p in pieces {
        match p {
            TemplatePiece::Text(t) => parts.push(TemplatePart::Text(t.clone())),
            TemplatePiece::Placeholder(id) => {
                let part = match id.name.as_str() {
                    "entity" => Some(TemplatePart::Entity),
                    "state" => Some(TemplatePart::State),
                    "event" => Some(TemplatePart::Event),
                    n => {
                        if let Some(idx) = n.strip_prefix("reg[").and_then(|r| r.strip_suffix(']')) {
                            cx.register_index(&(idx.trim().to_string(), id.span)).map(TemplatePart::Register)
                        } else if let Some(&f) = cx.features.get(n) {
                            Some(TemplatePart::Feature(f))
                        } else {
                            cx.error(id.span, format!("unknown template placeholder '{{{n}}}'"));
                            None
                        }
                    }
                };
                match part {
                    Some(p) => parts.push(p),
                    None => ok = false,
                }
            }
        }
    }
    ok.then_some(Template { parts })
}

fn analyze(spec: &ast::AppSpec) -> (ValidationReport, Option<ProbeProgram>) {
    let mut cx = Cx {
        spec,
        diags: Vec::new(),
        events: HashMap::new(),
        metrics: HashMap::new(),
        features: HashMap::new(),
        states: HashMap::new(),
        exports: HashMap::new(),
        secondary: Vec::new(),
        event_secondary: Vec::new(),
        inputs: Vec::new(),
        registers: DEFAULT_REGISTERS,
        feature_deps: vec![Vec::new(); spec.features.len()],
    };

    // Header.
    if !is_ident(&spec.name.name) {
        cx.error(spec.name.span, format!("invalid app name '{}'", spec.name.name));
    }
    if let Some(r) = &spec.registers {
        if let Some(n) = cx.number::<u32>(r, "register count") {
            if n > MAX_REGISTERS {
                cx.error(r.1, format!("register count {n} exceeds {MAX_REGISTERS}"));
            } else {
                cx.registers = n;
            }
        }
    }
    let seed = spec.seed.as_ref().and_then(|s| cx.number::<u64>(s, "seed")).unwrap_or(0);
    let mut capacity = DEFAULT_ENTITY_CAPACITY;
    if let Some(c) = &spec.entity_capacity {
        if let Some(n) = cx.number::<u64>(c, "entity capacity") {
            if n == 0 {
                cx.error(c.1, "entity capacity must be at least 1");
            } else {
                capacity = n;
            }
        }
    }

    // Declarations.
    let mut seen = HashMap::new();
    for (i, e) in spec.events.iter().enumerate() {
        cx.declare(|c| &mut c.events, "event", &e.name, i as u32, &mut seen);
    }
    let mut seen = HashMap::new();
    for (i, m) in spec.metrics.iter().enumerate() {
        cx.declare(|c| &mut c.metrics, "metric", &m.name, i as u32, &mut seen);
    }
    let mut seen = HashMap::new();
    for (i, f) in spec.features.iter().enumerate() {
        cx.declare(|c| &mut c.features, "feature", &f.name, i as u32, &mut seen);
    }
    let mut seen = HashMap::new();
    for (i, s) in spec.states.iter().enumerate() {
        cx.declare(|c| &mut c.states, "state", &s.name, i as u32, &mut seen);
    }
    let mut export_spans: HashMap<&str, Span> = HashMap::new();
    for (i, x) in spec.exports.iter().enumerate() {
        if !valid_topic(&x.topic.name) {
            cx.error(
                x.topic.span,
                format!("invalid topic '{}' (segments of [a-z0-9_] separated by '.')", x.topic.name),
            );
        }
        if let Some(first) = export_spans.get(x.topic.name.as_str()) {
            let first = *first;
            cx.error(x.topic.span, format!("duplicate export topic '{}' (first declared at {first})", x.topic.name));
            continue;
        }
        export_spans.insert(&x.topic.name, x.topic.span);
        cx.exports.insert(&x.topic.name, i as u32);
    }
    for f in &spec.features {
        if cx.metrics.contains_key(f.name.name.as_str()) {
            cx.error(f.name.span, format!("name '{}' is declared as both a metric and a feature", f.name.name));
        }
    }
    for id in spec.features.iter().map(|f| &f.name).chain(spec.metrics.iter().map(|m| &m.name)) {
        if RESERVED.contains(&id.name.as_str()) || constant(&id.name).is_some() || Field::from_name(&id.name).is_some()
        {
            cx.error(id.span, format!("name '{}' shadows a built-in", id.name));
        }
    }

    // Secondary keys and remote inputs get program-wide indices in order of
    // first appearance.
    for e in &spec.events {
        let mut mine = Vec::new();
        match &e.source {
            ast::EventSource::Packet { secondary_keys, .. } => {
                let mut local: HashMap<&str, Span> = HashMap::new();
                for s in secondary_keys {
                    if !is_ident(&s.name.name) || s.name.name == "primary" {
                        cx.error(s.name.span, format!("invalid secondary key name '{}'", s.name.name));
                        continue;
                    }
                    if let Some(first) = local.get(s.name.name.as_str()) {
                        let first = *first;
                        cx.error(
                            s.name.span,
                            format!("duplicate secondary key '{}' (first declared at {first})", s.name.name),
                        );
                        continue;
                    }
                    local.insert(&s.name.name, s.name.span);
                    let id = match cx.secondary.iter().position(|n| *n == s.name.name) {
                        Some(i) => i,
                        None => {
                            cx.secondary.push(s.name.name.clone());
                            cx.secondary.len() - 1
                        }
                    };
                    mine.push(id as u32);
                }
            }
            ast::EventSource::Remote { inputs, .. } => {
                let mut local: HashMap<&str, Span> = HashMap::new();
                for inp in inputs {
                    if !is_ident(&inp.name.name) {
                        cx.error(inp.name.span, format!("invalid input name '{}'", inp.name.name));
                        continue;
                    }
                    if let Some(first) = local.get(inp.name.name.as_str()) {
                        let first = *first;
                        cx.error(
                            inp.name.span,
                            format!("duplicate input '{}' (first declared at {first})", inp.name.name),
                        );
                        continue;
                    }
                    local.insert(&inp.name.name, inp.name.span);
                    if !cx.inputs.contains(&inp.name.name) {
                        cx.inputs.push(inp.name.name.clone());
                    }
                }
            }
        }
        cx.event_secondary.push(mine);
    }

    // Events.
    let mut events = Vec::new();
    for e in &spec.events {
        let source = match &e.source {
            ast::EventSource::Packet { predicate, primary_key, secondary_keys } => {
                let pred = cx.lower_root(predicate, Scope::Match, Ty::Bool, "an event match predicate");
                let primary = cx.fields(primary_key, "primary key");
                let mut secondary = Vec::new();
                for s in secondary_keys {
                    let id = cx.secondary.iter().position(|n| *n == s.name.name);
                    if let (Some(k), Some(id)) = (cx.fields(&s.key, "secondary key"), id) {
                        if !secondary.iter().any(|(i, _)| *i == id as u32) {
                            secondary.push((id as u32, k));
                        }
                    }
                }
                match (pred, primary) {
                    (Some(predicate), Some(primary)) => Some(EventSource::Packet { predicate, primary, secondary }),
                    _ => None,
                }
            }
            ast::EventSource::Remote { topic, key, entity_field, inputs } => {
                if !valid_topic(&topic.name) {
                    cx.error(
                        topic.span,
                        format!("invalid topic '{}' (segments of [a-z0-9_] separated by '.')", topic.name),
                    );
                }
                if entity_field.is_empty() {
                    cx.error(e.span, "remote event entity_field is empty");
                }
                let mut ins = Vec::new();
                for inp in inputs {
                    if inp.field.is_empty() {
                        cx.error(inp.span, format!("input '{}' has an empty payload field", inp.name.name));
                    }
                    if let Some(i) = cx.inputs.iter().position(|n| *n == inp.name.name) {
                        if !ins.iter().any(|(x, _)| *x == i as u32) {
                            ins.push((i as u32, inp.field.clone()));
                        }
                    }
                }
                cx.fields(key, "remote event key").map(|key| EventSource::Remote {
                    topic: topic.name.clone(),
                    key,
                    entity_field: entity_field.clone(),
                    inputs: ins,
                })
            }
        };
        events.push(source.map(|source| CompiledEvent { name: e.name.name.clone(), source }));
    }

    // Metrics.
    let mut metrics = Vec::new();
    for m in &spec.metrics {
        let kind = match MetricKind::from_name(&m.kind.name) {
            Some(k) => Some(k),
            None => {
                cx.error(
                    m.kind.span,
                    format!("unknown metric kind '{}' (expected count_min, bloom or dleft)", m.kind.name),
                );
                None
            }
        };
        let params = kind.and_then(|k| metric_params(&mut cx, m, k));
        let ev_ids: Option<Vec<u32>> = match &m.events {
            None => Some((0..spec.events.len() as u32).collect()),
            Some(list) => {
                let mut ids = Vec::new();
                let mut ok = true;
                for id in list {
                    match cx.events.get(id.name.as_str()) {
                        Some(&i) => ids.push(i),
                        None => {
                            cx.error(id.span, format!("unresolved event reference '{}'", id.name));
                            ok = false;
                        }
                    }
                }
                ids.sort_unstable();
                ids.dedup();
                ok.then_some(ids)
            }
        };
        let key = ev_ids.as_ref().and_then(|ids| cx.key_ref(&m.key, ids, false));
        let win = match &m.window {
            Some(w) => window(&mut cx, w).map(Some),
            None => Some(None),
        };
        let inc = match &m.inc {
            Some(x) => cx.lower_root(x, Scope::Inc, Ty::Num, "a metric increment").map(Some),
            None => Some(None),
        };
        metrics.push(match (params, ev_ids, key, win, inc) {
            (Some(params), Some(events), Some(key), Some(window), Some(inc)) => {
                Some(CompiledMetric { name: m.name.name.clone(), params, key, events, window, inc })
            }
            _ => None,
        });
    }

    // Features.
    let mut features = Vec::new();
    for (i, f) in spec.features.iter().enumerate() {
        features.push(cx.lower_root(&f.expr, Scope::Feature(i as u32), Ty::Num, "a feature"));
    }
    let cycles = feature_cycles(&cx.feature_deps);
    let cyclic = !cycles.is_empty();
    for cyc in cycles {
        let names: Vec<&str> = cyc.iter().map(|&i| spec.features[i as usize].name.name.as_str()).collect();
        let at = spec.features[cyc[0] as usize].name.span;
        cx.error(at, format!("feature dependency cycle: {}", names.join(" -> ")));
    }

    // Exports.
    let mut exports = Vec::new();
    for x in &spec.exports {
        let kind = match x.kind.name.as_str() {
            "alert" => Some(ExportKind::Alert),
            "features" => Some(ExportKind::Features),
            other => {
                cx.error(x.kind.span, format!("unknown export kind '{other}' (expected alert or features)"));
                None
            }
        };
        let feats = match &x.features {
            None => Some(None),
            Some(list) => {
                let mut ids = Vec::new();
                let mut ok = true;
                for id in list {
                    match cx.features.get(id.name.as_str()) {
                        Some(&i) => ids.push(i),
                        None => {
                            cx.error(id.span, format!("unresolved feature reference '{}'", id.name));
                            ok = false;
                        }
                    }
                }
                ok.then_some(Some(ids))
            }
        };
        exports.push(match (kind, feats) {
            (Some(kind), Some(features)) => Some(ExportBinding { topic: x.topic.name.clone(), kind, features }),
            _ => None,
        });
    }

    // States.
    let initial = match cx.states.get(spec.initial_state.name.as_str()) {
        Some(&i) => Some(i),
        None => {
            cx.error(spec.initial_state.span, format!("initial state '{}' is not declared", spec.initial_state.name));
            None
        }
    };
    let mut states = Vec::new();
    let mut edges: Vec<Vec<u32>> = vec![Vec::new(); spec.states.len()];
    for (si, s) in spec.states.iter().enumerate() {
        let mut rules = Vec::new();
        let mut ok = true;
        for r in &s.rules {
            let cond = cx.lower_root(&r.condition, Scope::Condition, Ty::Bool, "a rule condition");
            let next = match &r.next_state {
                None => Some(si as u32),
                Some(n) => match cx.states.get(n.name.as_str()) {
                    Some(&i) => Some(i),
                    None => {
                        cx.error(n.span, format!("unresolved state reference '{}'", n.name));
                        None
                    }
                },
            };
            if let Some(n) = next {
                edges[si].push(n);
            }
            let mut actions = Vec::new();
            for a in &r.actions {
                let spec_action = match &a.kind {
                    ActionKind::Alert { topic, message } => {
                        let export = resolve_export(&mut cx, topic, ExportKind::Alert);
                        let t = template(&mut cx, message);
                        match (export, t) {
                            (Some(export), Some(template)) => Some(ActionSpec::PublishAlert { export, template }),
                            _ => None,
                        }
                    }
                    ActionKind::Export { topic } => resolve_export(&mut cx, topic, ExportKind::Features)
                        .map(|export| ActionSpec::ExportFeatures { export }),
                    ActionKind::Set { register, value } => {
                        let idx = cx.register_index(register);
                        let v = cx.lower_root(value, Scope::Value, Ty::Num, "a register value");
                        match (idx, v) {
                            (Some(index), Some(value)) => Some(ActionSpec::SetRegister { index, value }),
                            _ => None,
                        }
                    }
                    ActionKind::Schedule { delay, tag } => {
                        let d = cx.number::<u64>(delay, "timeout delay");
                        let d = match d {
                            Some(0) => {
                                cx.error(delay.1, "timeout delay must be at least 1 ms");
                                None
                            }
                            d => d,
                        };
                        let t = match tag {
                            Some(t) => cx.number::<u32>(t, "timeout tag"),
                            None => Some(0),
                        };
                        match (d, t) {
                            (Some(delay_ms), Some(tag)) => Some(ActionSpec::ScheduleTimeout { delay_ms, tag }),
                            _ => None,
                        }
                    }
                    ActionKind::Cancel { tag } => match tag {
                        Some(t) => {
                            cx.number::<u32>(t, "timeout tag").map(|t| ActionSpec::CancelTimeouts { tag: Some(t) })
                        }
                        None => Some(ActionSpec::CancelTimeouts { tag: None }),
                    },
                    ActionKind::Reset { metrics: names } => {
                        let mut ids = Vec::new();
                        let mut good = true;
                        if names.is_empty() {
                            cx.error(a.span, "reset lists no metrics");
                            good = false;
                        }
                        for n in names {
                            match cx.metrics.get(n.name.as_str()) {
                                Some(&i) => ids.push(i),
                                None => {
                                    cx.error(n.span, format!("unresolved metric reference '{}'", n.name));
                                    good = false;
                                }
                            }
                        }
                        good.then_some(ActionSpec::ResetMetrics { metrics: ids })
                    }
                    ActionKind::Drop => Some(ActionSpec::DropEntity),
                };
                match spec_action {
                    Some(x) => actions.push(x),
                    None => ok = false,
                }
            }
            match (cond, next) {
                (Some(condition), Some(next_state)) if ok => rules.push(Rule { condition, actions, next_state }),
                _ => ok = false,
            }
        }
        states.push(ok.then(|| StateTable { name: s.name.name.clone(), rules }));
    }

    // Reachability.
    if let Some(init) = initial {
        let mut seen = vec![false; spec.states.len()];
        let mut queue = VecDeque::from([init]);
        seen[init as usize] = true;
        while let Some(s) = queue.pop_front() {
            for &n in &edges[s as usize] {
                if !seen[n as usize] {
                    seen[n as usize] = true;
                    queue.push_back(n);
                }
            }
        }
        for (i, s) in spec.states.iter().enumerate() {
            if !seen[i] && cx.states.get(s.name.name.as_str()) == Some(&(i as u32)) {
                cx.warning(s.name.span, format!("unreachable state '{}'", s.name.name));
            }
        }
    }

    let report = ValidationReport { diagnostics: cx.diags };
    if report.has_errors() || cyclic {
        return (report, None);
    }

    // Everything resolved; assemble the program with features in evaluation order.
    let order = topo_order(&cx.feature_deps);
    let mut new_index = vec![0u32; order.len()];
    for (pos, &old) in order.iter().enumerate() {
        new_index[old as usize] = pos as u32;
    }
    let mut features: Vec<Expr> = features.into_iter().map(Option::unwrap).collect();
    for f in &mut features {
        remap(f, &new_index);
    }
    let features: Vec<Expr> = order.iter().map(|&o| features[o as usize].clone()).collect();
    let feature_names = order.iter().map(|&o| spec.features[o as usize].name.name.clone()).collect();

    let mut states: Vec<StateTable> = states.into_iter().map(Option::unwrap).collect();
    for s in &mut states {
        for r in &mut s.rules {
            remap(&mut r.condition, &new_index);
            for a in &mut r.actions {
                match a {
                    ActionSpec::SetRegister { value, .. } => remap(value, &new_index),
                    ActionSpec::PublishAlert { template, .. } => {
                        for p in &mut template.parts {
                            if let TemplatePart::Feature(i) = p {
                                *i = new_index[*i as usize];
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
    }
    let mut exports: Vec<ExportBinding> = exports.into_iter().map(Option::unwrap).collect();
    for x in &mut exports {
        if let Some(ids) = &mut x.features {
            for i in ids.iter_mut() {
                *i = new_index[*i as usize];
            }
        }
    }

    let program = ProbeProgram {
        name: spec.name.name.clone(),
        version: 0,
        seed,
        entity_capacity: capacity,
        events: events.into_iter().map(Option::unwrap).collect(),
        secondary_keys: cx.secondary,
        inputs: cx.inputs,
        metrics: metrics.into_iter().map(Option::unwrap).collect(),
        features,
        xfsm: XfsmTable {
            states,
            initial_state: initial.unwrap(),
            registers: cx.registers,
            exports,
            feature_names,
            event_names: spec.events.iter().map(|e| e.name.name.clone()).collect(),
        },
    };
    (report, Some(program))
}

fn resolve_export(cx: &mut Cx, topic: &Ident, want: ExportKind) -> Option<u32> {
    let Some(&i) = cx.exports.get(topic.name.as_str()) else {
        cx.error(topic.span, format!("undeclared export topic '{}'", topic.name));
        return None;
    };
    let kind = cx.spec.exports[i as usize].kind.name.as_str();
    let want_name = match want {
        ExportKind::Alert => "alert",
        ExportKind::Features => "features",
    };
    if kind != want_name {
        cx.error(topic.span, format!("export '{}' is not a {want_name} export", topic.name));
        return None;
    }
    Some(i)
}

/// Check every cross-reference, type and sizing constraint of a spec.
pub fn validate(spec: &ast::AppSpec) -> ValidationReport {
    analyze(spec).0
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("program has {} error(s); first: {}", .0.len(), .0.first().map(|d| d.to_string()).unwrap_or_default())]
pub struct CompileError(pub Vec<Diagnostic>);

/// Lower a spec to an executable program. Fails exactly when [`validate`]
/// reports errors.
pub fn compile(spec: &ast::AppSpec) -> Result<ProbeProgram, CompileError> {
    match analyze(spec) {
        (_, Some(p)) => Ok(p),
        (report, None) => Err(CompileError(report.errors().cloned().collect())),
    }
}
