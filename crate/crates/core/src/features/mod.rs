//! Compiled expression trees and their evaluation: numeric features over
//! metric outputs, registers and packet fields, plus boolean conditions.
//!
//! Arithmetic faults (division by zero, log of a non-positive number, square
//! root of a negative number, non-finite results) never produce a default
//! value. A faulted feature is flagged in the [`FeatureVector`], and any
//! condition that touches a faulted feature or faults itself is false.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::pipeline::{Field, KeySpec, PacketView};

pub const MAX_DEPTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnaryOp {
    Neg,
    Abs,
    Log,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
    BitAnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    Lt,
    Le,
    Eq,
    Ne,
    Ge,
    Gt,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Ge => ">=",
            CmpOp::Gt => ">",
        }
    }

    fn apply(self, a: f64, b: f64) -> bool {
        match self {
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            CmpOp::Ge => a >= b,
            CmpOp::Gt => a > b,
        }
    }
}

/// Which key a metric query uses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyRef {
    /// The current entity's primary key.
    Primary,
    /// A named secondary key (index into the program's secondary-key names).
    Secondary(u32),
    /// Fields read from the current packet.
    Fields(KeySpec),
}

/// What caused the current evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trigger {
    Event(u32),
    Timeout(u32),
    Evicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriggerTest {
    Event(u32),
    /// `None` matches any timeout tag.
    Timeout(Option<u32>),
    Evicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Const(f64),
    Bool(bool),
    Metric { metric: u32, key: KeyRef },
    Register(u32),
    Field(Field),
    Feature(u32),
    Input(u32),
    Now,
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    Compare(CmpOp, Box<Expr>, Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Not(Box<Expr>),
    Trigger(TriggerTest),
}

impl Expr {
    pub fn is_boolean(&self) -> bool {
        matches!(
            self,
            Expr::Bool(_) | Expr::Compare(..) | Expr::And(..) | Expr::Or(..) | Expr::Not(_) | Expr::Trigger(_)
        )
    }

    pub fn depth(&self) -> usize {
        1 + self.children().map(|c| c.depth()).max().unwrap_or(0)
    }

    pub fn children(&self) -> impl Iterator<Item = &Expr> {
        let (a, b): (Option<&Expr>, Option<&Expr>) = match self {
            Expr::Unary(_, x) | Expr::Not(x) => (Some(x), None),
            Expr::Binary(_, x, y) | Expr::Compare(_, x, y) | Expr::And(x, y) | Expr::Or(x, y) => (Some(x), Some(y)),
            _ => (None, None),
        };
        a.into_iter().chain(b)
    }

    /// Visit every node in pre-order.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        for c in self.children() {
            c.walk(f);
        }
    }

    pub fn feature_refs(&self) -> Vec<u32> {
        let mut out = Vec::new();
        self.walk(&mut |e| {
            if let Expr::Feature(i) = e {
                out.push(*i);
            }
        });
        out
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Bool(b) => write!(f, "{b}"),
            Expr::Metric { metric, .. } => write!(f, "metric#{metric}"),
            Expr::Register(i) => write!(f, "reg[{i}]"),
            Expr::Field(x) => write!(f, "{x}"),
            Expr::Feature(i) => write!(f, "feature#{i}"),
            Expr::Input(i) => write!(f, "input#{i}"),
            Expr::Now => f.write_str("now"),
            Expr::Unary(op, x) => write!(f, "{op:?}({x})"),
            Expr::Binary(op, a, b) => write!(f, "{op:?}({a}, {b})"),
            Expr::Compare(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::And(a, b) => write!(f, "({a} and {b})"),
            Expr::Or(a, b) => write!(f, "({a} or {b})"),
            Expr::Not(a) => write!(f, "not {a}"),
            Expr::Trigger(t) => write!(f, "{t:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultReason {
    DivisionByZero,
    LogOfNonPositive,
    SqrtOfNegative,
    NonFinite,
    NonIntegerMask,
    MissingField,
    MissingKey,
    MissingInput,
    FaultedFeature,
    TypeMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fault {
    pub reason: FaultReason,
    /// Rendering of the node that faulted.
    pub location: String,
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at {}", self.reason, self.location)
    }
}

fn fault(reason: FaultReason, at: &Expr) -> Fault {
    Fault { reason, location: at.to_string() }
}

/// Resolves metric queries for the entity and packet under evaluation.
pub trait MetricSource {
    /// `None` when the key cannot be formed (e.g. packet fields absent).
    fn query(&self, metric: u32, key: &KeyRef) -> Option<f64>;
}

/// No metrics at all; every query faults.
pub struct NoMetrics;

impl MetricSource for NoMetrics {
    fn query(&self, _: u32, _: &KeyRef) -> Option<f64> {
        None
    }
}

/// Everything an expression may read.
pub struct EvalContext<'a> {
    pub metrics: &'a dyn MetricSource,
    pub registers: &'a [f64],
    pub packet: Option<&'a PacketView>,
    pub inputs: &'a [Option<f64>],
    pub trigger: Trigger,
    pub now: u64,
}

impl<'a> EvalContext<'a> {
    pub fn bare(trigger: Trigger, now: u64) -> EvalContext<'static> {
        EvalContext { metrics: &NoMetrics, registers: &[], packet: None, inputs: &[], trigger, now }
    }
}

/// Dense feature values with a per-feature fault flag. Faulted values are NaN.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub fault_mask: Vec<bool>,
}

impl FeatureVector {
    pub fn with_len(n: usize) -> Self {
        FeatureVector { values: vec![f64::NAN; n], fault_mask: vec![true; n] }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len();
        FeatureVector { values, fault_mask: vec![false; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        match self.fault_mask.get(i) {
            Some(false) => Some(self.values[i]),
            _ => None,
        }
    }

    pub fn set(&mut self, i: usize, v: Result<f64, Fault>) {
        match v {
            Ok(x) => {
                self.values[i] = x;
                self.fault_mask[i] = false;
            }
            Err(_) => {
                self.values[i] = f64::NAN;
                self.fault_mask[i] = true;
            }
        }
    }
}

fn finite(v: f64, at: &Expr) -> Result<f64, Fault> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(fault(FaultReason::NonFinite, at))
    }
}

fn mask_operand(v: f64, at: &Expr) -> Result<u64, Fault> {
    if v >= 0.0 && v.fract() == 0.0 && v < 9_007_199_254_740_992.0 {
        Ok(v as u64)
    } else {
        Err(fault(FaultReason::NonIntegerMask, at))
    }
}

/// Evaluate a numeric expression.
pub fn eval_feature(expr: &Expr, ctx: &EvalContext, features: &FeatureVector) -> Result<f64, Fault> {
    match expr {
        Expr::Const(c) => Ok(*c),
        Expr::Metric { metric, key } => {
            ctx.metrics.query(*metric, key).ok_or_else(|| fault(FaultReason::MissingKey, expr))
        }
        Expr::Register(i) => {
            ctx.registers.get(*i as usize).copied().ok_or_else(|| fault(FaultReason::TypeMismatch, expr))
        }
        Expr::Field(f) => {
            ctx.packet.and_then(|p| p.field(*f)).map(|v| v as f64).ok_or_else(|| fault(FaultReason::MissingField, expr))
        }
        Expr::Feature(i) => features.get(*i as usize).ok_or_else(|| fault(FaultReason::FaultedFeature, expr)),
        Expr::Input(i) => {
            ctx.inputs.get(*i as usize).copied().flatten().ok_or_else(|| fault(FaultReason::MissingInput, expr))
        }
        Expr::Now => Ok(ctx.now as f64),
        Expr::Unary(op, x) => {
            let v = eval_feature(x, ctx, features)?;
            match op {
                UnaryOp::Neg => Ok(-v),
                UnaryOp::Abs => Ok(v.abs()),
                UnaryOp::Log if v <= 0.0 => Err(fault(FaultReason::LogOfNonPositive, expr)),
                UnaryOp::Log => Ok(v.ln()),
                UnaryOp::Sqrt if v < 0.0 => Err(fault(FaultReason::SqrtOfNegative, expr)),
                UnaryOp::Sqrt => Ok(v.sqrt()),
            }
        }
        Expr::Binary(op, a, b) => {
            let x = eval_feature(a, ctx, features)?;
            let y = eval_feature(b, ctx, features)?;
            let r = match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div if y == 0.0 => return Err(fault(FaultReason::DivisionByZero, expr)),
                BinaryOp::Div => x / y,
                BinaryOp::Min => x.min(y),
                BinaryOp::Max => x.max(y),
                BinaryOp::BitAnd => (mask_operand(x, expr)? & mask_operand(y, expr)?) as f64,
            };
            finite(r, expr)
        }
        _ => Err(fault(FaultReason::TypeMismatch, expr)),
    }
}

fn eval_bool(expr: &Expr, ctx: &EvalContext, features: &FeatureVector) -> Result<bool, Fault> {
    match expr {
        Expr::Bool(b) => Ok(*b),
        Expr::Compare(op, a, b) => {
            let x = eval_feature(a, ctx, features);
            let y = eval_feature(b, ctx, features);
            Ok(op.apply(x?, y?))
        }
        // Both sides are always evaluated so that a fault anywhere is seen.
        Expr::And(a, b) => {
            let x = eval_bool(a, ctx, features);
            let y = eval_bool(b, ctx, features);
            Ok(x? & y?)
        }
        Expr::Or(a, b) => {
            let x = eval_bool(a, ctx, features);
            let y = eval_bool(b, ctx, features);
            Ok(x? | y?)
        }
        Expr::Not(a) => Ok(!eval_bool(a, ctx, features)?),
        Expr::Trigger(t) => Ok(match (t, ctx.trigger) {
            (TriggerTest::Event(e), Trigger::Event(x)) => *e == x,
            (TriggerTest::Timeout(None), Trigger::Timeout(_)) => true,
            (TriggerTest::Timeout(Some(tag)), Trigger::Timeout(x)) => *tag == x,
            (TriggerTest::Evicted, Trigger::Evicted) => true,
            _ => false,
        }),
        _ => Err(fault(FaultReason::TypeMismatch, expr)),
    }
}

/// Evaluate a boolean condition. Any fault, including a reference to a
/// faulted feature in any branch, makes the whole condition false.
pub fn eval_condition(expr: &Expr, ctx: &EvalContext, features: &FeatureVector) -> bool {
    eval_bool(expr, ctx, features).unwrap_or(false)
}

/// Evaluate a boolean expression, reporting faults instead of collapsing them.
pub fn try_eval_condition(expr: &Expr, ctx: &EvalContext, features: &FeatureVector) -> Result<bool, Fault> {
    eval_bool(expr, ctx, features)
}

/// Evaluate features in order; each may read features before it.
pub fn eval_all(features: &[Expr], ctx: &EvalContext) -> FeatureVector {
    let mut out = FeatureVector::with_len(features.len());
    for (i, f) in features.iter().enumerate() {
        let v = eval_feature(f, ctx, &out);
        out.set(i, v);
    }
    out
}
