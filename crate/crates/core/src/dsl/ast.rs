//! Source-level representation of an application, with locations.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Span {
    pub line: u32,
    pub col: u32,
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ident {
    pub name: String,
    pub span: Span,
}

impl Ident {
    pub fn new(name: impl Into<String>, span: Span) -> Self {
        Ident { name: name.into(), span }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppSpec {
    pub name: Ident,
    pub initial_state: Ident,
    pub registers: Option<(String, Span)>,
    pub seed: Option<(String, Span)>,
    pub entity_capacity: Option<(String, Span)>,
    pub events: Vec<EventDecl>,
    pub metrics: Vec<MetricDecl>,
    pub features: Vec<FeatureDecl>,
    pub states: Vec<StateDecl>,
    pub exports: Vec<ExportDecl>,
    pub span: Span,
}

/// A field-selector list as written, e.g. `ip.src, ip.dst`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyDecl {
    pub selectors: Vec<Ident>,
    pub bidirectional: bool,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondaryDecl {
    pub name: Ident,
    pub key: KeyDecl,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputDecl {
    pub name: Ident,
    /// Dotted path into the received message payload.
    pub field: String,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventSource {
    Packet {
        predicate: Expr,
        primary_key: KeyDecl,
        secondary_keys: Vec<SecondaryDecl>,
    },
    /// Triggered by messages received on a bus topic.
    Remote {
        topic: Ident,
        key: KeyDecl,
        entity_field: String,
        inputs: Vec<InputDecl>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventDecl {
    pub name: Ident,
    pub source: EventSource,
    pub span: Span,
}

/// Which key feeds a metric or a metric query.
#[derive(Debug, Clone, PartialEq)]
pub enum KeySource {
    Primary(Span),
    Named(Ident),
    Fields(KeyDecl),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: String,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowDecl {
    pub length: (String, Span),
    pub mode: Option<Ident>,
    pub panes: Option<(String, Span)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricDecl {
    pub name: Ident,
    pub kind: Ident,
    pub key: KeySource,
    pub events: Option<Vec<Ident>>,
    pub params: Vec<Param>,
    pub window: Option<WindowDecl>,
    pub inc: Option<Expr>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDecl {
    pub name: Ident,
    pub expr: Expr,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TemplatePiece {
    Text(String),
    Placeholder(Ident),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionKind {
    Alert { topic: Ident, message: Vec<TemplatePiece> },
    Export { topic: Ident },
    Set { register: (String, Span), value: Expr },
    Schedule { delay: (String, Span), tag: Option<(String, Span)> },
    Cancel { tag: Option<(String, Span)> },
    Reset { metrics: Vec<Ident> },
    Drop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionDecl {
    pub kind: ActionKind,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleDecl {
    pub condition: Expr,
    pub actions: Vec<ActionDecl>,
    /// `None` keeps the current state.
    pub next_state: Option<Ident>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateDecl {
    pub name: Ident,
    pub rules: Vec<RuleDecl>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportDecl {
    pub topic: Ident,
    pub kind: Ident,
    pub features: Option<Vec<Ident>>,
    pub span: Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Or,
    And,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    BitAnd,
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Or => "or",
            BinOp::And => "and",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::BitAnd => "&",
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        }
    }

    pub fn is_comparison(self) -> bool {
        matches!(self, BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprKind {
    Number(f64),
    Bool(bool),
    /// A bare (possibly dotted) name: field, constant, feature, metric,
    /// `now`, or `input.<name>`.
    Name(String),
    /// `name[a, b, ...]`: register access or keyed metric query.
    Index(String, Vec<Ident>),
    Call(String, Vec<Expr>),
    Neg(Box<Expr>),
    Not(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    pub kind: ExprKind,
    pub span: Span,
}

impl Expr {
    pub fn depth(&self) -> usize {
        1 + match &self.kind {
            ExprKind::Number(_) | ExprKind::Bool(_) | ExprKind::Name(_) | ExprKind::Index(..) => 0,
            ExprKind::Call(_, args) => args.iter().map(Expr::depth).max().unwrap_or(0),
            ExprKind::Neg(x) | ExprKind::Not(x) => x.depth(),
            ExprKind::Binary(_, a, b) => a.depth().max(b.depth()),
        }
    }
}
