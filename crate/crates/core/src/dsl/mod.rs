//! The monitoring-application language: an XML-like document of events,
//! metrics, features, exports and states, compiled to a [`ProbeProgram`].
//!
//! ```
//! let text = r#"<app name="demo" initial="idle">
//!   <event name="tcp_syn" match="tcp.flags & SYN != 0" key="ip.src"/>
//!   <state name="idle"/>
//! </app>"#;
//! let spec = dstreamon::dsl::parse(text).unwrap();
//! assert!(!dstreamon::dsl::validate(&spec).has_errors());
//! let program = dstreamon::dsl::compile(&spec).unwrap();
//! assert_eq!(program.events.len(), 1);
//! ```

mod analyze;
pub mod ast;
mod expr;
mod parse;
mod program;
mod render;
mod syntax;

use std::fmt;

pub use analyze::{
    compile, valid_topic, validate, CompileError, Diagnostic, Severity, ValidationReport, CONSTANTS, MAX_REGISTERS,
};
pub use ast::{AppSpec, Span};
pub use expr::parse_expr;
pub use parse::parse;
pub use program::{
    deserialize_program, serialize_program, CompiledEvent, CompiledMetric, DecodeError, EventSource, ProbeProgram,
    DEFAULT_ENTITY_CAPACITY, PROGRAM_FORMAT_VERSION, PROGRAM_MAGIC,
};
pub use render::{render, render_expr};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntaxError {
    pub line: u32,
    pub col: u32,
    pub message: String,
    pub expected: Vec<String>,
}

impl fmt::Display for SyntaxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.col, self.message)?;
        if !self.expected.is_empty() {
            write!(f, " (expected {})", self.expected.join(", "))?;
        }
        Ok(())
    }
}

impl std::error::Error for SyntaxError {}

/// Anything that can go wrong turning text into a program.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DslError {
    #[error("syntax error at {0}")]
    Syntax(#[from] SyntaxError),
    #[error(transparent)]
    Invalid(#[from] CompileError),
}

/// Parse, validate and compile in one go.
pub fn load(text: &str) -> Result<ProbeProgram, DslError> {
    Ok(compile(&parse(text)?)?)
}
