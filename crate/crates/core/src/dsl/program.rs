//! Compiled, index-based program images and their binary container.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Expr, KeyRef};
use crate::pipeline::{Field, KeySpec};
use crate::sketches::{MetricKind, MetricParams, WindowSpec};
use crate::xfsm::{ActionSpec, XfsmTable};

pub const PROGRAM_MAGIC: [u8; 4] = *b"SMON";
pub const PROGRAM_FORMAT_VERSION: u16 = 1;
pub const DEFAULT_ENTITY_CAPACITY: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EventSource {
    Packet {
        predicate: Expr,
        primary: KeySpec,
        /// (index into the program's secondary-key names, selectors)
        secondary: Vec<(u32, KeySpec)>,
    },
    Remote {
        topic: String,
        key: KeySpec,
        /// Payload field carrying the entity key in text form.
        entity_field: String,
        /// (index into the program's input names, payload path)
        inputs: Vec<(u32, String)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledEvent {
    pub name: String,
    pub source: EventSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledMetric {
    pub name: String,
    pub params: MetricParams,
    pub key: KeyRef,
    /// Events whose matches update this metric, ascending.
    pub events: Vec<u32>,
    pub window: Option<WindowSpec>,
    /// Per-update increment; `None` means 1.
    pub inc: Option<Expr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeProgram {
    pub name: String,
    /// Assigned by the controller when pushed; 0 straight out of compile.
    pub version: u64,
    pub seed: u64,
    pub entity_capacity: u64,
    pub events: Vec<CompiledEvent>,
    pub secondary_keys: Vec<String>,
    pub inputs: Vec<String>,
    pub metrics: Vec<CompiledMetric>,
    /// Feature expressions in evaluation order; names live in `xfsm.feature_names`.
    pub features: Vec<Expr>,
    pub xfsm: XfsmTable,
}

impl ProbeProgram {
    /// Metric kinds a probe must support to run this program.
    pub fn required_kinds(&self) -> Vec<MetricKind> {
        let mut kinds: Vec<MetricKind> = self.metrics.iter().map(|m| m.params.kind()).collect();
        kinds.sort();
        kinds.dedup();
        kinds
    }

    /// Packet fields the program reads anywhere, sorted.
    pub fn required_fields(&self) -> Vec<Field> {
        let mut out: Vec<Field> = Vec::new();
        let mut exprs: Vec<&Expr> = self.features.iter().collect();
        let mut keys: Vec<&KeySpec> = Vec::new();
        for e in &self.events {
            match &e.source {
                EventSource::Packet { predicate, primary, secondary } => {
                    exprs.push(predicate);
                    keys.push(primary);
                    keys.extend(secondary.iter().map(|(_, k)| k));
                }
                EventSource::Remote { key, .. } => keys.push(key),
            }
        }
        for m in &self.metrics {
            exprs.extend(&m.inc);
            if let KeyRef::Fields(k) = &m.key {
                keys.push(k);
            }
        }
        for st in &self.xfsm.states {
            for r in &st.rules {
                exprs.push(&r.condition);
                for a in &r.actions {
                    if let ActionSpec::SetRegister { value, .. } = a {
                        exprs.push(value);
                    }
                }
            }
        }
        for e in exprs {
            e.walk(&mut |x| match x {
                Expr::Field(f) => out.push(*f),
                Expr::Metric { key: KeyRef::Fields(k), .. } => out.extend(k.layout()),
                _ => {}
            });
        }
        for k in keys {
            out.extend(k.layout());
        }
        out.sort();
        out.dedup();
        out
    }

    pub fn event_index(&self, name: &str) -> Option<u32> {
        self.events.iter().position(|e| e.name == name).map(|i| i as u32)
    }

    pub fn metric_index(&self, name: &str) -> Option<u32> {
        self.metrics.iter().position(|m| m.name == name).map(|i| i as u32)
    }

    pub fn feature_index(&self, name: &str) -> Option<u32> {
        self.xfsm.feature_names.iter().position(|f| f == name).map(|i| i as u32)
    }

    /// Topics of remote events, in declaration order.
    pub fn remote_topics(&self) -> Vec<&str> {
        self.events
            .iter()
            .filter_map(|e| match &e.source {
                EventSource::Remote { topic, .. } => Some(topic.as_str()),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("truncated program: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported program format version {0} (expected {PROGRAM_FORMAT_VERSION})")]
    VersionMismatch(u16),
    #[error("{0} trailing bytes after program body")]
    TrailingBytes(usize),
    #[error("malformed program body: {0}")]
    Malformed(String),
}

/// Encode a program: magic, format version, body length, canonical JSON body.
pub fn serialize_program(p: &ProbeProgram) -> Vec<u8> {
    let body = serde_json::to_vec(p).expect("program encodes as JSON");
    let mut out = Vec::with_capacity(10 + body.len());
    out.extend_from_slice(&PROGRAM_MAGIC);
    out.extend_from_slice(&PROGRAM_FORMAT_VERSION.to_be_bytes());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn deserialize_program(bytes: &[u8]) -> Result<ProbeProgram, DecodeError> {
    let need = |n: usize| {
        if bytes.len() < n {
            Err(DecodeError::Truncated { needed: n, have: bytes.len() })
        } else {
            Ok(())
        }
    };
    need(4)?;
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != PROGRAM_MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    need(6)?;
    let version = u16::from_be_bytes([bytes[4], bytes[5]]);
    if version != PROGRAM_FORMAT_VERSION {
        return Err(DecodeError::VersionMismatch(version));
    }
    need(10)?;
    let len = u32::from_be_bytes(bytes[6..10].try_into().unwrap()) as usize;
    need(10 + len)?;
    if bytes.len() > 10 + len {
        return Err(DecodeError::TrailingBytes(bytes.len() - 10 - len));
    }
    let body = &bytes[10..];
    let depth = json_depth(body);
    if depth > MAX_BODY_NESTING {
        return Err(DecodeError::Malformed(format!("nesting depth {depth} exceeds {MAX_BODY_NESTING}")));
    }
    let mut de = serde_json::Deserializer::from_slice(body);
    de.disable_recursion_limit();
    let p = ProbeProgram::deserialize(&mut de).map_err(|e| DecodeError::Malformed(e.to_string()))?;
    de.end().map_err(|e| DecodeError::Malformed(e.to_string()))?;
    Ok(p)
}

// The parser's recursion limit is disabled, so nesting is bounded here.
const MAX_BODY_NESTING: usize = 512;

fn json_depth(body: &[u8]) -> usize {
    let (mut depth, mut max, mut in_str, mut escaped) = (0usize, 0usize, false, false);
    for &b in body {
        if in_str {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' | b'[' => {
                depth += 1;
                max = max.max(depth);
            }
            b'}' | b']' => depth = depth.saturating_sub(1),
            _ => {}
        }
    }
    max
}
