//! Brokerless topic-based publish/subscribe between probes.
//!
//! Publishers bind a TCP listener; subscribers connect, announce their topic
//! patterns in a handshake frame, and then receive every matching message the
//! publisher sends while they stay connected. Delivery is at-most-once and
//! there is no replay.

mod chain;
mod publisher;
mod subscriber;
pub mod wire;

pub use chain::{RemoteEventBinding, RemoteFeed};
pub use publisher::{Publisher, PublisherConfig, PublisherStats};
pub use subscriber::{Subscriber, SubscriberStats};
pub use wire::{decode_message, encode_message, WireError, BUS_MAGIC};

use serde_json::{Map, Value};
use thiserror::Error;

pub use crate::dsl::valid_topic;
use crate::xfsm::{EmittedAction, EmittedKind};

pub const DEFAULT_QUEUE_CAPACITY: usize = 65_536;
/// Topic of the handshake frame a subscriber sends after connecting.
pub const SUBSCRIBE_TOPIC: &str = "_subscribe";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BusMessage {
    pub topic: String,
    pub probe_id: String,
    /// Per (probe, topic) sequence number, starting at 1.
    pub seq: u64,
    /// Microseconds.
    pub ts: u64,
    /// Canonical JSON; carried opaquely by the wire layer.
    pub payload: Vec<u8>,
}

impl BusMessage {
    pub fn payload_json(&self) -> Option<Value> {
        serde_json::from_slice(&self.payload).ok()
    }
}

#[derive(Debug, Error)]
pub enum BusError {
    #[error("invalid topic {0:?}")]
    InvalidTopic(String),
    #[error("outbound queue full, message dropped")]
    BackpressureDrop,
    #[error("publisher is shut down")]
    Closed,
    #[error("transport error: {0}")]
    Transport(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("remote event '{event}' would subscribe to topic '{topic}' that this probe publishes")]
    SelfChain { event: String, topic: String },
}

/// Segment-wise prefix match: `alerts` matches `alerts.syn` but not `alertsx`.
pub fn topic_matches(pattern: &str, topic: &str) -> bool {
    let mut t = topic.split('.');
    pattern.split('.').all(|p| t.next() == Some(p))
}

fn num(v: f64) -> Value {
    serde_json::Number::from_f64(v).map(Value::Number).unwrap_or(Value::Null)
}

/// JSON payload for an alert or feature export. Keys come out sorted, so the
/// encoding is canonical.
pub fn action_payload(action: &EmittedAction, probe_id: &str, app: &str) -> Vec<u8> {
    let mut features = Map::new();
    for (name, v) in &action.features {
        features.insert(name.clone(), v.map(num).unwrap_or(Value::Null));
    }
    let mut m = Map::new();
    m.insert("app".into(), app.into());
    m.insert("entity".into(), action.entity_text.clone().into());
    m.insert("event".into(), action.trigger.clone().into());
    m.insert("features".into(), Value::Object(features));
    m.insert(
        "kind".into(),
        match action.kind {
            EmittedKind::Alert => "alert",
            EmittedKind::Features => "features",
        }
        .into(),
    );
    if let Some(msg) = &action.message {
        m.insert("message".into(), msg.clone().into());
    }
    m.insert("next_state".into(), action.next_state.clone().into());
    m.insert("probe".into(), probe_id.into());
    m.insert("state".into(), action.state.clone().into());
    m.insert("ts".into(), action.ts.into());
    serde_json::to_vec(&Value::Object(m)).expect("JSON values always serialize")
}
