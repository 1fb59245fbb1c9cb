//! Distributed stream-based network monitoring.
//!
//! Probes run a four-stage per-packet pipeline (event, metric, feature,
//! decision) described by a small declarative language, publish alerts and
//! feature records on a topic-based bus, and are managed by a master over a
//! control channel.

pub mod bus;
pub mod control;
pub mod dsl;
pub mod features;
pub mod pipeline;
pub mod sketches;
pub mod traffic;
pub mod xfsm;
