//! Master controller and probe agents.
//!
//! Agents run a pipeline, publish its output on the bus and report to the
//! master with periodic heartbeats. The master keeps the probe registry,
//! derives each probe's health from heartbeat age and pushes compiled
//! programs to agents. All control traffic is request/response over `DSC1`
//! frames carrying JSON messages.

mod agent;
mod driver;
mod master;

pub use agent::{Agent, AgentConfig};
pub use driver::{DriverCommand, ProbeDriver, ProbeHandle};
pub use master::{Master, MasterConfig};

use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::wire::{read_frame, write_frame};
use crate::dsl::{deserialize_program, serialize_program, DecodeError, ProbeProgram};
use crate::pipeline::{EntitySnapshot, Field};
use crate::sketches::MetricKind;

pub const CONTROL_MAGIC: [u8; 4] = *b"DSC1";
pub const DEFAULT_HEARTBEAT: Duration = Duration::from_millis(1000);
pub const REQUEST_TIMEOUT: Duration = Duration::from_secs(2);
pub const PUSH_ATTEMPTS: u32 = 3;
/// Heartbeat periods without contact before a probe is Degraded / Offline.
pub const DEGRADED_AFTER: u32 = 3;
pub const OFFLINE_AFTER: u32 = 10;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("transport error: {0}")]
    Transport(#[from] std::io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("bad program image: {0}")]
    Program(#[from] DecodeError),
    #[error(transparent)]
    Bus(#[from] crate::bus::BusError),
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
}

/// What a probe can execute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub metric_kinds: Vec<String>,
    pub fields: Vec<String>,
}

impl Default for Capabilities {
    fn default() -> Self {
        Capabilities {
            metric_kinds: MetricKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            fields: Field::ALL.iter().map(|f| f.name().to_string()).collect(),
        }
    }
}

impl Capabilities {
    /// Reason the program cannot run here, if any.
    pub fn check(&self, program: &ProbeProgram) -> Result<(), String> {
        for k in program.required_kinds() {
            if !self.metric_kinds.iter().any(|m| m == k.name()) {
                return Err(format!("capability: metric kind '{}' is not supported", k.name()));
            }
        }
        for f in program.required_fields() {
            if !self.fields.iter().any(|x| x == f.name()) {
                return Err(format!("capability: field '{}' is not supported", f.name()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeRegistration {
    pub probe_id: String,
    /// Where the agent accepts control requests.
    pub control_addr: String,
    /// Where the agent publishes, if it does.
    pub publish_addr: Option<String>,
    pub capabilities: Capabilities,
    pub version: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeStatus {
    pub probe_id: String,
    /// Name of the running program, `None` when stopped.
    pub program: Option<String>,
    pub version: u64,
    pub packets: u64,
    pub events_matched: u64,
    pub actions_emitted: u64,
    pub remote_triggers: u64,
    /// Bus subscribers currently connected to this probe.
    pub subscribers: u64,
    pub backpressure_drops: u64,
    pub schema_mismatches: u64,
    pub stale_timeouts: u64,
    pub entities: u64,
    pub uptime_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Health {
    Healthy,
    Degraded,
    Offline,
}

impl std::fmt::Display for Health {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Health::Healthy => "healthy",
            Health::Degraded => "degraded",
            Health::Offline => "offline",
        })
    }
}

/// Health from the time since the last heartbeat and the heartbeat period.
pub fn health(since_heartbeat: Duration, period: Duration) -> Health {
    if since_heartbeat >= period * OFFLINE_AFTER {
        Health::Offline
    } else if since_heartbeat >= period * DEGRADED_AFTER {
        Health::Degraded
    } else {
        Health::Healthy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRow {
    pub key: String,
    pub event: String,
    pub state: String,
    pub registers: Vec<f64>,
    pub last_seen: u64,
}

impl From<EntitySnapshot> for EntityRow {
    fn from(s: EntitySnapshot) -> Self {
        EntityRow { key: s.key_text, event: s.event, state: s.state, registers: s.registers, last_seen: s.last_seen }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub probe_id: String,
    pub control_addr: String,
    pub health: Health,
    pub version: u64,
    pub program: Option<String>,
    pub packets: u64,
    pub actions_emitted: u64,
    pub entities: u64,
    pub last_heartbeat_ms: u64,
}

/// A program image as carried inside JSON messages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProgramImage(pub String);

impl ProgramImage {
    pub fn encode(p: &ProbeProgram) -> Self {
        ProgramImage(B64.encode(serialize_program(p)))
    }

    pub fn decode(&self) -> Result<ProbeProgram, ControlError> {
        let bytes =
            B64.decode(&self.0).map_err(|e| ControlError::Protocol(format!("program image is not base64: {e}")))?;
        Ok(deserialize_program(&bytes)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum ControlCommand {
    /// Master to agent.
    InstallProgram {
        program: ProgramImage,
        version: u64,
    },
    StopProgram,
    QueryStatus,
    QueryEntities {
        limit: usize,
    },
    /// Operator to master.
    Push {
        probe_id: String,
        program: ProgramImage,
        version: Option<u64>,
    },
    ListProbes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reply", rename_all = "snake_case")]
pub enum ControlReply {
    Installed { version: u64 },
    Rejected { reason: String },
    Unreachable { reason: String },
    Stopped,
    Status { status: ProbeStatus },
    Entities { rows: Vec<EntityRow> },
    Probes { rows: Vec<ProbeRow> },
    Error { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlMessage {
    Heartbeat { registration: ProbeRegistration, status: ProbeStatus },
    Request { id: u64, body: ControlCommand },
    Response { id: u64, body: ControlReply },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PushResult {
    Installed(u64),
    Rejected(String),
    Unreachable,
}

pub fn send_message(w: &mut impl Write, msg: &ControlMessage) -> Result<(), ControlError> {
    let body = serde_json::to_vec(msg).map_err(|e| ControlError::Protocol(e.to_string()))?;
    write_frame(w, CONTROL_MAGIC, &body)?;
    w.flush()?;
    Ok(())
}

/// Next message, or `None` when the peer closed the connection.
pub fn recv_message(r: &mut impl std::io::Read) -> Result<Option<ControlMessage>, ControlError> {
    match read_frame(r, CONTROL_MAGIC)? {
        None => Ok(None),
        Some(body) => serde_json::from_slice(&body)
            .map(Some)
            .map_err(|e| ControlError::Protocol(format!("undecodable control message: {e}"))),
    }
}

/// One request/response exchange on a fresh connection.
pub fn request(addr: &str, body: ControlCommand, timeout: Duration) -> Result<ControlReply, ControlError> {
    let target =
        addr.to_socket_addrs()?.next().ok_or_else(|| ControlError::Protocol(format!("no address for {addr}")))?;
    let stream = TcpStream::connect_timeout(&target, timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    let _ = stream.set_nodelay(true);
    let mut w = BufWriter::new(stream.try_clone()?);
    send_message(&mut w, &ControlMessage::Request { id: 1, body })?;
    let mut r = BufReader::new(stream);
    match recv_message(&mut r)? {
        Some(ControlMessage::Response { id: 1, body }) => Ok(body),
        Some(other) => Err(ControlError::Protocol(format!("unexpected message {other:?}"))),
        None => Err(ControlError::Protocol("connection closed before the response".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn health_thresholds() {
        let h = Duration::from_millis(1000);
        assert_eq!(health(Duration::from_millis(100), h), Health::Healthy);
        assert_eq!(health(Duration::from_millis(2999), h), Health::Healthy);
        assert_eq!(health(Duration::from_millis(3000), h), Health::Degraded);
        assert_eq!(health(Duration::from_millis(3500), h), Health::Degraded);
        assert_eq!(health(Duration::from_millis(9999), h), Health::Degraded);
        assert_eq!(health(Duration::from_millis(10_000), h), Health::Offline);
    }

    #[test]
    fn messages_round_trip_as_json() {
        let p = crate::dsl::load(r#"<app name="m" initial="s"><state name="s"/></app>"#).unwrap();
        let m = ControlMessage::Request {
            id: 7,
            body: ControlCommand::InstallProgram { program: ProgramImage::encode(&p), version: 2 },
        };
        let mut buf = Vec::new();
        send_message(&mut buf, &m).unwrap();
        assert_eq!(&buf[..4], b"DSC1");
        let back = recv_message(&mut std::io::Cursor::new(buf)).unwrap().unwrap();
        assert_eq!(back, m);
        if let ControlMessage::Request { body: ControlCommand::InstallProgram { program, .. }, .. } = back {
            assert_eq!(program.decode().unwrap(), p);
        }
    }

    #[test]
    fn capability_check_names_the_missing_kind() {
        let p = crate::dsl::load(
            r#"<app name="b" initial="s">
  <event name="e" match="true" key="ip.src"/>
  <metric name="seen" kind="bloom" bits="1024" hashes="3"/>
  <state name="s"/>
</app>"#,
        )
        .unwrap();
        let caps = Capabilities { metric_kinds: vec!["count_min".into()], ..Capabilities::default() };
        assert!(caps.check(&p).unwrap_err().contains("bloom"));
        assert!(Capabilities::default().check(&p).is_ok());
        let no_ip = Capabilities { fields: vec!["eth.src".into()], ..Capabilities::default() };
        assert!(no_ip.check(&p).unwrap_err().contains("ip.src"));
    }
}
