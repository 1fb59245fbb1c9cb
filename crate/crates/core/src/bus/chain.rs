//! Probe chaining: messages from an upstream publisher become remote-event
//! triggers in a downstream pipeline.

use std::time::Duration;

use log::warn;
use serde_json::Value;

use super::{topic_matches, BusError, BusMessage, Subscriber};
use crate::dsl::{EventSource, ProbeProgram};
use crate::pipeline::{EntityKey, KeySpec, RemoteTrigger};

/// Maps payloads on one topic onto a declared remote event.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteEventBinding {
    pub event: u32,
    pub event_name: String,
    pub topic: String,
    pub key: KeySpec,
    pub entity_field: String,
    /// (input index, dotted payload path)
    pub inputs: Vec<(u32, String)>,
    pub input_count: usize,
}

impl RemoteEventBinding {
    /// Binding for the remote event at `event`, or `None` for packet events.
    pub fn from_program(program: &ProbeProgram, event: u32) -> Option<Self> {
        let ev = program.events.get(event as usize)?;
        match &ev.source {
            EventSource::Remote { topic, key, entity_field, inputs } => Some(RemoteEventBinding {
                event,
                event_name: ev.name.clone(),
                topic: topic.clone(),
                key: key.clone(),
                entity_field: entity_field.clone(),
                inputs: inputs.clone(),
                input_count: program.inputs.len(),
            }),
            EventSource::Packet { .. } => None,
        }
    }

    pub fn all(program: &ProbeProgram) -> Vec<Self> {
        (0..program.events.len() as u32).filter_map(|i| Self::from_program(program, i)).collect()
    }

    pub fn matches(&self, msg: &BusMessage) -> bool {
        topic_matches(&self.topic, &msg.topic)
    }

    /// Translate one message into a trigger. Every mapped field must be
    /// present; `null` inputs are passed on as absent values.
    pub fn translate(&self, msg: &BusMessage) -> Result<RemoteTrigger, BusError> {
        let v: Value = serde_json::from_slice(&msg.payload)
            .map_err(|e| BusError::SchemaMismatch(format!("payload is not JSON: {e}")))?;
        if !v.is_object() {
            return Err(BusError::SchemaMismatch("payload is not a JSON object".into()));
        }
        let entity = lookup(&v, &self.entity_field)
            .ok_or_else(|| BusError::SchemaMismatch(format!("missing field '{}'", self.entity_field)))?;
        let text = entity
            .as_str()
            .ok_or_else(|| BusError::SchemaMismatch(format!("field '{}' is not a string", self.entity_field)))?;
        let key_bytes = self
            .key
            .parse_text(text)
            .ok_or_else(|| BusError::SchemaMismatch(format!("'{text}' does not fit key ({})", self.key)))?;
        let mut inputs = vec![None; self.input_count];
        for (idx, path) in &self.inputs {
            let x = lookup(&v, path).ok_or_else(|| BusError::SchemaMismatch(format!("missing field '{path}'")))?;
            let val = match x {
                Value::Null => None,
                Value::Number(n) => n.as_f64(),
                Value::Bool(b) => Some(if *b { 1.0 } else { 0.0 }),
                _ => return Err(BusError::SchemaMismatch(format!("field '{path}' is not numeric"))),
            };
            if let Some(slot) = inputs.get_mut(*idx as usize) {
                *slot = val;
            }
        }
        Ok(RemoteTrigger { event: self.event, key: EntityKey::new(self.event, key_bytes), inputs, ts: msg.ts })
    }
}

fn lookup<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(v, |cur, seg| cur.get(seg))
}

/// Topics a program publishes on.
fn published_topics(program: &ProbeProgram) -> Vec<&str> {
    program.xfsm.exports.iter().map(|e| e.topic.as_str()).collect()
}

/// Reject a binding whose topic pattern covers one of the program's own
/// export topics (a chain of length one).
pub(crate) fn check_self_chain(program: &ProbeProgram, b: &RemoteEventBinding) -> Result<(), BusError> {
    for t in published_topics(program) {
        if topic_matches(&b.topic, t) {
            return Err(BusError::SelfChain { event: b.event_name.clone(), topic: t.to_string() });
        }
    }
    Ok(())
}

/// A subscription to one upstream probe feeding every remote event of a
/// program.
pub struct RemoteFeed {
    subscriber: Subscriber,
    bindings: Vec<RemoteEventBinding>,
    probe_id: String,
    translated: u64,
    schema_mismatches: u64,
    own_messages: u64,
}

impl std::fmt::Debug for RemoteFeed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteFeed")
            .field("bindings", &self.bindings.len())
            .field("translated", &self.translated)
            .field("schema_mismatches", &self.schema_mismatches)
            .finish()
    }
}

impl RemoteFeed {
    /// Subscribe `probe_id` to `upstream` for every remote event in `program`.
    pub fn bind(program: &ProbeProgram, probe_id: &str, upstream: &str) -> Result<Self, BusError> {
        let bindings = RemoteEventBinding::all(program);
        for b in &bindings {
            check_self_chain(program, b)?;
        }
        let patterns: Vec<&str> = bindings.iter().map(|b| b.topic.as_str()).collect();
        let subscriber = Subscriber::connect(upstream, &patterns, probe_id)?;
        Ok(RemoteFeed {
            subscriber,
            bindings,
            probe_id: probe_id.to_string(),
            translated: 0,
            schema_mismatches: 0,
            own_messages: 0,
        })
    }

    pub fn subscriber(&self) -> &Subscriber {
        &self.subscriber
    }

    pub fn wait_connected(&self, timeout: Duration) -> bool {
        self.subscriber.wait_connected(timeout)
    }

    /// Translate the messages for one batch. Messages this probe published
    /// itself are ignored; malformed payloads are dropped and counted.
    pub fn translate_batch(&mut self, msgs: &[BusMessage]) -> Vec<RemoteTrigger> {
        let mut out = Vec::new();
        for msg in msgs {
            if msg.probe_id == self.probe_id {
                self.own_messages += 1;
                continue;
            }
            for b in self.bindings.iter().filter(|b| b.matches(msg)) {
                match b.translate(msg) {
                    Ok(t) => {
                        self.translated += 1;
                        out.push(t);
                    }
                    Err(e) => {
                        self.schema_mismatches += 1;
                        warn!("dropping {} #{} from {}: {e}", msg.topic, msg.seq, msg.probe_id);
                    }
                }
            }
        }
        out
    }

    pub fn poll(&mut self, max: usize) -> Vec<RemoteTrigger> {
        let msgs = self.subscriber.poll(max);
        self.translate_batch(&msgs)
    }

    /// Wait up to `timeout` for one message, then translate what is pending.
    pub fn poll_timeout(&mut self, max: usize, timeout: Duration) -> Vec<RemoteTrigger> {
        let mut msgs = Vec::new();
        if let Some(m) = self.subscriber.recv_timeout(timeout) {
            msgs.push(m);
            msgs.extend(self.subscriber.poll(max.saturating_sub(1)));
        }
        self.translate_batch(&msgs)
    }

    pub fn translated(&self) -> u64 {
        self.translated
    }

    pub fn schema_mismatches(&self) -> u64 {
        self.schema_mismatches
    }

    pub fn own_messages(&self) -> u64 {
        self.own_messages
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::load;

    fn chained() -> ProbeProgram {
        load(
            r#"<app name="c" initial="w">
  <remote_event name="up" topic="alerts.synflood" key="ip.src">
    <input name="rate" field="features.syn_rate"/>
  </remote_event>
  <export topic="alerts.correlated"/>
  <state name="w"/>
</app>"#,
        )
        .unwrap()
    }

    fn msg(payload: &str) -> BusMessage {
        BusMessage {
            topic: "alerts.synflood".into(),
            probe_id: "up".into(),
            seq: 1,
            ts: 5,
            payload: payload.as_bytes().to_vec(),
        }
    }

    #[test]
    fn maps_entity_and_inputs() {
        let b = RemoteEventBinding::all(&chained()).remove(0);
        let t = b.translate(&msg(r#"{"entity":"10.0.0.1","features":{"syn_rate":150}}"#)).unwrap();
        assert_eq!(t.key.key_bytes, vec![10, 0, 0, 1]);
        assert_eq!(t.inputs, vec![Some(150.0)]);
        assert_eq!(t.ts, 5);
    }

    #[test]
    fn missing_entity_is_a_schema_mismatch() {
        let b = RemoteEventBinding::all(&chained()).remove(0);
        for p in [
            r#"{"features":{"syn_rate":1}}"#,
            r#"{"entity":"nope","features":{"syn_rate":1}}"#,
            r#"{"entity":"10.0.0.1"}"#,
            r#"[1,2]"#,
            "garbage",
        ] {
            assert!(matches!(b.translate(&msg(p)), Err(BusError::SchemaMismatch(_))), "{p}");
        }
    }

    #[test]
    fn self_chain_is_rejected_at_bind_time() {
        let p = load(
            r#"<app name="loop" initial="w">
  <remote_event name="me" topic="alerts" key="ip.src"/>
  <export topic="alerts.mine"/>
  <state name="w"/>
</app>"#,
        )
        .unwrap();
        let err = RemoteFeed::bind(&p, "p", "127.0.0.1:1").unwrap_err();
        assert!(matches!(err, BusError::SelfChain { .. }), "{err}");
    }
}
