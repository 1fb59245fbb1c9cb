//! The thread that owns a probe's pipeline, publisher and upstream feed.

use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender};
use log::{info, warn};

use super::{Capabilities, ControlReply, EntityRow, ProbeStatus};
use crate::bus::{action_payload, BusError, Publisher, RemoteFeed};
use crate::dsl::{EventSource, ProbeProgram};
use crate::pipeline::Pipeline;
use crate::xfsm::{EmittedAction, EmittedKind};

const FEED_POLL: Duration = Duration::from_millis(2);
const IDLE_POLL: Duration = Duration::from_millis(100);
const FEED_BATCH: usize = 1024;

pub enum DriverCommand {
    Frame {
        ts: u64,
        frame: Vec<u8>,
    },
    Tick {
        now: u64,
    },
    Install {
        program: Box<ProbeProgram>,
        version: u64,
        reply: Sender<ControlReply>,
    },
    Stop {
        reply: Sender<ControlReply>,
    },
    Status {
        reply: Sender<ProbeStatus>,
    },
    Entities {
        limit: usize,
        reply: Sender<Vec<EntityRow>>,
    },
    /// Answered once every earlier command has been processed.
    Sync {
        reply: Sender<()>,
    },
    Shutdown,
}

/// Cloneable access to a running driver.
#[derive(Clone)]
pub struct ProbeHandle {
    tx: Sender<DriverCommand>,
}

fn ask<T>(tx: &Sender<DriverCommand>, make: impl FnOnce(Sender<T>) -> DriverCommand) -> Option<T> {
    let (rtx, rrx) = bounded(1);
    tx.send(make(rtx)).ok()?;
    rrx.recv().ok()
}

impl ProbeHandle {
    pub fn frame(&self, ts: u64, frame: Vec<u8>) -> bool {
        self.tx.send(DriverCommand::Frame { ts, frame }).is_ok()
    }

    pub fn tick(&self, now: u64) -> bool {
        self.tx.send(DriverCommand::Tick { now }).is_ok()
    }

    pub fn install(&self, program: ProbeProgram, version: u64) -> ControlReply {
        ask(&self.tx, |reply| DriverCommand::Install { program: Box::new(program), version, reply })
            .unwrap_or(ControlReply::Error { message: "probe driver stopped".into() })
    }

    pub fn stop_program(&self) -> ControlReply {
        ask(&self.tx, |reply| DriverCommand::Stop { reply })
            .unwrap_or(ControlReply::Error { message: "probe driver stopped".into() })
    }

    pub fn status(&self) -> Option<ProbeStatus> {
        ask(&self.tx, |reply| DriverCommand::Status { reply })
    }

    pub fn entities(&self, limit: usize) -> Option<Vec<EntityRow>> {
        ask(&self.tx, |reply| DriverCommand::Entities { limit, reply })
    }

    pub fn sync(&self) -> bool {
        ask(&self.tx, |reply| DriverCommand::Sync { reply }).is_some()
    }
}

pub struct ProbeDriver {
    handle: ProbeHandle,
    thread: Option<JoinHandle<()>>,
}

struct State {
    probe_id: String,
    capabilities: Capabilities,
    upstream: Option<String>,
    pipeline: Option<Pipeline>,
    version: u64,
    publisher: Option<Publisher>,
    feed: Option<RemoteFeed>,
    actions: Option<Sender<EmittedAction>>,
    started: Instant,
    /// Counters from feeds already replaced.
    schema_mismatches: u64,
}

impl ProbeDriver {
    /// Start the driver thread. `actions`, when given, receives a copy of
    /// every emitted action.
    pub fn spawn(
        probe_id: &str,
        capabilities: Capabilities,
        publisher: Option<Publisher>,
        upstream: Option<String>,
        actions: Option<Sender<EmittedAction>>,
    ) -> Self {
        let (tx, rx) = unbounded();
        let state = State {
            probe_id: probe_id.to_string(),
            capabilities,
            upstream,
            pipeline: None,
            version: 0,
            publisher,
            feed: None,
            actions,
            started: Instant::now(),
            schema_mismatches: 0,
        };
        let thread = thread::Builder::new()
            .name(format!("probe-{probe_id}"))
            .spawn(move || state.run(rx))
            .expect("spawn probe driver");
        ProbeDriver { handle: ProbeHandle { tx }, thread: Some(thread) }
    }

    pub fn handle(&self) -> ProbeHandle {
        self.handle.clone()
    }
}

impl Drop for ProbeDriver {
    fn drop(&mut self) {
        let _ = self.handle.tx.send(DriverCommand::Shutdown);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl State {
    fn run(mut self, rx: Receiver<DriverCommand>) {
        loop {
            let wait = if self.feed.is_some() { FEED_POLL } else { IDLE_POLL };
            match rx.recv_timeout(wait) {
                Ok(DriverCommand::Shutdown) | Err(RecvTimeoutError::Disconnected) => break,
                Ok(cmd) => {
                    self.handle(cmd);
                    while let Ok(cmd) = rx.try_recv() {
                        if matches!(cmd, DriverCommand::Shutdown) {
                            return;
                        }
                        self.handle(cmd);
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
            }
            self.pump_feed();
        }
    }

    fn pump_feed(&mut self) {
        let (Some(feed), Some(p)) = (&mut self.feed, &mut self.pipeline) else { return };
        let triggers = feed.poll(FEED_BATCH);
        let mut out = Vec::new();
        for t in &triggers {
            out.extend(p.process_remote(t));
        }
        self.emit(out);
    }

    fn handle(&mut self, cmd: DriverCommand) {
        match cmd {
            DriverCommand::Frame { ts, frame } => {
                if let Some(p) = &mut self.pipeline {
                    let out = p.process_frame(&frame, ts);
                    self.emit(out);
                }
            }
            DriverCommand::Tick { now } => {
                if let Some(p) = &mut self.pipeline {
                    let out = p.advance_clock(now);
                    self.emit(out);
                }
            }
            DriverCommand::Install { program, version, reply } => {
                let r = self.install(*program, version);
                let _ = reply.send(r);
            }
            DriverCommand::Stop { reply } => {
                self.retire_feed();
                self.pipeline = None;
                info!("probe {}: program stopped", self.probe_id);
                let _ = reply.send(ControlReply::Stopped);
            }
            DriverCommand::Status { reply } => {
                let _ = reply.send(self.status());
            }
            DriverCommand::Entities { limit, reply } => {
                let rows = self
                    .pipeline
                    .as_ref()
                    .map(|p| p.snapshot_entities().into_iter().take(limit).map(EntityRow::from).collect())
                    .unwrap_or_default();
                let _ = reply.send(rows);
            }
            DriverCommand::Sync { reply } => {
                let _ = reply.send(());
            }
            DriverCommand::Shutdown => {}
        }
    }

    fn install(&mut self, mut program: ProbeProgram, version: u64) -> ControlReply {
        let rejected = |reason: String| ControlReply::Rejected { reason };
        if version <= self.version {
            return rejected(format!("version {version} is not newer than installed version {}", self.version));
        }
        if let Err(reason) = self.capabilities.check(&program) {
            return rejected(reason);
        }
        let has_remote = program.events.iter().any(|e| matches!(e.source, EventSource::Remote { .. }));
        let feed = if has_remote {
            let Some(up) = &self.upstream else {
                return rejected("program has remote events but the probe has no upstream".into());
            };
            match RemoteFeed::bind(&program, &self.probe_id, up) {
                Ok(f) => Some(f),
                Err(e @ BusError::SelfChain { .. }) => return rejected(e.to_string()),
                Err(e) => return rejected(format!("cannot subscribe upstream: {e}")),
            }
        } else {
            None
        };
        program.version = version;
        let name = program.name.clone();
        let installed = match &mut self.pipeline {
            Some(p) => p.install(program),
            None => Pipeline::new(program).map(|p| self.pipeline = Some(p)),
        };
        if let Err(e) = installed {
            return rejected(e.to_string());
        }
        self.retire_feed();
        self.feed = feed;
        self.version = version;
        info!("probe {}: installed {name} v{version}", self.probe_id);
        ControlReply::Installed { version }
    }

    fn retire_feed(&mut self) {
        if let Some(f) = self.feed.take() {
            self.schema_mismatches += f.schema_mismatches();
        }
    }

    fn emit(&mut self, actions: Vec<EmittedAction>) {
        if actions.is_empty() {
            return;
        }
        let app = self.pipeline.as_ref().map(|p| p.program().name.clone()).unwrap_or_default();
        for a in actions {
            if a.kind == EmittedKind::Alert {
                if let Some(m) = &a.message {
                    info!("alert {}: {m}", a.topic);
                }
            }
            if let Some(p) = &mut self.publisher {
                let payload = action_payload(&a, &self.probe_id, &app);
                match p.publish(&a.topic, a.ts, payload) {
                    Ok(_) | Err(BusError::BackpressureDrop) => {}
                    Err(e) => warn!("publish on {} failed: {e}", a.topic),
                }
            }
            if let Some(tx) = &self.actions {
                let _ = tx.send(a);
            }
        }
    }

    fn status(&self) -> ProbeStatus {
        let c = self.pipeline.as_ref().map(|p| p.counters()).unwrap_or_default();
        ProbeStatus {
            probe_id: self.probe_id.clone(),
            program: self.pipeline.as_ref().map(|p| p.program().name.clone()),
            version: self.version,
            packets: c.packets,
            events_matched: c.events_matched,
            actions_emitted: c.actions_emitted,
            remote_triggers: c.remote_triggers,
            subscribers: self.publisher.as_ref().map(|p| p.stats().subscribers).unwrap_or(0),
            backpressure_drops: self.publisher.as_ref().map(|p| p.stats().backpressure_drops).unwrap_or(0),
            schema_mismatches: self.schema_mismatches + self.feed.as_ref().map(|f| f.schema_mismatches()).unwrap_or(0),
            stale_timeouts: c.stale_timeouts,
            entities: self.pipeline.as_ref().map(|p| p.entity_count() as u64).unwrap_or(0),
            uptime_ms: self.started.elapsed().as_millis() as u64,
        }
    }
}
