//! A probe agent: driver, control endpoint and heartbeat sender.

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::Sender;
use log::{debug, warn};

use super::driver::{ProbeDriver, ProbeHandle};
use super::{
    recv_message, send_message, Capabilities, ControlCommand, ControlError, ControlMessage, ControlReply,
    ProbeRegistration, DEFAULT_HEARTBEAT, REQUEST_TIMEOUT,
};
use crate::bus::{Publisher, PublisherConfig};
use crate::dsl::ProbeProgram;
use crate::xfsm::EmittedAction;

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub probe_id: String,
    /// Control endpoint; port 0 picks a free port.
    pub control_listen: String,
    pub master: Option<String>,
    /// Bus endpoint to publish on, if any.
    pub publish: Option<String>,
    /// Upstream probe feeding the program's remote events.
    pub upstream: Option<String>,
    pub capabilities: Capabilities,
    pub heartbeat: Duration,
    pub publisher: PublisherConfig,
}

impl AgentConfig {
    pub fn new(probe_id: &str) -> Self {
        AgentConfig {
            probe_id: probe_id.to_string(),
            control_listen: "127.0.0.1:0".into(),
            master: None,
            publish: None,
            upstream: None,
            capabilities: Capabilities::default(),
            heartbeat: DEFAULT_HEARTBEAT,
            publisher: PublisherConfig::default(),
        }
    }
}

pub struct Agent {
    probe_id: String,
    control_addr: SocketAddr,
    publish_addr: Option<SocketAddr>,
    stop: Arc<AtomicBool>,
    paused: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    driver: Option<ProbeDriver>,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent").field("probe_id", &self.probe_id).field("control_addr", &self.control_addr).finish()
    }
}

impl Agent {
    pub fn start(config: AgentConfig) -> Result<Self, ControlError> {
        Self::start_with(config, None, None)
    }

    /// Start with an optional initial program (installed as version 1) and an
    /// optional sink for emitted actions.
    pub fn start_with(
        config: AgentConfig,
        initial: Option<ProbeProgram>,
        actions: Option<Sender<EmittedAction>>,
    ) -> Result<Self, ControlError> {
        let publisher = match &config.publish {
            Some(addr) => Some(Publisher::bind(addr, &config.probe_id, config.publisher.clone())?),
            None => None,
        };
        let publish_addr = publisher.as_ref().map(|p| p.local_addr());
        let listener = TcpListener::bind(&config.control_listen)?;
        let control_addr = listener.local_addr()?;
        let driver = ProbeDriver::spawn(
            &config.probe_id,
            config.capabilities.clone(),
            publisher,
            config.upstream.clone(),
            actions,
        );
        if let Some(p) = initial {
            if let ControlReply::Rejected { reason } = driver.handle().install(p, 1) {
                return Err(ControlError::Protocol(format!("initial program rejected: {reason}")));
            }
        }
        let stop = Arc::new(AtomicBool::new(false));
        let paused = Arc::new(AtomicBool::new(false));
        let mut threads = Vec::new();
        {
            let handle = driver.handle();
            let stop = stop.clone();
            threads.push(thread::spawn(move || serve_control(listener, handle, stop)));
        }
        if let Some(master) = config.master.clone() {
            let registration = ProbeRegistration {
                probe_id: config.probe_id.clone(),
                control_addr: control_addr.to_string(),
                publish_addr: publish_addr.map(|a| a.to_string()),
                capabilities: config.capabilities.clone(),
                version: 0,
            };
            let hb = Heartbeat {
                master,
                registration,
                period: config.heartbeat,
                handle: driver.handle(),
                stop: stop.clone(),
                paused: paused.clone(),
            };
            threads.push(thread::spawn(move || hb.run()));
        }
        Ok(Agent { probe_id: config.probe_id, control_addr, publish_addr, stop, paused, threads, driver: Some(driver) })
    }

    pub fn probe_id(&self) -> &str {
        &self.probe_id
    }

    pub fn control_addr(&self) -> SocketAddr {
        self.control_addr
    }

    pub fn publish_addr(&self) -> Option<SocketAddr> {
        self.publish_addr
    }

    pub fn handle(&self) -> ProbeHandle {
        self.driver.as_ref().expect("driver runs until drop").handle()
    }

    /// Suspend or resume heartbeats, as if the probe lost contact.
    pub fn set_heartbeat_paused(&self, paused: bool) {
        self.paused.store(paused, Ordering::SeqCst);
    }
}

impl Drop for Agent {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.control_addr, Duration::from_millis(200));
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        self.driver.take();
    }
}

fn serve_control(listener: TcpListener, handle: ProbeHandle, stop: Arc<AtomicBool>) {
    for conn in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        match conn {
            Ok(s) => {
                if let Err(e) = serve_connection(s, &handle) {
                    debug!("control connection ended: {e}");
                }
            }
            Err(e) => warn!("control accept failed: {e}"),
        }
    }
}

fn serve_connection(stream: TcpStream, handle: &ProbeHandle) -> Result<(), ControlError> {
    stream.set_read_timeout(Some(REQUEST_TIMEOUT))?;
    stream.set_write_timeout(Some(REQUEST_TIMEOUT))?;
    let _ = stream.set_nodelay(true);
    let mut r = BufReader::new(stream.try_clone()?);
    let mut w = BufWriter::new(stream);
    while let Some(msg) = recv_message(&mut r)? {
        let ControlMessage::Request { id, body } = msg else {
            return Err(ControlError::Protocol("agents only accept requests".into()));
        };
        let reply = match body {
            ControlCommand::InstallProgram { program, version } => match program.decode() {
                Ok(p) => handle.install(p, version),
                Err(e) => ControlReply::Rejected { reason: e.to_string() },
            },
            ControlCommand::StopProgram => handle.stop_program(),
            ControlCommand::QueryStatus => match handle.status() {
                Some(status) => ControlReply::Status { status },
                None => ControlReply::Error { message: "probe driver stopped".into() },
            },
            ControlCommand::QueryEntities { limit } => {
                ControlReply::Entities { rows: handle.entities(limit).unwrap_or_default() }
            }
            other => ControlReply::Error { message: format!("not a probe command: {other:?}") },
        };
        send_message(&mut w, &ControlMessage::Response { id, body: reply })?;
    }
    Ok(())
}

struct Heartbeat {
    master: String,
    registration: ProbeRegistration,
    period: Duration,
    handle: ProbeHandle,
    stop: Arc<AtomicBool>,
    paused: Arc<AtomicBool>,
}

impl Heartbeat {
    fn connect(&self) -> Option<BufWriter<TcpStream>> {
        let addr = self.master.to_socket_addrs().ok()?.next()?;
        let s = TcpStream::connect_timeout(&addr, REQUEST_TIMEOUT).ok()?;
        s.set_write_timeout(Some(REQUEST_TIMEOUT)).ok()?;
        let _ = s.set_nodelay(true);
        Some(BufWriter::new(s))
    }

    fn run(self) {
        let mut conn: Option<BufWriter<TcpStream>> = None;
        let mut next = Instant::now();
        while !self.stop.load(Ordering::SeqCst) {
            if Instant::now() >= next {
                next += self.period;
                if !self.paused.load(Ordering::SeqCst) {
                    self.beat(&mut conn);
                }
            }
            thread::sleep(next.saturating_duration_since(Instant::now()).min(Duration::from_millis(20)));
        }
    }

    fn beat(&self, conn: &mut Option<BufWriter<TcpStream>>) {
        let Some(status) = self.handle.status() else { return };
        let mut registration = self.registration.clone();
        registration.version = status.version;
        let msg = ControlMessage::Heartbeat { registration, status };
        for _ in 0..2 {
            if conn.is_none() {
                *conn = self.connect();
            }
            let Some(w) = conn.as_mut() else { return };
            match send_message(w, &msg) {
                Ok(()) => return,
                Err(e) => {
                    debug!("heartbeat to {} failed: {e}", self.master);
                    *conn = None;
                }
            }
        }
    }
}
