//! The master controller: probe registry, health and program pushes.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use super::{
    health, recv_message, request, send_message, ControlCommand, ControlError, ControlMessage, ControlReply,
    ProbeRegistration, ProbeRow, ProbeStatus, ProgramImage, PushResult, DEFAULT_HEARTBEAT, PUSH_ATTEMPTS,
    REQUEST_TIMEOUT,
};

#[derive(Debug, Clone)]
pub struct MasterConfig {
    pub listen: String,
    /// Expected heartbeat period of the probes.
    pub heartbeat: Duration,
    pub push_attempts: u32,
    pub request_timeout: Duration,
}

impl Default for MasterConfig {
    fn default() -> Self {
        MasterConfig {
            listen: "127.0.0.1:0".into(),
            heartbeat: DEFAULT_HEARTBEAT,
            push_attempts: PUSH_ATTEMPTS,
            request_timeout: REQUEST_TIMEOUT,
        }
    }
}

struct Entry {
    registration: ProbeRegistration,
    status: ProbeStatus,
    last_seen: Instant,
}

struct Shared {
    config: MasterConfig,
    probes: Mutex<BTreeMap<String, Entry>>,
    push_lock: Mutex<()>,
    conns: Mutex<Vec<TcpStream>>,
    stop: AtomicBool,
}

pub struct Master {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for Master {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Master").field("addr", &self.addr).finish()
    }
}

impl Master {
    pub fn start(config: MasterConfig) -> Result<Self, ControlError> {
        let listener = TcpListener::bind(&config.listen)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            config,
            probes: Mutex::new(BTreeMap::new()),
            push_lock: Mutex::new(()),
            conns: Mutex::new(Vec::new()),
            stop: AtomicBool::new(false),
        });
        let s = shared.clone();
        let acceptor = thread::spawn(move || accept_loop(listener, s));
        info!("master listening on {addr}");
        Ok(Master { addr, shared, acceptor: Some(acceptor) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Registered probes sorted by id, with health as of now.
    pub fn probes(&self) -> Vec<ProbeRow> {
        self.shared.rows()
    }

    pub fn push(&self, probe_id: &str, program: ProgramImage, version: Option<u64>) -> PushResult {
        self.shared.push(probe_id, program, version)
    }
}

impl Drop for Master {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(t) = self.acceptor.take() {
            let _ = t.join();
        }
        for c in self.shared.conns.lock().unwrap().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for conn in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match conn {
            Ok(s) => s,
            Err(e) => {
                warn!("master accept failed: {e}");
                continue;
            }
        };
        if let Ok(c) = stream.try_clone() {
            let mut conns = shared.conns.lock().unwrap();
            conns.retain(|c| c.peer_addr().is_ok());
            conns.push(c);
        }
        let s = shared.clone();
        thread::spawn(move || {
            if let Err(e) = s.serve(stream) {
                debug!("master connection ended: {e}");
            }
        });
    }
}

impl Shared {
    fn serve(&self, stream: TcpStream) -> Result<(), ControlError> {
        let _ = stream.set_nodelay(true);
        stream.set_write_timeout(Some(self.config.request_timeout))?;
        let mut r = BufReader::new(stream.try_clone()?);
        let mut w = BufWriter::new(stream);
        while let Some(msg) = recv_message(&mut r)? {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            match msg {
                ControlMessage::Heartbeat { registration, status } => self.heartbeat(registration, status),
                ControlMessage::Request { id, body } => {
                    let reply = self.handle(body);
                    send_message(&mut w, &ControlMessage::Response { id, body: reply })?;
                }
                ControlMessage::Response { .. } => {
                    return Err(ControlError::Protocol("unexpected response".into()));
                }
            }
        }
        Ok(())
    }

    fn heartbeat(&self, registration: ProbeRegistration, status: ProbeStatus) {
        let mut probes = self.probes.lock().unwrap();
        if !probes.contains_key(&registration.probe_id) {
            info!("probe {} registered from {}", registration.probe_id, registration.control_addr);
        }
        let id = registration.probe_id.clone();
        probes.insert(id, Entry { registration, status, last_seen: Instant::now() });
    }

    fn handle(&self, cmd: ControlCommand) -> ControlReply {
        match cmd {
            ControlCommand::ListProbes => ControlReply::Probes { rows: self.rows() },
            ControlCommand::Push { probe_id, program, version } => match self.push(&probe_id, program, version) {
                PushResult::Installed(version) => ControlReply::Installed { version },
                PushResult::Rejected(reason) => ControlReply::Rejected { reason },
                PushResult::Unreachable => ControlReply::Unreachable {
                    reason: format!("probe {probe_id} did not answer {} attempts", self.config.push_attempts),
                },
            },
            other => ControlReply::Error { message: format!("not a master command: {other:?}") },
        }
    }

    fn rows(&self) -> Vec<ProbeRow> {
        let now = Instant::now();
        let probes = self.probes.lock().unwrap();
        probes
            .values()
            .map(|e| {
                let age = now.duration_since(e.last_seen);
                ProbeRow {
                    probe_id: e.registration.probe_id.clone(),
                    control_addr: e.registration.control_addr.clone(),
                    health: health(age, self.config.heartbeat),
                    version: e.registration.version,
                    program: e.status.program.clone(),
                    packets: e.status.packets,
                    actions_emitted: e.status.actions_emitted,
                    entities: e.status.entities,
                    last_heartbeat_ms: age.as_millis() as u64,
                }
            })
            .collect()
    }

    fn push(&self, probe_id: &str, program: ProgramImage, version: Option<u64>) -> PushResult {
        let _serial = self.push_lock.lock().unwrap();
        if let Err(e) = program.decode() {
            return PushResult::Rejected(e.to_string());
        }
        let (addr, installed) = {
            let probes = self.probes.lock().unwrap();
            match probes.get(probe_id) {
                Some(e) => (e.registration.control_addr.clone(), e.registration.version),
                None => return PushResult::Rejected(format!("unknown probe {probe_id}")),
            }
        };
        let version = version.unwrap_or(installed + 1);
        let cmd = ControlCommand::InstallProgram { program, version };
        for attempt in 1..=self.config.push_attempts {
            match request(&addr, cmd.clone(), self.config.request_timeout) {
                Ok(ControlReply::Installed { version }) => {
                    if let Some(e) = self.probes.lock().unwrap().get_mut(probe_id) {
                        e.registration.version = version;
                    }
                    info!("pushed v{version} to {probe_id}");
                    return PushResult::Installed(version);
                }
                Ok(ControlReply::Rejected { reason }) => return PushResult::Rejected(reason),
                Ok(other) => return PushResult::Rejected(format!("unexpected reply {other:?}")),
                Err(e) => warn!("push to {probe_id} attempt {attempt} failed: {e}"),
            }
        }
        PushResult::Unreachable
    }
}
