use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, SendTimeoutError, Sender};
use log::{debug, warn};

use super::wire::{decode_message, encode_message, FrameBuffer, BUS_MAGIC};
use super::{valid_topic, BusError, BusMessage, DEFAULT_QUEUE_CAPACITY, SUBSCRIBE_TOPIC};

const MIN_BACKOFF: Duration = Duration::from_millis(100);
const MAX_BACKOFF: Duration = Duration::from_secs(10);
const READ_SLICE: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SubscriberStats {
    pub received: u64,
    pub connects: u64,
    pub transport_errors: u64,
    pub decode_errors: u64,
    pub connected: bool,
}

#[derive(Default)]
struct Counters {
    received: AtomicU64,
    connects: AtomicU64,
    transport_errors: AtomicU64,
    decode_errors: AtomicU64,
    connected: AtomicBool,
}

/// Connects to one publisher and keeps reconnecting with exponential backoff
/// (100 ms doubling up to 10 s) whenever the connection breaks.
pub struct Subscriber {
    rx: Receiver<BusMessage>,
    counters: Arc<Counters>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for Subscriber {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Subscriber").field("stats", &self.stats()).finish()
    }
}

impl Subscriber {
    pub fn connect(addr: &str, patterns: &[&str], subscriber_id: &str) -> Result<Self, BusError> {
        Self::connect_with_capacity(addr, patterns, subscriber_id, DEFAULT_QUEUE_CAPACITY)
    }

    pub fn connect_with_capacity(
        addr: &str,
        patterns: &[&str],
        subscriber_id: &str,
        capacity: usize,
    ) -> Result<Self, BusError> {
        if let Some(bad) = patterns.iter().find(|p| !valid_topic(p)) {
            return Err(BusError::InvalidTopic(bad.to_string()));
        }
        let target: SocketAddr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| std::io::Error::new(ErrorKind::InvalidInput, format!("no address for {addr}")))?;
        let hello = encode_message(&BusMessage {
            topic: SUBSCRIBE_TOPIC.into(),
            probe_id: subscriber_id.to_string(),
            seq: 0,
            ts: 0,
            payload: serde_json::to_vec(&serde_json::json!({ "patterns": patterns })).unwrap(),
        });
        let (tx, rx) = bounded(capacity.max(1));
        let counters = Arc::new(Counters::default());
        let stop = Arc::new(AtomicBool::new(false));
        let thread = {
            let counters = counters.clone();
            let stop = stop.clone();
            thread::Builder::new().name("bus-sub".into()).spawn(move || run(target, hello, tx, counters, stop))?
        };
        Ok(Subscriber { rx, counters, stop, thread: Some(thread) })
    }

    /// Up to `max` pending messages in arrival order, without blocking.
    pub fn poll(&self, max: usize) -> Vec<BusMessage> {
        self.rx.try_iter().take(max).collect()
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<BusMessage> {
        self.rx.recv_timeout(timeout).ok()
    }

    pub fn is_connected(&self) -> bool {
        self.counters.connected.load(Ordering::SeqCst)
    }

    pub fn wait_connected(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while !self.is_connected() {
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(5));
        }
        true
    }

    pub fn stats(&self) -> SubscriberStats {
        let c = &self.counters;
        SubscriberStats {
            received: c.received.load(Ordering::Relaxed),
            connects: c.connects.load(Ordering::Relaxed),
            transport_errors: c.transport_errors.load(Ordering::Relaxed),
            decode_errors: c.decode_errors.load(Ordering::Relaxed),
            connected: c.connected.load(Ordering::Relaxed),
        }
    }
}

impl Drop for Subscriber {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn sleep_unless_stopped(d: Duration, stop: &AtomicBool) {
    let deadline = Instant::now() + d;
    while !stop.load(Ordering::SeqCst) {
        let now = Instant::now();
        if now >= deadline {
            break;
        }
        thread::sleep((deadline - now).min(Duration::from_millis(20)));
    }
}

fn run(target: SocketAddr, hello: Vec<u8>, tx: Sender<BusMessage>, c: Arc<Counters>, stop: Arc<AtomicBool>) {
    let mut backoff = MIN_BACKOFF;
    while !stop.load(Ordering::SeqCst) {
        let mut stream = match TcpStream::connect_timeout(&target, Duration::from_secs(1)) {
            Ok(s) => s,
            Err(e) => {
                debug!("connect to {target} failed: {e}; retrying in {backoff:?}");
                c.transport_errors.fetch_add(1, Ordering::Relaxed);
                sleep_unless_stopped(backoff, &stop);
                backoff = (backoff * 2).min(MAX_BACKOFF);
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        if stream.write_all(&hello).is_err() || stream.set_read_timeout(Some(READ_SLICE)).is_err() {
            c.transport_errors.fetch_add(1, Ordering::Relaxed);
            sleep_unless_stopped(backoff, &stop);
            backoff = (backoff * 2).min(MAX_BACKOFF);
            continue;
        }
        c.connects.fetch_add(1, Ordering::Relaxed);
        c.connected.store(true, Ordering::SeqCst);
        backoff = MIN_BACKOFF;
        let ended = read_loop(&mut stream, &tx, &c, &stop);
        c.connected.store(false, Ordering::SeqCst);
        if ended {
            return;
        }
        c.transport_errors.fetch_add(1, Ordering::Relaxed);
        sleep_unless_stopped(backoff, &stop);
        backoff = (backoff * 2).min(MAX_BACKOFF);
    }
}

/// Returns true when the subscriber should shut down, false to reconnect.
fn read_loop(stream: &mut TcpStream, tx: &Sender<BusMessage>, c: &Counters, stop: &AtomicBool) -> bool {
    let mut fb = FrameBuffer::new(BUS_MAGIC);
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        if stop.load(Ordering::SeqCst) {
            return true;
        }
        match stream.read(&mut buf) {
            Ok(0) => return false,
            Ok(n) => fb.extend(&buf[..n]),
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {
                continue
            }
            Err(_) => return false,
        }
        loop {
            let frame = match fb.next_frame() {
                Ok(Some(f)) => f,
                Ok(None) => break,
                Err(e) => {
                    warn!("bad frame from publisher: {e}");
                    c.decode_errors.fetch_add(1, Ordering::Relaxed);
                    return false;
                }
            };
            let msg = match decode_message(&frame) {
                Ok(m) => m,
                Err(e) => {
                    warn!("undecodable message: {e}");
                    c.decode_errors.fetch_add(1, Ordering::Relaxed);
                    continue;
                }
            };
            c.received.fetch_add(1, Ordering::Relaxed);
            let mut pending = msg;
            loop {
                match tx.send_timeout(pending, READ_SLICE) {
                    Ok(()) => break,
                    Err(SendTimeoutError::Timeout(m)) => {
                        if stop.load(Ordering::SeqCst) {
                            return true;
                        }
                        pending = m;
                    }
                    Err(SendTimeoutError::Disconnected(_)) => return true,
                }
            }
        }
    }
}
