use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, select, unbounded, Receiver, Sender, TrySendError};
use log::{debug, warn};

use super::wire::{decode_message, encode_message, frame, read_frame, BUS_MAGIC};
use super::{topic_matches, valid_topic, BusError, BusMessage, DEFAULT_QUEUE_CAPACITY, SUBSCRIBE_TOPIC};

#[derive(Debug, Clone)]
pub struct PublisherConfig {
    pub queue_capacity: usize,
    pub write_timeout: Duration,
    pub handshake_timeout: Duration,
}

impl Default for PublisherConfig {
    fn default() -> Self {
        PublisherConfig {
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            write_timeout: Duration::from_secs(2),
            handshake_timeout: Duration::from_secs(2),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PublisherStats {
    pub published: u64,
    pub delivered: u64,
    pub backpressure_drops: u64,
    pub subscribers: u64,
    pub disconnects: u64,
}

#[derive(Default)]
struct Counters {
    published: AtomicU64,
    delivered: AtomicU64,
    dropped: AtomicU64,
    subscribers: AtomicU64,
    disconnects: AtomicU64,
}

enum Outbound {
    Msg(BusMessage),
    Flush(Sender<()>),
}

struct Conn {
    out: BufWriter<TcpStream>,
    patterns: Vec<String>,
    peer: SocketAddr,
}

/// A probe's publishing endpoint. Messages are handed to a sender thread
/// through a bounded queue; when it is full the newest message is dropped.
pub struct Publisher {
    probe_id: String,
    addr: SocketAddr,
    tx: Option<Sender<Outbound>>,
    seqs: HashMap<String, u64>,
    counters: Arc<Counters>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for Publisher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Publisher").field("probe_id", &self.probe_id).field("addr", &self.addr).finish()
    }
}

impl Publisher {
    pub fn bind(addr: &str, probe_id: &str, config: PublisherConfig) -> Result<Self, BusError> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let (tx, rx) = bounded(config.queue_capacity.max(1));
        let (conn_tx, conn_rx) = unbounded();
        let counters = Arc::new(Counters::default());
        let stop = Arc::new(AtomicBool::new(false));

        let acceptor = {
            let stop = stop.clone();
            let cfg = config.clone();
            thread::Builder::new().name("bus-accept".into()).spawn(move || accept_loop(listener, conn_tx, stop, cfg))?
        };
        let sender = {
            let counters = counters.clone();
            thread::Builder::new().name("bus-send".into()).spawn(move || send_loop(rx, conn_rx, counters))?
        };
        Ok(Publisher {
            probe_id: probe_id.to_string(),
            addr: local,
            tx: Some(tx),
            seqs: HashMap::new(),
            counters,
            stop,
            threads: vec![acceptor, sender],
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn probe_id(&self) -> &str {
        &self.probe_id
    }

    /// Queue a message for delivery and return its sequence number.
    pub fn publish(&mut self, topic: &str, ts: u64, payload: Vec<u8>) -> Result<u64, BusError> {
        if !valid_topic(topic) {
            return Err(BusError::InvalidTopic(topic.to_string()));
        }
        let seq = self.seqs.entry(topic.to_string()).or_insert(0);
        *seq += 1;
        let msg = BusMessage { topic: topic.to_string(), probe_id: self.probe_id.clone(), seq: *seq, ts, payload };
        let seq = msg.seq;
        let tx = self.tx.as_ref().ok_or(BusError::Closed)?;
        match tx.try_send(Outbound::Msg(msg)) {
            Ok(()) => {
                self.counters.published.fetch_add(1, Ordering::Relaxed);
                Ok(seq)
            }
            Err(TrySendError::Full(_)) => {
                self.counters.dropped.fetch_add(1, Ordering::Relaxed);
                Err(BusError::BackpressureDrop)
            }
            Err(TrySendError::Disconnected(_)) => Err(BusError::Closed),
        }
    }

    pub fn stats(&self) -> PublisherStats {
        let c = &self.counters;
        PublisherStats {
            published: c.published.load(Ordering::Relaxed),
            delivered: c.delivered.load(Ordering::Relaxed),
            backpressure_drops: c.dropped.load(Ordering::Relaxed),
            subscribers: c.subscribers.load(Ordering::Relaxed),
            disconnects: c.disconnects.load(Ordering::Relaxed),
        }
    }

    /// Wait until everything queued so far has been written out.
    pub fn flush(&self, timeout: Duration) -> bool {
        let Some(tx) = &self.tx else { return false };
        let (done_tx, done_rx) = bounded(1);
        if tx.send_timeout(Outbound::Flush(done_tx), timeout).is_err() {
            return false;
        }
        done_rx.recv_timeout(timeout).is_ok()
    }

    /// Block until at least `n` subscribers have completed their handshake.
    pub fn wait_for_subscribers(&self, n: u64, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while self.counters.subscribers.load(Ordering::Relaxed) < n {
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(5));
        }
        true
    }
}

impl Drop for Publisher {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.tx = None;
        // Wake the acceptor out of its blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn handshake(stream: &mut TcpStream, timeout: Duration) -> Result<Vec<String>, String> {
    stream.set_read_timeout(Some(timeout)).map_err(|e| e.to_string())?;
    let body = read_frame(stream, BUS_MAGIC)
        .map_err(|e| e.to_string())?
        .ok_or_else(|| "closed before handshake".to_string())?;
    let msg = decode_message(&frame(BUS_MAGIC, &body)).map_err(|e| e.to_string())?;
    if msg.topic != SUBSCRIBE_TOPIC {
        return Err(format!("expected a {SUBSCRIBE_TOPIC} frame, got topic {}", msg.topic));
    }
    let v: serde_json::Value = serde_json::from_slice(&msg.payload).map_err(|e| e.to_string())?;
    let patterns: Vec<String> = v
        .get("patterns")
        .and_then(|p| p.as_array())
        .ok_or("handshake has no patterns array")?
        .iter()
        .map(|p| p.as_str().map(str::to_string).ok_or("pattern is not a string"))
        .collect::<Result<_, _>>()?;
    if let Some(bad) = patterns.iter().find(|p| !valid_topic(p)) {
        return Err(format!("invalid pattern {bad:?}"));
    }
    stream.set_read_timeout(None).map_err(|e| e.to_string())?;
    Ok(patterns)
}

fn accept_loop(listener: TcpListener, conns: Sender<Conn>, stop: Arc<AtomicBool>, cfg: PublisherConfig) {
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let mut stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let peer = match stream.peer_addr() {
            Ok(p) => p,
            Err(_) => continue,
        };
        match handshake(&mut stream, cfg.handshake_timeout) {
            Ok(patterns) => {
                let _ = stream.set_nodelay(true);
                let _ = stream.set_write_timeout(Some(cfg.write_timeout));
                debug!("subscriber {peer} registered for {patterns:?}");
                if conns.send(Conn { out: BufWriter::new(stream), patterns, peer }).is_err() {
                    break;
                }
            }
            Err(e) => warn!("rejected subscriber {peer}: {e}"),
        }
    }
}

fn send_loop(rx: Receiver<Outbound>, conn_rx: Receiver<Conn>, counters: Arc<Counters>) {
    let mut conns: Vec<Conn> = Vec::new();
    let mut dirty = false;
    loop {
        // Register newly handshaken subscribers before handling more traffic.
        while let Ok(c) = conn_rx.try_recv() {
            conns.push(c);
            counters.subscribers.store(conns.len() as u64, Ordering::Relaxed);
        }
        let item = if dirty {
            match rx.try_recv() {
                Ok(x) => Some(x),
                Err(crossbeam_channel::TryRecvError::Empty) => {
                    flush_all(&mut conns, &counters);
                    dirty = false;
                    continue;
                }
                Err(crossbeam_channel::TryRecvError::Disconnected) => None,
            }
        } else {
            select! {
                recv(rx) -> m => m.ok(),
                recv(conn_rx) -> c => {
                    if let Ok(c) = c {
                        conns.push(c);
                        counters.subscribers.store(conns.len() as u64, Ordering::Relaxed);
                    }
                    continue;
                }
            }
        };
        match item {
            None => break,
            Some(Outbound::Flush(done)) => {
                flush_all(&mut conns, &counters);
                dirty = false;
                let _ = done.send(());
            }
            Some(Outbound::Msg(msg)) => {
                let mut bytes = None;
                let mut failed = Vec::new();
                for (i, c) in conns.iter_mut().enumerate() {
                    if !c.patterns.iter().any(|p| topic_matches(p, &msg.topic)) {
                        continue;
                    }
                    let b = bytes.get_or_insert_with(|| encode_message(&msg));
                    match c.out.write_all(b) {
                        Ok(()) => {
                            counters.delivered.fetch_add(1, Ordering::Relaxed);
                            dirty = true;
                        }
                        Err(_) => failed.push(i),
                    }
                }
                drop_conns(&mut conns, failed, &counters);
            }
        }
    }
    flush_all(&mut conns, &counters);
}

fn flush_all(conns: &mut Vec<Conn>, counters: &Counters) {
    let failed: Vec<usize> = conns.iter_mut().enumerate().filter_map(|(i, c)| c.out.flush().err().map(|_| i)).collect();
    drop_conns(conns, failed, counters);
}

fn drop_conns(conns: &mut Vec<Conn>, failed: Vec<usize>, counters: &Counters) {
    for i in failed.into_iter().rev() {
        let c = conns.remove(i);
        debug!("subscriber {} disconnected", c.peer);
        counters.disconnects.fetch_add(1, Ordering::Relaxed);
    }
    counters.subscribers.store(conns.len() as u64, Ordering::Relaxed);
}
