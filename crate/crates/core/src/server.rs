//! TCP front end for the relay registry.
//!
//! One thread per connection reads frames and dispatches them against the
//! shared registry under a single mutex; a second thread per connection
//! writes whatever is queued for it. A ticker thread sweeps for expired
//! messages and writes the periodic stats line.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crate::relay::{Connection, Registry, ServerConfig, StatsSnapshot};
use crate::transport::{FrameCodec, Pdu, StatusCode};

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

/// Milliseconds since the Unix epoch, so journal timestamps stay meaningful
/// across restarts.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        ManualClock(AtomicU64::new(start_ms))
    }

    pub fn set(&self, ms: u64) {
        self.0.fetch_max(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

struct Route {
    session: u64,
    tx: Sender<Pdu>,
}

struct Shared {
    registry: Registry,
    routes: HashMap<String, Route>,
}

impl Shared {
    fn route(&mut self, frames: Vec<(String, Pdu)>) {
        for (to, pdu) in frames {
            match self.routes.get(&to) {
                Some(route) => {
                    if let Err(mpsc::SendError(pdu)) = route.tx.send(pdu) {
                        self.registry.requeue(&to, pdu);
                    }
                }
                None => self.registry.requeue(&to, pdu),
            }
        }
    }
}

struct Inner {
    shared: Mutex<Shared>,
    clock: Arc<dyn Clock>,
    codec: FrameCodec,
    stop: AtomicBool,
    streams: Mutex<HashMap<u64, TcpStream>>,
    workers: Mutex<Vec<JoinHandle<()>>>,
    next_conn: AtomicU64,
}

impl Inner {
    fn lock(&self) -> MutexGuard<'_, Shared> {
        // a panicking connection thread must not take the server down
        self.shared.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    inner: Arc<Inner>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn snapshot(&self) -> StatsSnapshot {
        let now = self.inner.clock.now_ms();
        self.inner.lock().registry.snapshot(now)
    }

    /// Runs an expiry sweep now instead of waiting for the ticker.
    pub fn expire_now(&self) -> Vec<(String, String)> {
        let now = self.inner.clock.now_ms();
        let mut shared = self.inner.lock();
        let expired = shared.registry.expire_offline(now);
        let out = shared.registry.take_outbox();
        shared.route(out);
        expired
    }

    pub fn with_registry<T>(&self, f: impl FnOnce(&Registry) -> T) -> T {
        f(&self.inner.lock().registry)
    }

    /// Blocks until the server stops (which, without `shutdown`, is never).
    pub fn join(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        let workers: Vec<_> = self.inner.workers.lock().map(|mut w| w.drain(..).collect()).unwrap_or_default();
        for w in workers {
            let _ = w.join();
        }
    }

    fn stop(&self) {
        if self.inner.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Ok(streams) = self.inner.streams.lock() {
            for s in streams.values() {
                let _ = s.shutdown(Shutdown::Both);
            }
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if !self.threads.is_empty() {
            self.stop();
        }
    }
}

/// Binds `config.bind:config.port` (port 0 picks a free one) and starts
/// serving in background threads.
pub fn spawn(config: &ServerConfig, clock: Arc<dyn Clock>) -> io::Result<ServerHandle> {
    config.check().map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
    let registry = Registry::from_config(config)?;
    let listener = TcpListener::bind((config.bind.as_str(), config.port))?;
    let addr = listener.local_addr()?;
    let inner = Arc::new(Inner {
        shared: Mutex::new(Shared { registry, routes: HashMap::new() }),
        clock,
        codec: FrameCodec::new(config.max_body),
        stop: AtomicBool::new(false),
        streams: Mutex::new(HashMap::new()),
        workers: Mutex::new(Vec::new()),
        next_conn: AtomicU64::new(1),
    });
    log::info!("relay listening on {addr}");

    let mut threads = Vec::new();
    let acceptor = Arc::clone(&inner);
    threads.push(thread::Builder::new().name("relay-accept".into()).spawn(move || accept_loop(listener, acceptor))?);
    let ticker = Arc::clone(&inner);
    let cfg = config.clone();
    threads.push(thread::Builder::new().name("relay-ticker".into()).spawn(move || tick_loop(ticker, cfg))?);
    Ok(ServerHandle { addr, inner, threads })
}

/// `spawn` with the system clock, then block forever.
pub fn serve(config: &ServerConfig) -> io::Result<()> {
    spawn(config, Arc::new(SystemClock))?.join();
    Ok(())
}

fn accept_loop(listener: TcpListener, inner: Arc<Inner>) {
    for stream in listener.incoming() {
        if inner.stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let id = inner.next_conn.fetch_add(1, Ordering::SeqCst);
        let conn_inner = Arc::clone(&inner);
        match thread::Builder::new().name(format!("relay-conn-{id}")).spawn(move || serve_connection(id, stream, conn_inner)) {
            Ok(h) => {
                if let Ok(mut w) = inner.workers.lock() {
                    w.retain(|h| !h.is_finished());
                    w.push(h);
                }
            }
            Err(e) => log::warn!("could not spawn connection thread: {e}"),
        }
    }
}

fn tick_loop(inner: Arc<Inner>, config: ServerConfig) {
    let step = Duration::from_millis(config.expire_interval_ms.clamp(1, 50));
    let mut last_expire = inner.clock.now_ms();
    let mut last_stats = last_expire;
    let mut stats_out: Box<dyn Write + Send> = match &config.stats_log {
        Some(path) => match OpenOptions::new().create(true).append(true).open(path) {
            Ok(f) => Box::new(f),
            Err(e) => {
                log::warn!("cannot open stats log {}: {e}", path.display());
                Box::new(io::stderr())
            }
        },
        None => Box::new(io::stderr()),
    };
    while !inner.stop.load(Ordering::SeqCst) {
        thread::sleep(step);
        let now = inner.clock.now_ms();
        if now.saturating_sub(last_expire) >= config.expire_interval_ms {
            last_expire = now;
            let mut shared = inner.lock();
            let expired = shared.registry.expire_offline(now);
            if !expired.is_empty() {
                log::info!("expired {} stored message(s)", expired.len());
            }
            let out = shared.registry.take_outbox();
            shared.route(out);
        }
        if config.stats_interval_ms > 0 && now.saturating_sub(last_stats) >= config.stats_interval_ms {
            last_stats = now;
            let snapshot = inner.lock().registry.snapshot(now);
            if let Ok(line) = serde_json::to_string(&snapshot) {
                let _ = writeln!(stats_out, "{line}");
                let _ = stats_out.flush();
            }
        }
    }
}

fn writer_loop(stream: TcpStream, rx: Receiver<Pdu>, codec: FrameCodec) {
    let mut out = BufWriter::new(stream);
    while let Ok(pdu) = rx.recv() {
        let mut batch = Some(pdu);
        while let Some(pdu) = batch.take() {
            if let Err(e) = codec.write_frame(&mut out, &pdu) {
                log::debug!("write failed: {e}");
                return;
            }
            batch = rx.try_recv().ok();
        }
        if out.flush().is_err() {
            return;
        }
    }
}

fn serve_connection(id: u64, stream: TcpStream, inner: Arc<Inner>) {
    let peer = match stream.peer_addr() {
        Ok(a) => a,
        Err(_) => return,
    };
    let _ = stream.set_nodelay(true);
    let (Ok(write_half), Ok(registered)) = (stream.try_clone(), stream.try_clone()) else { return };
    if let Ok(mut streams) = inner.streams.lock() {
        streams.insert(id, registered);
    }
    if inner.stop.load(Ordering::SeqCst) {
        let _ = stream.shutdown(Shutdown::Both);
    }
    let (tx, rx) = mpsc::channel();
    let codec = inner.codec;
    let writer = thread::spawn(move || writer_loop(write_half, rx, codec));

    let mut conn = Connection::new(peer);
    let mut bound: Vec<(String, u64)> = Vec::new();
    let mut reader = BufReader::new(stream);
    loop {
        let payload = match inner.codec.read_payload(&mut reader) {
            Ok(Some(p)) => p,
            Ok(None) => break,
            Err(e) => {
                log::debug!("{peer}: {e}");
                break;
            }
        };
        let pdu = match inner.codec.decode_payload(&payload) {
            Ok(pdu) => pdu,
            Err(e) => {
                log::info!("{peer}: undecodable frame: {e}");
                let _ = tx.send(Pdu::status(0, 0, StatusCode::Malformed));
                continue;
            }
        };
        let now = inner.clock.now_ms();
        let mut shared = inner.lock();
        let outcome = shared.registry.dispatch(&mut conn, pdu, now);
        if let Some(client) = &conn.client {
            let stale = shared.routes.get(client).is_none_or(|r| r.session != conn.session);
            if stale {
                shared.routes.insert(client.clone(), Route { session: conn.session, tx: tx.clone() });
                bound.push((client.clone(), conn.session));
            }
        }
        for pdu in outcome.reply {
            let _ = tx.send(pdu);
        }
        shared.route(outcome.routed);
    }

    {
        let now = inner.clock.now_ms();
        let mut shared = inner.lock();
        for (client, session) in &bound {
            if shared.routes.get(client).is_some_and(|r| r.session == *session) {
                shared.routes.remove(client);
            }
        }
        if let Some(client) = &conn.client {
            shared.registry.disconnect(client, conn.session, now);
            let out = shared.registry.take_outbox();
            shared.route(out);
        }
    }
    drop(tx);
    let _ = writer.join();
    if let Ok(mut streams) = inner.streams.lock() {
        if let Some(s) = streams.remove(&id) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}
