//! Deterministic network simulation, scenario scripts, and the benchmark
//! driver.
//!
//! [`SimNet`] moves encoded frames between client sessions and an in-process
//! [`Registry`] on a virtual clock. Every link has the same latency, so frames
//! on one link never overtake each other. Scenario scripts describe timed
//! actions and expectations; the same script can be replayed against the TCP
//! server to check that both paths agree.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composer::{ComposeError, Composer, ExportOptions, Manifest, MemorySource, SlideSpec};
use crate::net::{NetClient, NetError};
use crate::relay::{Connection, Registry, ServerConfig, StatsSnapshot, DEFAULT_DEAD_TIME_MS};
use crate::server::{self, ManualClock, SystemClock};
use crate::transport::{AppEvent, ClientSession, Command, FrameCodec, Pdu, StatusCode};

/// Session tag used for every simulated or scripted client, so Message-IDs
/// come out the same on both paths.
const SESSION_TAG: &str = "s";

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub latency_ms: u64,
    pub seed: u64,
    /// Frames dropped per million, chosen by hashing (seed, frame ordinal).
    /// Connection closes are never dropped.
    pub drop_per_million: u32,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { latency_ms: 5, seed: 0, drop_per_million: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hop {
    ToServer,
    ToClient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Frame(Vec<u8>),
    Close,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub deliver_at: u64,
    pub conn: u64,
    pub hop: Hop,
    pub payload: Payload,
}

#[derive(Debug, Clone)]
pub struct SimNet {
    config: NetConfig,
    now: u64,
    ordinal: u64,
    seq: u64,
    dropped: u64,
    in_flight: BTreeMap<(u64, u64), Packet>,
}

impl SimNet {
    pub fn new(config: NetConfig) -> Self {
        SimNet { config, now: 0, ordinal: 0, seq: 0, dropped: 0, in_flight: BTreeMap::new() }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn is_idle(&self) -> bool {
        self.in_flight.is_empty()
    }

    fn drops(&self, ordinal: u64) -> bool {
        self.config.drop_per_million > 0
            && splitmix64(self.config.seed ^ splitmix64(ordinal)) % 1_000_000 < u64::from(self.config.drop_per_million)
    }

    /// Queues a payload; returns false if the drop rule ate it.
    pub fn transmit(&mut self, conn: u64, hop: Hop, payload: Payload) -> bool {
        if let Payload::Frame(_) = payload {
            self.ordinal += 1;
            if self.drops(self.ordinal) {
                self.dropped += 1;
                return false;
            }
        }
        let deliver_at = self.now + self.config.latency_ms;
        self.seq += 1;
        self.in_flight.insert((deliver_at, self.seq), Packet { deliver_at, conn, hop, payload });
        true
    }

    /// The earliest packet due at or before `until`, advancing the clock to
    /// its delivery time.
    pub fn pop_due(&mut self, until: u64) -> Option<Packet> {
        let (&key, _) = self.in_flight.first_key_value()?;
        if key.0 > until {
            return None;
        }
        let packet = self.in_flight.remove(&key)?;
        self.now = self.now.max(packet.deliver_at);
        Some(packet)
    }

    pub fn advance_to(&mut self, t: u64) {
        self.now = self.now.max(t);
    }
}

struct Peer {
    session: ClientSession,
    conn: Option<u64>,
}

struct Link {
    client: String,
    server: Connection,
    client_open: bool,
    server_open: bool,
}

/// Clients, links and the relay, all on the simulated network.
struct World {
    net: SimNet,
    registry: Registry,
    codec: FrameCodec,
    peers: BTreeMap<String, Peer>,
    links: BTreeMap<u64, Link>,
    routes: BTreeMap<String, u64>,
    next_conn: u64,
}

type ClientEvents = Vec<(String, u64, AppEvent)>;

impl World {
    fn new(net: NetConfig, dead_time_ms: u64) -> Self {
        World {
            net: SimNet::new(net),
            registry: Registry::new(dead_time_ms),
            codec: FrameCodec::default(),
            peers: BTreeMap::new(),
            links: BTreeMap::new(),
            routes: BTreeMap::new(),
            next_conn: 1,
        }
    }

    fn peer(&mut self, client: &str) -> &mut Peer {
        self.peers
            .entry(client.to_string())
            .or_insert_with(|| Peer { session: ClientSession::new(client, SESSION_TAG), conn: None })
    }

    fn session(&mut self, client: &str) -> &mut ClientSession {
        &mut self.peer(client).session
    }

    fn send_frame(&mut self, conn: u64, hop: Hop, pdu: &Pdu) {
        let bytes = self.codec.encode(pdu).expect("relay and sessions produce valid frames");
        self.net.transmit(conn, hop, Payload::Frame(bytes));
    }

    /// Moves a client's queued frames onto its link.
    fn pump(&mut self, client: &str) {
        let Some(conn) = self.peers.get(client).and_then(|p| p.conn) else { return };
        while let Some(pdu) = self.peer(client).session.next_outgoing() {
            self.send_frame(conn, Hop::ToServer, &pdu);
        }
    }

    fn register(&mut self, client: &str) -> u32 {
        if self.peer(client).conn.is_none() {
            let id = self.next_conn;
            self.next_conn += 1;
            let address = SocketAddr::from(([10, 0, (id >> 8) as u8, id as u8], 7000));
            self.links.insert(
                id,
                Link { client: client.to_string(), server: Connection::new(address), client_open: true, server_open: true },
            );
            self.peer(client).conn = Some(id);
        }
        let txn = self.session(client).register();
        self.pump(client);
        txn
    }

    fn disconnect(&mut self, client: &str) {
        let peer = self.peer(client);
        peer.session.disconnect();
        let Some(conn) = peer.conn.take() else { return };
        if let Some(link) = self.links.get_mut(&conn) {
            link.client_open = false;
        }
        self.net.transmit(conn, Hop::ToServer, Payload::Close);
    }

    fn expire(&mut self) {
        let now = self.net.now();
        self.registry.expire_offline(now);
        let out = self.registry.take_outbox();
        self.route(out);
    }

    fn route(&mut self, frames: Vec<(String, Pdu)>) {
        for (to, pdu) in frames {
            match self.routes.get(&to).copied().filter(|c| self.links[c].server_open) {
                Some(conn) => self.send_frame(conn, Hop::ToClient, &pdu),
                None => self.registry.requeue(&to, pdu),
            }
        }
    }

    fn deliver(&mut self, packet: Packet) -> ClientEvents {
        let now = self.net.now();
        let conn = packet.conn;
        match (packet.hop, packet.payload) {
            (Hop::ToServer, Payload::Frame(bytes)) => {
                if !self.links[&conn].server_open {
                    return Vec::new();
                }
                let pdu = match self.codec.decode(&bytes) {
                    Ok(p) => p,
                    Err(_) => {
                        self.send_frame(conn, Hop::ToClient, &Pdu::status(0, 0, StatusCode::Malformed));
                        return Vec::new();
                    }
                };
                let link = self.links.get_mut(&conn).expect("link exists");
                let outcome = self.registry.dispatch(&mut link.server, pdu, now);
                if let Some(client) = link.server.client.clone() {
                    self.routes.insert(client, conn);
                }
                for p in &outcome.reply {
                    self.send_frame(conn, Hop::ToClient, p);
                }
                self.route(outcome.routed);
                Vec::new()
            }
            (Hop::ToServer, Payload::Close) => {
                let link = self.links.get_mut(&conn).expect("link exists");
                link.server_open = false;
                if let Some(client) = link.server.client.clone() {
                    let session = link.server.session;
                    if self.routes.get(&client) == Some(&conn) {
                        self.routes.remove(&client);
                    }
                    self.registry.disconnect(&client, session, now);
                    let out = self.registry.take_outbox();
                    self.route(out);
                }
                Vec::new()
            }
            (Hop::ToClient, Payload::Frame(bytes)) => {
                let pdu = self.codec.decode(&bytes).expect("relay produces valid frames");
                let link = &self.links[&conn];
                let client = link.client.clone();
                if !link.client_open {
                    // bounced: the client already hung up
                    self.registry.requeue(&client, pdu);
                    return Vec::new();
                }
                let events = self.session(&client).on_frame(pdu);
                self.pump(&client);
                events.into_iter().map(|e| (client.clone(), now, e)).collect()
            }
            (Hop::ToClient, Payload::Close) => Vec::new(),
        }
    }

    fn run_until(&mut self, t: u64) -> ClientEvents {
        let mut events = Vec::new();
        while let Some(p) = self.net.pop_due(t) {
            events.extend(self.deliver(p));
        }
        self.net.advance_to(t);
        events
    }

    fn next_packet(&mut self) -> Option<ClientEvents> {
        let p = self.net.pop_due(u64::MAX)?;
        Some(self.deliver(p))
    }
}

// ---------------------------------------------------------------------------
// Scenarios

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Register {
        client: String,
    },
    /// Sends a message labelled `label`. The envelope is composed from
    /// `manifest` (relative to the script) or, without one, from a
    /// single text slide holding the label.
    Send {
        from: String,
        to: String,
        label: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        manifest: Option<PathBuf>,
    },
    Delete {
        from: String,
        label: String,
    },
    Forward {
        from: String,
        to: String,
        label: String,
    },
    Disconnect {
        client: String,
    },
    ExpireTick,
    Expect {
        expect: Expectation,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Expectation {
    /// `to` received `label` exactly `count` times (default 1).
    Delivered {
        to: String,
        label: String,
        #[serde(default = "one")]
        count: usize,
    },
    /// The latest status `client` got for `command` (default SEND) on `label`.
    Status {
        client: String,
        label: String,
        code: StatusCode,
        #[serde(default = "send_command")]
        command: Command,
    },
    /// `client` was told `label` expired.
    Expired { client: String, label: String },
    /// Length of `client`'s offline queue at the relay.
    Stored { client: String, count: usize },
}

fn one() -> usize {
    1
}

fn send_command() -> Command {
    Command::Send
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedAction {
    pub at: u64,
    #[serde(flatten)]
    pub action: Action,
}

fn default_dead_time() -> u64 {
    DEFAULT_DEAD_TIME_MS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioScript {
    #[serde(default = "default_dead_time")]
    pub dead_time_ms: u64,
    #[serde(default)]
    pub net: NetConfig,
    pub actions: Vec<TimedAction>,
    /// Directory manifest paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("expectation #{index} at {at_ms} ms failed: {detail}")]
    Expectation { index: usize, at_ms: u64, detail: String },
    #[error("script: {0}")]
    Script(String),
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("server: {0}")]
    Server(#[from] std::io::Error),
}

impl ScenarioScript {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let script: ScenarioScript = serde_json::from_str(text).map_err(|e| ScenarioError::Script(e.to_string()))?;
        script.check()?;
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Script(format!("{}: {e}", path.display())))?;
        let mut script = Self::from_json(&text)?;
        script.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(script)
    }

    pub fn check(&self) -> Result<(), ScenarioError> {
        if self.dead_time_ms == 0 {
            return Err(ScenarioError::Script("dead_time_ms must be positive".into()));
        }
        if let Some(w) = self.actions.windows(2).find(|w| w[1].at < w[0].at) {
            return Err(ScenarioError::Script(format!("actions out of order at {} ms", w[1].at)));
        }
        Ok(())
    }

    fn envelope(&self, from: &str, to: &str, label: &str, manifest: Option<&Path>, at: u64) -> Result<Vec<u8>, ScenarioError> {
        let options = ExportOptions {
            date: DateTime::<Utc>::from_timestamp_millis(at as i64).unwrap_or_default(),
            message_id: label.to_string(),
            boundary_seed: self.net.seed,
        };
        Ok(match manifest {
            Some(path) => {
                let path = self.base_dir.join(path);
                Composer::for_manifest_file(&path).export_with(&Manifest::load(&path)?, &options)?
            }
            None => {
                let manifest = Manifest {
                    from: from.into(),
                    to: to.into(),
                    subject: Some(label.into()),
                    device: None,
                    slides: vec![SlideSpec::text(label)],
                };
                Composer::new(MemorySource::new()).export_with(&manifest, &options)?
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Happening {
    Delivered {
        to: String,
        from: String,
        label: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        forwarded_by: Option<String>,
    },
    Status {
        client: String,
        command: Command,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
        code: StatusCode,
    },
    Expired {
        client: String,
        label: String,
    },
    Disconnected {
        client: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportEvent {
    pub at_ms: u64,
    #[serde(flatten)]
    pub what: Happening,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub seed: u64,
    pub latency_ms: u64,
    pub dropped_frames: u64,
    pub expectations_checked: usize,
    pub events: Vec<ReportEvent>,
    pub stats: StatsSnapshot,
}

impl ScenarioReport {
    /// The events without timestamps, sorted; what the sim and TCP paths
    /// must agree on.
    pub fn outcomes(&self) -> Vec<Happening> {
        let mut v: Vec<_> = self.events.iter().map(|e| e.what.clone()).collect();
        v.sort();
        v
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Label bookkeeping shared by both scenario runners.
#[derive(Default)]
struct Labels {
    by_message: BTreeMap<String, String>,
    by_label: BTreeMap<String, String>,
    /// (client, txn) -> (command, label)
    txns: BTreeMap<(String, u32), (Command, Option<String>)>,
}

impl Labels {
    fn bind(&mut self, label: &str, message_id: &str) {
        self.by_message.insert(message_id.to_string(), label.to_string());
        self.by_label.insert(label.to_string(), message_id.to_string());
    }

    fn label_of(&self, message_id: &str) -> String {
        self.by_message.get(message_id).cloned().unwrap_or_else(|| message_id.to_string())
    }

    fn message_of(&self, label: &str) -> Result<String, ScenarioError> {
        self.by_label.get(label).cloned().ok_or_else(|| ScenarioError::Script(format!("unknown label {label:?}")))
    }

    fn translate(&self, client: &str, event: &AppEvent, inbox: Option<&Pdu>) -> Option<Happening> {
        match event {
            AppEvent::SendResolved { txn, code, .. } | AppEvent::CommandResolved { txn, code, .. } => {
                let (command, label) = self.txns.get(&(client.to_string(), *txn)).cloned()?;
                Some(Happening::Status { client: client.into(), command, label, code: *code })
            }
            AppEvent::MessageArrived { message_id, from } => Some(Happening::Delivered {
                to: client.into(),
                from: from.clone(),
                label: self.label_of(message_id),
                forwarded_by: inbox.and_then(|p| p.header(crate::transport::headers::FORWARDED_BY)).map(str::to_string),
            }),
            AppEvent::MessageExpired { message_id, .. } => {
                Some(Happening::Expired { client: client.into(), label: self.label_of(message_id) })
            }
            AppEvent::Orphan { .. } | AppEvent::Unexpected { .. } => None,
        }
    }
}

fn check_expectation(expect: &Expectation, events: &[ReportEvent], stored: impl Fn(&str) -> usize) -> Result<(), String> {
    match expect {
        Expectation::Delivered { to, label, count } => {
            let n = events
                .iter()
                .filter(|e| matches!(&e.what, Happening::Delivered { to: t, label: l, .. } if t == to && l == label))
                .count();
            if n == *count {
                Ok(())
            } else {
                Err(format!("{to} received {label:?} {n} time(s), expected {count}"))
            }
        }
        Expectation::Status { client, label, code, command } => {
            let got = events.iter().rev().find_map(|e| match &e.what {
                Happening::Status { client: c, command: k, label: Some(l), code }
                    if c == client && k == command && l == label =>
                {
                    Some(*code)
                }
                _ => None,
            });
            match got {
                Some(g) if g == *code => Ok(()),
                Some(g) => Err(format!("{client} got {g} for {command} {label:?}, expected {code}")),
                None => Err(format!("{client} has no status for {command} {label:?}")),
            }
        }
        Expectation::Expired { client, label } => {
            if events
                .iter()
                .any(|e| matches!(&e.what, Happening::Expired { client: c, label: l } if c == client && l == label))
            {
                Ok(())
            } else {
                Err(format!("{client} was not told {label:?} expired"))
            }
        }
        Expectation::Stored { client, count } => {
            let n = stored(client);
            if n == *count {
                Ok(())
            } else {
                Err(format!("{client} has {n} stored message(s), expected {count}"))
            }
        }
    }
}

/// Runs `script` on the simulated network. Output depends only on the
/// script and `net`.
pub fn run_scenario(script: &ScenarioScript, net: NetConfig) -> Result<ScenarioReport, ScenarioError> {
    script.check()?;
    let mut world = World::new(net, script.dead_time_ms);
    let mut labels = Labels::default();
    let mut events: Vec<ReportEvent> = Vec::new();
    let mut checked = 0;

    let record = |world: &mut World, labels: &Labels, events: &mut Vec<ReportEvent>, batch: ClientEvents| {
        for (client, at, event) in batch {
            let inbox = match &event {
                AppEvent::MessageArrived { message_id, .. } => {
                    world.session(&client).inbox().find(|p| p.message_id() == Some(message_id.as_str())).cloned()
                }
                _ => None,
            };
            if let Some(what) = labels.translate(&client, &event, inbox.as_ref()) {
                events.push(ReportEvent { at_ms: at, what });
            }
        }
    };

    for (index, TimedAction { at, action }) in script.actions.iter().enumerate() {
        let batch = world.run_until(*at);
        record(&mut world, &labels, &mut events, batch);
        let not_registered = |c: &str| ScenarioError::Script(format!("action #{index}: {c} is not registered"));
        match action {
            Action::Register { client } => {
                let txn = world.register(client);
                labels.txns.insert((client.clone(), txn), (Command::Register, None));
            }
            Action::Send { from, to, label, manifest } => {
                let env = script.envelope(from, to, label, manifest.as_deref(), *at)?;
                let txn = world.session(from).submit_send(env, to).map_err(|_| not_registered(from))?;
                let message_id = world.session(from).pending()[&txn].message_id.clone().unwrap_or_default();
                labels.bind(label, &message_id);
                labels.txns.insert((from.clone(), txn), (Command::Send, Some(label.clone())));
                world.pump(from);
            }
            Action::Delete { from, label } => {
                let id = labels.message_of(label)?;
                let txn = world.session(from).submit_delete(&id).map_err(|_| not_registered(from))?;
                labels.txns.insert((from.clone(), txn), (Command::Delete, Some(label.clone())));
                world.pump(from);
            }
            Action::Forward { from, to, label } => {
                let id = labels.message_of(label)?;
                let txn = world.session(from).submit_forward(&id, to).map_err(|_| not_registered(from))?;
                labels.txns.insert((from.clone(), txn), (Command::Forward, Some(label.clone())));
                world.pump(from);
            }
            Action::Disconnect { client } => {
                world.disconnect(client);
                events.push(ReportEvent { at_ms: *at, what: Happening::Disconnected { client: client.clone() } });
            }
            Action::ExpireTick => world.expire(),
            Action::Expect { expect } => {
                checked += 1;
                let registry = &world.registry;
                check_expectation(expect, &events, |c| registry.client(c).map_or(0, |r| r.offline_queue.len()))
                    .map_err(|detail| ScenarioError::Expectation { index, at_ms: *at, detail })?;
            }
        }
    }
    while let Some(batch) = world.next_packet() {
        record(&mut world, &labels, &mut events, batch);
    }
    Ok(ScenarioReport {
        seed: net.seed,
        latency_ms: net.latency_ms,
        dropped_frames: world.net.dropped(),
        expectations_checked: checked,
        stats: world.registry.snapshot(world.net.now()),
        events,
    })
}

/// Replays `script` against a real TCP server on loopback with a manual
/// clock. After each action every connected client reads until its socket
/// has been quiet for `quiet`. Event times are the action times.
pub fn run_scenario_tcp(script: &ScenarioScript, quiet: Duration) -> Result<ScenarioReport, ScenarioError> {
    script.check()?;
    let clock = Arc::new(ManualClock::new(0));
    let config = ServerConfig {
        dead_time_ms: script.dead_time_ms,
        port: 0,
        stats_interval_ms: 0,
        expire_interval_ms: u64::MAX / 4,
        ..Default::default()
    };
    let handle = server::spawn(&config, clock.clone())?;
    let addr = handle.local_addr().to_string();
    let timeout = Duration::from_secs(10);

    let mut clients: BTreeMap<String, NetClient> = BTreeMap::new();
    let mut parked: BTreeMap<String, ClientSession> = BTreeMap::new();
    let mut labels = Labels::default();
    let mut events: Vec<ReportEvent> = Vec::new();
    let mut checked = 0;

    let status = |client: &str, command, label: Option<&String>, code, at| ReportEvent {
        at_ms: at,
        what: Happening::Status { client: client.into(), command, label: label.cloned(), code },
    };

    for (index, TimedAction { at, action }) in script.actions.iter().enumerate() {
        clock.set(*at);
        let missing = |c: &str| ScenarioError::Script(format!("action #{index}: {c} is not registered"));
        match action {
            Action::Register { client } => {
                if !clients.contains_key(client) {
                    let mut session =
                        parked.remove(client).unwrap_or_else(|| ClientSession::new(client.as_str(), SESSION_TAG));
                    session.disconnect();
                    clients.insert(client.clone(), NetClient::connect(&addr, session, timeout)?);
                }
                let code = clients.get_mut(client).expect("connected").register()?;
                events.push(status(client, Command::Register, None, code, *at));
            }
            Action::Send { from, to, label, manifest } => {
                let env = script.envelope(from, to, label, manifest.as_deref(), *at)?;
                let c = clients.get_mut(from).ok_or_else(|| missing(from))?;
                let (code, message_id) = c.send(env, to).map_err(|e| match e {
                    NetError::Session(_) => missing(from),
                    e => e.into(),
                })?;
                labels.bind(label, &message_id);
                events.push(status(from, Command::Send, Some(label), code, *at));
            }
            Action::Delete { from, label } => {
                let id = labels.message_of(label)?;
                let c = clients.get_mut(from).ok_or_else(|| missing(from))?;
                let (code, _) = c.command(Command::Delete, &id, None)?;
                events.push(status(from, Command::Delete, Some(label), code, *at));
            }
            Action::Forward { from, to, label } => {
                let id = labels.message_of(label)?;
                let c = clients.get_mut(from).ok_or_else(|| missing(from))?;
                let (code, _) = c.command(Command::Forward, &id, Some(to))?;
                events.push(status(from, Command::Forward, Some(label), code, *at));
            }
            Action::Disconnect { client } => {
                if let Some(c) = clients.remove(client) {
                    parked.insert(client.clone(), c.close()?);
                }
                events.push(ReportEvent { at_ms: *at, what: Happening::Disconnected { client: client.clone() } });
            }
            Action::ExpireTick => {
                handle.expire_now();
            }
            Action::Expect { expect } => {
                checked += 1;
                let stored = |c: &str| handle.with_registry(|r| r.client(c).map_or(0, |r| r.offline_queue.len()));
                check_expectation(expect, &events, stored)
                    .map_err(|detail| ScenarioError::Expectation { index, at_ms: *at, detail })?;
                continue;
            }
        }
        // settle: collect deliveries and expiry notices
        for (id, c) in clients.iter_mut() {
            let inbox = c.drain_inbox(quiet)?;
            for pdu in &inbox {
                let event = AppEvent::MessageArrived {
                    message_id: pdu.message_id().unwrap_or_default().to_string(),
                    from: pdu.header(crate::transport::headers::FROM).unwrap_or_default().to_string(),
                };
                if let Some(what) = labels.translate(id, &event, Some(pdu)) {
                    events.push(ReportEvent { at_ms: *at, what });
                }
            }
            for event in c.take_events() {
                if let AppEvent::MessageExpired { .. } = event {
                    if let Some(what) = labels.translate(id, &event, None) {
                        events.push(ReportEvent { at_ms: *at, what });
                    }
                }
            }
        }
    }
    for (_, c) in std::mem::take(&mut clients) {
        c.close()?;
    }
    let stats = handle.snapshot();
    handle.shutdown();
    Ok(ScenarioReport { seed: script.net.seed, latency_ms: 0, dropped_frames: 0, expectations_checked: checked, events, stats })
}

// ---------------------------------------------------------------------------
// Benchmark

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Sim,
    Tcp,
}

impl FromStr for BenchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sim" => Ok(BenchMode::Sim),
            "tcp" | "tcp-loopback" => Ok(BenchMode::Tcp),
            other => Err(format!("unknown bench mode {other:?} (sim, tcp-loopback)")),
        }
    }
}

/// Relative weights of the commands each client issues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandMix {
    pub send: u32,
    pub delete: u32,
    pub forward: u32,
}

impl Default for CommandMix {
    fn default() -> Self {
        CommandMix { send: 80, delete: 10, forward: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchConfig {
    pub clients: usize,
    pub messages: usize,
    pub mode: BenchMode,
    pub mix: CommandMix,
    pub seed: u64,
    /// Link latency in sim mode.
    pub latency_ms: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { clients: 7, messages: 100, mode: BenchMode::Sim, mix: CommandMix::default(), seed: 1, latency_ms: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
}

impl Percentiles {
    /// Nearest-rank percentiles.
    pub fn of(samples: &mut [f64]) -> Percentiles {
        samples.sort_by(f64::total_cmp);
        let rank = |p: f64| {
            if samples.is_empty() {
                return 0.0;
            }
            let i = ((p / 100.0) * samples.len() as f64).ceil() as usize;
            samples[i.clamp(1, samples.len()) - 1]
        };
        Percentiles { p50: rank(50.0), p95: rank(95.0), p99: rank(99.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub clients: usize,
    pub messages_per_client: usize,
    pub commands: usize,
    pub elapsed_ms: f64,
    pub requests_per_second: f64,
    /// Wall-clock in tcp mode, virtual in sim mode.
    pub latency_ms: Percentiles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub virtual_ms: Option<u64>,
    pub accepted: u64,
    pub deliveries: u64,
    pub stored: u64,
    pub expired: u64,
    pub deleted: u64,
    pub statuses: BTreeMap<Command, BTreeMap<StatusCode, u64>>,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("bench config: {0}")]
    Config(String),
    #[error("{recipient} received {message_id} more than once")]
    Duplicate { recipient: String, message_id: String },
    #[error("conservation violated: {0}")]
    Conservation(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("server: {0}")]
    Server(#[from] std::io::Error),
    #[error(transparent)]
    Compose(#[from] ComposeError),
}

const MAILBOX: &str = "mailbox";

#[derive(Debug, Clone, PartialEq, Eq)]
enum Planned {
    Send { to: String },
    Delete { message_id: String },
    Forward { message_id: String, to: String },
}

/// What one benchmark client decides to do next.
struct Workload {
    id: String,
    rng: ChaCha8Rng,
    targets: Vec<String>,
    mix: CommandMix,
    issued: usize,
    /// Messages this client left in the mailbox, still deletable.
    mailbox_sent: Vec<String>,
    received: Vec<(String, String)>,
    forwarded: BTreeSet<(String, String)>,
}

impl Workload {
    fn new(index: usize, clients: &[String], mix: CommandMix, seed: u64) -> Self {
        let id = clients[index].clone();
        let mut targets: Vec<String> = clients.iter().filter(|c| **c != id).cloned().collect();
        if targets.is_empty() {
            targets.push(id.clone());
        }
        Workload {
            id,
            rng: ChaCha8Rng::seed_from_u64(splitmix64(seed ^ index as u64)),
            targets,
            mix,
            issued: 0,
            mailbox_sent: Vec::new(),
            received: Vec::new(),
            forwarded: BTreeSet::new(),
        }
    }

    fn pick<'a>(rng: &mut ChaCha8Rng, v: &'a [String]) -> &'a String {
        &v[rng.gen_range(0..v.len())]
    }

    /// The first command is always a SEND to a live client so that the
    /// forward pool fills; after that the mix decides, falling back to SEND
    /// when there is nothing to delete or forward.
    fn next(&mut self) -> Planned {
        self.issued += 1;
        if self.issued == 1 {
            return Planned::Send { to: Self::pick(&mut self.rng, &self.targets).clone() };
        }
        let total = self.mix.send + self.mix.delete + self.mix.forward;
        let roll = self.rng.gen_range(0..total.max(1));
        if roll >= self.mix.send && roll < self.mix.send + self.mix.delete && !self.mailbox_sent.is_empty() {
            let i = self.rng.gen_range(0..self.mailbox_sent.len());
            return Planned::Delete { message_id: self.mailbox_sent.swap_remove(i) };
        }
        if roll >= self.mix.send + self.mix.delete {
            let mut candidates = Vec::new();
            for (m, from) in &self.received {
                for t in &self.targets {
                    let pair = (m.clone(), t.clone());
                    if t != from && *t != self.id && !self.forwarded.contains(&pair) {
                        candidates.push(pair);
                    }
                }
            }
            if !candidates.is_empty() {
                let (message_id, to) = candidates[self.rng.gen_range(0..candidates.len())].clone();
                self.forwarded.insert((message_id.clone(), to.clone()));
                return Planned::Forward { message_id, to };
            }
        }
        // one share in (targets + 1) goes to the offline mailbox
        let i = self.rng.gen_range(0..=self.targets.len());
        let to = self.targets.get(i).cloned().unwrap_or_else(|| MAILBOX.to_string());
        Planned::Send { to }
    }

    fn resolved(&mut self, planned: &Planned, code: StatusCode, message_id: &str) {
        if let Planned::Send { to } = planned {
            if to == MAILBOX && code == StatusCode::StoredOffline {
                self.mailbox_sent.push(message_id.to_string());
            }
        }
    }
}

fn bench_envelope() -> Result<Vec<u8>, ComposeError> {
    let manifest = Manifest {
        from: "bench".into(),
        to: "bench".into(),
        subject: Some("bench".into()),
        device: None,
        slides: vec![SlideSpec::text("benchmark message")],
    };
    let options = ExportOptions {
        date: DateTime::<Utc>::from_timestamp_millis(0).unwrap_or_default(),
        message_id: "bench".into(),
        boundary_seed: 1,
    };
    Composer::new(MemorySource::new()).export_with(&manifest, &options)
}

/// Client-side tallies merged across clients.
#[derive(Default)]
struct Tally {
    accepted: u64,
    deliveries: BTreeSet<(String, String)>,
    statuses: BTreeMap<Command, BTreeMap<StatusCode, u64>>,
    latencies: Vec<f64>,
    commands: usize,
}

impl Tally {
    fn status(&mut self, command: Command, code: StatusCode) {
        *self.statuses.entry(command).or_default().entry(code).or_default() += 1;
        if matches!(command, Command::Send | Command::Forward) && code.is_accepted() {
            self.accepted += 1;
        }
    }

    fn delivered(&mut self, recipient: &str, message_id: &str) -> Result<(), BenchError> {
        if !self.deliveries.insert((recipient.to_string(), message_id.to_string())) {
            return Err(BenchError::Duplicate { recipient: recipient.into(), message_id: message_id.into() });
        }
        Ok(())
    }

    fn merge(&mut self, other: Tally) -> Result<(), BenchError> {
        self.accepted += other.accepted;
        self.commands += other.commands;
        self.latencies.extend(other.latencies);
        for (cmd, codes) in other.statuses {
            for (code, n) in codes {
                *self.statuses.entry(cmd).or_default().entry(code).or_default() += n;
            }
        }
        for (r, m) in other.deliveries {
            self.delivered(&r, &m)?;
        }
        Ok(())
    }
}

fn finish(
    config: &BenchConfig,
    mut tally: Tally,
    snapshot: &StatsSnapshot,
    elapsed: Duration,
    virtual_ms: Option<u64>,
) -> Result<BenchReport, BenchError> {
    let expected = config.clients * config.messages;
    if tally.commands != expected {
        return Err(BenchError::Conservation(format!("{} of {expected} commands resolved", tally.commands)));
    }
    let deliveries = tally.deliveries.len() as u64;
    let c = &snapshot.counters;
    let rhs = deliveries + snapshot.currently_stored + c.expired + c.deleted;
    if tally.accepted != rhs {
        return Err(BenchError::Conservation(format!(
            "accepted {} != delivered {deliveries} + stored {} + expired {} + deleted {}",
            tally.accepted, snapshot.currently_stored, c.expired, c.deleted
        )));
    }
    if !snapshot.conserved() || !snapshot.store_balanced() || snapshot.in_flight != 0 || c.acked != deliveries {
        return Err(BenchError::Conservation(format!("relay counters disagree: {snapshot:?}")));
    }
    let secs = elapsed.as_secs_f64().max(1e-9);
    Ok(BenchReport {
        mode: config.mode,
        clients: config.clients,
        messages_per_client: config.messages,
        commands: tally.commands,
        elapsed_ms: secs * 1e3,
        requests_per_second: tally.commands as f64 / secs,
        latency_ms: Percentiles::of(&mut tally.latencies),
        virtual_ms,
        accepted: tally.accepted,
        deliveries,
        stored: snapshot.currently_stored,
        expired: c.expired,
        deleted: c.deleted,
        statuses: tally.statuses,
    })
}

/// Drives `clients` sessions issuing `messages` commands each, closed loop,
/// then checks that every accepted message is accounted for exactly once.
pub fn bench(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    if config.clients == 0 || config.messages == 0 {
        return Err(BenchError::Config("clients and messages must be at least 1".into()));
    }
    if config.mix.send == 0 {
        return Err(BenchError::Config("the command mix needs a SEND share".into()));
    }
    match config.mode {
        BenchMode::Sim => bench_sim(config),
        BenchMode::Tcp => bench_tcp(config),
    }
}

fn client_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

struct SimDriver {
    work: Workload,
    outstanding: Option<(u32, Planned, u64)>,
}

fn bench_sim(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    let started = Instant::now();
    let envelope = bench_envelope()?;
    let names = client_names(config.clients);
    let net = NetConfig { latency_ms: config.latency_ms, seed: config.seed, drop_per_million: 0 };
    let mut world = World::new(net, DEFAULT_DEAD_TIME_MS);
    world.register(MAILBOX);
    for n in &names {
        world.register(n);
    }
    while world.next_packet().is_some() {}
    world.disconnect(MAILBOX);
    while world.next_packet().is_some() {}

    let mut drivers: BTreeMap<String, SimDriver> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), SimDriver { work: Workload::new(i, &names, config.mix, config.seed), outstanding: None }))
        .collect();
    let mut tally = Tally::default();

    fn issue(world: &mut World, id: &str, d: &mut SimDriver, envelope: &[u8], limit: usize) {
        if d.work.issued >= limit {
            return;
        }
        let planned = d.work.next();
        let session = world.session(id);
        let txn = match &planned {
            Planned::Send { to } => session.submit_send(envelope.to_vec(), to),
            Planned::Delete { message_id } => session.submit_delete(message_id),
            Planned::Forward { message_id, to } => session.submit_forward(message_id, to),
        }
        .expect("bench clients are registered");
        d.outstanding = Some((txn, planned, world.net.now()));
        world.pump(id);
    }

    for (id, d) in drivers.iter_mut() {
        issue(&mut world, id, d, &envelope, config.messages);
    }
    while let Some(batch) = world.next_packet() {
        for (client, at, event) in batch {
            let Some(d) = drivers.get_mut(&client) else { continue };
            match event {
                AppEvent::MessageArrived { message_id, from } => {
                    tally.delivered(&client, &message_id)?;
                    d.work.received.push((message_id, from));
                }
                AppEvent::SendResolved { txn, code, .. } | AppEvent::CommandResolved { txn, code, .. } => {
                    let Some((want, planned, sent_at)) = d.outstanding.take() else { continue };
                    if want != txn {
                        d.outstanding = Some((want, planned, sent_at));
                        continue;
                    }
                    let command = match planned {
                        Planned::Send { .. } => Command::Send,
                        Planned::Delete { .. } => Command::Delete,
                        Planned::Forward { .. } => Command::Forward,
                    };
                    let message_id = format!("{client}.{SESSION_TAG}.{txn}");
                    d.work.resolved(&planned, code, &message_id);
                    tally.status(command, code);
                    tally.latencies.push((at - sent_at) as f64);
                    tally.commands += 1;
                    issue(&mut world, &client, d, &envelope, config.messages);
                }
                _ => {}
            }
        }
    }
    let snapshot = world.registry.snapshot(world.net.now());
    finish(config, tally, &snapshot, started.elapsed(), Some(world.net.now()))
}

fn bench_tcp(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    let envelope = bench_envelope()?;
    let names = client_names(config.clients);
    let server_config = ServerConfig { port: 0, stats_interval_ms: 0, ..Default::default() };
    let handle = server::spawn(&server_config, Arc::new(SystemClock))?;
    let addr = handle.local_addr().to_string();
    let timeout = Duration::from_secs(30);

    let mut mailbox = NetClient::connect(&addr, ClientSession::new(MAILBOX, SESSION_TAG), timeout)?;
    mailbox.register()?;
    mailbox.close()?;

    let mut clients = Vec::new();
    for n in &names {
        let mut c = NetClient::connect(&addr, ClientSession::new(n.as_str(), SESSION_TAG), timeout)?;
        c.register()?;
        clients.push(c);
    }

    let start = Arc::new(Barrier::new(names.len() + 1));
    let done = Arc::new(Barrier::new(names.len()));
    let mut threads = Vec::new();
    for (i, mut client) in clients.into_iter().enumerate() {
        let mut work = Workload::new(i, &names, config.mix, config.seed);
        let envelope = envelope.clone();
        let messages = config.messages;
        let (start, done) = (Arc::clone(&start), Arc::clone(&done));
        threads.push(std::thread::spawn(move || -> Result<Tally, BenchError> {
            let mut tally = Tally::default();
            let id = client.session().client_id().to_string();
            let absorb = |client: &mut NetClient, work: &mut Workload, tally: &mut Tally| -> Result<(), BenchError> {
                for event in client.take_events() {
                    if let AppEvent::MessageArrived { message_id, from } = event {
                        tally.delivered(&id, &message_id)?;
                        work.received.push((message_id, from));
                    }
                }
                client.session_mut().take_inbox();
                Ok(())
            };
            start.wait();
            for _ in 0..messages {
                let planned = work.next();
                let t0 = Instant::now();
                let (command, code, message_id) = match &planned {
                    Planned::Send { to } => {
                        let (code, id) = client.send(envelope.clone(), to)?;
                        (Command::Send, code, id)
                    }
                    Planned::Delete { message_id } => {
                        (Command::Delete, client.command(Command::Delete, message_id, None)?.0, message_id.clone())
                    }
                    Planned::Forward { message_id, to } => {
                        (Command::Forward, client.command(Command::Forward, message_id, Some(to))?.0, message_id.clone())
                    }
                };
                tally.latencies.push(t0.elapsed().as_secs_f64() * 1e3);
                tally.commands += 1;
                tally.status(command, code);
                work.resolved(&planned, code, &message_id);
                absorb(&mut client, &mut work, &mut tally)?;
            }
            done.wait();
            client.drain_inbox(Duration::from_millis(200))?;
            absorb(&mut client, &mut work, &mut tally)?;
            client.close()?;
            Ok(tally)
        }));
    }
    start.wait();
    let started = Instant::now();
    let mut tally = Tally::default();
    let mut first_err = None;
    for t in threads {
        match t.join().expect("bench client thread panicked") {
            Ok(part) => {
                if let Err(e) = tally.merge(part) {
                    first_err.get_or_insert(e);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    // the last 200 ms of draining is idle time, not work
    let elapsed = started.elapsed().saturating_sub(Duration::from_millis(200));
    if let Some(e) = first_err {
        handle.shutdown();
        return Err(e);
    }
    let snapshot = handle.snapshot();
    handle.shutdown();
    finish(config, tally, &snapshot, elapsed, None)
}
