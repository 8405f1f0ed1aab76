//! The proxy-relay registry: who is online, where their messages are, and
//! what each incoming frame should produce.
//!
//! Everything here is synchronous and clock-free; callers pass `now` in
//! milliseconds. The TCP server (`crate::server`) and the simulator
//! (`crate::sim`) both drive the same [`Registry::dispatch`].
//!
//! A message accepted for a recipient moves through
//! `Stored -> InFlight -> Delivered`, or skips straight to `InFlight` when the
//! recipient is online. `InFlight` means a NOTIFY was handed to the
//! recipient's connection and no acknowledgement has come back yet. If that
//! connection drops, the message goes back to the offline store. Stored
//! messages can also end as `Expired` or `Deleted`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transport::{headers, Command, FrameCodec, Pdu, StatusCode, DEFAULT_PORT};

pub const DEFAULT_DEAD_TIME_MS: u64 = 86_400_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub dead_time_ms: u64,
    pub bind: String,
    pub port: u16,
    pub journal: Option<PathBuf>,
    /// Period of the stats JSON line; 0 disables it.
    pub stats_interval_ms: u64,
    /// Where stats lines go; standard error when unset.
    pub stats_log: Option<PathBuf>,
    /// How often the server sweeps the offline store for expired messages.
    pub expire_interval_ms: u64,
    pub max_body: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            dead_time_ms: DEFAULT_DEAD_TIME_MS,
            bind: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            journal: None,
            stats_interval_ms: 10_000,
            stats_log: None,
            expire_interval_ms: 1_000,
            max_body: crate::transport::DEFAULT_MAX_BODY,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] io::Error),
    #[error("config JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(&'static str),
}

impl ServerConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: ServerConfig = serde_json::from_str(text)?;
        config.check()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        if self.dead_time_ms == 0 {
            return Err(ConfigError::Invalid("dead_time_ms must be positive"));
        }
        if self.expire_interval_ms == 0 {
            return Err(ConfigError::Invalid("expire_interval_ms must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientRecord {
    pub client_id: String,
    /// `None` for clients restored from the journal that have not
    /// registered since.
    pub address: Option<SocketAddr>,
    pub online: bool,
    pub last_seen_ms: u64,
    /// Bumped on every registration so a stale connection cannot mark a
    /// newer one offline.
    pub session: u64,
    pub offline_queue: VecDeque<(u64, Pdu)>,
    in_flight: BTreeSet<String>,
}

impl ClientRecord {
    fn new(client_id: &str) -> Self {
        ClientRecord {
            client_id: client_id.to_string(),
            address: None,
            online: false,
            last_seen_ms: 0,
            session: 0,
            offline_queue: VecDeque::new(),
            in_flight: BTreeSet::new(),
        }
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageState {
    Stored,
    InFlight,
    Delivered,
    Expired,
    Deleted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchiveEntry {
    pub sender: String,
    /// Transaction of the SEND or FORWARD that created this entry.
    pub orig_txn: u32,
    pub accepted_at_ms: u64,
    pub state: MessageState,
    /// The NOTIFY, kept once it has left the offline queue so it can be
    /// retrieved or forwarded.
    notify: Option<Pdu>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsCounters {
    pub commands_in: BTreeMap<Command, u64>,
    pub commands_out: BTreeMap<Command, u64>,
    pub statuses_out: BTreeMap<StatusCode, u64>,
    /// SENDs and FORWARDs taken in for delivery.
    pub accepted: u64,
    /// NOTIFYs pushed straight to an online recipient.
    pub pushed: u64,
    /// Entries put into the offline store (including bounced ones).
    pub stored: u64,
    /// Entries that left the store as a NOTIFY on registration.
    pub flushed: u64,
    pub expired: u64,
    pub deleted: u64,
    /// In-flight NOTIFYs returned to the store when a connection dropped.
    pub bounced: u64,
    pub acked: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub at_ms: u64,
    pub clients_known: usize,
    pub clients_online: usize,
    pub currently_stored: u64,
    pub in_flight: u64,
    #[serde(flatten)]
    pub counters: StatsCounters,
}

impl StatsSnapshot {
    /// `stored = flushed + expired + deleted + currently stored`
    pub fn store_balanced(&self) -> bool {
        let c = &self.counters;
        c.stored == c.flushed + c.expired + c.deleted + self.currently_stored
    }

    /// Every accepted message is delivered, in flight, stored, expired or
    /// deleted.
    pub fn conserved(&self) -> bool {
        let c = &self.counters;
        c.accepted == c.acked + self.in_flight + self.currently_stored + c.expired + c.deleted
    }
}

/// Per-connection state owned by whoever drives [`Registry::dispatch`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connection {
    pub address: SocketAddr,
    pub client: Option<String>,
    pub session: u64,
}

impl Connection {
    pub fn new(address: SocketAddr) -> Self {
        Connection { address, client: None, session: 0 }
    }
}

/// Frames produced by one dispatch: `reply` goes back on the requesting
/// connection in order, `routed` to the named clients' connections.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Outcome {
    pub reply: Vec<Pdu>,
    pub routed: Vec<(String, Pdu)>,
}

#[derive(Debug)]
pub struct Registry {
    dead_time_ms: u64,
    clients: BTreeMap<String, ClientRecord>,
    archive: BTreeMap<(String, String), ArchiveEntry>,
    pending_statuses: BTreeMap<String, VecDeque<Pdu>>,
    outbox: VecDeque<(String, Pdu)>,
    next_txn: u32,
    next_session: u64,
    stats: StatsCounters,
    journal: Option<Journal>,
}

fn valid_client_id(id: &str) -> bool {
    !id.is_empty() && id != headers::SERVER_ADDRESS && !id.chars().any(char::is_whitespace)
}

impl Registry {
    pub fn new(dead_time_ms: u64) -> Self {
        assert!(dead_time_ms > 0, "dead time must be positive");
        Registry {
            dead_time_ms,
            clients: BTreeMap::new(),
            archive: BTreeMap::new(),
            pending_statuses: BTreeMap::new(),
            outbox: VecDeque::new(),
            next_txn: 1,
            next_session: 1,
            stats: StatsCounters::default(),
            journal: None,
        }
    }

    /// Builds a registry from `config`, replaying and then appending to its
    /// journal when one is configured.
    pub fn from_config(config: &ServerConfig) -> io::Result<Self> {
        let mut registry = Registry::new(config.dead_time_ms);
        if let Some(path) = &config.journal {
            let (journal, records) = Journal::open(path, FrameCodec::new(config.max_body))?;
            registry.replay(records);
            registry.journal = Some(journal);
        }
        Ok(registry)
    }

    pub fn dead_time_ms(&self) -> u64 {
        self.dead_time_ms
    }

    pub fn client(&self, id: &str) -> Option<&ClientRecord> {
        self.clients.get(id)
    }

    pub fn clients(&self) -> impl Iterator<Item = &ClientRecord> {
        self.clients.values()
    }

    pub fn session_of(&self, id: &str) -> Option<u64> {
        self.clients.get(id).map(|c| c.session)
    }

    pub fn is_online(&self, id: &str) -> bool {
        self.clients.get(id).is_some_and(|c| c.online)
    }

    pub fn message_state(&self, message_id: &str, recipient: &str) -> Option<MessageState> {
        self.archive.get(&(message_id.to_string(), recipient.to_string())).map(|e| e.state)
    }

    pub fn archive_entry(&self, message_id: &str, recipient: &str) -> Option<&ArchiveEntry> {
        self.archive.get(&(message_id.to_string(), recipient.to_string()))
    }

    /// STATUS frames waiting for an offline client.
    pub fn pending_statuses(&self, id: &str) -> usize {
        self.pending_statuses.get(id).map_or(0, VecDeque::len)
    }

    pub fn counters(&self) -> &StatsCounters {
        &self.stats
    }

    pub fn snapshot(&self, now_ms: u64) -> StatsSnapshot {
        StatsSnapshot {
            at_ms: now_ms,
            clients_known: self.clients.len(),
            clients_online: self.clients.values().filter(|c| c.online).count(),
            currently_stored: self.clients.values().map(|c| c.offline_queue.len() as u64).sum(),
            in_flight: self.clients.values().map(|c| c.in_flight.len() as u64).sum(),
            counters: self.stats.clone(),
        }
    }

    fn take_txn(&mut self) -> u32 {
        let txn = self.next_txn;
        self.next_txn = self.next_txn.wrapping_add(1).max(1);
        txn
    }

    fn count_out(&mut self, pdu: &Pdu) {
        *self.stats.commands_out.entry(pdu.command).or_default() += 1;
        if let Some(code) = pdu.status_code() {
            *self.stats.statuses_out.entry(code).or_default() += 1;
        }
    }

    /// Frames addressed to online clients by the operations below.
    pub fn take_outbox(&mut self) -> Vec<(String, Pdu)> {
        let out: Vec<_> = self.outbox.drain(..).collect();
        for (_, pdu) in &out {
            self.count_out(pdu);
        }
        out
    }

    fn journal(&mut self, f: impl FnOnce(&mut Journal) -> io::Result<()>) {
        if let Some(j) = self.journal.as_mut() {
            if let Err(e) = f(j) {
                log::warn!("journal write failed: {e}");
            }
        }
    }

    fn deliver_status(&mut self, client: &str, pdu: Pdu) {
        if self.is_online(client) {
            self.outbox.push_back((client.to_string(), pdu));
        } else {
            self.journal(|j| j.note(client, &pdu));
            self.pending_statuses.entry(client.to_string()).or_default().push_back(pdu);
        }
    }

    fn store(&mut self, recipient: &str, stored_at: u64, pdu: Pdu) {
        let key = (pdu.message_id().unwrap_or_default().to_string(), recipient.to_string());
        let (sender, orig_txn) = match self.archive.get(&key) {
            Some(e) => (e.sender.clone(), e.orig_txn),
            None => (String::new(), 0),
        };
        self.journal(|j| j.store(recipient, stored_at, orig_txn, &sender, &pdu));
        let queue = &mut self.clients.get_mut(recipient).expect("recipient exists").offline_queue;
        let at = queue.partition_point(|(t, _)| *t <= stored_at);
        queue.insert(at, (stored_at, pdu));
        self.stats.stored += 1;
    }

    /// Routes an accepted NOTIFY, recording it under (message id, recipient).
    fn route(&mut self, sender: &str, recipient: &str, orig_txn: u32, now: u64, notify: Pdu) -> StatusCode {
        let message_id = notify.message_id().unwrap_or_default().to_string();
        let key = (message_id.clone(), recipient.to_string());
        self.stats.accepted += 1;
        let online = self.is_online(recipient);
        let entry = ArchiveEntry {
            sender: sender.to_string(),
            orig_txn,
            accepted_at_ms: now,
            state: if online { MessageState::InFlight } else { MessageState::Stored },
            notify: online.then(|| notify.clone()),
        };
        self.archive.insert(key, entry);
        if online {
            self.clients.get_mut(recipient).expect("recipient exists").in_flight.insert(message_id);
            self.stats.pushed += 1;
            self.outbox.push_back((recipient.to_string(), notify));
            StatusCode::Ok
        } else {
            self.store(recipient, now, notify);
            StatusCode::StoredOffline
        }
    }

    /// Moves a client's unacknowledged NOTIFYs back into its offline queue.
    fn bounce_in_flight(&mut self, id: &str) {
        let Some(rec) = self.clients.get_mut(id) else { return };
        let ids = std::mem::take(&mut rec.in_flight);
        for message_id in ids {
            let key = (message_id, id.to_string());
            let entry = self.archive.get_mut(&key).expect("in-flight entry archived");
            entry.state = MessageState::Stored;
            let stored_at = entry.accepted_at_ms;
            let pdu = entry.notify.take().expect("in-flight entry keeps its notify");
            self.stats.bounced += 1;
            self.store(id, stored_at, pdu);
        }
    }

    fn expire_client(&mut self, id: &str, now: u64) -> Vec<(String, String)> {
        let dead = self.dead_time_ms;
        let Some(rec) = self.clients.get_mut(id) else { return Vec::new() };
        let (gone, kept): (VecDeque<_>, VecDeque<_>) =
            std::mem::take(&mut rec.offline_queue).into_iter().partition(|(t, _)| now.saturating_sub(*t) > dead);
        rec.offline_queue = kept;
        let mut expired = Vec::new();
        for (_, pdu) in gone {
            let message_id = pdu.message_id().unwrap_or_default().to_string();
            let key = (message_id.clone(), id.to_string());
            let entry = self.archive.get_mut(&key).expect("stored entry archived");
            entry.state = MessageState::Expired;
            let (sender, orig_txn) = (entry.sender.clone(), entry.orig_txn);
            self.stats.expired += 1;
            self.journal(|j| j.drop_entry(id, &message_id));
            let txn = self.take_txn();
            let notice = Pdu::status(txn, orig_txn, StatusCode::Expired)
                .with_header(headers::MESSAGE_ID, message_id.clone())
                .with_header(headers::TO, id);
            self.deliver_status(&sender, notice);
            expired.push((id.to_string(), message_id));
        }
        expired
    }

    /// Registers (or re-registers) `client_id` at `address`. Returns the
    /// stored NOTIFYs that have not expired, in storage order, followed by
    /// any STATUS frames that were waiting for this client.
    pub fn handle_register(&mut self, client_id: &str, address: SocketAddr, now: u64) -> (StatusCode, Vec<Pdu>) {
        if !valid_client_id(client_id) {
            return (StatusCode::Malformed, Vec::new());
        }
        let session = self.next_session;
        self.next_session += 1;
        if !self.clients.contains_key(client_id) {
            self.journal(|j| j.client(client_id));
            self.clients.insert(client_id.to_string(), ClientRecord::new(client_id));
        }
        // NOTIFYs still unacknowledged from an earlier session are resent
        self.bounce_in_flight(client_id);
        self.expire_client(client_id, now);

        let rec = self.clients.get_mut(client_id).expect("just inserted");
        rec.address = Some(address);
        rec.online = true;
        rec.last_seen_ms = now;
        rec.session = session;
        let queue = std::mem::take(&mut rec.offline_queue);
        let mut out = Vec::with_capacity(queue.len());
        for (_, pdu) in queue {
            let message_id = pdu.message_id().unwrap_or_default().to_string();
            self.journal(|j| j.drop_entry(client_id, &message_id));
            let key = (message_id.clone(), client_id.to_string());
            let entry = self.archive.get_mut(&key).expect("stored entry archived");
            entry.state = MessageState::InFlight;
            entry.notify = Some(pdu.clone());
            self.clients.get_mut(client_id).expect("exists").in_flight.insert(message_id);
            self.stats.flushed += 1;
            out.push(pdu);
        }
        if let Some(statuses) = self.pending_statuses.remove(client_id) {
            self.journal(|j| j.clear(client_id));
            out.extend(statuses);
        }
        (StatusCode::Ok, out)
    }

    /// Routes a SEND from `from_id`.
    pub fn handle_send(&mut self, from_id: &str, pdu: &Pdu, now: u64) -> StatusCode {
        let to = pdu.header(headers::TO).unwrap_or_default();
        let message_id = pdu.message_id().unwrap_or_default();
        if to.is_empty() || message_id.is_empty() || pdu.body.is_none() {
            return StatusCode::Malformed;
        }
        if !self.clients.contains_key(to) {
            return StatusCode::UnknownRecipient;
        }
        if self.archive.contains_key(&(message_id.to_string(), to.to_string())) {
            return StatusCode::Malformed;
        }
        let txn = self.take_txn();
        let mut notify = Pdu::new(Command::Notify, txn)
            .with_header(headers::FROM, from_id)
            .with_header(headers::TO, to)
            .with_header(headers::MESSAGE_ID, message_id);
        for name in [headers::DATE, headers::SUBJECT] {
            if let Some(v) = pdu.header(name) {
                notify.set_header(name, v);
            }
        }
        notify.body = pdu.body.clone();
        let to = to.to_string();
        self.route(from_id, &to, pdu.txn_id, now, notify)
    }

    /// Removes `message_id` from the offline store if `from_id` sent it and
    /// it has not been delivered yet.
    pub fn handle_delete(&mut self, from_id: &str, message_id: &str) -> StatusCode {
        let matching: Vec<(String, MessageState, String)> = self
            .archive
            .range((message_id.to_string(), String::new())..)
            .take_while(|((m, _), _)| m == message_id)
            .map(|((_, r), e)| (r.clone(), e.state, e.sender.clone()))
            .collect();
        if matching.is_empty() {
            return StatusCode::UnknownMessage;
        }
        if !matching.iter().any(|(r, _, s)| r == from_id || s == from_id) {
            return StatusCode::Unauthorized;
        }
        let mut removed = false;
        for (recipient, state, sender) in matching {
            if sender != from_id || state != MessageState::Stored {
                continue;
            }
            let rec = self.clients.get_mut(&recipient).expect("recipient exists");
            rec.offline_queue.retain(|(_, p)| p.message_id() != Some(message_id));
            let key = (message_id.to_string(), recipient.clone());
            self.archive.get_mut(&key).expect("exists").state = MessageState::Deleted;
            self.stats.deleted += 1;
            self.journal(|j| j.drop_entry(&recipient, message_id));
            removed = true;
        }
        if removed {
            StatusCode::Ok
        } else {
            StatusCode::UnknownMessage
        }
    }

    /// Re-routes a message `from_id` received to `new_to`. The NOTIFY keeps
    /// the Message-ID and original From and gains `X-Mms-Forwarded-By`.
    pub fn handle_forward(&mut self, from_id: &str, message_id: &str, new_to: &str, orig_txn: u32, now: u64) -> StatusCode {
        if new_to.is_empty() {
            return StatusCode::Malformed;
        }
        let key = (message_id.to_string(), from_id.to_string());
        let Some(source) = self.archive.get(&key).and_then(|e| e.notify.clone()) else {
            return StatusCode::UnknownMessage;
        };
        if !self.clients.contains_key(new_to) {
            return StatusCode::UnknownRecipient;
        }
        if self.archive.contains_key(&(message_id.to_string(), new_to.to_string())) {
            return StatusCode::Malformed;
        }
        let mut notify = source;
        notify.txn_id = self.take_txn();
        notify.set_header(headers::TO, new_to);
        notify.set_header(headers::FORWARDED_BY, from_id);
        self.route(from_id, new_to, orig_txn, now, notify)
    }

    /// A received copy of `message_id`, for its recipient.
    pub fn handle_retrieve(&self, from_id: &str, message_id: &str) -> (StatusCode, Option<Vec<u8>>) {
        let key = (message_id.to_string(), from_id.to_string());
        if let Some(notify) = self.archive.get(&key).and_then(|e| e.notify.as_ref()) {
            return (StatusCode::Ok, notify.body.clone());
        }
        let related: Vec<bool> = self
            .archive
            .range((message_id.to_string(), String::new())..)
            .take_while(|((m, _), _)| m == message_id)
            .map(|((_, r), e)| r == from_id || e.sender == from_id)
            .collect();
        if related.is_empty() || related.contains(&true) {
            (StatusCode::UnknownMessage, None)
        } else {
            (StatusCode::Unauthorized, None)
        }
    }

    /// Removes every stored entry older than the dead time (strictly) and
    /// queues an EXPIRED status for each sender.
    pub fn expire_offline(&mut self, now: u64) -> Vec<(String, String)> {
        let ids: Vec<String> = self
            .clients
            .values()
            .filter(|c| !c.offline_queue.is_empty())
            .map(|c| c.client_id.clone())
            .collect();
        ids.iter().flat_map(|id| self.expire_client(id, now)).collect()
    }

    /// Marks a client offline. Unacknowledged NOTIFYs return to its store.
    pub fn mark_offline(&mut self, client_id: &str, now: u64) {
        let Some(rec) = self.clients.get_mut(client_id) else { return };
        rec.online = false;
        rec.last_seen_ms = now;
        self.bounce_in_flight(client_id);
    }

    /// Connection close: like [`Registry::mark_offline`], but only if
    /// `session` is still the client's current one.
    pub fn disconnect(&mut self, client_id: &str, session: u64, now: u64) {
        if self.clients.get(client_id).is_some_and(|c| c.session == session && c.online) {
            self.mark_offline(client_id, now);
        }
    }

    /// Records a delivery acknowledgement. Returns false if nothing was
    /// waiting for it.
    pub fn handle_ack(&mut self, client_id: &str, message_id: &str) -> bool {
        let Some(rec) = self.clients.get_mut(client_id) else { return false };
        if !rec.in_flight.remove(message_id) {
            return false;
        }
        let key = (message_id.to_string(), client_id.to_string());
        self.archive.get_mut(&key).expect("in-flight entry archived").state = MessageState::Delivered;
        self.stats.acked += 1;
        true
    }

    /// A frame that could not be written to `client`. Expiry notices are
    /// kept for the next registration; NOTIFYs are recovered through the
    /// in-flight set when the connection is dropped, everything else is lost
    /// with the connection.
    pub fn requeue(&mut self, client: &str, pdu: Pdu) {
        if pdu.command == Command::Status && pdu.status_code() == Some(StatusCode::Expired) {
            self.journal(|j| j.note(client, &pdu));
            self.pending_statuses.entry(client.to_string()).or_default().push_back(pdu);
        }
    }

    fn reply(&mut self, request: &Pdu, code: StatusCode) -> Pdu {
        let txn = self.take_txn();
        let mut pdu = Pdu::status(txn, request.txn_id, code);
        if let Some(id) = request.message_id() {
            pdu.set_header(headers::MESSAGE_ID, id);
        }
        pdu
    }

    /// Handles one frame from `conn`.
    pub fn dispatch(&mut self, conn: &mut Connection, pdu: Pdu, now: u64) -> Outcome {
        *self.stats.commands_in.entry(pdu.command).or_default() += 1;
        let mut reply = Vec::new();
        let from = conn.client.clone();
        match (pdu.command, from) {
            (Command::Register, current) => {
                let id = pdu.header(headers::FROM).unwrap_or_default().to_string();
                if let Some(old) = current.filter(|old| *old != id) {
                    self.disconnect(&old, conn.session, now);
                    conn.client = None;
                }
                let (code, deliveries) = self.handle_register(&id, conn.address, now);
                if code == StatusCode::Ok {
                    conn.session = self.session_of(&id).expect("registered");
                    conn.client = Some(id);
                }
                reply.push(self.reply(&pdu, code));
                reply.extend(deliveries);
            }
            (_, None) => reply.push(self.reply(&pdu, StatusCode::Unauthorized)),
            (Command::Send, Some(from)) => {
                let code = self.handle_send(&from, &pdu, now);
                reply.push(self.reply(&pdu, code));
            }
            (Command::Delete, Some(from)) => {
                let code = match pdu.message_id() {
                    Some(id) => self.handle_delete(&from, id),
                    None => StatusCode::Malformed,
                };
                reply.push(self.reply(&pdu, code));
            }
            (Command::Forward, Some(from)) => {
                let code = match (pdu.message_id(), pdu.header(headers::TO)) {
                    (Some(id), Some(to)) => self.handle_forward(&from, id, to, pdu.txn_id, now),
                    _ => StatusCode::Malformed,
                };
                reply.push(self.reply(&pdu, code));
            }
            (Command::Retrieve, Some(from)) => {
                let (code, body) = match pdu.message_id() {
                    Some(id) => self.handle_retrieve(&from, id),
                    None => (StatusCode::Malformed, None),
                };
                let mut status = self.reply(&pdu, code);
                status.body = body;
                reply.push(status);
            }
            (Command::Status, Some(from)) => {
                if pdu.header(headers::TO) == Some(headers::SERVER_ADDRESS) {
                    let body = serde_json::to_vec(&self.snapshot(now)).expect("stats serialize");
                    let mut status = self.reply(&pdu, StatusCode::Ok);
                    status.body = Some(body);
                    reply.push(status);
                } else if let Some(id) = pdu.message_id() {
                    if !self.handle_ack(&from, id) {
                        log::debug!("{from}: stray acknowledgement for {id}");
                    }
                }
            }
            (Command::Notify, Some(_)) => reply.push(self.reply(&pdu, StatusCode::Malformed)),
        }
        for p in &reply {
            self.count_out(p);
        }
        if let Some(id) = &conn.client {
            if let Some(rec) = self.clients.get_mut(id) {
                rec.last_seen_ms = rec.last_seen_ms.max(now);
            }
        }
        Outcome { reply, routed: self.take_outbox() }
    }

    fn replay(&mut self, records: Vec<JournalRecord>) {
        for record in records {
            match record {
                JournalRecord::Client(id) => {
                    self.clients.entry(id.clone()).or_insert_with(|| ClientRecord::new(&id));
                }
                JournalRecord::Store { recipient, stored_at, orig_txn, sender, pdu } => {
                    let message_id = pdu.message_id().unwrap_or_default().to_string();
                    let rec = self.clients.entry(recipient.clone()).or_insert_with(|| ClientRecord::new(&recipient));
                    let at = rec.offline_queue.partition_point(|(t, _)| *t <= stored_at);
                    rec.offline_queue.insert(at, (stored_at, pdu));
                    self.archive.insert(
                        (message_id, recipient),
                        ArchiveEntry { sender, orig_txn, accepted_at_ms: stored_at, state: MessageState::Stored, notify: None },
                    );
                }
                JournalRecord::Drop { recipient, message_id } => {
                    if let Some(rec) = self.clients.get_mut(&recipient) {
                        rec.offline_queue.retain(|(_, p)| p.message_id() != Some(message_id.as_str()));
                    }
                    self.archive.remove(&(message_id, recipient));
                }
                JournalRecord::Note { client, pdu } => {
                    self.pending_statuses.entry(client).or_default().push_back(pdu);
                }
                JournalRecord::Clear(client) => {
                    self.pending_statuses.remove(&client);
                }
            }
        }
        let restored = self.clients.values().map(|c| c.offline_queue.len() as u64).sum();
        self.stats.stored = restored;
        self.stats.accepted = restored;
    }
}

// ---------------------------------------------------------------------------
// Journal

/// One record of the append-only store journal. Each is a text line,
/// followed for `STORE` and `NOTE` by one encoded frame and a newline:
///
/// ```text
/// CLIENT <id>
/// STORE <recipient> <stored_at> <orig_txn> <sender>
/// DROP <recipient> <message-id>
/// NOTE <client>
/// CLEAR <client>
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JournalRecord {
    Client(String),
    Store { recipient: String, stored_at: u64, orig_txn: u32, sender: String, pdu: Pdu },
    Drop { recipient: String, message_id: String },
    Note { client: String, pdu: Pdu },
    Clear(String),
}

#[derive(Debug)]
pub struct Journal {
    out: BufWriter<File>,
    codec: FrameCodec,
}

impl Journal {
    /// Reads the existing records at `path` and opens it for appending.
    pub fn open(path: &Path, codec: FrameCodec) -> io::Result<(Journal, Vec<JournalRecord>)> {
        let records = match File::open(path) {
            Ok(f) => read_journal(&mut BufReader::new(f), &codec)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((Journal { out: BufWriter::new(file), codec }, records))
    }

    fn line(&mut self, line: &str, pdu: Option<&Pdu>) -> io::Result<()> {
        writeln!(self.out, "{line}")?;
        if let Some(pdu) = pdu {
            self.codec.write_frame(&mut self.out, pdu)?;
            self.out.write_all(b"\n")?;
        }
        self.out.flush()
    }

    fn client(&mut self, id: &str) -> io::Result<()> {
        self.line(&format!("CLIENT {id}"), None)
    }

    fn store(&mut self, recipient: &str, stored_at: u64, orig_txn: u32, sender: &str, pdu: &Pdu) -> io::Result<()> {
        self.line(&format!("STORE {recipient} {stored_at} {orig_txn} {sender}"), Some(pdu))
    }

    fn drop_entry(&mut self, recipient: &str, message_id: &str) -> io::Result<()> {
        self.line(&format!("DROP {recipient} {message_id}"), None)
    }

    fn note(&mut self, client: &str, pdu: &Pdu) -> io::Result<()> {
        self.line(&format!("NOTE {client}"), Some(pdu))
    }

    fn clear(&mut self, client: &str) -> io::Result<()> {
        self.line(&format!("CLEAR {client}"), None)
    }
}

/// Parses journal records. A torn final record (crash mid-write) ends the
/// journal; anything else malformed is an error.
pub fn read_journal<R: BufRead>(reader: &mut R, codec: &FrameCodec) -> io::Result<Vec<JournalRecord>> {
    let bad = |what: String| io::Error::new(io::ErrorKind::InvalidData, what);
    let mut records = Vec::new();
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let Some(text) = line.strip_suffix('\n') else {
            log::warn!("journal ends in a partial record; ignoring it");
            break;
        };
        let (tag, rest) = text.split_once(' ').ok_or_else(|| bad(format!("journal line {text:?}")))?;
        let frame = |reader: &mut R| -> io::Result<Option<Pdu>> {
            match codec.read_frame(reader) {
                Ok(Some(pdu)) => {
                    let mut nl = [0u8; 1];
                    match reader.read_exact(&mut nl) {
                        Ok(()) if nl[0] == b'\n' => Ok(Some(pdu)),
                        Ok(()) => Err(io::Error::new(io::ErrorKind::InvalidData, "journal frame not newline-terminated")),
                        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Ok(None),
                        Err(e) => Err(e),
                    }
                }
                Ok(None) => Ok(None),
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Ok(None),
                Err(e) => Err(e),
            }
        };
        let record = match tag {
            "CLIENT" => JournalRecord::Client(rest.to_string()),
            "DROP" => {
                let (recipient, message_id) = rest.split_once(' ').ok_or_else(|| bad(format!("DROP {rest:?}")))?;
                JournalRecord::Drop { recipient: recipient.into(), message_id: message_id.into() }
            }
            "CLEAR" => JournalRecord::Clear(rest.to_string()),
            "STORE" => {
                let mut parts = rest.splitn(4, ' ');
                let (Some(recipient), Some(at), Some(txn), Some(sender)) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                    return Err(bad(format!("STORE {rest:?}")));
                };
                let stored_at = at.parse().map_err(|_| bad(format!("STORE time {at:?}")))?;
                let orig_txn = txn.parse().map_err(|_| bad(format!("STORE txn {txn:?}")))?;
                let Some(pdu) = frame(reader)? else {
                    log::warn!("journal ends in a partial record; ignoring it");
                    break;
                };
                JournalRecord::Store { recipient: recipient.into(), stored_at, orig_txn, sender: sender.into(), pdu }
            }
            "NOTE" => {
                let Some(pdu) = frame(reader)? else {
                    log::warn!("journal ends in a partial record; ignoring it");
                    break;
                };
                JournalRecord::Note { client: rest.to_string(), pdu }
            }
            other => return Err(bad(format!("unknown journal record {other:?}"))),
        };
        records.push(record);
    }
    Ok(records)
}
