//! Brute-force reference model of the store-and-forward relay, and a driver
//! that runs random interleavings against both the model and the real
//! [`Registry`], comparing every observable result.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::SocketAddr;

use mms_core::relay::Registry;
use mms_core::transport::{headers, Command, Pdu, StatusCode};
use rand::seq::SliceRandom;
use rand::Rng;

use super::TestRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Stored,
    Delivered,
    Expired,
    Deleted,
}

/// What a step made visible: NOTIFYs delivered (in order) and EXPIRED
/// notices (sender, message, recipient), compared as a sorted list.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Observed {
    pub code: Option<StatusCode>,
    pub deliveries: Vec<(String, String)>,
    pub notices: Vec<(String, String, String)>,
}

impl Observed {
    fn normalize(mut self) -> Self {
        self.notices.sort();
        self
    }
}

/// Global multisets and per-client queues, updated by plain list scans.
#[derive(Debug, Default)]
pub struct Model {
    dead: u64,
    known: BTreeSet<String>,
    online: BTreeSet<String>,
    queues: BTreeMap<String, VecDeque<(String, u64)>>,
    entries: BTreeMap<(String, String), (String, State)>,
    pending: BTreeMap<String, Vec<(String, String, String)>>,
}

impl Model {
    pub fn new(dead: u64) -> Self {
        Model { dead, ..Default::default() }
    }

    fn notice(&mut self, out: &mut Observed, sender: &str, message: &str, recipient: &str) {
        let n = (sender.to_string(), message.to_string(), recipient.to_string());
        if self.online.contains(sender) {
            out.notices.push(n);
        } else {
            self.pending.entry(sender.to_string()).or_default().push(n);
        }
    }

    fn expire_queue(&mut self, client: &str, now: u64, out: &mut Observed) {
        let queue = self.queues.entry(client.to_string()).or_default();
        let (old, keep): (Vec<_>, Vec<_>) = queue.drain(..).partition(|(_, at)| now - at > self.dead);
        queue.extend(keep);
        for (m, _) in old {
            let key = (m.clone(), client.to_string());
            let sender = self.entries[&key].0.clone();
            self.entries.get_mut(&key).unwrap().1 = State::Expired;
            self.notice(out, &sender, &m, client);
        }
    }

    pub fn register(&mut self, client: &str, now: u64) -> Observed {
        let mut out = Observed { code: Some(StatusCode::Ok), ..Default::default() };
        self.known.insert(client.to_string());
        self.expire_queue(client, now, &mut out);
        self.online.insert(client.to_string());
        let queue = std::mem::take(self.queues.entry(client.to_string()).or_default());
        for (m, _) in queue {
            self.entries.get_mut(&(m.clone(), client.to_string())).unwrap().1 = State::Delivered;
            out.deliveries.push((client.to_string(), m));
        }
        for n in self.pending.remove(client).unwrap_or_default() {
            out.notices.push(n);
        }
        out.normalize()
    }

    pub fn offline(&mut self, client: &str) {
        self.online.remove(client);
    }

    fn route(&mut self, sender: &str, to: &str, message: &str, now: u64) -> Observed {
        let mut out = Observed::default();
        let key = (message.to_string(), to.to_string());
        if self.online.contains(to) {
            self.entries.insert(key, (sender.to_string(), State::Delivered));
            out.deliveries.push((to.to_string(), message.to_string()));
            out.code = Some(StatusCode::Ok);
        } else {
            self.entries.insert(key, (sender.to_string(), State::Stored));
            self.queues.entry(to.to_string()).or_default().push_back((message.to_string(), now));
            out.code = Some(StatusCode::StoredOffline);
        }
        out
    }

    pub fn send(&mut self, from: &str, to: &str, message: &str, now: u64) -> Observed {
        if !self.known.contains(to) {
            return Observed { code: Some(StatusCode::UnknownRecipient), ..Default::default() };
        }
        if self.entries.contains_key(&(message.to_string(), to.to_string())) {
            return Observed { code: Some(StatusCode::Malformed), ..Default::default() };
        }
        self.route(from, to, message, now)
    }

    pub fn delete(&mut self, from: &str, message: &str) -> Observed {
        let related: Vec<(String, String, State)> = self
            .entries
            .iter()
            .filter(|((m, _), _)| m == message)
            .map(|((_, r), (s, st))| (r.clone(), s.clone(), *st))
            .collect();
        let code = if related.is_empty() {
            StatusCode::UnknownMessage
        } else if !related.iter().any(|(r, s, _)| r == from || s == from) {
            StatusCode::Unauthorized
        } else {
            let mut removed = false;
            for (r, s, st) in related {
                if s == from && st == State::Stored {
                    self.entries.get_mut(&(message.to_string(), r.clone())).unwrap().1 = State::Deleted;
                    self.queues.get_mut(&r).unwrap().retain(|(m, _)| m != message);
                    removed = true;
                }
            }
            if removed {
                StatusCode::Ok
            } else {
                StatusCode::UnknownMessage
            }
        };
        Observed { code: Some(code), ..Default::default() }
    }

    pub fn forward(&mut self, from: &str, message: &str, to: &str, now: u64) -> Observed {
        let received = self.entries.get(&(message.to_string(), from.to_string())).is_some_and(|e| e.1 == State::Delivered);
        if !received {
            return Observed { code: Some(StatusCode::UnknownMessage), ..Default::default() };
        }
        self.send(from, to, message, now)
    }

    pub fn expire(&mut self, now: u64) -> Observed {
        let mut out = Observed::default();
        let clients: Vec<String> = self.queues.keys().cloned().collect();
        for c in clients {
            self.expire_queue(&c, now, &mut out);
        }
        out.normalize()
    }

    pub fn stored(&self, client: &str) -> Vec<String> {
        self.queues.get(client).map(|q| q.iter().map(|(m, _)| m.clone()).collect()).unwrap_or_default()
    }
}

/// Drives the real registry the way a well-behaved, always-acknowledging
/// set of clients would over a reliable link.
pub struct Real {
    pub registry: Registry,
    next_txn: u32,
}

fn addr(client: &str) -> SocketAddr {
    let n = client.bytes().fold(0u16, |a, b| a.wrapping_mul(31).wrapping_add(u16::from(b)));
    SocketAddr::from(([127, 0, 0, 1], 1024 + n % 60000))
}

impl Real {
    pub fn new(dead: u64) -> Self {
        Real { registry: Registry::new(dead), next_txn: 1 }
    }

    fn observe(&mut self, code: Option<StatusCode>, mut frames: Vec<(String, Pdu)>) -> Observed {
        frames.extend(self.registry.take_outbox());
        let mut out = Observed { code, ..Default::default() };
        for (to, pdu) in frames {
            let message = pdu.message_id().unwrap_or_default().to_string();
            match pdu.command {
                Command::Notify => {
                    assert!(self.registry.handle_ack(&to, &message), "NOTIFY for {to} was not in flight");
                    out.deliveries.push((to, message));
                }
                Command::Status => {
                    assert_eq!(pdu.status_code(), Some(StatusCode::Expired));
                    let recipient = pdu.header(headers::TO).unwrap_or_default().to_string();
                    out.notices.push((to, message, recipient));
                }
                other => panic!("unexpected {other} frame from the relay"),
            }
        }
        out.normalize()
    }

    pub fn register(&mut self, client: &str, now: u64) -> Observed {
        let (code, frames) = self.registry.handle_register(client, addr(client), now);
        let frames = frames.into_iter().map(|p| (client.to_string(), p)).collect();
        self.observe(Some(code), frames)
    }

    pub fn offline(&mut self, client: &str, now: u64) {
        self.registry.mark_offline(client, now);
    }

    pub fn send(&mut self, from: &str, to: &str, message: &str, now: u64) -> Observed {
        self.next_txn += 1;
        let pdu = Pdu::new(Command::Send, self.next_txn)
            .with_header(headers::FROM, from)
            .with_header(headers::TO, to)
            .with_header(headers::MESSAGE_ID, message)
            .with_body(b"x".to_vec());
        let code = self.registry.handle_send(from, &pdu, now);
        self.observe(Some(code), Vec::new())
    }

    pub fn delete(&mut self, from: &str, message: &str) -> Observed {
        let code = self.registry.handle_delete(from, message);
        self.observe(Some(code), Vec::new())
    }

    pub fn forward(&mut self, from: &str, message: &str, to: &str, now: u64) -> Observed {
        self.next_txn += 1;
        let code = self.registry.handle_forward(from, message, to, self.next_txn, now);
        self.observe(Some(code), Vec::new())
    }

    pub fn expire(&mut self, now: u64) -> Observed {
        self.registry.expire_offline(now);
        self.observe(None, Vec::new())
    }

    pub fn stored(&self, client: &str) -> Vec<String> {
        self.registry
            .client(client)
            .map(|r| r.offline_queue.iter().map(|(_, p)| p.message_id().unwrap_or_default().to_string()).collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Default)]
pub struct RunSummary {
    pub steps: usize,
    pub accepted: usize,
    pub delivered: usize,
    pub expired: usize,
    pub deleted: usize,
    pub forwards_stored_offline: usize,
    pub deletes_ok: usize,
}

/// Runs `steps` random operations against both implementations. Returns a
/// description of the first divergence, or a summary. After the random
/// phase every client registers once more and a final sweep runs, so every
/// accepted message must have been delivered, expired or deleted exactly
/// once.
pub fn run(rng: &mut TestRng, steps: usize) -> Result<RunSummary, String> {
    let dead = rng.gen_range(10..=500);
    let clients: Vec<String> = (0..rng.gen_range(2..=5)).map(|i| format!("c{i}")).collect();
    let mut model = Model::new(dead);
    let mut real = Real::new(dead);
    let mut now = 0u64;
    let mut sent: Vec<(String, String)> = Vec::new();
    let mut accepted: BTreeMap<(String, String), String> = BTreeMap::new();
    let mut delivered: Vec<(String, String)> = Vec::new();
    let mut noticed: Vec<(String, String)> = Vec::new();
    let mut summary = RunSummary { steps, ..Default::default() };
    let mut counter = 0;

    let compare = |what: String, want: Observed, got: Observed, delivered: &mut Vec<_>, noticed: &mut Vec<_>| {
        if want != got {
            return Err(format!("{what}: model {want:?} but relay {got:?}"));
        }
        delivered.extend(got.deliveries.iter().map(|(r, m)| (m.clone(), r.clone())));
        noticed.extend(got.notices.iter().map(|(_, m, r)| (m.clone(), r.clone())));
        Ok(got.code)
    };

    for step in 0..steps {
        now += rng.gen_range(0..=dead / 3);
        let c = clients.choose(rng).unwrap().clone();
        let online = model.online.contains(&c);
        match rng.gen_range(0..100) {
            0..=14 if !online => {
                compare(format!("#{step} register {c}"), model.register(&c, now), real.register(&c, now), &mut delivered, &mut noticed)?;
            }
            0..=24 if online => {
                model.offline(&c);
                real.offline(&c, now);
            }
            25..=64 if online => {
                counter += 1;
                let to = if rng.gen_bool(0.05) { "ghost".to_string() } else { clients.choose(rng).unwrap().clone() };
                let m = format!("{c}.{counter}");
                let code = compare(format!("#{step} send {c}->{to} {m}"), model.send(&c, &to, &m, now), real.send(&c, &to, &m, now), &mut delivered, &mut noticed)?;
                if code.is_some_and(StatusCode::is_accepted) {
                    accepted.insert((m.clone(), to.clone()), c.clone());
                    sent.push((c.clone(), m));
                }
            }
            65..=74 => {
                let m = match sent.iter().filter(|(s, _)| *s == c || rng.gen_bool(0.1)).collect::<Vec<_>>().choose(rng) {
                    Some((_, m)) => m.clone(),
                    None => "nothing".to_string(),
                };
                let code = compare(format!("#{step} delete {c} {m}"), model.delete(&c, &m), real.delete(&c, &m), &mut delivered, &mut noticed)?;
                if code == Some(StatusCode::Ok) {
                    summary.deletes_ok += 1;
                }
            }
            75..=84 if online => {
                let got: Vec<&(String, String)> = delivered.iter().filter(|(_, r)| *r == c).collect();
                let Some((m, _)) = got.choose(rng).map(|p| (*p).clone()) else { continue };
                let to = clients.choose(rng).unwrap().clone();
                let want = model.forward(&c, &m, &to, now);
                let code = compare(format!("#{step} forward {c}->{to} {m}"), want, real.forward(&c, &m, &to, now), &mut delivered, &mut noticed)?;
                if code.is_some_and(StatusCode::is_accepted) {
                    accepted.insert((m.clone(), to.clone()), c.clone());
                }
                if code == Some(StatusCode::StoredOffline) {
                    summary.forwards_stored_offline += 1;
                }
            }
            85..=99 => {
                compare(format!("#{step} expire at {now}"), model.expire(now), real.expire(now), &mut delivered, &mut noticed)?;
            }
            _ => {}
        }
        for c in &clients {
            if model.stored(c) != real.stored(c) {
                return Err(format!("#{step}: {c} queue model {:?} relay {:?}", model.stored(c), real.stored(c)));
            }
        }
        let snap = real.registry.snapshot(now);
        if !snap.store_balanced() || !snap.conserved() {
            return Err(format!("#{step}: counters out of balance {snap:?}"));
        }
    }

    // final flush: everyone comes back online
    now += rng.gen_range(0..=2 * dead);
    for c in &clients {
        if model.online.contains(c) {
            model.offline(c);
            real.offline(c, now);
        }
    }
    for c in &clients {
        compare(format!("final register {c}"), model.register(c, now), real.register(c, now), &mut delivered, &mut noticed)?;
    }
    compare("final sweep".into(), model.expire(now), real.expire(now), &mut delivered, &mut noticed)?;

    let deleted = real.registry.counters().deleted as usize;
    let mut seen: BTreeMap<(String, String), usize> = BTreeMap::new();
    for key in delivered.iter().chain(&noticed) {
        *seen.entry(key.clone()).or_default() += 1;
    }
    for (key, count) in &seen {
        if *count != 1 {
            return Err(format!("{key:?} surfaced {count} times"));
        }
        if !accepted.contains_key(key) {
            return Err(format!("{key:?} surfaced but was never accepted"));
        }
    }
    if seen.len() + deleted != accepted.len() {
        return Err(format!(
            "accepted {} but delivered+expired {} and deleted {deleted}",
            accepted.len(),
            seen.len()
        ));
    }
    summary.accepted = accepted.len();
    summary.delivered = delivered.len();
    summary.expired = noticed.len();
    summary.deleted = deleted;
    Ok(summary)
}
