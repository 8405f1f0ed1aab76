use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::time::Duration;

use mms_core::composer::{Composer, Manifest, MemorySource, SlideSpec};
use mms_core::net::NetClient;
use mms_core::relay::ServerConfig;
use mms_core::server::{spawn, ManualClock, SystemClock};
use mms_core::transport::{AppEvent, ClientSession, Command, FrameCodec, Pdu, StatusCode};

const T: Duration = Duration::from_secs(5);
const QUIET: Duration = Duration::from_millis(60);

fn config() -> ServerConfig {
    ServerConfig { port: 0, stats_interval_ms: 0, ..Default::default() }
}

fn envelope(text: &str) -> Vec<u8> {
    let manifest = Manifest { from: "alice".into(), to: "bob".into(), slides: vec![SlideSpec::text(text)], ..Default::default() };
    Composer::new(MemorySource::new()).export(&manifest).unwrap()
}

fn client(addr: &str, id: &str) -> NetClient {
    let mut c = NetClient::connect(addr, ClientSession::new(id, "t"), T).unwrap();
    assert_eq!(c.register().unwrap(), StatusCode::Ok);
    c
}

#[test]
fn send_to_online_peer_and_read_stats() {
    let server = spawn(&config(), Arc::new(SystemClock)).unwrap();
    let addr = server.local_addr().to_string();
    let mut alice = client(&addr, "alice");
    let mut bob = client(&addr, "bob");

    let body = envelope("hello bob");
    let (code, id) = alice.send(body.clone(), "bob").unwrap();
    assert_eq!(code, StatusCode::Ok);
    let inbox = bob.drain_inbox(QUIET).unwrap();
    assert_eq!(inbox.len(), 1);
    assert_eq!(inbox[0].message_id(), Some(id.as_str()));
    assert_eq!(inbox[0].header("From"), Some("alice"));
    assert_eq!(inbox[0].body.as_deref(), Some(body.as_slice()));

    let (code, fetched) = bob.command(Command::Retrieve, &id, None).unwrap();
    assert_eq!(code, StatusCode::Ok);
    assert_eq!(fetched.as_deref(), Some(body.as_slice()));

    let stats = alice.stats().unwrap();
    assert_eq!(stats["accepted"], 1);
    assert_eq!(stats["clients_online"], 2);

    bob.close().unwrap();
    alice.close().unwrap();
    let snap = server.snapshot();
    assert!(snap.conserved() && snap.store_balanced(), "{snap:?}");
    assert_eq!(snap.counters.acked, 1);
    server.shutdown();
}

#[test]
fn unknown_recipient_is_refused() {
    let server = spawn(&config(), Arc::new(SystemClock)).unwrap();
    let addr = server.local_addr().to_string();
    let mut alice = client(&addr, "alice");
    let (code, _) = alice.send(envelope("x"), "nobody").unwrap();
    assert_eq!(code, StatusCode::UnknownRecipient);
    alice.close().unwrap();
    server.shutdown();
}

#[test]
fn undecodable_frame_keeps_the_connection() {
    let server = spawn(&config(), Arc::new(SystemClock)).unwrap();
    let mut raw = TcpStream::connect(server.local_addr()).unwrap();
    raw.set_read_timeout(Some(T)).unwrap();
    let junk = b"NOT A FRAME\r\n\r\n";
    raw.write_all(&(junk.len() as u32).to_be_bytes()).unwrap();
    raw.write_all(junk).unwrap();

    let codec = FrameCodec::default();
    let reply = codec.read_frame(&mut raw).unwrap().unwrap();
    assert_eq!(reply.command, Command::Status);
    assert_eq!(reply.status_code(), Some(StatusCode::Malformed));

    let register = Pdu::new(Command::Register, 9).with_header("From", "carol");
    codec.write_frame(&mut raw, &register).unwrap();
    let reply = codec.read_frame(&mut raw).unwrap().unwrap();
    assert_eq!(reply.status_code(), Some(StatusCode::Ok));
    assert_eq!(reply.orig_txn(), Some(9));

    raw.shutdown(std::net::Shutdown::Write).unwrap();
    let mut rest = Vec::new();
    let _ = raw.read_to_end(&mut rest);
    server.shutdown();
}

#[test]
fn stored_messages_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServerConfig { journal: Some(dir.path().join("relay.journal")), ..config() };

    let server = spawn(&cfg, Arc::new(SystemClock)).unwrap();
    let addr = server.local_addr().to_string();
    client(&addr, "bob").close().unwrap();
    let mut alice = client(&addr, "alice");
    let (first, _) = alice.send(envelope("one"), "bob").unwrap();
    let (second, id2) = alice.send(envelope("two"), "bob").unwrap();
    assert_eq!((first, second), (StatusCode::StoredOffline, StatusCode::StoredOffline));
    assert_eq!(alice.command(Command::Delete, &id2, None).unwrap().0, StatusCode::Ok);
    alice.close().unwrap();
    server.shutdown();

    let server = spawn(&cfg, Arc::new(SystemClock)).unwrap();
    let addr = server.local_addr().to_string();
    let mut bob = client(&addr, "bob");
    let inbox = bob.drain_inbox(QUIET).unwrap();
    assert_eq!(inbox.len(), 1);
    assert_eq!(inbox[0].header("From"), Some("alice"));
    bob.close().unwrap();
    server.shutdown();
}

#[test]
fn offline_store_expires_on_the_sweep() {
    let clock = Arc::new(ManualClock::new(0));
    let cfg = ServerConfig { dead_time_ms: 1_000, expire_interval_ms: u64::MAX / 4, ..config() };
    let server = spawn(&cfg, clock.clone()).unwrap();
    let addr = server.local_addr().to_string();
    client(&addr, "bob").close().unwrap();
    let mut alice = client(&addr, "alice");
    assert_eq!(alice.send(envelope("late"), "bob").unwrap().0, StatusCode::StoredOffline);

    clock.set(1_000);
    assert!(server.expire_now().is_empty());
    clock.set(1_001);
    assert_eq!(server.expire_now().len(), 1);

    // the sender hears about it
    alice.drain_inbox(QUIET).unwrap();
    assert!(alice.take_events().iter().any(|e| matches!(e, AppEvent::MessageExpired { .. })));

    let mut bob = client(&addr, "bob");
    assert!(bob.drain_inbox(QUIET).unwrap().is_empty());
    bob.close().unwrap();
    alice.close().unwrap();
    let snap = server.snapshot();
    assert_eq!(snap.counters.expired, 1);
    assert!(snap.conserved() && snap.store_balanced());
    server.shutdown();
}
