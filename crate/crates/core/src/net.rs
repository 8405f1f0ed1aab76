//! Blocking TCP driver for a [`ClientSession`], with optional frame tracing.

use std::io::{self, BufReader, BufWriter, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::transport::{AppEvent, ClientSession, Command, FrameCodec, Pdu, SessionError, StatusCode};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("network: {0}")]
    Io(#[from] io::Error),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Session(#[from] SessionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Out,
    In,
}

impl Direction {
    fn arrow(self) -> &'static str {
        match self {
            Direction::Out => ">>",
            Direction::In => "<<",
        }
    }
}

const TRACE_HEX_BYTES: usize = 48;

/// One traced frame: a summary line with a hex prefix of the raw frame,
/// then one indented line per header.
///
/// ```text
/// >> 0.004 REGISTER txn=1 len=31 0000001b5245474953544552...
///     From: alice
/// ```
pub fn format_trace(direction: Direction, at_ms: u64, frame: &[u8], pdu: &Pdu) -> String {
    let shown = &frame[..frame.len().min(TRACE_HEX_BYTES)];
    let mut hex: String = shown.iter().map(|b| format!("{b:02x}")).collect();
    if frame.len() > shown.len() {
        hex.push_str("...");
    }
    let mut out = format!(
        "{} {}.{:03} {} txn={} len={} {}",
        direction.arrow(),
        at_ms / 1000,
        at_ms % 1000,
        pdu.command,
        pdu.txn_id,
        frame.len(),
        hex
    );
    for (name, value) in &pdu.headers {
        out.push_str(&format!("\n    {name}: {value}"));
    }
    if pdu.body_len() > 0 {
        out.push_str(&format!("\n    ({} body bytes)", pdu.body_len()));
    }
    out
}

/// Destination for traced frames, shared so several clients can trace into
/// one stream.
#[derive(Clone)]
pub struct Tracer {
    start: Instant,
    sink: Arc<Mutex<dyn Write + Send>>,
}

impl Tracer {
    pub fn new(sink: impl Write + Send + 'static) -> Self {
        Tracer { start: Instant::now(), sink: Arc::new(Mutex::new(sink)) }
    }

    pub fn stderr() -> Self {
        Tracer::new(io::stderr())
    }

    pub fn frame(&self, direction: Direction, frame: &[u8], pdu: &Pdu) {
        let at = self.start.elapsed().as_millis() as u64;
        if let Ok(mut sink) = self.sink.lock() {
            let _ = writeln!(sink, "{}", format_trace(direction, at, frame, pdu));
        }
    }
}

pub struct NetClient {
    session: ClientSession,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    codec: FrameCodec,
    tracer: Option<Tracer>,
    events: Vec<AppEvent>,
    timeout: Duration,
}

impl NetClient {
    /// Connects without registering. `timeout` bounds the connect and every
    /// wait for a reply.
    pub fn connect(server: &str, session: ClientSession, timeout: Duration) -> Result<Self, NetError> {
        let mut last = io::Error::new(io::ErrorKind::NotFound, format!("{server} did not resolve"));
        let mut stream = None;
        for addr in server.to_socket_addrs()? {
            match TcpStream::connect_timeout(&addr, timeout) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => last = e,
            }
        }
        let stream = stream.ok_or(last)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        Ok(NetClient {
            session,
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            codec: FrameCodec::default(),
            tracer: None,
            events: Vec::new(),
            timeout,
        })
    }

    pub fn with_tracer(mut self, tracer: Option<Tracer>) -> Self {
        self.tracer = tracer;
        self
    }

    pub fn session(&self) -> &ClientSession {
        &self.session
    }

    pub fn session_mut(&mut self) -> &mut ClientSession {
        &mut self.session
    }

    /// Events seen so far that no call has consumed.
    pub fn take_events(&mut self) -> Vec<AppEvent> {
        std::mem::take(&mut self.events)
    }

    /// Writes every queued frame.
    pub fn flush(&mut self) -> Result<(), NetError> {
        while let Some(pdu) = self.session.next_outgoing() {
            let frame = self.codec.encode(&pdu).map_err(|e| NetError::Protocol(e.to_string()))?;
            if let Some(t) = &self.tracer {
                t.frame(Direction::Out, &frame, &pdu);
            }
            self.writer.write_all(&frame)?;
        }
        self.writer.flush()?;
        Ok(())
    }

    /// Reads one frame and feeds it to the session. `Ok(false)` when the
    /// read timed out.
    fn pump(&mut self) -> Result<bool, NetError> {
        let payload = match self.codec.read_payload(&mut self.reader) {
            Ok(Some(p)) => p,
            Ok(None) => return Err(NetError::Protocol("server closed the connection".into())),
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => return Ok(false),
            Err(e) => return Err(e.into()),
        };
        let pdu = self.codec.decode_payload(&payload).map_err(|e| NetError::Protocol(e.to_string()))?;
        if let Some(t) = &self.tracer {
            let mut frame = (payload.len() as u32).to_be_bytes().to_vec();
            frame.extend_from_slice(&payload);
            t.frame(Direction::In, &frame, &pdu);
        }
        let events = self.session.on_frame(pdu);
        self.events.extend(events);
        Ok(true)
    }

    /// Flushes, then reads until `txn` resolves. Returns its code and body.
    pub fn wait_for(&mut self, txn: u32) -> Result<(StatusCode, Option<Vec<u8>>), NetError> {
        let deadline = Instant::now() + self.timeout;
        loop {
            self.flush()?;
            let found = self.events.iter().position(|e| match e {
                AppEvent::SendResolved { txn: t, .. } | AppEvent::CommandResolved { txn: t, .. } => *t == txn,
                _ => false,
            });
            if let Some(i) = found {
                return Ok(match self.events.remove(i) {
                    AppEvent::SendResolved { code, .. } => (code, None),
                    AppEvent::CommandResolved { code, body, .. } => (code, body),
                    _ => unreachable!(),
                });
            }
            if Instant::now() >= deadline {
                return Err(NetError::Protocol(format!("no status for transaction {txn}")));
            }
            self.pump()?;
        }
    }

    pub fn register(&mut self) -> Result<StatusCode, NetError> {
        let txn = self.session.register();
        let (code, _) = self.wait_for(txn)?;
        Ok(code)
    }

    /// Sends an encapsulated message and waits for the relay's verdict.
    /// Returns the code and the Message-ID assigned to the message.
    pub fn send(&mut self, envelope: Vec<u8>, to: &str) -> Result<(StatusCode, String), NetError> {
        let txn = self.session.submit_send(envelope, to)?;
        let message_id = self.session.pending().get(&txn).and_then(|p| p.message_id.clone()).unwrap_or_default();
        let (code, _) = self.wait_for(txn)?;
        Ok((code, message_id))
    }

    pub fn command(&mut self, command: Command, message_id: &str, to: Option<&str>) -> Result<(StatusCode, Option<Vec<u8>>), NetError> {
        let txn = match (command, to) {
            (Command::Delete, _) => self.session.submit_delete(message_id)?,
            (Command::Retrieve, _) => self.session.submit_retrieve(message_id)?,
            (Command::Forward, Some(to)) => self.session.submit_forward(message_id, to)?,
            _ => return Err(NetError::Protocol(format!("unsupported request {command}"))),
        };
        self.wait_for(txn)
    }

    /// The relay's counters as JSON.
    pub fn stats(&mut self) -> Result<serde_json::Value, NetError> {
        let txn = self.session.submit_stats_query();
        match self.wait_for(txn)? {
            (StatusCode::Ok, Some(body)) => serde_json::from_slice(&body).map_err(|e| NetError::Protocol(e.to_string())),
            (code, _) => Err(NetError::Protocol(format!("stats query answered {code}"))),
        }
    }

    /// Reads until the connection has been quiet for `quiet`, acknowledging
    /// every delivery, and returns the messages received.
    pub fn drain_inbox(&mut self, quiet: Duration) -> Result<Vec<Pdu>, NetError> {
        self.reader.get_ref().set_read_timeout(Some(quiet))?;
        let result = loop {
            if let Err(e) = self.flush() {
                break Err(e);
            }
            match self.pump() {
                Ok(true) => {}
                Ok(false) => break Ok(()),
                Err(e) => break Err(e),
            }
        };
        self.reader.get_ref().set_read_timeout(Some(self.timeout))?;
        result?;
        self.flush()?;
        Ok(self.session.take_inbox())
    }

    /// Sends anything still owed (acknowledgements) and closes. Returns the
    /// session, already marked disconnected, so it can be reused.
    pub fn close(mut self) -> Result<ClientSession, NetError> {
        self.flush()?;
        let _ = self.writer.get_ref().shutdown(std::net::Shutdown::Write);
        // wait for the server to finish with us so our acknowledgements land
        // before the disconnect
        let _ = self.reader.get_ref().set_read_timeout(Some(self.timeout));
        while let Ok(Some(_)) = self.codec.read_payload(&mut self.reader) {}
        self.session.disconnect();
        Ok(self.session)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_layout() {
        let pdu = Pdu::new(Command::Register, 1).with_header("From", "alice");
        let frame = crate::transport::encode_frame(&pdu).unwrap();
        let line = format_trace(Direction::Out, 1234, &frame, &pdu);
        let mut lines = line.lines();
        assert_eq!(
            lines.next().unwrap(),
            ">> 1.234 REGISTER txn=1 len=31 0000001b524547495354455220310d0a46726f6d3a20616c6963650d0a0d0a"
        );
        assert_eq!(lines.next().unwrap(), "    From: alice");
        assert!(lines.next().is_none());
    }
}
