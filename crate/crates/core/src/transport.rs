//! Command/status vocabulary, the length-prefixed frame codec, and the
//! client-side session with its four queues.
//!
//! Frame layout:
//!
//! ```text
//! u32 big-endian N | COMMAND SP txn CRLF | (Name: value CRLF)* | CRLF | body
//! ```
//!
//! where N counts every byte after the prefix. The codec is canonical: any
//! byte string it accepts re-encodes to exactly itself.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_PORT: u16 = 7275;
pub const DEFAULT_MAX_BODY: usize = 16 * 1024 * 1024;
/// Allowance for the command line and headers on top of the body cap.
const HEADER_ALLOWANCE: usize = 64 * 1024;

pub mod headers {
    pub const FROM: &str = "From";
    pub const TO: &str = "To";
    pub const MESSAGE_ID: &str = "Message-ID";
    pub const DATE: &str = "Date";
    pub const SUBJECT: &str = "Subject";
    pub const STATUS: &str = "X-Mms-Status";
    pub const ORIG_TXN: &str = "X-Mms-Orig-Txn";
    pub const FORWARDED_BY: &str = "X-Mms-Forwarded-By";
    /// `To:` value addressing the relay itself (statistics queries).
    pub const SERVER_ADDRESS: &str = "server";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Command {
    Register,
    Send,
    Delete,
    Forward,
    Retrieve,
    Notify,
    Status,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Register,
        Command::Send,
        Command::Delete,
        Command::Forward,
        Command::Retrieve,
        Command::Notify,
        Command::Status,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Command::Register => "REGISTER",
            Command::Send => "SEND",
            Command::Delete => "DELETE",
            Command::Forward => "FORWARD",
            Command::Retrieve => "RETRIEVE",
            Command::Notify => "NOTIFY",
            Command::Status => "STATUS",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Command {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Command::ALL.into_iter().find(|c| c.token() == s).ok_or(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StatusCode {
    Ok,
    StoredOffline,
    Expired,
    UnknownRecipient,
    UnknownMessage,
    Malformed,
    Unauthorized,
}

impl StatusCode {
    pub const ALL: [StatusCode; 7] = [
        StatusCode::Ok,
        StatusCode::StoredOffline,
        StatusCode::Expired,
        StatusCode::UnknownRecipient,
        StatusCode::UnknownMessage,
        StatusCode::Malformed,
        StatusCode::Unauthorized,
    ];

    pub fn token(self) -> &'static str {
        match self {
            StatusCode::Ok => "OK",
            StatusCode::StoredOffline => "STORED_OFFLINE",
            StatusCode::Expired => "EXPIRED",
            StatusCode::UnknownRecipient => "UNKNOWN_RECIPIENT",
            StatusCode::UnknownMessage => "UNKNOWN_MESSAGE",
            StatusCode::Malformed => "MALFORMED",
            StatusCode::Unauthorized => "UNAUTHORIZED",
        }
    }

    /// The message was taken in for delivery (now or later).
    pub fn is_accepted(self) -> bool {
        matches!(self, StatusCode::Ok | StatusCode::StoredOffline)
    }
}

impl fmt::Display for StatusCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for StatusCode {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        StatusCode::ALL.into_iter().find(|c| c.token() == s).ok_or(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pdu {
    pub command: Command,
    pub txn_id: u32,
    pub headers: Vec<(String, String)>,
    /// `None` and an empty body are the same thing on the wire; the codec
    /// only accepts `None` for "no body".
    pub body: Option<Vec<u8>>,
}

impl Pdu {
    pub fn new(command: Command, txn_id: u32) -> Self {
        Pdu { command, txn_id, headers: Vec::new(), body: None }
    }

    pub fn with_header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.headers.push((name.to_string(), value.into()));
        self
    }

    pub fn with_body(mut self, body: Vec<u8>) -> Self {
        self.body = if body.is_empty() { None } else { Some(body) };
        self
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(n, _)| n.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }

    pub fn set_header(&mut self, name: &str, value: impl Into<String>) {
        let value = value.into();
        match self.headers.iter_mut().find(|(n, _)| n.eq_ignore_ascii_case(name)) {
            Some(slot) => slot.1 = value,
            None => self.headers.push((name.to_string(), value)),
        }
    }

    /// A STATUS answering transaction `orig_txn`.
    pub fn status(txn_id: u32, orig_txn: u32, code: StatusCode) -> Self {
        Pdu::new(Command::Status, txn_id)
            .with_header(headers::STATUS, code.token())
            .with_header(headers::ORIG_TXN, orig_txn.to_string())
    }

    pub fn status_code(&self) -> Option<StatusCode> {
        self.header(headers::STATUS)?.parse().ok()
    }

    pub fn orig_txn(&self) -> Option<u32> {
        self.header(headers::ORIG_TXN)?.parse().ok()
    }

    pub fn message_id(&self) -> Option<&str> {
        self.header(headers::MESSAGE_ID)
    }

    pub fn body_len(&self) -> usize {
        self.body.as_ref().map_or(0, Vec::len)
    }

    /// Per-command invariants checked by the codec.
    pub fn check(&self) -> Result<(), String> {
        for (name, value) in &self.headers {
            if name.is_empty() || !name.bytes().all(is_token_byte) {
                return Err(format!("bad header name {name:?}"));
            }
            if value.bytes().any(|b| b == b'\r' || b == b'\n') {
                return Err(format!("header {name} contains a line break"));
            }
        }
        if self.body.as_ref().is_some_and(Vec::is_empty) {
            return Err("empty body must be None".into());
        }
        match self.command {
            Command::Send | Command::Notify if self.body.is_none() => {
                Err(format!("{} requires a body", self.command))
            }
            Command::Status if self.status_code().is_none() || self.orig_txn().is_none() => {
                Err("STATUS requires X-Mms-Status and X-Mms-Orig-Txn".into())
            }
            _ => Ok(()),
        }
    }
}

fn is_token_byte(b: u8) -> bool {
    b.is_ascii_graphic() && b != b':'
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameErrorKind {
    Truncated,
    BadCommand,
    BadHeaders,
    InvalidPdu,
    TooLarge,
    TrailingBytes,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?} at offset {offset}: {detail}")]
pub struct FrameError {
    pub kind: FrameErrorKind,
    pub offset: usize,
    pub detail: String,
}

fn frame_err(kind: FrameErrorKind, offset: usize, detail: impl Into<String>) -> FrameError {
    FrameError { kind, offset, detail: detail.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameCodec {
    pub max_body: usize,
}

impl Default for FrameCodec {
    fn default() -> Self {
        FrameCodec { max_body: DEFAULT_MAX_BODY }
    }
}

impl FrameCodec {
    pub fn new(max_body: usize) -> Self {
        FrameCodec { max_body }
    }

    fn max_payload(&self) -> usize {
        self.max_body.saturating_add(HEADER_ALLOWANCE)
    }

    pub fn encode(&self, pdu: &Pdu) -> Result<Vec<u8>, FrameError> {
        pdu.check().map_err(|d| frame_err(FrameErrorKind::InvalidPdu, 0, d))?;
        if pdu.body_len() > self.max_body {
            return Err(frame_err(FrameErrorKind::TooLarge, 0, format!("body of {} bytes", pdu.body_len())));
        }
        let mut payload = format!("{} {}\r\n", pdu.command.token(), pdu.txn_id);
        for (name, value) in &pdu.headers {
            payload.push_str(name);
            payload.push_str(": ");
            payload.push_str(value);
            payload.push_str("\r\n");
        }
        payload.push_str("\r\n");
        let len = payload.len() + pdu.body_len();
        if len > self.max_payload() {
            return Err(frame_err(FrameErrorKind::TooLarge, 0, format!("frame of {len} bytes")));
        }
        let len = u32::try_from(len).map_err(|_| frame_err(FrameErrorKind::TooLarge, 0, "frame exceeds u32"))?;
        let mut out = Vec::with_capacity(4 + len as usize);
        out.extend_from_slice(&len.to_be_bytes());
        out.extend_from_slice(payload.as_bytes());
        if let Some(body) = &pdu.body {
            out.extend_from_slice(body);
        }
        Ok(out)
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(&self, bytes: &[u8]) -> Result<Pdu, FrameError> {
        if bytes.len() < 4 {
            return Err(frame_err(FrameErrorKind::Truncated, bytes.len(), "missing length prefix"));
        }
        let declared = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
        if declared > self.max_payload() {
            return Err(frame_err(FrameErrorKind::TooLarge, 0, format!("declared length {declared}")));
        }
        let payload = &bytes[4..];
        if payload.len() < declared {
            return Err(frame_err(FrameErrorKind::Truncated, bytes.len(), format!("declared {declared}, have {}", payload.len())));
        }
        if payload.len() > declared {
            return Err(frame_err(FrameErrorKind::TrailingBytes, 4 + declared, "bytes after the frame"));
        }
        self.decode_payload(payload).map_err(|mut e| {
            e.offset += 4;
            e
        })
    }

    /// Decodes a frame payload (everything after the length prefix).
    pub fn decode_payload(&self, payload: &[u8]) -> Result<Pdu, FrameError> {
        let line_end = find_crlf(payload, 0)
            .ok_or_else(|| frame_err(FrameErrorKind::Truncated, payload.len(), "command line not terminated"))?;
        let line = std::str::from_utf8(&payload[..line_end])
            .map_err(|_| frame_err(FrameErrorKind::BadCommand, 0, "command line is not UTF-8"))?;
        let (token, txn) = line
            .split_once(' ')
            .ok_or_else(|| frame_err(FrameErrorKind::BadCommand, 0, "expected 'COMMAND txn'"))?;
        let command: Command =
            token.parse().map_err(|_| frame_err(FrameErrorKind::BadCommand, 0, format!("unknown command {token:?}")))?;
        let canonical = !txn.is_empty() && txn.bytes().all(|b| b.is_ascii_digit()) && (txn == "0" || !txn.starts_with('0'));
        let txn_id: u32 = canonical
            .then(|| txn.parse().ok())
            .flatten()
            .ok_or_else(|| frame_err(FrameErrorKind::BadCommand, token.len() + 1, format!("bad transaction number {txn:?}")))?;

        let mut headers = Vec::new();
        let mut pos = line_end + 2;
        loop {
            let eol = find_crlf(payload, pos)
                .ok_or_else(|| frame_err(FrameErrorKind::Truncated, pos, "header section not terminated"))?;
            if eol == pos {
                pos += 2;
                break;
            }
            let raw = &payload[pos..eol];
            let text = std::str::from_utf8(raw).map_err(|_| frame_err(FrameErrorKind::BadHeaders, pos, "header is not UTF-8"))?;
            let (name, value) = text
                .split_once(": ")
                .ok_or_else(|| frame_err(FrameErrorKind::BadHeaders, pos, "header lacks ': '"))?;
            if name.is_empty() || !name.bytes().all(is_token_byte) {
                return Err(frame_err(FrameErrorKind::BadHeaders, pos, format!("bad header name {name:?}")));
            }
            if value.bytes().any(|b| b == b'\r' || b == b'\n') {
                return Err(frame_err(FrameErrorKind::BadHeaders, pos, "stray line break in header"));
            }
            headers.push((name.to_string(), value.to_string()));
            pos = eol + 2;
        }
        let body = &payload[pos..];
        if body.len() > self.max_body {
            return Err(frame_err(FrameErrorKind::TooLarge, pos, format!("body of {} bytes", body.len())));
        }
        let pdu = Pdu { command, txn_id, headers, body: (!body.is_empty()).then(|| body.to_vec()) };
        pdu.check().map_err(|d| frame_err(FrameErrorKind::InvalidPdu, 0, d))?;
        Ok(pdu)
    }

    /// Reads one length-prefixed payload without decoding it. `Ok(None)` on
    /// a clean end of stream before any prefix byte.
    pub fn read_payload<R: Read>(&self, reader: &mut R) -> io::Result<Option<Vec<u8>>> {
        let mut prefix = [0u8; 4];
        let mut filled = 0;
        while filled < 4 {
            match reader.read(&mut prefix[filled..]) {
                Ok(0) if filled == 0 => return Ok(None),
                Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        let declared = u32::from_be_bytes(prefix) as usize;
        if declared > self.max_payload() {
            return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {declared} bytes exceeds cap")));
        }
        let mut payload = vec![0u8; declared];
        reader.read_exact(&mut payload)?;
        Ok(Some(payload))
    }

    /// Reads and decodes one frame. Decode failures surface as
    /// `InvalidData` errors wrapping the [`FrameError`].
    pub fn read_frame<R: Read>(&self, reader: &mut R) -> io::Result<Option<Pdu>> {
        match self.read_payload(reader)? {
            None => Ok(None),
            Some(payload) => {
                self.decode_payload(&payload).map(Some).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
            }
        }
    }

    pub fn write_frame<W: Write>(&self, writer: &mut W, pdu: &Pdu) -> io::Result<usize> {
        let bytes = self.encode(pdu).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        writer.write_all(&bytes)?;
        Ok(bytes.len())
    }
}

fn find_crlf(bytes: &[u8], from: usize) -> Option<usize> {
    bytes.get(from..)?.windows(2).position(|w| w == b"\r\n").map(|p| p + from)
}

pub fn encode_frame(pdu: &Pdu) -> Result<Vec<u8>, FrameError> {
    FrameCodec::default().encode(pdu)
}

pub fn decode_frame(bytes: &[u8]) -> Result<Pdu, FrameError> {
    FrameCodec::default().decode(bytes)
}

// ---------------------------------------------------------------------------
// Client session

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("session is not registered")]
    NotRegistered,
    #[error("message body is empty")]
    EmptyBody,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppEvent {
    SendResolved { txn: u32, code: StatusCode, message_id: String },
    /// Outcome of a non-SEND command. `body` carries RETRIEVE content or a
    /// statistics report.
    CommandResolved { txn: u32, command: Command, code: StatusCode, body: Option<Vec<u8>> },
    MessageArrived { message_id: String, from: String },
    /// The relay gave up on a stored message this client sent.
    MessageExpired { message_id: String, orig_txn: u32 },
    /// A STATUS for a transaction this session is not waiting on.
    Orphan { txn: u32 },
    /// A frame the client has no use for (e.g. a client-side command).
    Unexpected { command: Command, txn: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingCommand {
    pub command: Command,
    pub message_id: Option<String>,
    pub submitted_at_ms: u64,
}

/// Client end of the transport.
///
/// Queues:
/// * `cmd_out` commands waiting to be transmitted,
/// * `await_status` transmitted or queued commands waiting for their STATUS,
/// * `inbox` delivered messages waiting for the application,
/// * `status_out` acknowledgements owed to the relay.
///
/// The session does no I/O. A driver moves frames between
/// [`ClientSession::next_outgoing`], the network, and [`ClientSession::on_frame`].
#[derive(Debug, Clone)]
pub struct ClientSession {
    client_id: String,
    tag: String,
    registered: bool,
    next_txn: u32,
    clock_ms: u64,
    cmd_out: VecDeque<Pdu>,
    await_status: BTreeMap<u32, PendingCommand>,
    inbox: VecDeque<Pdu>,
    status_out: VecDeque<Pdu>,
}

impl ClientSession {
    /// `tag` makes generated Message-IDs unique across sessions of the same
    /// client id.
    pub fn new(client_id: impl Into<String>, tag: impl Into<String>) -> Self {
        ClientSession {
            client_id: client_id.into(),
            tag: tag.into(),
            registered: false,
            next_txn: 1,
            clock_ms: 0,
            cmd_out: VecDeque::new(),
            await_status: BTreeMap::new(),
            inbox: VecDeque::new(),
            status_out: VecDeque::new(),
        }
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn is_registered(&self) -> bool {
        self.registered
    }

    fn take_txn(&mut self) -> u32 {
        let txn = self.next_txn;
        self.next_txn += 1;
        txn
    }

    fn submit(&mut self, pdu: Pdu, message_id: Option<String>) -> u32 {
        let txn = pdu.txn_id;
        self.await_status.insert(
            txn,
            PendingCommand { command: pdu.command, message_id, submitted_at_ms: self.clock_ms },
        );
        self.cmd_out.push_back(pdu);
        txn
    }

    fn require_registered(&self) -> Result<(), SessionError> {
        if self.registered {
            Ok(())
        } else {
            Err(SessionError::NotRegistered)
        }
    }

    pub fn register(&mut self) -> u32 {
        self.registered = true;
        let txn = self.take_txn();
        let pdu = Pdu::new(Command::Register, txn).with_header(headers::FROM, self.client_id.clone());
        self.submit(pdu, None)
    }

    /// Queues a SEND of an encapsulated message. The Message-ID is generated
    /// from the client id, session tag and transaction number.
    pub fn submit_send(&mut self, envelope: Vec<u8>, to: &str) -> Result<u32, SessionError> {
        self.require_registered()?;
        if envelope.is_empty() {
            return Err(SessionError::EmptyBody);
        }
        let txn = self.take_txn();
        let message_id = format!("{}.{}.{}", self.client_id, self.tag, txn);
        let pdu = Pdu::new(Command::Send, txn)
            .with_header(headers::FROM, self.client_id.clone())
            .with_header(headers::TO, to)
            .with_header(headers::MESSAGE_ID, message_id.clone())
            .with_body(envelope);
        Ok(self.submit(pdu, Some(message_id)))
    }

    pub fn submit_delete(&mut self, message_id: &str) -> Result<u32, SessionError> {
        self.require_registered()?;
        let txn = self.take_txn();
        let pdu = Pdu::new(Command::Delete, txn)
            .with_header(headers::FROM, self.client_id.clone())
            .with_header(headers::MESSAGE_ID, message_id);
        Ok(self.submit(pdu, Some(message_id.to_string())))
    }

    pub fn submit_forward(&mut self, message_id: &str, to: &str) -> Result<u32, SessionError> {
        self.require_registered()?;
        let txn = self.take_txn();
        let pdu = Pdu::new(Command::Forward, txn)
            .with_header(headers::FROM, self.client_id.clone())
            .with_header(headers::TO, to)
            .with_header(headers::MESSAGE_ID, message_id);
        Ok(self.submit(pdu, Some(message_id.to_string())))
    }

    pub fn submit_retrieve(&mut self, message_id: &str) -> Result<u32, SessionError> {
        self.require_registered()?;
        let txn = self.take_txn();
        let pdu = Pdu::new(Command::Retrieve, txn)
            .with_header(headers::FROM, self.client_id.clone())
            .with_header(headers::MESSAGE_ID, message_id);
        Ok(self.submit(pdu, Some(message_id.to_string())))
    }

    /// Asks the relay for its counters; the answer arrives as a
    /// `CommandResolved` with a JSON body.
    pub fn submit_stats_query(&mut self) -> u32 {
        let txn = self.take_txn();
        let pdu = Pdu::status(txn, 0, StatusCode::Ok)
            .with_header(headers::FROM, self.client_id.clone())
            .with_header(headers::TO, headers::SERVER_ADDRESS);
        self.submit(pdu, None)
    }

    /// Next frame to transmit: owed acknowledgements first, then commands.
    pub fn next_outgoing(&mut self) -> Option<Pdu> {
        self.status_out.pop_front().or_else(|| self.cmd_out.pop_front())
    }

    pub fn on_frame(&mut self, pdu: Pdu) -> Vec<AppEvent> {
        match pdu.command {
            Command::Status => {
                let (Some(orig), Some(code)) = (pdu.orig_txn(), pdu.status_code()) else {
                    return vec![AppEvent::Unexpected { command: pdu.command, txn: pdu.txn_id }];
                };
                match self.await_status.remove(&orig) {
                    Some(PendingCommand { command: Command::Send, message_id, .. }) => {
                        vec![AppEvent::SendResolved { txn: orig, code, message_id: message_id.unwrap_or_default() }]
                    }
                    Some(pending) => {
                        vec![AppEvent::CommandResolved { txn: orig, command: pending.command, code, body: pdu.body }]
                    }
                    None if code == StatusCode::Expired => vec![AppEvent::MessageExpired {
                        message_id: pdu.message_id().unwrap_or_default().to_string(),
                        orig_txn: orig,
                    }],
                    None => vec![AppEvent::Orphan { txn: orig }],
                }
            }
            Command::Notify => {
                let message_id = pdu.message_id().unwrap_or_default().to_string();
                let from = pdu.header(headers::FROM).unwrap_or_default().to_string();
                let ack_txn = self.take_txn();
                let ack = Pdu::status(ack_txn, pdu.txn_id, StatusCode::Ok)
                    .with_header(headers::FROM, self.client_id.clone())
                    .with_header(headers::MESSAGE_ID, message_id.clone());
                self.status_out.push_back(ack);
                self.inbox.push_back(pdu);
                vec![AppEvent::MessageArrived { message_id, from }]
            }
            command => vec![AppEvent::Unexpected { command, txn: pdu.txn_id }],
        }
    }

    /// Hands every delivered message to the application.
    pub fn take_inbox(&mut self) -> Vec<Pdu> {
        self.inbox.drain(..).collect()
    }

    pub fn inbox(&self) -> impl Iterator<Item = &Pdu> {
        self.inbox.iter()
    }

    pub fn cmd_out_len(&self) -> usize {
        self.cmd_out.len()
    }

    pub fn status_out_len(&self) -> usize {
        self.status_out.len()
    }

    pub fn inbox_len(&self) -> usize {
        self.inbox.len()
    }

    pub fn pending(&self) -> &BTreeMap<u32, PendingCommand> {
        &self.await_status
    }

    /// Sets the session's notion of "now"; used to stamp submissions.
    pub fn advance_clock(&mut self, now_ms: u64) {
        self.clock_ms = self.clock_ms.max(now_ms);
    }

    /// Age of the oldest command still waiting for a status.
    pub fn oldest_pending_age_ms(&self) -> Option<u64> {
        self.await_status.values().map(|p| self.clock_ms - p.submitted_at_ms).max()
    }

    /// Drops everything tied to the current connection: unsent commands and
    /// outstanding statuses. Returns the abandoned transactions. The inbox is
    /// kept.
    pub fn disconnect(&mut self) -> Vec<u32> {
        self.registered = false;
        self.cmd_out.clear();
        self.status_out.clear();
        let abandoned = self.await_status.keys().copied().collect();
        self.await_status.clear();
        abandoned
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_frame_bytes() {
        let pdu = Pdu::new(Command::Register, 1).with_header("From", "alice");
        let bytes = encode_frame(&pdu).unwrap();
        let payload = b"REGISTER 1\r\nFrom: alice\r\n\r\n";
        let mut expected = (payload.len() as u32).to_be_bytes().to_vec();
        expected.extend_from_slice(payload);
        assert_eq!(bytes, expected);
        assert_eq!(&bytes[..4], &[0, 0, 0, 27]);
        assert_eq!(decode_frame(&bytes).unwrap(), pdu);
    }

    #[test]
    fn short_declared_length() {
        let mut bytes = encode_frame(&Pdu::new(Command::Register, 1).with_header("From", "alice")).unwrap();
        // claim only the command line: headers never terminate
        let cut = b"REGISTER 1\r\n".len() as u32;
        bytes.truncate(4 + cut as usize);
        bytes[..4].copy_from_slice(&cut.to_be_bytes());
        assert_eq!(decode_frame(&bytes).unwrap_err().kind, FrameErrorKind::Truncated);
    }

    #[test]
    fn decode_errors() {
        let frame = |payload: &[u8]| {
            let mut v = (payload.len() as u32).to_be_bytes().to_vec();
            v.extend_from_slice(payload);
            v
        };
        let kind = |payload: &[u8]| decode_frame(&frame(payload)).unwrap_err().kind;
        assert_eq!(kind(b"FLY 1\r\n\r\n"), FrameErrorKind::BadCommand);
        assert_eq!(kind(b"send 1\r\n\r\n"), FrameErrorKind::BadCommand);
        assert_eq!(kind(b"REGISTER 01\r\n\r\n"), FrameErrorKind::BadCommand);
        assert_eq!(kind(b"REGISTER 4294967296\r\n\r\n"), FrameErrorKind::BadCommand);
        assert_eq!(kind(b"REGISTER 1\r\nFrom:alice\r\n\r\n"), FrameErrorKind::BadHeaders);
        assert_eq!(kind(b"REGISTER 1\r\nFr om: a\r\n\r\n"), FrameErrorKind::BadHeaders);
        assert_eq!(kind(b"REGISTER 1\r\nFrom: a\nb\r\n\r\n"), FrameErrorKind::BadHeaders);
        assert_eq!(kind(b"SEND 1\r\nTo: b\r\n\r\n"), FrameErrorKind::InvalidPdu);
        assert_eq!(kind(b"STATUS 1\r\nX-Mms-Status: OK\r\n\r\n"), FrameErrorKind::InvalidPdu);
        assert_eq!(kind(b"STATUS 1\r\nX-Mms-Status: MAYBE\r\nX-Mms-Orig-Txn: 1\r\n\r\n"), FrameErrorKind::InvalidPdu);
        let mut trailing = frame(b"REGISTER 1\r\n\r\n");
        trailing.push(0);
        assert_eq!(decode_frame(&trailing).unwrap_err().kind, FrameErrorKind::TrailingBytes);
        assert_eq!(decode_frame(&[0, 0]).unwrap_err().kind, FrameErrorKind::Truncated);
    }

    #[test]
    fn body_cap() {
        let codec = FrameCodec::new(8);
        let pdu = Pdu::new(Command::Send, 2).with_header("To", "b").with_body(vec![7; 9]);
        assert_eq!(codec.encode(&pdu).unwrap_err().kind, FrameErrorKind::TooLarge);
        let ok = Pdu::new(Command::Send, 2).with_header("To", "b").with_body(vec![7; 8]);
        let bytes = codec.encode(&ok).unwrap();
        assert_eq!(codec.decode(&bytes).unwrap(), ok);
        let big = FrameCodec::default().encode(&pdu).unwrap();
        assert_eq!(codec.decode(&big).unwrap_err().kind, FrameErrorKind::TooLarge);
    }

    #[test]
    fn stream_reading() {
        let codec = FrameCodec::default();
        let a = Pdu::new(Command::Register, 1).with_header("From", "a");
        let b = Pdu::status(9, 1, StatusCode::Ok);
        let mut buf = Vec::new();
        codec.write_frame(&mut buf, &a).unwrap();
        codec.write_frame(&mut buf, &b).unwrap();
        let mut cursor = io::Cursor::new(buf);
        assert_eq!(codec.read_frame(&mut cursor).unwrap(), Some(a));
        assert_eq!(codec.read_frame(&mut cursor).unwrap(), Some(b));
        assert_eq!(codec.read_frame(&mut cursor).unwrap(), None);
        let mut partial = io::Cursor::new(vec![0, 0]);
        assert!(codec.read_frame(&mut partial).is_err());
    }

    fn registered() -> ClientSession {
        let mut s = ClientSession::new("alice", "t");
        assert_eq!(s.register(), 1);
        assert_eq!(s.next_outgoing().unwrap().command, Command::Register);
        s
    }

    #[test]
    fn first_send_after_register() {
        let mut s = registered();
        assert_eq!(s.submit_send(b"x".to_vec(), "bob").unwrap(), 2);
        assert_eq!(s.cmd_out_len(), 1);
    }

    #[test]
    fn sends_are_fifo() {
        let mut s = registered();
        let a = s.submit_send(b"a".to_vec(), "bob").unwrap();
        let b = s.submit_send(b"b".to_vec(), "bob").unwrap();
        assert_ne!(a, b);
        assert_eq!(s.next_outgoing().unwrap().txn_id, a);
        assert_eq!(s.next_outgoing().unwrap().txn_id, b);
    }

    #[test]
    fn send_before_register() {
        let mut s = ClientSession::new("alice", "t");
        assert_eq!(s.submit_send(b"x".to_vec(), "bob"), Err(SessionError::NotRegistered));
        assert_eq!(s.submit_delete("m"), Err(SessionError::NotRegistered));
    }

    #[test]
    fn status_resolves_send() {
        let mut s = registered();
        let txn = s.submit_send(b"x".to_vec(), "bob").unwrap();
        let events = s.on_frame(Pdu::status(40, txn, StatusCode::Ok));
        assert_eq!(
            events,
            vec![AppEvent::SendResolved { txn: 2, code: StatusCode::Ok, message_id: "alice.t.2".into() }]
        );
        // REGISTER (txn 1) is still outstanding
        assert_eq!(s.pending().keys().copied().collect::<Vec<_>>(), [1]);
    }

    #[test]
    fn notify_fills_inbox_and_owes_ack() {
        let mut s = registered();
        let notify = Pdu::new(Command::Notify, 7)
            .with_header(headers::FROM, "bob")
            .with_header(headers::MESSAGE_ID, "m1")
            .with_body(b"env".to_vec());
        let events = s.on_frame(notify);
        assert_eq!(events, vec![AppEvent::MessageArrived { message_id: "m1".into(), from: "bob".into() }]);
        assert_eq!((s.inbox_len(), s.status_out_len()), (1, 1));
        let ack = s.next_outgoing().unwrap();
        assert_eq!((ack.command, ack.orig_txn(), ack.status_code()), (Command::Status, Some(7), Some(StatusCode::Ok)));
    }

    #[test]
    fn orphans_and_expiry_notices() {
        let mut s = registered();
        assert_eq!(s.on_frame(Pdu::status(1, 99, StatusCode::Ok)), vec![AppEvent::Orphan { txn: 99 }]);
        let expired = Pdu::status(2, 5, StatusCode::Expired).with_header(headers::MESSAGE_ID, "alice.t.5");
        assert_eq!(
            s.on_frame(expired),
            vec![AppEvent::MessageExpired { message_id: "alice.t.5".into(), orig_txn: 5 }]
        );
        assert_eq!(
            s.on_frame(Pdu::new(Command::Send, 3).with_body(vec![1])),
            vec![AppEvent::Unexpected { command: Command::Send, txn: 3 }]
        );
    }

    #[test]
    fn pending_age_and_disconnect() {
        let mut s = registered();
        s.advance_clock(100);
        s.submit_send(b"x".to_vec(), "b").unwrap();
        s.advance_clock(250);
        assert_eq!(s.oldest_pending_age_ms(), Some(250));
        assert_eq!(s.disconnect(), vec![1, 2]);
        assert!(!s.is_registered());
        assert_eq!(s.cmd_out_len(), 0);
        assert_eq!(s.oldest_pending_age_ms(), None);
    }
}
