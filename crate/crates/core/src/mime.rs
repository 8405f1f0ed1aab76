//! multipart/related encapsulation of a SMIL document and its media.
//!
//! Output layout (all line breaks CRLF):
//!
//! ```text
//! <transport headers>
//! Content-Type: multipart/related; boundary="B"; start="<smil-id>"
//!
//! --B
//! Content-Type: application/smil
//! Content-ID: <smil-id>
//! Content-Transfer-Encoding: 7bit
//!
//! <body>
//! --B
//! ...
//! --B--
//! ```

use std::collections::HashSet;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use memchr::memmem;
use rand::distributions::Alphanumeric;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::smil::{MediaItem, SmilTree, Violation, ViolationCode};

pub const SMIL_CONTENT_TYPE: &str = "application/smil";
const MAX_BOUNDARY: usize = 70;
const BASE64_LINE: usize = 76;
const DEFAULT_BOUNDARY_SEED: u64 = 0x6d6d_732d_6d69_6d65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransferEncoding {
    SevenBit,
    Base64,
}

impl TransferEncoding {
    pub fn token(self) -> &'static str {
        match self {
            TransferEncoding::SevenBit => "7bit",
            TransferEncoding::Base64 => "base64",
        }
    }

    /// Encoding chosen for a body: 7bit for ASCII `text/plain` and
    /// `application/smil` bodies with CRLF-only line breaks, base64 otherwise.
    pub fn for_body(content_type: &str, body: &[u8]) -> Self {
        let media_type = content_type.split(';').next().unwrap_or("").trim().to_ascii_lowercase();
        if (media_type == "text/plain" || media_type == SMIL_CONTENT_TYPE) && is_seven_bit_clean(body) {
            TransferEncoding::SevenBit
        } else {
            TransferEncoding::Base64
        }
    }
}

/// No byte above 0x7F, no NUL, and CR/LF only as CRLF pairs.
pub fn is_seven_bit_clean(body: &[u8]) -> bool {
    let mut i = 0;
    while i < body.len() {
        match body[i] {
            0 | 0x80..=0xFF => return false,
            b'\r' => {
                if body.get(i + 1) != Some(&b'\n') {
                    return false;
                }
                i += 1;
            }
            b'\n' => return false,
            _ => {}
        }
        i += 1;
    }
    true
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MimePart {
    pub content_type: String,
    pub content_id: String,
    pub transfer_encoding: TransferEncoding,
    pub body: Vec<u8>,
}

impl MimePart {
    /// Builds a part with the transfer encoding picked by
    /// [`TransferEncoding::for_body`].
    pub fn new(content_type: impl Into<String>, content_id: impl Into<String>, body: impl Into<Vec<u8>>) -> Self {
        let content_type = content_type.into();
        let body = body.into();
        MimePart {
            transfer_encoding: TransferEncoding::for_body(&content_type, &body),
            content_type,
            content_id: content_id.into(),
            body,
        }
    }

    pub fn is_smil(&self) -> bool {
        self.content_type.split(';').next().unwrap_or("").trim().eq_ignore_ascii_case(SMIL_CONTENT_TYPE)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MmsEnvelope {
    /// Headers written ahead of the multipart `Content-Type`, in order.
    pub transport_headers: Vec<(String, String)>,
    pub start_id: String,
    pub parts: Vec<MimePart>,
    /// Empty means "generate one".
    pub boundary: String,
}

impl MmsEnvelope {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.transport_headers.iter().find(|(n, _)| n.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }

    pub fn start_part(&self) -> Option<&MimePart> {
        self.parts.iter().find(|p| p.content_id == self.start_id)
    }

    pub fn part(&self, content_id: &str) -> Option<&MimePart> {
        self.parts.iter().find(|p| p.content_id == content_id)
    }

    /// UTF-8 text of the SMIL start part.
    pub fn smil_text(&self) -> Option<&str> {
        self.start_part().and_then(|p| std::str::from_utf8(&p.body).ok())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncapsulateError {
    #[error("boundary {0:?} occurs inside a part body")]
    BoundaryCollision(String),
    #[error("invalid envelope: {0}")]
    InvalidEnvelope(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MimeErrorKind {
    MissingBoundary,
    MissingStart,
    TruncatedPart,
    BadBase64,
    DuplicateContentId,
    BadHeader,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?} at byte {offset}: {detail}")]
pub struct MimeError {
    pub kind: MimeErrorKind,
    pub offset: usize,
    pub detail: String,
}

fn mime_err(kind: MimeErrorKind, offset: usize, detail: impl Into<String>) -> MimeError {
    MimeError { kind, offset, detail: detail.into() }
}

#[derive(Debug, Clone, Copy)]
pub struct EncapsulateOptions {
    /// Seed for generated boundaries; a fixed seed gives reproducible bytes.
    pub seed: u64,
    /// When the supplied boundary collides with a body, draw a fresh one
    /// instead of failing.
    pub regenerate_on_collision: bool,
}

impl Default for EncapsulateOptions {
    fn default() -> Self {
        EncapsulateOptions { seed: DEFAULT_BOUNDARY_SEED, regenerate_on_collision: false }
    }
}

fn is_bchar(c: char) -> bool {
    c.is_ascii_alphanumeric() || "'()+_,-./:=? ".contains(c)
}

pub fn is_valid_boundary(b: &str) -> bool {
    (1..=MAX_BOUNDARY).contains(&b.len()) && b.chars().all(is_bchar) && !b.ends_with(' ')
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && memmem::find(haystack, needle).is_some()
}

fn find_from(haystack: &[u8], needle: &[u8], from: usize) -> Option<usize> {
    if from > haystack.len() {
        return None;
    }
    memmem::find(&haystack[from..], needle).map(|p| p + from)
}

fn encode_body(part: &MimePart) -> Vec<u8> {
    match part.transfer_encoding {
        TransferEncoding::SevenBit => part.body.clone(),
        TransferEncoding::Base64 => {
            let text = STANDARD.encode(&part.body);
            let mut out = Vec::with_capacity(text.len() + text.len() / BASE64_LINE * 2);
            for (i, chunk) in text.as_bytes().chunks(BASE64_LINE).enumerate() {
                if i > 0 {
                    out.extend_from_slice(b"\r\n");
                }
                out.extend_from_slice(chunk);
            }
            out
        }
    }
}

fn collides(boundary: &str, bodies: &[(Vec<u8>, &[u8])]) -> bool {
    let b = boundary.as_bytes();
    bodies.iter().any(|(encoded, raw)| contains(encoded, b) || contains(raw, b))
}

/// Draws `mms-` plus 24 alphanumerics from a generator seeded with
/// `seed + attempt`, retrying until the result is absent from every body.
fn generate_boundary(seed: u64, bodies: &[(Vec<u8>, &[u8])]) -> String {
    (0u64..)
        .map(|attempt| {
            let rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
            let tail: String = rng.sample_iter(&Alphanumeric).take(24).map(char::from).collect();
            format!("mms-{tail}")
        })
        .find(|b| !collides(b, bodies))
        .expect("boundary space is effectively unbounded")
}

fn check_header(name: &str, value: &str) -> Result<(), EncapsulateError> {
    let bad_name = name.is_empty() || name.bytes().any(|b| !b.is_ascii_graphic() || b == b':');
    let bad_value = value.bytes().any(|b| b == b'\r' || b == b'\n');
    if bad_name || bad_value {
        return Err(EncapsulateError::InvalidEnvelope(format!("unencodable header {name:?}")));
    }
    Ok(())
}

fn check_envelope(env: &MmsEnvelope) -> Result<(), EncapsulateError> {
    let invalid = |m: String| Err(EncapsulateError::InvalidEnvelope(m));
    for (name, value) in &env.transport_headers {
        check_header(name, value)?;
        if name.eq_ignore_ascii_case("Content-Type") {
            return invalid("transport headers must not carry Content-Type".into());
        }
    }
    let mut ids = HashSet::new();
    for part in &env.parts {
        if part.content_id.is_empty() || !ids.insert(part.content_id.as_str()) {
            return invalid(format!("content id {:?} is empty or repeated", part.content_id));
        }
        check_header("Content-Type", &part.content_type)?;
        if part.content_type.trim() != part.content_type || part.content_type.is_empty() {
            return invalid(format!("content type {:?} is empty or padded", part.content_type));
        }
        if part.content_id.trim() != part.content_id || part.content_id.contains(['<', '>', '\r', '\n']) {
            return invalid(format!("content id {:?} has reserved characters", part.content_id));
        }
        if part.transfer_encoding == TransferEncoding::SevenBit && !is_seven_bit_clean(&part.body) {
            return invalid(format!("part {:?} is marked 7bit but is not", part.content_id));
        }
    }
    let smil: Vec<_> = env.parts.iter().filter(|p| p.is_smil()).collect();
    if smil.len() != 1 || smil[0].content_id != env.start_id {
        return invalid("exactly one application/smil part must be the start part".into());
    }
    if !env.boundary.is_empty() && !is_valid_boundary(&env.boundary) {
        return invalid(format!("boundary {:?} is not 1-70 MIME bchars", env.boundary));
    }
    Ok(())
}

pub fn encapsulate(env: &MmsEnvelope) -> Result<Vec<u8>, EncapsulateError> {
    encapsulate_with(env, EncapsulateOptions::default())
}

/// Serializes `env` to `.mms` bytes. An empty `env.boundary` is replaced by a
/// generated one that occurs in no body.
pub fn encapsulate_with(env: &MmsEnvelope, options: EncapsulateOptions) -> Result<Vec<u8>, EncapsulateError> {
    check_envelope(env)?;
    let bodies: Vec<(Vec<u8>, &[u8])> = env.parts.iter().map(|p| (encode_body(p), p.body.as_slice())).collect();
    let boundary = if env.boundary.is_empty() {
        generate_boundary(options.seed, &bodies)
    } else if collides(&env.boundary, &bodies) {
        if !options.regenerate_on_collision {
            return Err(EncapsulateError::BoundaryCollision(env.boundary.clone()));
        }
        generate_boundary(options.seed, &bodies)
    } else {
        env.boundary.clone()
    };

    let mut out = Vec::new();
    for (name, value) in &env.transport_headers {
        out.extend_from_slice(format!("{name}: {value}\r\n").as_bytes());
    }
    out.extend_from_slice(
        format!("Content-Type: multipart/related; boundary=\"{boundary}\"; start=\"<{}>\"\r\n\r\n", env.start_id)
            .as_bytes(),
    );
    for (part, (encoded, _)) in env.parts.iter().zip(&bodies) {
        out.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        out.extend_from_slice(format!("Content-Type: {}\r\n", part.content_type).as_bytes());
        out.extend_from_slice(format!("Content-ID: <{}>\r\n", part.content_id).as_bytes());
        out.extend_from_slice(
            format!("Content-Transfer-Encoding: {}\r\n\r\n", part.transfer_encoding.token()).as_bytes(),
        );
        out.extend_from_slice(encoded);
        out.extend_from_slice(b"\r\n");
    }
    out.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    Ok(out)
}

struct HeaderBlock {
    headers: Vec<(String, String)>,
    /// Offset of the first byte after the blank line.
    end: usize,
}

/// Reads `Name: value` lines starting at `start` up to the first empty line.
/// Continuation lines (leading space or tab) are unfolded.
fn read_headers(bytes: &[u8], start: usize) -> Result<HeaderBlock, MimeError> {
    let mut headers: Vec<(String, String)> = Vec::new();
    let mut pos = start;
    loop {
        let eol = find_from(bytes, b"\r\n", pos)
            .ok_or_else(|| mime_err(MimeErrorKind::TruncatedPart, pos, "header section is not terminated"))?;
        let line = &bytes[pos..eol];
        if line.is_empty() {
            return Ok(HeaderBlock { headers, end: eol + 2 });
        }
        let text = std::str::from_utf8(line).map_err(|_| mime_err(MimeErrorKind::BadHeader, pos, "header is not UTF-8"))?;
        if text.starts_with([' ', '\t']) {
            let last = headers
                .last_mut()
                .ok_or_else(|| mime_err(MimeErrorKind::BadHeader, pos, "continuation without a header"))?;
            last.1.push(' ');
            last.1.push_str(text.trim());
        } else {
            let (name, value) =
                text.split_once(':').ok_or_else(|| mime_err(MimeErrorKind::BadHeader, pos, "header line lacks ':'"))?;
            headers.push((name.to_string(), value.strip_prefix(' ').unwrap_or(value).to_string()));
        }
        pos = eol + 2;
    }
}

fn header<'h>(headers: &'h [(String, String)], name: &str) -> Option<&'h str> {
    headers.iter().find(|(n, _)| n.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
}

/// Extracts a `key=value` or `key="value"` parameter from a header value.
fn param(value: &str, key: &str) -> Option<String> {
    let mut rest = value;
    while let Some(semi) = rest.find(';') {
        rest = &rest[semi + 1..];
        let item = rest.trim_start();
        let Some((k, v)) = item.split_once('=') else { continue };
        if !k.trim().eq_ignore_ascii_case(key) {
            continue;
        }
        let v = v.trim_start();
        return Some(match v.strip_prefix('"') {
            Some(quoted) => quoted.split('"').next().unwrap_or("").to_string(),
            None => v.split(';').next().unwrap_or("").trim().to_string(),
        });
    }
    None
}

fn strip_angle(id: &str) -> &str {
    let id = id.trim();
    id.strip_prefix('<').and_then(|s| s.strip_suffix('>')).unwrap_or(id)
}

/// Parses `.mms` bytes back into an envelope.
pub fn decapsulate(bytes: &[u8]) -> Result<MmsEnvelope, MimeError> {
    let top = read_headers(bytes, 0)?;
    let mut transport_headers = Vec::new();
    let mut content_type = None;
    for (name, value) in top.headers {
        if name.eq_ignore_ascii_case("Content-Type") {
            content_type = Some(value);
        } else {
            transport_headers.push((name, value));
        }
    }
    let content_type =
        content_type.ok_or_else(|| mime_err(MimeErrorKind::MissingBoundary, 0, "no Content-Type header"))?;
    if !content_type.trim_start().to_ascii_lowercase().starts_with("multipart/related") {
        return Err(mime_err(MimeErrorKind::MissingBoundary, 0, format!("not multipart/related: {content_type}")));
    }
    let boundary = param(&content_type, "boundary")
        .filter(|b| !b.is_empty())
        .ok_or_else(|| mime_err(MimeErrorKind::MissingBoundary, 0, "Content-Type has no boundary"))?;
    let start_id = param(&content_type, "start")
        .map(|s| strip_angle(&s).to_string())
        .ok_or_else(|| mime_err(MimeErrorKind::MissingStart, 0, "Content-Type has no start parameter"))?;

    let opener = format!("--{boundary}");
    let delimiter = format!("\r\n--{boundary}");
    // first delimiter: at the body start or after a preamble line
    let mut pos = if bytes[top.end..].starts_with(opener.as_bytes()) {
        top.end + opener.len()
    } else {
        find_from(bytes, delimiter.as_bytes(), top.end)
            .map(|p| p + delimiter.len())
            .ok_or_else(|| mime_err(MimeErrorKind::TruncatedPart, top.end, "no opening boundary"))?
    };

    let mut parts: Vec<MimePart> = Vec::new();
    let mut ids = HashSet::new();
    loop {
        if bytes[pos..].starts_with(b"--") {
            break;
        }
        if !bytes[pos..].starts_with(b"\r\n") {
            return Err(mime_err(MimeErrorKind::TruncatedPart, pos, "boundary line is not followed by CRLF"));
        }
        let part_start = pos + 2;
        let block = read_headers(bytes, part_start)?;
        let body_end = find_from(bytes, delimiter.as_bytes(), block.end)
            .ok_or_else(|| mime_err(MimeErrorKind::TruncatedPart, block.end, "part is not closed by a boundary"))?;
        let raw = &bytes[block.end..body_end];

        let content_type = header(&block.headers, "Content-Type").unwrap_or("text/plain").trim().to_string();
        let content_id = header(&block.headers, "Content-ID")
            .map(|v| strip_angle(v).to_string())
            .filter(|v| !v.is_empty())
            .ok_or_else(|| mime_err(MimeErrorKind::BadHeader, part_start, "part has no Content-ID"))?;
        if !ids.insert(content_id.clone()) {
            return Err(mime_err(
                MimeErrorKind::DuplicateContentId,
                part_start,
                format!("Content-ID <{content_id}> repeats"),
            ));
        }
        let encoding = header(&block.headers, "Content-Transfer-Encoding").unwrap_or("7bit").trim().to_ascii_lowercase();
        let (transfer_encoding, body) = match encoding.as_str() {
            "base64" => {
                let compact: Vec<u8> = raw.iter().copied().filter(|b| !b.is_ascii_whitespace()).collect();
                let decoded = STANDARD
                    .decode(compact)
                    .map_err(|e| mime_err(MimeErrorKind::BadBase64, block.end, e.to_string()))?;
                (TransferEncoding::Base64, decoded)
            }
            "7bit" | "8bit" | "binary" => (TransferEncoding::SevenBit, raw.to_vec()),
            other => {
                return Err(mime_err(MimeErrorKind::BadHeader, part_start, format!("unsupported transfer encoding {other}")))
            }
        };
        parts.push(MimePart { content_type, content_id, transfer_encoding, body });
        pos = body_end + delimiter.len();
    }
    if !parts.iter().any(|p| p.content_id == start_id) {
        return Err(mime_err(MimeErrorKind::MissingStart, 0, format!("no part has Content-ID <{start_id}>")));
    }
    Ok(MmsEnvelope { transport_headers, start_id, parts, boundary })
}

/// Result of matching a tree's `src` references against envelope parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolution<'a> {
    pub bound: Vec<(&'a MediaItem, &'a MimePart)>,
    pub unbound: Vec<Violation>,
}

/// Binds each media `src` to the part with the same Content-ID. A `cid:`
/// prefix on the reference is ignored.
pub fn resolve_media<'a>(env: &'a MmsEnvelope, tree: &'a SmilTree) -> Resolution<'a> {
    let mut res = Resolution { bound: Vec::new(), unbound: Vec::new() };
    for (p, par) in tree.pars.iter().enumerate() {
        for (m, item) in par.media.iter().enumerate() {
            let id = item.src.strip_prefix("cid:").unwrap_or(&item.src);
            match env.part(id) {
                Some(part) => res.bound.push((item, part)),
                None => res.unbound.push(Violation {
                    code: ViolationCode::UnboundSrc,
                    path: format!("pars[{p}].media[{m}]"),
                    detail: format!("src {:?} matches no part", item.src),
                }),
            }
        }
    }
    res
}
