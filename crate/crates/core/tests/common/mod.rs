//! Random generators and reference models shared by the property tests and
//! the acceptance suite.
#![allow(dead_code)]

pub mod relay_model;

use mms_core::layout::DeviceProfile;
use mms_core::mime::{MimePart, MmsEnvelope, TransferEncoding};
use mms_core::smil::{Dimension, Layout, MediaItem, MediaKind, Par, Region, SmilTree};
use mms_core::transport::{Command, Pdu, StatusCode};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

pub use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as TestRng;

pub fn rng(seed: u64) -> TestRng {
    TestRng::seed_from_u64(seed)
}

fn word(rng: &mut TestRng, alphabet: &[u8], len: std::ops::RangeInclusive<usize>) -> String {
    let n = rng.gen_range(len);
    (0..n).map(|_| *alphabet.choose(rng).unwrap() as char).collect()
}

/// Attribute text, including the characters the serializer must escape.
fn attr_text(rng: &mut TestRng) -> String {
    word(rng, b"abcxyz019._-/ &<>\"", 1..=12)
}

fn dimension(rng: &mut TestRng, axis: u32, positive: bool) -> Dimension {
    let lo = u32::from(positive);
    if rng.gen_bool(0.5) {
        Dimension::percent(rng.gen_range(lo..=100))
    } else {
        Dimension::px(rng.gen_range(lo..=axis.max(1) + 40))
    }
}

pub fn layout(rng: &mut TestRng) -> Layout {
    let root_width = rng.gen_bool(0.8).then(|| rng.gen_range(16..=800));
    let root_height = rng.gen_bool(0.8).then(|| rng.gen_range(16..=800));
    let n = rng.gen_range(0..=4);
    let regions = (0..n)
        .map(|i| {
            let (w, h) = (root_width.unwrap_or(176), root_height.unwrap_or(208));
            Region {
                id: format!("r{i}{}", word(rng, b"abcXYZ_", 0..=3)),
                left: dimension(rng, w, false),
                top: dimension(rng, h, false),
                width: dimension(rng, w, true),
                height: dimension(rng, h, true),
                z_index: rng.gen_range(-3..=3),
            }
        })
        .collect();
    Layout { root_width, root_height, regions }
}

/// A tree that passes `validate`: up to 5 pars, up to 4 media per par with
/// distinct kinds, durations up to 10 s, pixel and percent dimensions.
pub fn valid_tree(rng: &mut TestRng) -> SmilTree {
    let layout = layout(rng);
    let pars = (0..rng.gen_range(0..=5))
        .map(|_| {
            let mut kinds = MediaKind::ALL.to_vec();
            kinds.shuffle(rng);
            kinds.truncate(rng.gen_range(0..=4));
            let media = kinds
                .into_iter()
                .map(|kind| {
                    let region_id = if kind.is_visual() && !layout.regions.is_empty() && rng.gen_bool(0.8) {
                        Some(layout.regions.choose(rng).unwrap().id.clone())
                    } else {
                        None
                    };
                    MediaItem {
                        kind,
                        src: attr_text(rng),
                        region_id,
                        begin_ms: if rng.gen_bool(0.5) { 0 } else { rng.gen_range(0..=10_000) },
                        dur_ms: rng.gen_bool(0.6).then(|| rng.gen_range(1..=10_000)),
                        alt: rng.gen_bool(0.2).then(|| attr_text(rng)),
                    }
                })
                .collect();
            Par { dur_ms: rng.gen_bool(0.6).then(|| rng.gen_range(1..=10_000)), media }
        })
        .collect();
    SmilTree { layout, pars }
}

pub fn device(rng: &mut TestRng) -> DeviceProfile {
    DeviceProfile::new("random", rng.gen_range(16..=640), rng.gen_range(16..=640)).unwrap()
}

/// Bytes that are 7bit clean: ASCII without bare CR or LF.
fn seven_bit_body(rng: &mut TestRng, max: usize) -> Vec<u8> {
    let mut raw = vec![0u8; rng.gen_range(0..=max)];
    rng.fill_bytes(&mut raw);
    let mut out = Vec::with_capacity(raw.len() + raw.len() / 16);
    for b in raw {
        // about one byte in twenty becomes a line break
        if b < 13 {
            out.extend_from_slice(b"\r\n");
        } else {
            out.push(0x20 + b % 95);
        }
    }
    out
}

/// An envelope with a SMIL start part and up to 5 media parts. Bodies up to
/// `max_body` bytes; each body has a chance of embedding `--{seeded}`.
pub fn envelope(rng: &mut TestRng, max_body: usize, seeded: &str) -> MmsEnvelope {
    let mut parts = vec![MimePart::new("application/smil", "smil", seven_bit_body(rng, 200))];
    for i in 0..rng.gen_range(0..=5) {
        let (content_type, text) = *[("image/jpeg", false), ("audio/amr", false), ("text/plain", true)].choose(rng).unwrap();
        let mut body = if text && rng.gen_bool(0.7) {
            seven_bit_body(rng, max_body)
        } else {
            let mut b = vec![0u8; rng.gen_range(0..=max_body)];
            rng.fill_bytes(&mut b);
            b
        };
        if rng.gen_bool(0.3) && !seeded.is_empty() {
            let at = rng.gen_range(0..=body.len());
            body.splice(at..at, format!("\r\n--{seeded}\r\n").into_bytes());
        }
        let mut part = MimePart::new(content_type, format!("p{i}.{}", word(rng, b"abc", 1..=3)), body);
        if part.transfer_encoding == TransferEncoding::SevenBit && rng.gen_bool(0.2) {
            part.transfer_encoding = TransferEncoding::Base64;
        }
        parts.push(part);
    }
    parts.shuffle(rng);
    let headers = [("From", "alice"), ("To", "bob"), ("Subject", "hi there"), ("X-Custom", "v: 1")];
    let transport_headers = headers
        .iter()
        .filter(|_| rng.gen_bool(0.7))
        .map(|(n, v)| (n.to_string(), v.to_string()))
        .collect();
    MmsEnvelope { transport_headers, start_id: "smil".into(), parts, boundary: String::new() }
}

fn header_name(rng: &mut TestRng) -> String {
    word(rng, b"ABCXYZabcxyz-_019", 1..=12)
}

fn header_value(rng: &mut TestRng) -> String {
    word(rng, b"abc xyz:019<>@.\t", 0..=20)
}

/// A PDU that passes `Pdu::check`.
pub fn valid_pdu(rng: &mut TestRng) -> Pdu {
    let command = *Command::ALL.choose(rng).unwrap();
    let mut pdu = Pdu::new(command, rng.gen());
    for _ in 0..rng.gen_range(0..=4) {
        pdu = pdu.with_header(&header_name(rng), header_value(rng));
    }
    if command == Command::Status {
        pdu.set_header("X-Mms-Status", StatusCode::ALL.choose(rng).unwrap().token());
        pdu.set_header("X-Mms-Orig-Txn", rng.gen::<u32>().to_string());
    }
    let needs_body = matches!(command, Command::Send | Command::Notify);
    if needs_body || rng.gen_bool(0.3) {
        let n = rng.gen_range(1..=300);
        pdu = pdu.with_body((0..n).map(|_| rng.gen()).collect());
    }
    pdu
}

// ---------------------------------------------------------------------------
// Oracle checks. Each returns a description of the first disagreement.

/// parse(tokenize(serialize(t))) == t and serialize is a fixpoint.
pub fn check_smil_round_trip(tree: &SmilTree) -> Result<(), String> {
    use mms_core::syntax::{parse, serialize, tokenize};
    let text = serialize(tree).map_err(|e| format!("serialize: {e}"))?;
    let tokens = tokenize(&text).map_err(|e| format!("tokenize: {e}\n{text}"))?;
    let back = parse(&tokens).map_err(|e| format!("parse: {e}\n{text}"))?;
    if &back != tree {
        return Err(format!("round trip changed the tree\n{text}\n{tree:?}\n{back:?}"));
    }
    let again = serialize(&back).map_err(|e| format!("re-serialize: {e}"))?;
    if again != text {
        return Err(format!("serializer is not a fixpoint\n{text}\n{again}"));
    }
    Ok(())
}

/// Effective par duration computed from the raw attributes.
fn raw_par_duration(par: &Par) -> u64 {
    if let Some(d) = par.dur_ms {
        return d;
    }
    if !par.media.is_empty() && par.media.iter().all(|m| m.dur_ms.is_some()) {
        return par.media.iter().map(|m| m.begin_ms + m.dur_ms.unwrap()).max().unwrap();
    }
    5000
}

/// Compares `active_set` against a simulator that steps one millisecond at
/// a time and decides liveness from begin/dur arithmetic. Returns the number
/// of ticks checked.
pub fn check_tick_oracle(tree: &SmilTree) -> Result<u64, String> {
    use mms_core::scheduler::build_plan;
    let plan = build_plan(tree).map_err(|e| e.to_string())?;
    let durations: Vec<u64> = tree.pars.iter().map(raw_par_duration).collect();
    let total: u64 = durations.iter().sum();
    if plan.total_ms != total {
        return Err(format!("total {} but durations sum to {total}", plan.total_ms));
    }
    // paint rank: region z-index, then document order
    let z: Vec<Vec<i32>> = tree
        .pars
        .iter()
        .map(|par| {
            let key = |i: usize| {
                let m = &par.media[i];
                let region = if m.kind.is_visual() { m.region_id.as_deref() } else { None };
                let zi = region.and_then(|r| tree.layout.regions.iter().find(|g| g.id == r)).map_or(0, |g| g.z_index);
                (zi, i)
            };
            (0..par.media.len())
                .map(|i| (0..par.media.len()).filter(|&j| key(j) < key(i)).count() as i32)
                .collect()
        })
        .collect();

    let mut par = 0;
    let mut par_start = 0;
    let mut expected_events = 1;
    for t in 0..total {
        while t >= par_start + durations[par] {
            par_start += durations[par];
            par += 1;
        }
        let local = t - par_start;
        let d = durations[par];
        let mut want: Vec<(usize, usize, Option<String>, i32)> = Vec::new();
        for (i, m) in tree.pars[par].media.iter().enumerate() {
            let own = m.dur_ms.unwrap_or(d.saturating_sub(m.begin_ms));
            let stop = (m.begin_ms + own).min(d);
            if m.begin_ms <= local && local < stop {
                let region = if m.kind.is_visual() { m.region_id.clone() } else { None };
                want.push((par, i, region, z[par][i]));
            }
        }
        want.sort_by_key(|w| (w.3, w.0, w.1));
        let got: Vec<_> = plan
            .active_set(t)
            .map_err(|e| format!("t={t}: {e}"))?
            .into_iter()
            .map(|a| (a.par_index, a.media_index, a.region_id, a.z))
            .collect();
        if got != want {
            return Err(format!("t={t}: active {got:?}, simulator {want:?}"));
        }
        if got.len() > 5 {
            return Err(format!("t={t}: {} media live at once", got.len()));
        }
    }
    if total > 0 && plan.active_set(total).is_ok() {
        return Err("active_set accepted t = total".into());
    }
    for (p, par) in tree.pars.iter().enumerate() {
        expected_events += 2;
        for m in &par.media {
            if m.begin_ms < durations[p] {
                expected_events += 2;
            }
        }
    }
    if plan.events.len() != expected_events {
        return Err(format!("{} events, expected {expected_events}", plan.events.len()));
    }
    Ok(total)
}

/// Containment, pixel-only output and idempotence of `fit`.
pub fn check_fit(tree: &SmilTree, device: &DeviceProfile) -> Result<(), String> {
    use mms_core::layout::fit;
    use mms_core::smil::validate;
    let fitted = fit(tree, device);
    let (w, h) = (device.screen_width, device.screen_height);
    if fitted.layout.root_width != Some(w) || fitted.layout.root_height != Some(h) {
        return Err(format!("root {:?}x{:?} on a {w}x{h} device", fitted.layout.root_width, fitted.layout.root_height));
    }
    for r in &fitted.layout.regions {
        let dims = [r.left, r.top, r.width, r.height];
        if !dims.iter().all(Dimension::is_pixels) {
            return Err(format!("region {} keeps a percent dimension", r.id));
        }
        if r.left.value + r.width.value > w || r.top.value + r.height.value > h || r.width.value == 0 || r.height.value == 0 {
            return Err(format!("region {} = {:?} escapes {w}x{h}", r.id, dims));
        }
    }
    let violations = validate(&fitted);
    if !violations.is_empty() {
        return Err(format!("fitted tree invalid: {violations:?}"));
    }
    if fit(&fitted, device) != fitted {
        return Err("fit is not idempotent".into());
    }
    Ok(())
}

/// Boundary used by the default-seeded generator when nothing collides.
pub fn default_generated_boundary() -> String {
    use mms_core::mime::{decapsulate, encapsulate};
    let env = MmsEnvelope {
        transport_headers: Vec::new(),
        start_id: "s".into(),
        parts: vec![MimePart::new("application/smil", "s", Vec::new())],
        boundary: String::new(),
    };
    decapsulate(&encapsulate(&env).unwrap()).unwrap().boundary
}

fn count(haystack: &[u8], needle: &[u8]) -> usize {
    memchr::memmem::find_iter(haystack, needle).count()
}

/// Byte-exact round trip and boundary safety of one envelope.
pub fn check_mime(env: &MmsEnvelope) -> Result<(), String> {
    use mms_core::mime::{decapsulate, encapsulate};
    let bytes = encapsulate(env).map_err(|e| format!("encapsulate: {e}"))?;
    let back = decapsulate(&bytes).map_err(|e| format!("decapsulate: {e}"))?;
    let mut want = env.clone();
    want.boundary = back.boundary.clone();
    if back != want {
        return Err("decapsulate(encapsulate(e)) != e".into());
    }
    if encapsulate(&back).map_err(|e| e.to_string())? != bytes {
        return Err("re-encapsulating the decoded envelope changed the bytes".into());
    }
    // the boundary line appears once per part plus the closer, nowhere else
    let delimiter = format!("--{}", back.boundary);
    let n = count(&bytes, delimiter.as_bytes());
    if n != env.parts.len() + 1 {
        return Err(format!("boundary {delimiter:?} appears {n} times for {} parts", env.parts.len()));
    }
    for p in &env.parts {
        if count(&p.body, back.boundary.as_bytes()) > 0 {
            return Err(format!("boundary occurs inside part {}", p.content_id));
        }
    }
    // 7bit bodies are CRLF-clean and base64 is wrapped with CRLF, so a bare
    // LF anywhere is a structural bug
    if memchr::memchr_iter(b'\n', &bytes).any(|i| i == 0 || bytes[i - 1] != b'\r') {
        return Err("bare LF in the output".into());
    }
    Ok(())
}

/// Round trip of one valid PDU through the frame codec.
pub fn check_frame_round_trip(pdu: &Pdu) -> Result<Vec<u8>, String> {
    use mms_core::transport::{decode_frame, encode_frame};
    let bytes = encode_frame(pdu).map_err(|e| format!("encode: {e}"))?;
    let back = decode_frame(&bytes).map_err(|e| format!("decode: {e}"))?;
    if &back != pdu {
        return Err(format!("{pdu:?} came back as {back:?}"));
    }
    Ok(bytes)
}

/// Flips one byte of a valid frame. The decoder must either reject it or
/// return a PDU that encodes back to exactly the mutated bytes.
pub fn check_mutation(bytes: &[u8], at: usize, value: u8) -> Result<bool, String> {
    use mms_core::transport::{decode_frame, encode_frame};
    let mut mutated = bytes.to_vec();
    mutated[at] = value;
    match std::panic::catch_unwind(|| decode_frame(&mutated)) {
        Err(_) => Err(format!("decoder panicked on byte {at} = {value:#04x}")),
        Ok(Err(_)) => Ok(false),
        Ok(Ok(p)) => match encode_frame(&p) {
            Ok(again) if again == mutated => Ok(true),
            _ => Err(format!("byte {at} = {value:#04x} decoded to a non-canonical {p:?}")),
        },
    }
}
