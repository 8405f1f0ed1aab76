mod common;

use mms_core::mime::{decapsulate, encapsulate, MimeErrorKind, MimePart, MmsEnvelope};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn envelopes_round_trip_without_premature_boundaries(seed in any::<u64>()) {
        let seeded = common::default_generated_boundary();
        let env = common::envelope(&mut common::rng(seed), 4096, &seeded);
        let r = common::check_mime(&env);
        prop_assert!(r.is_ok(), "{}", r.unwrap_err());
    }

    #[test]
    fn binary_bodies_decode_exactly(body in prop::collection::vec(any::<u8>(), 0..20_000)) {
        let env = MmsEnvelope {
            transport_headers: vec![],
            start_id: "s".into(),
            parts: vec![MimePart::new("application/smil", "s", b"<smil/>".to_vec()), MimePart::new("image/png", "b.png", body.clone())],
            boundary: String::new(),
        };
        let back = decapsulate(&encapsulate(&env).unwrap()).unwrap();
        prop_assert_eq!(&back.parts[1].body, &body);
    }

    #[test]
    fn decapsulate_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..600)) {
        let _ = decapsulate(&bytes);
    }
}

#[test]
fn one_mebibyte_binary_body() {
    let body: Vec<u8> = (0..1 << 20).map(|i: u32| (i.wrapping_mul(2_654_435_761) >> 13) as u8).collect();
    let env = MmsEnvelope {
        transport_headers: vec![("From".into(), "a".into())],
        start_id: "s".into(),
        parts: vec![MimePart::new("application/smil", "s", b"<smil/>".to_vec()), MimePart::new("video/3gpp", "v.3gp", body.clone())],
        boundary: String::new(),
    };
    common::check_mime(&env).unwrap();
}

#[test]
fn truncated_input_reports_offset() {
    let env = MmsEnvelope {
        transport_headers: vec![],
        start_id: "s".into(),
        parts: vec![MimePart::new("application/smil", "s", b"<smil/>".to_vec())],
        boundary: "b1".into(),
    };
    let bytes = encapsulate(&env).unwrap();
    let cut = &bytes[..bytes.len() - 8];
    let err = decapsulate(cut).unwrap_err();
    assert_eq!(err.kind, MimeErrorKind::TruncatedPart);
    assert!(err.offset <= cut.len());
}
