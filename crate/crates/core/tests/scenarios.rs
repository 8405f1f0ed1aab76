use std::path::{Path, PathBuf};
use std::time::Duration;

use mms_core::sim::{run_scenario, run_scenario_tcp, Happening, ScenarioReport, ScenarioScript};

fn script(name: &str) -> ScenarioScript {
    let path: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/scenarios").join(format!("{name}.json"));
    ScenarioScript::load(&path).unwrap()
}

fn sim(name: &str) -> ScenarioReport {
    let s = script(name);
    run_scenario(&s, s.net).unwrap_or_else(|e| panic!("{name}: {e}"))
}

const ALL: [&str; 6] = ["online", "offline_fifo", "expiry_strict", "delete_stored", "forward_offline", "never_registers"];

fn delivered(report: &ScenarioReport, to: &str) -> Vec<(u64, String)> {
    report
        .events
        .iter()
        .filter_map(|e| match &e.what {
            Happening::Delivered { to: t, label, .. } if t == to => Some((e.at_ms, label.clone())),
            _ => None,
        })
        .collect()
}

#[test]
fn every_fixture_passes_in_sim() {
    for name in ALL {
        let report = sim(name);
        assert!(report.expectations_checked > 0, "{name}");
        assert!(report.stats.conserved() && report.stats.store_balanced(), "{name}: {:?}", report.stats);
    }
}

#[test]
fn reports_are_byte_identical_across_runs() {
    for name in ALL {
        assert_eq!(sim(name).to_json(), sim(name).to_json(), "{name}");
    }
}

#[test]
fn offline_messages_arrive_in_order_at_registration() {
    let report = sim("offline_fifo");
    // register at 30000, one hop to the relay and one back
    let want: Vec<(u64, String)> = ["m1", "m2", "m3"].iter().map(|l| (30010, l.to_string())).collect();
    assert_eq!(delivered(&report, "bob"), want);
}

#[test]
fn forwarded_copy_names_the_forwarder() {
    let report = sim("forward_offline");
    let fwd = report.events.iter().find_map(|e| match &e.what {
        Happening::Delivered { to, from, forwarded_by, .. } if to == "carol" => Some((from.clone(), forwarded_by.clone())),
        _ => None,
    });
    assert_eq!(fwd, Some(("alice".into(), Some("bob".into()))));
}

#[test]
fn sim_and_tcp_agree() {
    for name in ALL {
        let s = script(name);
        let a = run_scenario(&s, s.net).unwrap();
        let b = run_scenario_tcp(&s, Duration::from_millis(40)).unwrap_or_else(|e| panic!("{name} over tcp: {e}"));
        assert_eq!(a.outcomes(), b.outcomes(), "{name}");
        assert_eq!(
            (a.stats.counters.accepted, a.stats.counters.expired, a.stats.counters.deleted),
            (b.stats.counters.accepted, b.stats.counters.expired, b.stats.counters.deleted),
            "{name}"
        );
    }
}

#[test]
fn lossy_network_stays_deterministic() {
    let mut s = script("offline_fifo");
    s.net.drop_per_million = 200_000;
    // expectations may fail under loss; the run itself must be reproducible
    let a = format!("{:?}", run_scenario(&s, s.net).map(|r| r.to_json()));
    let b = format!("{:?}", run_scenario(&s, s.net).map(|r| r.to_json()));
    assert_eq!(a, b);
}
