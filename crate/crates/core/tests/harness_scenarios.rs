mod common;

use std::collections::BTreeMap;

use common::{fixed, mock_worker, scenario};
use fogdetect::harness::{
    client_inject, compare_report, run_scenario, suite_scenario, write_outcome, LinkModel, PayloadSpec, Scenario,
    ScenarioError, SimOutcome, Stall, SuiteParams,
};
use fogdetect::metrics::Direction;
use fogdetect::preprocess::Mode;
use fogdetect::worker::DetectorSpec;

const PAYLOAD: usize = 10_000;

fn declared(sc: &mut Scenario) {
    sc.payload = PayloadSpec::Declared {
        width: 64,
        height: 48,
        bytes: PAYLOAD,
        rescaled_bytes: None,
    };
}

/// One leg on the LAN: 2 ms plus size at 12.5 MB/s, rounded to the µs.
fn lan_us(bytes: usize) -> u64 {
    let exact_ns = 2_000_000 + bytes as u64 * 80; // 80 ns per byte
    (exact_ns + 500) / 1000
}

#[test]
fn closed_form_response_for_single_fog_worker() {
    let mut sc = scenario("fog1", 10.0, 600.0, vec![mock_worker("fog-1", fixed(100.0), LinkModel::LAN)]);
    declared(&mut sc);
    let out = run_scenario(&sc).unwrap();
    assert_eq!(out.report.completed, 100);
    assert_eq!(out.report.fpm, 10.0);

    for (k, (image_id, resp)) in out.responses_ms.iter().enumerate() {
        let task_id = format!("t{k:06}");
        let request = format!(
            "POST /v1/detect HTTP/1.1\r\nhost: master\r\ncontent-length: {PAYLOAD}\r\n\
             x-image-id: {image_id}\r\nx-mode: accuracy\r\nx-width: 64\r\nx-height: 48\r\nx-format: opaque\r\n\r\n"
        )
        .len()
            + PAYLOAD;
        let task = 9 + format!(
            r#"{{"task_id":"{task_id}","image_id":"{image_id}","mode":"accuracy","attempt":1,"width":64,"height":48,"format":"opaque"}}"#
        )
        .len()
            + PAYLOAD;
        let result = 9 + format!(r#"{{"task_id":"{task_id}","worker_id":"fog-1","detections":[],"compute_ms":100.0}}"#).len();
        let at_master_us = lan_us(task) + 100_000 + lan_us(result);
        let total_ms = serde_json::to_string(&(at_master_us as f64 / 1000.0)).unwrap();
        let body = format!(
            r#"{{"image_id":"{image_id}","detections":[],"timing":{{"total_ms":{total_ms},"compute_ms":100.0,"worker_id":"fog-1"}}}}"#
        );
        let response = format!(
            "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n",
            body.len()
        )
        .len()
            + body.len();
        let want_us = lan_us(request) + at_master_us + lan_us(response);
        assert_eq!(resp.unwrap(), want_us as f64 / 1000.0, "{image_id}");

        let sizes: BTreeMap<Direction, u64> = out
            .ledger
            .entries
            .iter()
            .filter(|e| e.image_id == *image_id)
            .map(|e| (e.direction, e.bytes))
            .collect();
        assert_eq!(sizes[&Direction::GatewayToMaster], request as u64);
        assert_eq!(sizes[&Direction::MasterToWorker], task as u64);
        assert_eq!(sizes[&Direction::WorkerToMaster], result as u64);
        assert_eq!(sizes[&Direction::MasterToGateway], response as u64);
    }
    assert!(out.ledger.completions.iter().all(|c| c.compute_ms == 100.0));
}

#[test]
fn zero_duration_run_is_empty() {
    let sc = scenario("nothing", 10.0, 0.0, vec![mock_worker("fog-1", fixed(100.0), LinkModel::LAN)]);
    let out = run_scenario(&sc).unwrap();
    assert!(out.ledger.entries.is_empty());
    assert!(out.ledger.completions.is_empty());
    let r = &out.report;
    assert_eq!((r.injected, r.completed, r.failed), (0, 0, 0));
    assert_eq!(r.fpm, 0.0);
    assert_eq!((r.mean_response_ms, r.jitter_ms, r.mean_compute_ms), (None, None, None));
    assert_eq!((r.gateway_bytes, r.total_bytes), (0, 0));
    assert_eq!(r.energy_total_j, 0.0);
}

#[test]
fn near_and_far_cloud_differ_by_two_link_legs() {
    let run = |latency_ms: f64| {
        let mut sc = scenario("cloud", 10.0, 120.0, vec![mock_worker("c", fixed(400.0), LinkModel::new(latency_ms, 2.5e6))]);
        declared(&mut sc);
        run_scenario(&sc).unwrap().report.mean_response_ms.unwrap()
    };
    let (near, far) = (run(50.0), run(150.0));
    // the gateway-master hop is LAN in both; only the task and result legs change
    assert!((far - near - 200.0).abs() < 1e-9, "near {near} far {far}");
}

fn csv_bytes(out: &SimOutcome) -> BTreeMap<String, Vec<u8>> {
    let dir = tempfile::tempdir().unwrap();
    write_outcome(dir.path(), out).unwrap();
    std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

#[test]
fn equal_seeds_give_identical_files() {
    let params = SuiteParams::default();
    for mode in [Mode::HighAccuracy, Mode::LowLatency] {
        let sc = suite_scenario(&params, "fog2", mode);
        let (a, b) = (run_scenario(&sc).unwrap(), run_scenario(&sc).unwrap());
        assert_eq!(csv_bytes(&a), csv_bytes(&b));
    }
    let mut other = suite_scenario(&params, "fog1", Mode::HighAccuracy);
    let base = run_scenario(&other).unwrap();
    other.seed += 1;
    assert_ne!(run_scenario(&other).unwrap().ledger.completions, base.ledger.completions);
}

fn assert_conserved(out: &SimOutcome) {
    let r = &out.report;
    assert_eq!(r.injected, r.completed + r.failed, "{}", r.scenario);
    assert_eq!(out.ledger.completions.len(), r.injected);
    let mut answers: BTreeMap<&str, usize> = BTreeMap::new();
    for e in out.ledger.entries.iter().filter(|e| e.direction == Direction::MasterToGateway) {
        *answers.entry(e.image_id.as_str()).or_default() += 1;
    }
    assert_eq!(answers.len(), r.injected);
    assert!(answers.values().all(|&n| n == 1));
    assert!(out.ledger.entries.iter().all(|e| e.recv_time_us >= e.send_time_us));
}

#[test]
fn every_submission_is_answered_once() {
    let params = SuiteParams::default();
    let mut runs = Vec::new();
    for t in fogdetect::harness::TOPOLOGIES {
        runs.push(suite_scenario(&params, t, Mode::LowLatency));
    }
    let mut crash = mock_worker("a", fixed(1200.0), LinkModel::LAN);
    crash.fail_at_s = Some(12.0);
    runs.push(scenario("crash", 60.0, 40.0, vec![crash, mock_worker("b", fixed(700.0), LinkModel::LAN)]));
    let mut stall = mock_worker("a", fixed(300.0), LinkModel::LAN);
    stall.stall = Some(Stall { from_s: 3.0, to_s: 12.0 });
    runs.push(scenario("stall", 20.0, 30.0, vec![stall, mock_worker("b", fixed(300.0), LinkModel::LAN)]));
    runs.push(scenario("empty", 10.0, 30.0, vec![]));
    let mut lonely = mock_worker("a", fixed(100.0), LinkModel::LAN);
    lonely.fail_at_s = Some(5.0);
    runs.push(scenario("orphaned", 30.0, 30.0, vec![lonely]));
    for sc in &runs {
        assert_conserved(&run_scenario(sc).unwrap());
    }
}

#[test]
fn missing_fixture_is_a_startup_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut w = mock_worker("fog-1", fixed(0.0), LinkModel::LAN);
    w.detector = DetectorSpec::Tensorfile {
        fixtures: dir.path().to_path_buf(),
        thresholds: Default::default(),
    };
    let sc = scenario("fixtures", 10.0, 60.0, vec![w.clone()]);
    match run_scenario(&sc) {
        Err(ScenarioError::MissingFixture { image_id, .. }) => assert_eq!(image_id, "img-00000"),
        other => panic!("expected a missing-fixture error, got {other:?}"),
    }
    w.detector = DetectorSpec::Tensorfile {
        fixtures: dir.path().join("absent"),
        thresholds: Default::default(),
    };
    assert!(matches!(
        run_scenario(&scenario("nodir", 10.0, 60.0, vec![w])),
        Err(ScenarioError::Detector { .. })
    ));
}

#[test]
fn injection_schedule() {
    let at: Vec<u64> = client_inject(10.0, 60.0).unwrap().iter().map(|s| s.at_us).collect();
    assert_eq!(at, (0..10).map(|k| k * 6_000_000).collect::<Vec<_>>());
    assert_eq!(client_inject(1.0, 59.0).unwrap().len(), 1);
    assert_eq!(client_inject(10.0, 600.0).unwrap().len(), 100);
    assert!(client_inject(-1.0, 10.0).is_err());
}

#[test]
fn compare_identical_reports_has_zero_deltas() {
    let sc = suite_scenario(&SuiteParams::default(), "fog1", Mode::HighAccuracy);
    let a = run_scenario(&sc).unwrap().report;
    let b = run_scenario(&sc).unwrap().report;
    let mut twin = b.clone();
    twin.scenario = "fog1-accuracy-rerun".into();
    let cmp = compare_report(&[a, twin]);
    assert!(!cmp.deltas.is_empty());
    for d in &cmp.deltas {
        assert_eq!((d.mean_response_ms, d.jitter_ms, d.gateway_bytes, d.energy_total_j), (0.0, 0.0, 0, 0.0));
    }
}

#[test]
fn compare_flags_link_and_mode_orderings() {
    let params = SuiteParams::default();
    let reports: Vec<_> = [("fog1", Mode::HighAccuracy), ("cloud-near", Mode::HighAccuracy), ("fog1", Mode::LowLatency)]
        .iter()
        .map(|(t, m)| run_scenario(&suite_scenario(&params, t, *m)).unwrap().report)
        .collect();
    let cmp = compare_report(&reports);
    assert!(cmp.all_consistent(), "{}", cmp.summary());
    assert!(cmp.checks.iter().any(|c| c.left == "fog1-accuracy" && c.right == "cloud-near-accuracy"));
    assert!(cmp.checks.iter().any(|c| c.left == "fog1-latency" && c.right == "fog1-accuracy"));

    // a cloud node on the LAN with the fog compute model beats a slow fog node
    let mut swapped = params.clone();
    swapped.cloud_near = swapped.lan;
    std::mem::swap(&mut swapped.fog_latency, &mut swapped.cloud_latency);
    let bad: Vec<_> = ["fog1", "cloud-near"]
        .iter()
        .map(|t| run_scenario(&suite_scenario(&swapped, t, Mode::LowLatency)).unwrap().report)
        .collect();
    let cmp = compare_report(&bad);
    assert!(cmp.contradictions().count() > 0, "{}", cmp.summary());
}

#[test]
fn scenario_files_in_examples_parse_and_run() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/scenarios");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|x| x == "toml") {
            let sc = Scenario::read(&path).unwrap();
            let out = run_scenario(&sc).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_conserved(&out);
            seen += 1;
        }
    }
    assert!(seen >= 3);
}

#[test]
fn scenario_toml_roundtrip() {
    let mut w = mock_worker("fog-1", fixed(100.0), LinkModel::LAN);
    w.stall = Some(Stall { from_s: 1.0, to_s: 2.0 });
    w.fail_at_s = Some(9.0);
    let sc = scenario("rt", 10.0, 60.0, vec![w]);
    assert_eq!(Scenario::from_toml(&sc.to_toml()).unwrap(), sc);
    assert!(Scenario::from_toml("name = 'x'\nunknown = 1").is_err());
}
