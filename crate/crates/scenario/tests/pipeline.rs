//! Orchestration-level contracts that cut across modules: empty runs,
//! report rendering, the socket-backed demo path, and error annotation.

use qkdsim_scenario::{
    parse_scenario, presets, render_report, run, run_with, Report, ReportFormat, RunOptions,
    ScenarioError,
};

#[test]
fn zero_duration_scenario_yields_empty_valid_report() {
    let json = serde_json::json!({
        "name": "empty",
        "seed": 5,
        "duration_s": 0.0,
        "nodes": [{"id": "A"}, {"id": "B"}],
        "links": [{
            "id": "l1",
            "a": "A",
            "b": "B",
            "segments": [{"kind": "fiber", "length_m": 300.0, "loss_db": 0.1}],
            "protocol": {
                "type": "bb84_1decoy",
                "pulse_rate_hz": 625e6,
                "qber_z": 0.018,
                "qber_x": 0.027,
                "detector": {"efficiency": 0.25, "dead_time_s": 2e-5}
            }
        }],
        "gateways": [{"id": "g", "a": "A", "b": "B"}]
    });
    let scenario = parse_scenario(json.to_string().as_bytes()).unwrap();
    let report = run(&scenario).unwrap();
    assert_eq!(report.links[0].blocks, 0);
    assert_eq!(report.links[0].key_volume_bits, 0);
    assert!(report.gateways.is_empty(), "no gateway epochs at zero duration");
    // still schema-valid, parseable JSON
    let rendered = render_report(&report, ReportFormat::Json).unwrap();
    let parsed: Report = serde_json::from_slice(&rendered).unwrap();
    assert_eq!(parsed, report);
}

#[test]
fn json_report_render_is_a_fixpoint() {
    let scenario =
        parse_scenario(presets::preset("bbm92_fiber").unwrap().as_bytes()).unwrap();
    let report = run(&scenario).unwrap();
    let rendered = render_report(&report, ReportFormat::Json).unwrap();
    let parsed: Report = serde_json::from_slice(&rendered).unwrap();
    let re_rendered = render_report(&parsed, ReportFormat::Json).unwrap();
    assert_eq!(rendered, re_rendered);

    let text = render_report(&report, ReportFormat::Text).unwrap();
    let text = String::from_utf8(text).unwrap();
    assert_eq!(
        text.lines().filter(|l| l.starts_with("fiber2")).count(),
        1,
        "one row per link"
    );
}

#[test]
fn real_socket_demo_matches_in_process_outcome() {
    let json = presets::preset("combined_pqc").unwrap();
    let mut scenario = parse_scenario(json.as_bytes()).unwrap();
    // keep the socket run snappy
    scenario.duration_s = 600.0;
    let in_process = run(&scenario).unwrap();
    let socketed = run_with(&scenario, &RunOptions { real_sockets: true }).unwrap();
    assert!(in_process.gateways[0].demo_roundtrip_ok);
    assert!(socketed.gateways[0].demo_roundtrip_ok);
    assert_eq!(
        in_process.gateways[0].epochs_consumed,
        socketed.gateways[0].epochs_consumed
    );
    assert_eq!(socketed.gateways[0].decrypt_failures, 0);
    // links are untouched by the transport flag
    assert_eq!(in_process.links, socketed.links);
}

#[test]
fn runtime_errors_are_annotated_with_the_link() {
    // a CV link whose batch is far below the estimator minimum
    let json = serde_json::json!({
        "name": "tiny-batch",
        "seed": 9,
        "duration_s": 10.0,
        "nodes": [{"id": "A"}, {"id": "B"}],
        "links": [{
            "id": "cv-broken",
            "a": "A",
            "b": "B",
            "segments": [{"kind": "fiber", "length_m": 300.0, "loss_db": 0.1}],
            "protocol": {
                "type": "cv_gaussian",
                "modulation": "qpsk",
                "xi": 0.006,
                "detector_efficiency": 0.76,
                "symbol_rate_hz": 200e6,
                "batch_symbols": 100
            }
        }]
    });
    let scenario = parse_scenario(json.to_string().as_bytes()).unwrap();
    let err = run(&scenario).unwrap_err();
    match err {
        ScenarioError::LinkRuntime { link, .. } => assert_eq!(link, "cv-broken"),
        other => panic!("expected link-annotated error, got {other}"),
    }
}

#[test]
fn combined_pqc_gateway_runs_on_kdf_derived_keys() {
    let report = run(&parse_scenario(presets::preset("combined_pqc").unwrap().as_bytes()).unwrap())
        .unwrap();
    let combine = &report.kms.combines[0];
    assert_eq!(combine.starved, 0, "combine starved: {report:?}");
    assert_eq!(combine.executed, 60);
    let gw = &report.gateways[0];
    assert!(gw.demo_roundtrip_ok);
    assert_eq!(gw.state, "active");
    // 3600 s at 120 s rekey: epoch 0 + 30 rekeys
    assert_eq!(gw.epochs_consumed, 31);
    assert_eq!(report.kms.ledger.endpoint_mismatches, 0);
    assert_eq!(report.kms.ledger.double_delivery_attempts, 0);
}
