mod common;

use std::sync::Arc;

use common::{answer_script, frozen_options, Workspace};
use fairproof::client::{
    completion_body, ChatRequest, ClientError, EndpointClient, EndpointConfig, ExchangeOutcome, ExchangeRecord,
    SystemClock,
};
use fairproof::exec::Exec;
use fairproof::ledger::{read_ledger, RecordKind};
use fairproof::prompt::RenderedPrompt;
use fairproof::runner::{run_evaluation, RunOptions};
use fairproof::simulator::{script_from_ledger, serve, ResponseScript, SimulatorHandle, Step};

fn config(base_url: String) -> EndpointConfig {
    EndpointConfig {
        base_url,
        model_id: "sim-model".into(),
        api_key_env: "FAIRPROOF_TEST_UNSET_KEY".into(),
        temperature: 0.0,
        max_output_tokens: 8,
        timeout_ms: 2_000,
        max_retries: 3,
        max_in_flight: 3,
        backoff_base_ms: 1,
        backoff_cap_ms: 4,
    }
}

fn prompt(i: usize) -> RenderedPrompt {
    RenderedPrompt {
        instance_id: format!("q{i}"),
        template_id: "plain".into(),
        system_text: None,
        user_text: format!("question {i}"),
        counterfactual: None,
    }
}

fn body(i: usize, config: &EndpointConfig) -> String {
    ChatRequest::new(&prompt(i), config).body()
}

/// Starts a simulator whose entries are built against the returned config.
fn start(steps: impl Fn(usize) -> Vec<Step>, n: usize, tweak: impl Fn(&mut EndpointConfig)) -> (SimulatorHandle, EndpointClient) {
    let mut cfg = config("http://unused".into());
    tweak(&mut cfg);
    let mut script = ResponseScript::default();
    for i in 0..n {
        script = script.with_entry(&body(i, &cfg), steps(i));
    }
    let sim = serve(script, "127.0.0.1:0").unwrap();
    cfg.base_url = sim.base_url();
    let client = EndpointClient::http(cfg).unwrap();
    (sim, client)
}

#[test]
fn in_flight_requests_never_exceed_the_bound() {
    let (sim, client) = start(|i| vec![Step::content(&format!("answer {i}")).delayed(60)], 10, |_| {});
    let prompts: Vec<_> = (0..10).map(prompt).collect();
    let records = client.run_batch(&prompts, Exec::Parallel);
    assert_eq!(records.len(), 10);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r.sequence, i as u64);
        assert_eq!(r.raw_response_text.as_deref(), Some(format!("answer {i}").as_str()));
    }
    let peak = sim.state().peak_in_flight();
    assert!(peak <= 3, "peak {peak}");
    if cfg!(feature = "parallel") {
        assert!(peak >= 2, "requests were not overlapped: peak {peak}");
    }
}

#[test]
fn sequential_strategy_sends_one_request_at_a_time() {
    let (sim, client) = start(|_| vec![Step::content("x").delayed(10)], 5, |_| {});
    let prompts: Vec<_> = (0..5).map(prompt).collect();
    let records = client.run_batch(&prompts, Exec::Sequential);
    assert!(records.iter().all(ExchangeRecord::is_ok));
    assert_eq!(sim.state().peak_in_flight(), 1);
    assert_eq!(sim.state().requests_served(), 5);
}

#[test]
fn rate_limits_are_retried_and_every_attempt_is_kept() {
    let (_sim, client) = start(|_| vec![Step::status(429), Step::status(429), Step::content("L")], 1, |_| {});
    let r = client.query_model(0, &prompt(0)).unwrap();
    assert_eq!(r.attempt_statuses, [429, 429, 200]);
    assert_eq!(r.attempt_count, 3);
    assert_eq!(r.outcome, ExchangeOutcome::Ok);
    assert_eq!(r.raw_response_text.as_deref(), Some("L"));
    assert!(!r.api_key_present);
}

#[test]
fn client_errors_are_not_retried() {
    let (sim, client) = start(|_| vec![Step::status(400), Step::content("never")], 1, |_| {});
    let failure = client.query_model(0, &prompt(0)).unwrap_err();
    assert!(matches!(failure.error, ClientError::Rejected { status: 400 }));
    assert_eq!(failure.record.attempt_statuses, [400]);
    assert_eq!(sim.state().requests_served(), 1);
}

#[test]
fn a_permanently_failing_prompt_is_recorded_and_the_batch_continues() {
    let (_sim, client) = start(|i| if i == 5 { vec![Step::status(503)] } else { vec![Step::content("H")] }, 10, |c| c.max_retries = 2);
    let prompts: Vec<_> = (0..10).map(prompt).collect();
    let records = client.run_batch(&prompts, Exec::Parallel);
    assert_eq!(records.len(), 10);
    let failed = &records[5];
    assert_eq!(failed.outcome, ExchangeOutcome::TransportError);
    assert_eq!(failed.attempt_statuses, [503, 503, 503]);
    assert_eq!(failed.http_status, Some(503));
    assert!(failed.raw_response_text.is_none());
    assert!(failed.error.as_deref().unwrap().contains("retries exhausted"));
    assert_eq!(records.iter().filter(|r| r.is_ok()).count(), 9);
}

#[test]
fn dropped_connections_time_out_and_count_as_no_response() {
    let (sim, client) = start(|_| vec![Step::dropped()], 1, |c| {
        c.timeout_ms = 200;
        c.max_retries = 1;
    });
    let failure = client.query_model(0, &prompt(0)).unwrap_err();
    assert!(matches!(failure.error, ClientError::Exhausted { attempts: 2, last_status: None }));
    assert_eq!(failure.record.attempt_statuses, [0, 0]);
    assert_eq!(failure.record.http_status, None);
    assert!(failure.record.response_body.is_none());
    sim.shutdown();
}

#[test]
fn malformed_envelopes_are_flagged() {
    let (_sim, client) = start(|_| vec![Step::body(200, r#"{"choices":[]}"#)], 1, |_| {});
    let failure = client.query_model(0, &prompt(0)).unwrap_err();
    assert_eq!(failure.record.outcome, ExchangeOutcome::EnvelopeError);
    assert_eq!(failure.record.response_body.as_deref(), Some(r#"{"choices":[]}"#));
}

#[test]
fn unscripted_requests_get_not_found() {
    let (_sim, client) = start(|_| vec![Step::content("H")], 1, |_| {});
    let failure = client.query_model(7, &prompt(7)).unwrap_err();
    assert!(matches!(failure.error, ClientError::Rejected { status: 404 }));
}

#[test]
fn wildcard_script_answers_anything() {
    let sim = serve(ResponseScript::always("B"), "127.0.0.1:0").unwrap();
    let client = EndpointClient::new(
        config(sim.base_url()),
        Arc::new(fairproof::client::HttpTransport::new(std::time::Duration::from_secs(2))),
        Arc::new(SystemClock),
    )
    .unwrap();
    let r = client.query_model(0, &prompt(42)).unwrap();
    assert_eq!(r.raw_response_text.as_deref(), Some("B"));
    assert_eq!(r.response_body.as_deref(), Some(completion_body("B").as_str()));
}

fn exchanges(path: &std::path::Path) -> Vec<ExchangeRecord> {
    read_ledger(path, Exec::Sequential)
        .unwrap()
        .iter()
        .filter(|r| r.kind == RecordKind::Exchange)
        .map(|r| {
            let mut e: ExchangeRecord = r.payload_as().unwrap();
            e.normalize_time();
            e
        })
        .collect()
}

#[test]
fn a_ledger_replayed_as_a_script_reproduces_its_exchanges() {
    let ws = Workspace::new();
    let mut config = ws.config("pisa");
    let (options, _) = frozen_options(answer_script(&ws, &config, "pisa"), Exec::Parallel);
    let first = run_evaluation(&config, ws.path(), &options).unwrap();

    let sim = serve(script_from_ledger(&first.ledger_path).unwrap(), "127.0.0.1:0").unwrap();
    config.endpoint.base_url = sim.base_url();
    config.output.ledger = "out/replayed.ledger".into();
    config.output.report = "out/replayed.report.json".into();
    let second = run_evaluation(&config, ws.path(), &RunOptions::default()).unwrap();

    assert_eq!(exchanges(&first.ledger_path), exchanges(&second.ledger_path));
    let (mut a, mut b) = (first.report, second.report);
    assert_ne!(a.provenance.config_digest, b.provenance.config_digest, "base_url is part of the ledgered config");
    a.provenance = b.provenance.clone();
    b.provenance = a.provenance.clone();
    assert_eq!(a, b);
}
