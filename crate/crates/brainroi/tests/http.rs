mod common;

use std::net::TcpListener;
use std::time::Duration;

use brainroi::http::http_generate;
use brainroi_core::ipo::{mock_generate, GeneratorConfig, PromptCandidate, DEFAULT_SEED_PROMPTS};
use brainroi_core::Error;
use common::*;
use serde_json::Value;

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(true)
        .build()
        .into()
}

fn pool() -> Vec<PromptCandidate> {
    DEFAULT_SEED_PROMPTS.iter().map(|s| PromptCandidate::new(*s, 0).unwrap()).collect()
}

fn call(server: &StubServer, timeout: Duration) -> brainroi_core::Result<Vec<String>> {
    http_generate(&agent(timeout), &server.url, "rewrite", &pool(), 6, &GeneratorConfig::default())
}

#[test]
fn request_body_and_happy_path() {
    let server = StubServer::start(0, vec![]);
    let prompts = call(&server, Duration::from_secs(5)).unwrap();
    assert_eq!(prompts, mock_generate(&pool(), 6, 1));
    let req = &server.received()[0];
    let keys: Vec<&str> = req.as_object().unwrap().keys().map(String::as_str).collect();
    let mut expected = vec!["instruction", "k", "max_new_tokens", "pool", "temperature", "top_p"];
    expected.sort();
    let mut keys = keys;
    keys.sort();
    assert_eq!(keys, expected);
    assert_eq!(req["k"], 6);
    assert_eq!(req["temperature"], 0.8);
    assert_eq!(req["top_p"], 0.95);
    assert_eq!(req["max_new_tokens"], 1024);
    assert_eq!(req["instruction"], "rewrite");
    assert_eq!(req["pool"].as_array().unwrap().len(), 5);
}

#[test]
fn misbehaving_servers_map_to_typed_errors() {
    let server = StubServer::start(
        0,
        vec![Reply::Short, Reply::Garbage, Reply::Status(500), Reply::Delay(Duration::from_millis(1500))],
    );
    let t = Duration::from_millis(400);
    let short = call(&server, t).unwrap_err();
    assert!(matches!(short, Error::Protocol(ref m) if m.contains("returned 5 prompts")), "{short}");
    for expected in ["malformed response", "500", "request failed"] {
        match call(&server, t).unwrap_err() {
            Error::Transport(m) => {
                assert!(m.contains(&server.url), "{m}");
                assert!(m.contains(expected), "{m}");
            }
            other => panic!("expected a transport error, got {other}"),
        }
    }
}

#[test]
fn unreachable_endpoint_names_the_endpoint() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}/generate");
    let err = http_generate(&agent(Duration::from_secs(2)), &url, "x", &pool(), 2, &GeneratorConfig::default())
        .unwrap_err();
    assert_eq!(err.kind(), "transport");
    assert!(err.to_string().contains(&url), "{err}");
}

#[test]
fn http_loop_is_substitutable_for_mock() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = quick_trained(root);
    let c = cfg.to_str().unwrap();
    ok(root, &["--config", c, "ipo"]);
    let mock_trace = read(root.join("traces/ipo_trace.jsonl"));
    let mock_best = read(root.join("traces/best_prompt.txt"));

    let server = StubServer::start(42, vec![]);
    let out = ok(root, &["--config", c, "ipo", "--generator", "http", "--endpoint", &server.url]);
    assert!(!out.contains("skipped"));
    assert_eq!(read(root.join("traces/ipo_trace.jsonl")), mock_trace);
    assert_eq!(read(root.join("traces/best_prompt.txt")), mock_best);
    assert_eq!(server.received().len(), 3);
    let meta = read_json(root.join("traces/ipo_meta.json"));
    assert_eq!(meta["backend"], "http");
    assert_eq!(meta["endpoint"], server.url.as_str());
    assert_eq!(meta["skipped"], Value::Array(vec![]));
}

#[test]
fn bad_iterations_are_skipped_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = quick_trained(root);
    let c = cfg.to_str().unwrap();
    let server = StubServer::start(42, vec![Reply::Mock, Reply::Short, Reply::Delay(Duration::from_millis(2000))]);
    let o = brainroi(root, &["--config", c, "ipo", "--generator", "http", "--endpoint", &server.url, "--timeout-ms", "300"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let meta = read_json(root.join("traces/ipo_meta.json"));
    let skipped = meta["skipped"].as_array().unwrap();
    let kinds: Vec<(u64, &str)> =
        skipped.iter().map(|s| (s["iteration"].as_u64().unwrap(), s["error_kind"].as_str().unwrap())).collect();
    assert_eq!(kinds, [(2, "protocol"), (3, "transport")]);
    let best: Vec<f64> = meta["best_per_iteration"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(best.len(), 4);
    assert!(best.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(best[2], best[1]);
    // seeds plus the single successful batch
    let trace = String::from_utf8(read(root.join("traces/ipo_trace.jsonl"))).unwrap();
    let iters: Vec<u64> = trace
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["iteration_evaluated"].as_u64().unwrap())
        .collect();
    assert!(iters.iter().all(|&i| i <= 1));
    assert_eq!(iters.iter().filter(|&&i| i == 0).count(), 5);
}
