//! HTTP client retry behaviour against a scripted local server, and
//! record/replay of real exchanges.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use chameleon_core::llm::{
    ChatMessage, CompletionParams, HttpClient, LanguageModel, LlmError, Recorder, ReplayClient, RetryPolicy,
};

const OK_BODY: &str = r#"{"choices":[{"index":0,"message":{"role":"assistant","content":"hello there"}}]}"#;

/// Reads one HTTP request and returns its body.
fn read_request(stream: &mut TcpStream) -> String {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        if line == "\r\n" || line.is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    String::from_utf8(body).unwrap()
}

/// Serves `responses` in order, one per connection, then stops.
fn scripted_server(responses: Vec<(u16, &'static str)>) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            read_request(&mut stream);
            counter.fetch_add(1, Ordering::SeqCst);
            let reply = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}/v1"), hits)
}

fn fast_retry(max_attempts: u32) -> RetryPolicy {
    RetryPolicy {
        max_attempts,
        initial_backoff_ms: 5,
        max_backoff_ms: 20,
        multiplier: 2.0,
    }
}

fn client(url: &str, attempts: u32) -> HttpClient {
    HttpClient::new(url, Some("secret".into()), fast_retry(attempts), 4, Duration::from_secs(5)).unwrap()
}

fn msgs() -> Vec<ChatMessage> {
    vec![ChatMessage::user("say hello")]
}

fn params() -> CompletionParams {
    CompletionParams::new("m", 0.0, 16).with_seed(1)
}

#[test]
fn retries_rate_limits_until_success() {
    let (url, hits) = scripted_server(vec![(429, "{}"), (429, "{}"), (200, OK_BODY)]);
    let c = client(&url, 5).complete(&msgs(), &params()).unwrap();
    assert_eq!(c.text, "hello there");
    assert_eq!(c.attempts, 3);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, hits) = scripted_server(vec![(400, r#"{"error":"bad"}"#), (200, OK_BODY)]);
    match client(&url, 5).complete(&msgs(), &params()) {
        Err(LlmError::Status { status, attempts, .. }) => assert_eq!((status, attempts), (400, 1)),
        other => panic!("expected 400, got {other:?}"),
    }
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn gives_up_after_max_attempts() {
    let (url, _) = scripted_server(vec![(503, "{}"), (503, "{}")]);
    let err = client(&url, 2).complete(&msgs(), &params()).unwrap_err();
    assert!(err.is_remote());
    assert!(matches!(err, LlmError::Status { status: 503, attempts: 2, .. }));
}

#[test]
fn malformed_success_body_is_remote_error() {
    let (url, _) = scripted_server(vec![(200, r#"{"choices":[]}"#)]);
    let err = client(&url, 1).complete(&msgs(), &params()).unwrap_err();
    assert!(matches!(err, LlmError::Malformed(_)));
}

#[test]
fn connection_refused_is_network_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = client(&format!("http://127.0.0.1:{port}/v1"), 2).complete(&msgs(), &params()).unwrap_err();
    assert!(matches!(err, LlmError::Network { attempts: 2, .. }));
}

#[test]
fn recorded_exchange_replays_offline() {
    let (url, _) = scripted_server(vec![(200, OK_BODY)]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fixture.jsonl");
    let live = Recorder::create(client(&url, 1), &path).unwrap();
    let first = live.complete(&msgs(), &params()).unwrap();
    drop(live);
    let replay = ReplayClient::open(&path).unwrap();
    assert_eq!(replay.complete(&msgs(), &params()).unwrap().text, first.text);
    let other = CompletionParams::new("m", 0.0, 16).with_seed(2);
    assert!(matches!(replay.complete(&msgs(), &other), Err(LlmError::ReplayMiss { .. })));
}
