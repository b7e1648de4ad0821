//! The wire client against a local stub server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use places::backend::{BackendConfig, FinishReason, GenerationParams, Generator, OpenAiBackend, Secret};
use places::Error;

const KEY: &str = "sk-stub-0123456789";

struct Captured {
    path: String,
    authorization: Option<String>,
    body: serde_json::Value,
}

fn read_request(stream: &mut TcpStream) -> Captured {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut request_line = String::new();
    reader.read_line(&mut request_line).unwrap();
    let path = request_line.split_whitespace().nth(1).unwrap_or_default().to_string();
    let mut length = 0usize;
    let mut chunked = false;
    let mut authorization = None;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        let (name, value) = line.split_once(':').unwrap();
        match name.to_ascii_lowercase().as_str() {
            "content-length" => length = value.trim().parse().unwrap(),
            "transfer-encoding" => chunked = value.trim().eq_ignore_ascii_case("chunked"),
            "authorization" => authorization = Some(value.trim().to_string()),
            _ => {}
        }
    }
    let mut body = Vec::new();
    if chunked {
        loop {
            let mut size = String::new();
            reader.read_line(&mut size).unwrap();
            let n = usize::from_str_radix(size.trim(), 16).unwrap();
            let mut chunk = vec![0; n + 2];
            reader.read_exact(&mut chunk).unwrap();
            if n == 0 {
                break;
            }
            body.extend_from_slice(&chunk[..n]);
        }
    } else {
        body.resize(length, 0);
        reader.read_exact(&mut body).unwrap();
    }
    Captured {
        path,
        authorization,
        body: serde_json::from_slice(&body).unwrap(),
    }
}

fn respond(stream: &mut TcpStream, status: u16, body: &str) {
    let reply = format!(
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(reply.as_bytes()).unwrap();
}

/// Serves the scripted responses in order, one connection each, and reports
/// every request it saw.
fn stub(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}/v1", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let captured = read_request(&mut stream);
            tx.send(captured).unwrap();
            respond(&mut stream, status, &body);
        }
    });
    (base, rx)
}

fn generator(base: &str, retries: u32) -> Generator {
    let config = BackendConfig {
        base_url: base.to_string(),
        api_key: Secret::new(KEY),
        max_retries: retries,
        backoff_base_ms: 1,
        backoff_cap_ms: 2,
        request_timeout_secs: 5,
        ..BackendConfig::default()
    };
    Generator::new(Box::new(OpenAiBackend::new(&config)), config).unwrap()
}

const OK_BODY: &str = r#"{"choices":[{"text":" Hi!\nBob: Hey","finish_reason":"stop"}],"usage":{"prompt_tokens":12,"completion_tokens":5}}"#;

#[test]
fn request_carries_decoding_fields() {
    let (base, rx) = stub(vec![(200, OK_BODY.to_string())]);
    let g = generator(&base, 0);
    let params = GenerationParams::default();
    let c = g.complete("The prompt\nAlice:", &params).unwrap();
    assert_eq!(c.text, " Hi!\nBob: Hey");
    assert_eq!(c.finish_reason, FinishReason::Stop);
    assert_eq!(c.usage.unwrap().completion_tokens, 5);

    let req = rx.recv().unwrap();
    assert_eq!(req.path, "/v1/completions");
    assert_eq!(req.authorization.as_deref(), Some(format!("Bearer {KEY}").as_str()));
    let body = req.body.as_object().unwrap();
    let mut keys: Vec<&str> = body.keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["max_tokens", "model", "prompt", "stop", "temperature", "top_p"]);
    assert_eq!(body["top_p"], 0.92);
    assert_eq!(body["temperature"], 1.0);
    assert_eq!(body["max_tokens"], 512);
    assert_eq!(body["prompt"], "The prompt\nAlice:");
    assert_eq!(body["stop"][0], "\n\nThe following is a conversation");
}

#[test]
fn length_finish_is_reported() {
    let body = r#"{"choices":[{"text":"cut","finish_reason":"length"}]}"#;
    let (base, _rx) = stub(vec![(200, body.to_string())]);
    let c = generator(&base, 0).complete("p", &GenerationParams::default()).unwrap();
    assert_eq!(c.finish_reason, FinishReason::Length);
}

#[test]
fn server_errors_are_retried() {
    let (base, rx) = stub(vec![
        (503, "{}".to_string()),
        (429, "{}".to_string()),
        (200, OK_BODY.to_string()),
    ]);
    let c = generator(&base, 3).complete("p", &GenerationParams::default()).unwrap();
    assert_eq!(c.attempts, 3);
    assert_eq!(rx.iter().take(3).count(), 3);
}

#[test]
fn unauthorized_is_a_configuration_error_without_the_key() {
    let (base, rx) = stub(vec![(401, format!(r#"{{"error":"bad key {KEY}"}}"#))]);
    let err = generator(&base, 3).complete("p", &GenerationParams::default()).unwrap_err();
    assert!(matches!(err, Error::Auth(401)));
    assert!(!err.to_string().contains(KEY));
    assert!(!format!("{err:?}").contains(KEY));
    assert_eq!(rx.iter().count(), 1, "auth failures are not retried");
}

#[test]
fn exhausted_retries_report_last_status_without_the_key() {
    let echo = format!(r#"{{"error":"overloaded for {KEY}"}}"#);
    let (base, _rx) = stub(vec![(500, echo.clone()), (502, echo)]);
    let err = generator(&base, 1).complete("p", &GenerationParams::default()).unwrap_err();
    match &err {
        Error::BackendUnavailable { attempts, status, .. } => {
            assert_eq!(*attempts, 2);
            assert_eq!(*status, Some(502));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(!err.to_string().contains(KEY));
}

#[test]
fn bad_requests_are_not_retried() {
    let (base, rx) = stub(vec![(400, r#"{"error":"prompt too long"}"#.to_string())]);
    let err = generator(&base, 3).complete("p", &GenerationParams::default()).unwrap_err();
    assert!(matches!(err, Error::BackendRejected { status: 400, .. }));
    assert_eq!(rx.iter().count(), 1);
}

#[test]
fn slow_server_times_out() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}/v1", listener.local_addr().unwrap());
    thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        let _ = read_request(&mut stream);
        thread::sleep(Duration::from_secs(3));
    });
    let config = BackendConfig {
        base_url: base,
        max_retries: 0,
        request_timeout_secs: 1,
        ..BackendConfig::default()
    };
    let g = Generator::new(Box::new(OpenAiBackend::new(&config)), config).unwrap();
    let err = g.complete("p", &GenerationParams::default()).unwrap_err();
    assert!(matches!(err, Error::BackendUnavailable { status: None, .. }), "{err:?}");
}
