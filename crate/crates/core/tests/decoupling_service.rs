use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use hyperground_core::decoupling::{
    decouple_via_service, parse_response, DecoupleResult, ParseErrorKind, ServiceConfig, ServiceRequest, PROMPT_GENERAL,
};
use hyperground_core::Error;
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Seen {
    auth: Option<String>,
    body: ServiceRequest,
}

/// Serves one canned `(status, body)` reply per connection, in order.
fn stub(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut len = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = Some(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                auth,
                body: serde_json::from_slice(&buf).unwrap(),
            });
            let mut stream = reader.into_inner();
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}/v1/decouple"), seen)
}

fn text(t: &str) -> (u16, String) {
    (200, serde_json::json!({ "text": t }).to_string())
}

fn config(endpoint: String) -> ServiceConfig {
    let mut cfg = ServiceConfig::new(endpoint);
    cfg.timeout = Duration::from_secs(5);
    cfg
}

#[test]
fn no_target_reply() {
    let (url, seen) = stub(vec![text("0")]);
    let mut cfg = config(url);
    cfg.api_key = Some("k123".into());
    let r = decouple_via_service("the dog on the sofa", Some(b"img"), &cfg).unwrap();
    assert!(r.is_no_target());
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer k123"));
    assert_eq!(seen[0].body.system, PROMPT_GENERAL);
    assert!(seen[0].body.user.ends_with("The referring expression is: the dog on the sofa"));
    assert_eq!(seen[0].body.image_b64.as_deref(), Some("aW1n"));
}

#[test]
fn multi_target_reply() {
    let reply = "3\n1.first glass is on the left\n2.second glass is in the middle\n3. third glass is on the right side";
    let (url, seen) = stub(vec![text(reply)]);
    let r = decouple_via_service("three glasses", None, &config(url)).unwrap();
    assert_eq!(r.count(), 3);
    assert_eq!(
        r.phrases(),
        ["first glass is on the left", "second glass is in the middle", "third glass is on the right side"]
    );
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].auth, None);
    assert_eq!(seen[0].body.image_b64, None);
}

#[test]
fn malformed_replies_exhaust_retries() {
    let (url, seen) = stub(vec![text("I see glasses"), text("two\n1. a"), text("")]);
    match decouple_via_service("three glasses", None, &config(url)) {
        Err(Error::RetriesExhausted { attempts, last, raw }) => {
            assert_eq!(attempts, 3);
            assert_eq!(last.kind, ParseErrorKind::Empty);
            assert_eq!(raw, "");
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn retry_recovers_after_malformed_reply() {
    let (url, seen) = stub(vec![text("2\n1. a"), text("1\n1. the left cup")]);
    let r = decouple_via_service("left cup", None, &config(url)).unwrap();
    assert_eq!(r.phrases(), ["the left cup"]);
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn http_error_is_transport_failure() {
    let (url, _) = stub(vec![(500, "{\"error\":\"boom\"}".into())]);
    match decouple_via_service("x", None, &config(url)) {
        Err(Error::Transport { reason, raw }) => {
            assert!(reason.contains("500"));
            assert_eq!(raw.as_deref(), Some("{\"error\":\"boom\"}"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn reply_without_text_field_is_transport_failure() {
    let (url, _) = stub(vec![(200, "{\"answer\":\"0\"}".into())]);
    assert!(matches!(
        decouple_via_service("x", None, &config(url)),
        Err(Error::Transport { raw: Some(_), .. })
    ));
}

#[test]
fn unreachable_endpoint_is_transport_failure() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let mut cfg = config(format!("http://{addr}/"));
    cfg.timeout = Duration::from_secs(1);
    assert!(matches!(decouple_via_service("x", None, &cfg), Err(Error::Transport { .. })));
}

fn phrase() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9 ,'-]{0,30}[a-z0-9]".prop_map(|s| s.trim().to_string())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn render_then_parse_round_trips(phrases in prop::collection::vec(phrase(), 0..8)) {
        let r = DecoupleResult::new(phrases, "");
        let back = parse_response(&r.render()).unwrap();
        prop_assert_eq!(back.count(), r.count());
        prop_assert_eq!(back.phrases(), r.phrases());
    }

    #[test]
    fn arbitrary_text_never_panics(raw in "\\PC{0,80}") {
        if let Ok(r) = parse_response(&raw) {
            prop_assert_eq!(r.count(), r.phrases().len());
        }
    }

    #[test]
    fn near_miss_grammar_never_panics(raw in "[0-9]{0,3}(\n[0-9]{0,2}[.]? ?[a-z ]{0,6}){0,4}\n?") {
        match parse_response(&raw) {
            Ok(r) => prop_assert_eq!(r.count(), r.phrases().len()),
            Err(e) => prop_assert!(!e.to_string().is_empty()),
        }
    }
}
