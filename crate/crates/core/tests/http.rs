//! The live backend against a local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};
use vground::clients::{Backend, BackendError, ClientError, Endpoints, HttpBackend, ModelClients, RetryPolicy, Role};

#[derive(Debug, Clone)]
struct Seen {
    method: String,
    path: String,
    authorization: Option<String>,
    body: Value,
}

/// Serves one scripted `(status, body)` reply per connection.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, reply) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut parts = request_line.split_whitespace();
            let method = parts.next().unwrap_or_default().to_string();
            let path = parts.next().unwrap_or_default().to_string();
            let (mut length, mut authorization) = (0usize, None);
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (k, v) = line.split_once(':').unwrap();
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => length = v.trim().parse().unwrap(),
                    "authorization" => authorization = Some(v.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0u8; length];
            reader.read_exact(&mut buf).unwrap();
            let body = serde_json::from_slice(&buf).unwrap_or(Value::Null);
            log.lock().unwrap().push(Seen { method, path, authorization, body });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    (base, seen)
}

fn endpoints(base: &str, token: Option<&str>) -> Endpoints {
    Endpoints {
        parser: base.into(),
        embedder: base.into(),
        segmenter: base.into(),
        pointer: base.into(),
        reasoner: base.into(),
        token: token.map(String::from),
    }
}

#[test]
fn posts_json_to_role_paths_with_bearer_token() {
    let (base, seen) = serve(vec![(200, r#"{"embedding":[0.5,0.5]}"#.into()), (200, r#"{"text":"hi"}"#.into())]);
    let b = HttpBackend::new(endpoints(&base, Some("secret")), Duration::from_secs(5));
    let reply = b.call(Role::Embedder, &json!({"kind": "text", "text": "chair"})).unwrap();
    assert_eq!(reply, json!({"embedding": [0.5, 0.5]}));
    b.call(Role::Pointer, &json!({"task": "presence"})).unwrap();
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].method, "POST");
    assert_eq!(seen[0].path, "/v1/embedder");
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer secret"));
    assert_eq!(seen[0].body, json!({"kind": "text", "text": "chair"}));
    assert_eq!(seen[1].path, "/v1/vlm", "the pointer shares the reasoner's path");
}

#[test]
fn statuses_and_bodies_map_to_errors() {
    let (base, _) = serve(vec![(404, "nope".into()), (200, "not json".into())]);
    let b = HttpBackend::new(endpoints(&base, None), Duration::from_secs(5));
    match b.call(Role::Parser, &json!({})) {
        Err(BackendError::Status { status: 404, body }) => assert_eq!(body, "nope"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(b.call(Role::Parser, &json!({})), Err(BackendError::Malformed(_))));
}

#[test]
fn server_errors_are_retried_through_the_client() {
    let (base, seen) = serve(vec![
        (503, "busy".into()),
        (429, "slow down".into()),
        (200, r#"{"detections":[]}"#.into()),
    ]);
    let b = Arc::new(HttpBackend::new(endpoints(&base, None), Duration::from_secs(5)));
    let clients = ModelClients::with_policy(b, RetryPolicy::no_backoff(), 4);
    let img = image::RgbImage::new(8, 8);
    assert!(clients.segment_by_text(&img, "chair").unwrap().is_empty());
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn unreachable_service_is_a_service_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let base = format!("http://127.0.0.1:{port}");
    let b = Arc::new(HttpBackend::new(endpoints(&base, None), Duration::from_secs(2)));
    let clients = ModelClients::with_policy(b, RetryPolicy::no_backoff(), 4);
    assert!(matches!(clients.embed_text("chair"), Err(ClientError::Service { role: Role::Embedder, .. })));
}
