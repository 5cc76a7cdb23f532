//! Scaffold freeze tests and wire-level checks of the HTTP endpoint client
//! against a minimal in-process server.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::time::Duration;

use ehrtext::zeroshot::{
    ClientConfig, EndpointClient, HttpEndpoint, PromptKind, P1_SCAFFOLD, P2_SCAFFOLD,
};

/// Any edit to a prompt scaffold must fail here against the stored text.
#[test]
fn scaffolds_are_byte_frozen() {
    assert_eq!(P1_SCAFFOLD, include_str!("data/prompt_p1.txt"));
    assert_eq!(P2_SCAFFOLD, include_str!("data/prompt_p2.txt"));
    assert_eq!(PromptKind::P1.scaffold(), P1_SCAFFOLD);
    assert_eq!(PromptKind::P2.scaffold(), P2_SCAFFOLD);
}

/// Serves scripted HTTP responses on a local port, one per incoming request,
/// and records each request body.
fn serve_scripted(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let mut bodies = Vec::new();
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            stream
                .set_read_timeout(Some(Duration::from_secs(5)))
                .unwrap();
            let mut buf = vec![0u8; 65536];
            let mut request = Vec::new();
            loop {
                let n = stream.read(&mut buf).unwrap();
                request.extend_from_slice(&buf[..n]);
                let text = String::from_utf8_lossy(&request);
                if let Some(header_end) = text.find("\r\n\r\n") {
                    let content_length = text
                        .lines()
                        .find_map(|l| {
                            l.to_ascii_lowercase()
                                .strip_prefix("content-length:")
                                .map(str::trim)
                                .map(str::to_string)
                        })
                        .and_then(|v| v.parse::<usize>().ok())
                        .unwrap_or(0);
                    if request.len() >= header_end + 4 + content_length {
                        bodies.push(text[header_end + 4..].to_string());
                        break;
                    }
                }
                if n == 0 {
                    break;
                }
            }
            let reason = if status == 200 { "OK" } else { "Error" };
            let response = format!(
                "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
        }
        bodies
    });
    (format!("http://{addr}/v1/chat/completions"), handle)
}

fn chat_response(content: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": content}}]
    })
    .to_string()
}

fn client_for(url: String) -> HttpEndpoint {
    let cfg = ClientConfig {
        endpoint_url: url,
        model: "test-model".into(),
        timeout_seconds: 5,
        max_retries: 3,
        retry_base_ms: 1,
        ..ClientConfig::default()
    };
    HttpEndpoint::new(cfg).unwrap()
}

#[test]
fn completion_passes_through_and_request_carries_decoding_caps() {
    let (url, server) = serve_scripted(vec![(200, chat_response("Yes"))]);
    let client = client_for(url);
    let completion = client.complete(0, "prompt text").unwrap();
    assert_eq!(completion, "Yes");

    let bodies = server.join().unwrap();
    let body: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(body["max_tokens"], serde_json::json!(2));
    assert_eq!(body["temperature"], serde_json::json!(0));
    assert_eq!(body["model"], serde_json::json!("test-model"));
    assert_eq!(
        body["messages"][0]["content"],
        serde_json::json!("prompt text")
    );
}

#[test]
fn transient_errors_retry_then_succeed() {
    let (url, server) = serve_scripted(vec![
        (500, "{}".into()),
        (500, "{}".into()),
        (200, chat_response("No")),
    ]);
    let client = client_for(url);
    let completion = client.complete(0, "p").unwrap();
    assert_eq!(completion, "No");
    assert_eq!(server.join().unwrap().len(), 3);
}

#[test]
fn persistent_500s_exhaust_retries_and_error() {
    let responses = vec![(500, "{}".to_string()); 4]; // initial + 3 retries
    let (url, server) = serve_scripted(responses);
    let client = client_for(url);
    let err = client.complete(0, "p").unwrap_err();
    assert!(err.to_string().contains("500"), "{err}");
    assert_eq!(server.join().unwrap().len(), 4);
}

#[test]
fn malformed_body_is_a_non_retryable_error() {
    let (url, server) = serve_scripted(vec![(200, "not json".into())]);
    let client = client_for(url);
    let err = client.complete(0, "p").unwrap_err();
    assert!(err.to_string().contains("malformed"), "{err}");
    assert_eq!(server.join().unwrap().len(), 1);
}
