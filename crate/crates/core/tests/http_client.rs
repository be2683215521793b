//! `HttpChatClient` against a scripted local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use eagle_core::feature_store::{generate_synthetic_dataset, SyntheticSpec};
use eagle_core::pipeline::{cmd_run, RunConfig};
use eagle_core::prompting::{
    send_to_model, CaasHint, ChatClient, ChatMessage, ChatRequest, ClientError, ContentPart, EndpointConfig,
    HttpChatClient, ImageRef, ImageRole, ParsedAnswer, RetryPolicy, Role, TextualPrior,
};
use serde_json::Value;

#[derive(Debug, Clone)]
struct Captured {
    path: String,
    authorization: Option<String>,
    body: Value,
}

type Responder = dyn Fn(usize, &Captured) -> (u16, String) + Send + Sync;

struct Mock {
    url: String,
    seen: Arc<Mutex<Vec<Captured>>>,
}

impl Mock {
    fn start(responder: impl Fn(usize, &Captured) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let counter = Arc::new(AtomicUsize::new(0));
        let responder: Arc<Responder> = Arc::new(responder);
        let log = Arc::clone(&seen);
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let (log, counter, responder) = (Arc::clone(&log), Arc::clone(&counter), Arc::clone(&responder));
                thread::spawn(move || handle(stream, &log, &counter, &*responder));
            }
        });
        Mock { url, seen }
    }

    fn requests(&self) -> Vec<Captured> {
        self.seen.lock().unwrap().clone()
    }
}

fn handle(stream: TcpStream, log: &Mutex<Vec<Captured>>, counter: &AtomicUsize, responder: &Responder) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
        return;
    }
    let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
    let (mut len, mut authorization) = (0usize, None);
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        let (name, value) = line.split_once(':').unwrap();
        match name.to_ascii_lowercase().as_str() {
            "content-length" => len = value.trim().parse().unwrap(),
            "authorization" => authorization = Some(value.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    let captured = Captured {
        path,
        authorization,
        body: serde_json::from_slice(&body).unwrap_or(Value::Null),
    };
    let n = counter.fetch_add(1, Ordering::SeqCst);
    let (status, text) = responder(n, &captured);
    log.lock().unwrap().push(captured);
    let mut out = stream;
    let _ = write!(
        out,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
}

fn completion(text: &str) -> String {
    serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": text } }] }).to_string()
}

fn endpoint(url: &str, key: Option<&str>) -> EndpointConfig {
    EndpointConfig {
        url: Some(url.to_string()),
        model: "test-model".into(),
        api_key: key.map(str::to_string),
        timeout_secs: 10,
        ..EndpointConfig::default()
    }
}

fn request(caas: Option<CaasHint>) -> ChatRequest {
    ChatRequest {
        image_id: "q1".into(),
        messages: vec![
            ChatMessage {
                role: Role::System,
                parts: vec![ContentPart::Text { text: "sys".into() }],
            },
            ChatMessage {
                role: Role::User,
                parts: vec![
                    ContentPart::Image(ImageRef {
                        image_id: "t".into(),
                        role: ImageRole::Template,
                        url: Some("data:image/png;base64,AAAA".into()),
                    }),
                    ContentPart::Image(ImageRef {
                        image_id: "q1".into(),
                        role: ImageRole::Query,
                        url: None,
                    }),
                    ContentPart::Text { text: "question".into() },
                ],
            },
        ],
        prior: TextualPrior::AnomalousPrior,
        caas,
    }
}

#[test]
fn wire_format_and_auth() {
    let mock = Mock::start(|_, _| (200, completion("A")));
    let client = HttpChatClient::new(&endpoint(&mock.url, Some("sekret"))).unwrap();
    let hint = CaasHint { alpha: 0.6, layers: (9, 15) };
    let resp = client.complete(&request(Some(hint))).unwrap();
    assert_eq!((resp.raw_text.as_str(), resp.status), ("A", 200));

    let seen = mock.requests();
    assert_eq!(seen.len(), 1);
    let r = &seen[0];
    assert_eq!(r.path, "/v1/chat/completions");
    assert_eq!(r.authorization.as_deref(), Some("Bearer sekret"));
    assert_eq!(r.body["model"], "test-model");
    assert_eq!(r.body["temperature"], 0.0);
    let msgs = r.body["messages"].as_array().unwrap();
    assert_eq!(msgs[0], serde_json::json!({ "role": "system", "content": "sys" }));
    let parts = msgs[1]["content"].as_array().unwrap();
    assert_eq!(parts[0]["type"], "image_url");
    assert_eq!(parts[0]["image_url"]["url"], "data:image/png;base64,AAAA");
    assert_eq!(parts[1], serde_json::json!({ "type": "text", "text": "[query image: q1]" }));
    assert_eq!(parts[2]["text"], "question");
    assert_eq!(r.body["caas"]["alpha"], 0.6);
    assert_eq!(r.body["caas"]["layers"], serde_json::json!([9, 15]));
    assert!(r.body.get("image_id").is_none());
}

#[test]
fn no_key_no_auth_header_and_hint_can_be_disabled() {
    let mock = Mock::start(|_, _| (200, completion("B")));
    let cfg = EndpointConfig {
        send_caas_hint: false,
        ..endpoint(&mock.url, None)
    };
    let client = HttpChatClient::new(&cfg).unwrap();
    client.complete(&request(Some(CaasHint { alpha: 0.6, layers: (9, 15) }))).unwrap();
    let r = &mock.requests()[0];
    assert!(r.authorization.is_none());
    assert!(r.body.get("caas").is_none());
}

#[test]
fn transient_statuses_are_retried() {
    let mock = Mock::start(|n, _| match n {
        0 => (503, "busy".into()),
        1 => (429, "slow down".into()),
        _ => (200, completion("B. No")),
    });
    let client = HttpChatClient::new(&endpoint(&mock.url, None)).unwrap();
    let (answer, resp) = send_to_model(&request(None), &client, &RetryPolicy::no_delay()).unwrap();
    assert_eq!(answer.parsed, ParsedAnswer::DefectNo);
    assert_eq!(resp.status, 200);
    assert_eq!(mock.requests().len(), 3);
}

#[test]
fn retries_stop_after_three_attempts() {
    let mock = Mock::start(|_, _| (500, "down".into()));
    let client = HttpChatClient::new(&endpoint(&mock.url, None)).unwrap();
    let err = send_to_model(&request(None), &client, &RetryPolicy::no_delay()).unwrap_err();
    assert_eq!(err, ClientError::Status { status: 500, body: "down".into() });
    assert_eq!(mock.requests().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let mock = Mock::start(|_, _| (400, "bad request".into()));
    let client = HttpChatClient::new(&endpoint(&mock.url, None)).unwrap();
    let err = send_to_model(&request(None), &client, &RetryPolicy::no_delay()).unwrap_err();
    assert!(matches!(err, ClientError::Status { status: 400, .. }));
    assert_eq!(mock.requests().len(), 1);
}

#[test]
fn empty_and_malformed_bodies() {
    let mock = Mock::start(|n, _| match n {
        0 => (200, completion("  ")),
        _ => (200, "not json".into()),
    });
    let client = HttpChatClient::new(&endpoint(&mock.url, None)).unwrap();
    let policy = RetryPolicy::no_delay();
    assert_eq!(send_to_model(&request(None), &client, &policy).unwrap_err(), ClientError::EmptyCompletion);
    assert!(matches!(client.complete(&request(None)), Err(ClientError::Malformed(_))));
}

#[test]
fn unreachable_endpoint() {
    let addr = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let client = HttpChatClient::new(&endpoint(&format!("http://{addr}"), None)).unwrap();
    let err = send_to_model(&request(None), &client, &RetryPolicy::no_delay()).unwrap_err();
    assert!(matches!(err, ClientError::Unreachable { attempts: 3, .. }), "{err}");
}

#[test]
fn pipeline_run_against_endpoint() {
    // answers "defect" whenever the prior says anomalous
    let mock = Mock::start(|_, c| {
        let text = c.body["messages"][1]["content"].to_string();
        (200, completion(if text.contains("predicted as anomalous") { "A" } else { "B" }))
    });
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n_train: 10,
        n_test_normal: 6,
        n_test_anom: 6,
        height: 8,
        width: 8,
        ..SyntheticSpec::default()
    };
    generate_synthetic_dataset(&spec, dir.path().join("data")).unwrap();
    let cfg = RunConfig {
        dataset_root: dir.path().join("data"),
        out_dir: dir.path().join("out"),
        endpoint: endpoint(&mock.url, Some("k")),
        retry_base_ms: 0,
        ..RunConfig::default()
    };
    let out = cmd_run(&cfg).unwrap();
    assert_eq!(mock.requests().len(), 12);
    assert_eq!(out.model.n(), 12);
    assert_eq!(out.model.unparseable, 0);
    assert_eq!(
        (out.expert.tp, out.expert.fp, out.expert.tn, out.expert.fn_),
        (out.model.tp, out.model.fp, out.model.tn, out.model.fn_)
    );
    let log = std::fs::read_to_string(cfg.out_dir.join("requests.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 12);
    assert!(!log.contains("\"k\""), "api key leaked into the request log");
}
