use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use sqg_core::embed::{Embedder, HttpEmbedder};
use sqg_core::generate::{
    generate_batch, provider_registry, GenerateError, GenerationRequest, HttpProvider, ProviderError, ProviderSpec,
};
use sqg_core::{CompletionProvider, Mode, QAPair, SamplingParams};

#[derive(Default)]
struct Seen {
    bodies: Vec<Value>,
    auth: Vec<Option<String>>,
}

type Shared = Arc<Mutex<Seen>>;

async fn complete(
    State(seen): State<Shared>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> (StatusCode, Json<Value>) {
    let prompt = body["prompt"].as_str().unwrap_or_default().to_string();
    {
        let mut s = seen.lock().unwrap();
        s.auth
            .push(headers.get("authorization").map(|v| v.to_str().unwrap().to_string()));
        s.bodies.push(body);
    }
    if prompt.contains("FAIL") {
        return (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({"error": "boom"})));
    }
    if prompt.contains("MISSING") {
        return (StatusCode::OK, Json(json!({"completion": "wrong field"})));
    }
    if prompt.contains("SLOW") {
        tokio::time::sleep(Duration::from_millis(1500)).await;
    }
    (
        StatusCode::OK,
        Json(json!({"text": "1. 证明要开多久\n2. 开证明需要几天"})),
    )
}

async fn embed(Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let texts: Vec<String> = serde_json::from_value(body["texts"].clone()).unwrap();
    if texts.iter().any(|t| t == "FAIL") {
        return (StatusCode::BAD_GATEWAY, Json(json!({})));
    }
    match body["granularity"].as_str() {
        Some("sentence") => {
            let vectors: Vec<Vec<f64>> = texts.iter().map(|t| vec![t.chars().count() as f64, 1.0]).collect();
            (StatusCode::OK, Json(json!({ "vectors": vectors })))
        }
        Some("token") => {
            let tokens: Vec<Vec<String>> = texts.iter().map(|t| t.chars().map(String::from).collect()).collect();
            let vectors: Vec<Vec<Vec<f64>>> = tokens
                .iter()
                .map(|ts| {
                    ts.iter()
                        .map(|c| vec![c.chars().next().unwrap() as u32 as f64, 1.0])
                        .collect()
                })
                .collect();
            (StatusCode::OK, Json(json!({ "tokens": tokens, "vectors": vectors })))
        }
        _ => (StatusCode::BAD_REQUEST, Json(json!({}))),
    }
}

fn serve() -> (SocketAddr, Shared) {
    let seen: Shared = Arc::default();
    let app = Router::new()
        .route("/v1/complete", post(complete))
        .route("/v1/embed", post(embed))
        .with_state(seen.clone());
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    (rx.recv().unwrap(), seen)
}

fn base(addr: SocketAddr) -> String {
    format!("http://{addr}/")
}

#[test]
fn provider_posts_prompt_and_sampling_params() {
    let (addr, seen) = serve();
    let p = HttpProvider::new(&base(addr), Some("tok".into()), Duration::from_secs(5)).unwrap();
    let params = SamplingParams {
        seed: Some(7),
        ..Default::default()
    };
    let text = p
        .complete("帮我生成2条与证明开具时间要多久？相似的问句。", &params)
        .unwrap();
    assert!(text.starts_with("1. "));

    let seen = seen.lock().unwrap();
    let body = &seen.bodies[0];
    assert_eq!(body["prompt"], "帮我生成2条与证明开具时间要多久？相似的问句。");
    assert_eq!(body["temperature"], 0.9);
    assert_eq!(body["top_k"], 5);
    assert_eq!(body["seed"], 7);
    assert_eq!(seen.auth[0].as_deref(), Some("Bearer tok"));
}

#[test]
fn provider_error_classes() {
    let (addr, _) = serve();
    let params = SamplingParams::default();
    let p = HttpProvider::new(&base(addr), None, Duration::from_millis(500)).unwrap();
    assert!(matches!(
        p.complete("FAIL", &params),
        Err(ProviderError::Status { status: 500, .. })
    ));
    assert_eq!(p.complete("MISSING", &params), Err(ProviderError::MissingText));
    assert!(matches!(p.complete("SLOW", &params), Err(ProviderError::Timeout(_))));

    let dead = HttpProvider::new("http://127.0.0.1:9", None, Duration::from_secs(2)).unwrap();
    assert!(matches!(dead.complete("x", &params), Err(ProviderError::Transport(_))));
}

#[test]
fn failed_calls_surface_as_generation_failures() {
    let (addr, _) = serve();
    let p = HttpProvider::new(&base(addr), None, Duration::from_secs(5)).unwrap();
    let pair = QAPair::new("p1", "answer", ["FAIL please"]).unwrap();
    let req = GenerationRequest::new(4, 2, SamplingParams::default());
    match generate_batch(&p, &pair, Mode::ContextAware, &req) {
        Err(GenerateError::AllCallsFailed { pair_id, failures }) => {
            assert_eq!(pair_id, "p1");
            assert!(!failures.is_empty());
        }
        other => panic!("expected failure, got {other:?}"),
    }

    let ok = QAPair::new("p2", "answer", ["证明开具时间要多久？"]).unwrap();
    let batch = generate_batch(
        &p,
        &ok,
        Mode::ContextAware,
        &GenerationRequest::new(4, 2, SamplingParams::default()),
    )
    .unwrap();
    // The server always returns the same two questions.
    assert_eq!(batch.questions.len(), 2);
    assert!(batch.underfilled);
}

#[test]
fn registry_builds_http_provider_from_spec() {
    let (addr, _) = serve();
    let spec = ProviderSpec {
        kind: "http".into(),
        url: Some(base(addr)),
        timeout_secs: Some(5),
        ..Default::default()
    };
    let p = provider_registry().create("http", &spec).unwrap();
    assert!(p.id().starts_with("http:"));
    assert!(p.complete("hi", &SamplingParams::default()).is_ok());
}

#[test]
fn embedder_token_and_sentence_granularity() {
    let (addr, _) = serve();
    let e = HttpEmbedder::new(&base(addr), Duration::from_secs(5)).unwrap();
    let texts = vec!["证明".to_string(), "abc".to_string()];
    let sets = e.embed_tokens(&texts).unwrap();
    assert_eq!(sets[0].tokens, vec!["证", "明"]);
    assert_eq!(sets[1].vectors.len(), 3);
    let sentences = e.embed_sentences(&texts).unwrap();
    assert_eq!(sentences, vec![vec![2.0, 1.0], vec![3.0, 1.0]]);

    // More texts than one request chunk.
    let many: Vec<String> = (0..150).map(|i| format!("q{i}")).collect();
    assert_eq!(e.embed_sentences(&many).unwrap().len(), 150);

    assert!(e.embed_sentences(&["FAIL".to_string()]).is_err());
}
