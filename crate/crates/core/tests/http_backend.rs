use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use toolforge_core::gateway::{Gateway, GatewayConfig, GatewayError, HttpBackend, HttpBackendConfig};

#[derive(Clone)]
struct Script {
    hits: Arc<AtomicU32>,
    /// Status returned for the first `fail_first` requests.
    fail_status: u16,
    fail_first: u32,
}

async fn chat(State(s): State<Script>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let n = s.hits.fetch_add(1, Ordering::SeqCst);
    if n < s.fail_first {
        return (StatusCode::from_u16(s.fail_status).unwrap(), Json(json!({"error": "scripted"})));
    }
    let auth = headers.get("authorization").and_then(|v| v.to_str().ok()).unwrap_or("").to_string();
    let echo = format!("{} | {} | {}", body["model"], body["messages"][1]["content"], auth);
    (
        StatusCode::OK,
        Json(json!({
            "choices": [{"message": {"role": "assistant", "content": echo}}],
            "usage": {"prompt_tokens": 7, "completion_tokens": 5}
        })),
    )
}

fn serve(fail_status: u16, fail_first: u32) -> (String, Arc<AtomicU32>) {
    let hits = Arc::new(AtomicU32::new(0));
    let app = Router::new().route("/v1/chat/completions", post(chat)).with_state(Script {
        hits: hits.clone(),
        fail_status,
        fail_first,
    });
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(1).enable_all().build().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    std::thread::spawn(move || rt.block_on(async { axum::serve(listener, app).await.unwrap() }));
    (url, hits)
}

fn gateway(url: &str) -> Gateway {
    let backend = HttpBackend::new(HttpBackendConfig {
        base_url: url.to_string(),
        api_key: Some("k-123".into()),
        timeout: Duration::from_secs(5),
    })
    .unwrap();
    Gateway::new(
        Arc::new(backend),
        GatewayConfig {
            model_id: "m-small".into(),
            max_retries: 3,
            backoff_base_ms: 1,
            ..GatewayConfig::default()
        },
    )
}

#[test]
fn roundtrip_sends_model_messages_and_key() {
    let (url, hits) = serve(500, 0);
    let g = gateway(&url);
    let r = g.complete(&g.request("annotate", "sys", "hello".into())).unwrap();
    assert_eq!(r.text, "\"m-small\" | \"hello\" | Bearer k-123");
    assert_eq!(r.usage.total(), 12);
    assert_eq!(g.tokens_used(), 12);
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn server_errors_are_retried() {
    let (url, hits) = serve(503, 2);
    let g = gateway(&url);
    g.complete(&g.request("annotate", "sys", "x".into())).unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn retries_are_bounded() {
    let (url, hits) = serve(500, 100);
    let g = gateway(&url);
    let e = g.complete(&g.request("annotate", "sys", "x".into())).unwrap_err();
    assert!(matches!(e, GatewayError::Transport { attempts: 4, .. }), "{e:?}");
    assert_eq!(hits.load(Ordering::SeqCst), 4);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, hits) = serve(400, 100);
    let g = gateway(&url);
    let e = g.complete(&g.request("annotate", "sys", "x".into())).unwrap_err();
    assert!(matches!(e, GatewayError::Client { status: 400, .. }), "{e:?}");
    assert_eq!(hits.load(Ordering::SeqCst), 1);

    let (url, hits) = serve(401, 100);
    let g = gateway(&url);
    assert!(matches!(g.complete(&g.request("s", "sys", "x".into())), Err(GatewayError::Auth(_))));
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}
