use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::oneshot;

use super::{Sandbox, SandboxError, ToolEnvironment};
use crate::types::{JsonObject, ToolRef, ToolResponse};

#[derive(Deserialize)]
struct SeedParam {
    #[serde(default)]
    seed: u64,
}

async fn call(
    State(sb): State<Arc<Sandbox>>,
    Path((provider, api)): Path<(String, String)>,
    Query(q): Query<SeedParam>,
    Json(args): Json<Value>,
) -> Response {
    let Value::Object(args) = args else {
        return (StatusCode::BAD_REQUEST, Json(json!({"error": "arguments must be a JSON object"}))).into_response();
    };
    let tool = ToolRef::new(provider, api);
    match tokio::task::spawn_blocking(move || sb.invoke(&tool, &args, q.seed)).await {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e @ SandboxError::UnknownTool(_))) => {
            (StatusCode::NOT_FOUND, Json(json!({"error": e.to_string()}))).into_response()
        }
        Ok(Err(e)) => (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({"error": e.to_string()}))).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({"error": e.to_string()}))).into_response(),
    }
}

async fn schema(State(sb): State<Arc<Sandbox>>, Path(provider): Path<String>) -> Response {
    match sb.provider_schema(&provider) {
        Some(v) => Json(v).into_response(),
        None => (StatusCode::NOT_FOUND, Json(json!({"error": format!("unknown provider {provider}")}))).into_response(),
    }
}

pub fn router(sandbox: Arc<Sandbox>) -> Router {
    Router::new()
        .route("/call/{provider}/{api}", post(call))
        .route("/schema/{provider}", get(schema))
        .with_state(sandbox)
}

/// Local REST front end for a sandbox, served from a background thread.
pub struct SandboxServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl SandboxServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts serving.
    pub fn start(sandbox: Arc<Sandbox>, addr: &str) -> std::io::Result<Self> {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = rt.block_on(tokio::net::TcpListener::bind(addr))?;
        let local = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = router(sandbox);
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(Self {
            addr: local,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for SandboxServer {
    fn drop(&mut self) {
        self.stop();
    }
}

/// [`ToolEnvironment`] that talks to a [`SandboxServer`] over HTTP.
pub struct HttpEnvironment {
    base_url: String,
    client: reqwest::blocking::Client,
}

impl HttpEnvironment {
    pub fn new(base_url: impl Into<String>) -> Result<Self, SandboxError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| SandboxError::Transport(e.to_string()))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client,
        })
    }

    pub fn schema(&self, provider_id: &str) -> Result<Value, SandboxError> {
        let resp = self
            .client
            .get(format!("{}/schema/{provider_id}", self.base_url))
            .send()
            .map_err(|e| SandboxError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(SandboxError::Transport(format!("status {}", resp.status())));
        }
        resp.json().map_err(|e| SandboxError::Transport(e.to_string()))
    }
}

impl ToolEnvironment for HttpEnvironment {
    fn invoke(&self, tool: &ToolRef, args: &JsonObject, seed: u64) -> Result<ToolResponse, SandboxError> {
        let url = format!("{}/call/{}/{}?seed={seed}", self.base_url, tool.provider_id, tool.api_name);
        let resp = self
            .client
            .post(url)
            .json(args)
            .send()
            .map_err(|e| SandboxError::Transport(e.to_string()))?;
        match resp.status().as_u16() {
            200 => resp.json().map_err(|e| SandboxError::Transport(e.to_string())),
            404 => Err(SandboxError::UnknownTool(tool.clone())),
            s => Err(SandboxError::Transport(format!("status {s}"))),
        }
    }
}
