//! HTTP translation service.
//!
//! `POST /translate` takes `{"text": ..., "max_len": ...}` and returns
//! `{"translation", "tokens", "model_id", "latency_ms"}`; `GET /health`
//! reports `{"status", "model_id"}`; everything else is static content.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{error, info};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;
use tower_http::services::ServeDir;

use crate::translate::{TranslateError, Translator};

pub const DEFAULT_HOST: &str = "127.0.0.1";
pub const DEFAULT_PORT: u16 = 8090;

const INDEX_HTML: &str = include_str!("index.html");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslateRequest {
    pub text: String,
    #[serde(default)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslateResponse {
    pub translation: String,
    pub tokens: Vec<String>,
    pub model_id: String,
    pub latency_ms: u64,
}

/// Shared service state. The translator is set once loading finishes.
#[derive(Clone)]
pub struct AppState {
    translator: Arc<OnceLock<Arc<Translator>>>,
    workers: Arc<Semaphore>,
}

impl AppState {
    pub fn loading(workers: usize) -> Self {
        Self {
            translator: Arc::new(OnceLock::new()),
            workers: Arc::new(Semaphore::new(workers.max(1))),
        }
    }

    pub fn ready(translator: Translator, workers: usize) -> Self {
        let state = Self::loading(workers);
        state.set_translator(translator);
        state
    }

    pub fn set_translator(&self, translator: Translator) {
        let _ = self.translator.set(Arc::new(translator));
    }

    fn translator(&self) -> Option<Arc<Translator>> {
        self.translator.get().cloned()
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn health(State(state): State<AppState>) -> Response {
    match state.translator() {
        Some(t) => Json(json!({ "status": "ok", "model_id": t.model_id() })).into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({ "status": "loading", "model_id": null })),
        )
            .into_response(),
    }
}

async fn translate(State(state): State<AppState>, body: Bytes) -> Response {
    let started = Instant::now();
    let request: TranslateRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    let Some(translator) = state.translator() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "model is loading");
    };
    let ids = match translator.prepare(&request.text) {
        Ok(ids) => ids,
        Err(e @ TranslateError::EmptyInput) => return error(StatusCode::BAD_REQUEST, e.to_string()),
        Err(e @ TranslateError::InputTooLong { .. }) => return error(StatusCode::PAYLOAD_TOO_LARGE, e.to_string()),
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    let max_len = request
        .max_len
        .unwrap_or_else(|| translator.default_max_len(ids.len()))
        .clamp(1, translator.max_position());

    let Ok(_permit) = state.workers.clone().acquire_owned().await else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "service is shutting down");
    };
    let worker = translator.clone();
    let result = tokio::task::spawn_blocking(move || worker.translate_ids(&[ids], max_len)).await;
    match result {
        Ok(Ok(mut out)) => {
            let t = out.pop().expect("one input yields one output");
            Json(TranslateResponse {
                translation: t.translation,
                tokens: t.tokens,
                model_id: translator.model_id().to_owned(),
                latency_ms: started.elapsed().as_millis() as u64,
            })
            .into_response()
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("decoder task failed: {e}")),
    }
}

async fn embedded_index() -> Html<&'static str> {
    Html(INDEX_HTML)
}

/// Routes for the service. Static files come from `static_dir` when it
/// holds an `index.html`; otherwise a built-in page is served at `/`.
pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/translate", post(translate))
        .route("/health", get(health))
        .with_state(state);
    match static_dir.filter(|d| d.join("index.html").is_file()) {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(embedded_index)),
    }
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub model: PathBuf,
    pub src_bpe: Option<PathBuf>,
    pub tgt_bpe: Option<PathBuf>,
    pub addr: SocketAddr,
    pub static_dir: Option<PathBuf>,
    pub workers: usize,
}

/// Binds, starts answering (503 until the model is loaded), loads the
/// model in the background, and serves until Ctrl-C.
pub async fn serve(config: ServeConfig) -> anyhow::Result<()> {
    let state = AppState::loading(config.workers);
    let app = router(state.clone(), config.static_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(config.addr)
        .await
        .with_context(|| format!("binding {}", config.addr))?;
    info!("listening on http://{}", listener.local_addr()?);

    let load_cfg = config.clone();
    let loader = tokio::task::spawn_blocking(move || {
        Translator::load(&load_cfg.model, load_cfg.src_bpe.as_deref(), load_cfg.tgt_bpe.as_deref())
    });
    let server = axum::serve(listener, app).with_graceful_shutdown(async {
        let _ = tokio::signal::ctrl_c().await;
    });
    let server = tokio::spawn(async move { server.await });

    match loader.await? {
        Ok(t) => {
            info!("model {} loaded from {}", t.model_id(), config.model.display());
            state.set_translator(t);
        }
        Err(e) => {
            error!("could not load model: {e}");
            server.abort();
            return Err(anyhow::Error::new(e).context(format!("loading {}", config.model.display())));
        }
    }
    server.await??;
    Ok(())
}
