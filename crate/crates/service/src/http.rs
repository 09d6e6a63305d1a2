//! JSON HTTP API over one read-only checkpoint.

use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cocon::block::CoConModel;
use cocon::checkpoint;
use cocon::generator::{self, GenerationRequest};
use cocon::lm::LMConfig;
use cocon::tensor::ParameterStore;
use cocon::tokenizer::{TokenId, Vocab};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use tower_http::services::ServeDir;

/// A loaded checkpoint and tokenizer.
pub struct Model {
    pub model: CoConModel,
    pub store: ParameterStore,
    pub vocab: Vocab,
    /// SHA-256 of the checkpoint file, hex encoded.
    pub checkpoint_hash: String,
}

impl Model {
    pub fn load(checkpoint_path: &Path, vocab_path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(checkpoint_path).with_context(|| format!("reading {}", checkpoint_path.display()))?;
        let (meta, store) = checkpoint::from_bytes(&bytes).with_context(|| format!("loading {}", checkpoint_path.display()))?;
        let vocab = Vocab::load(vocab_path).with_context(|| format!("loading {}", vocab_path.display()))?;
        if vocab.size() > meta.lm.vocab_size {
            anyhow::bail!(
                "tokenizer has {} ids but the checkpoint only {}",
                vocab.size(),
                meta.lm.vocab_size
            );
        }
        Ok(Model {
            model: CoConModel::new(meta.lm)?,
            store,
            vocab,
            checkpoint_hash: sha256_hex(&bytes),
        })
    }

    pub fn config(&self) -> &LMConfig {
        self.model.config()
    }

    /// Short identifier derived from the checkpoint hash.
    pub fn model_id(&self) -> &str {
        &self.checkpoint_hash[..12]
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Shared handler state: empty until the checkpoint has loaded.
#[derive(Clone, Default)]
pub struct AppState {
    model: Arc<RwLock<Option<Arc<Model>>>>,
}

impl AppState {
    pub fn loading() -> Self {
        AppState::default()
    }

    pub fn ready(model: Model) -> Self {
        let s = AppState::default();
        s.set(model);
        s
    }

    pub fn set(&self, model: Model) {
        *self.model.write().expect("state lock") = Some(Arc::new(model));
    }

    pub fn get(&self) -> Option<Arc<Model>> {
        self.model.read().expect("state lock").clone()
    }
}

pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let mut app = Router::new()
        .route("/generate", post(generate))
        .route("/health", get(health))
        .route("/config", get(config))
        .with_state(state);
    if let Some(dir) = ui_dir {
        app = app.nest_service("/ui", ServeDir::new(dir));
    }
    app
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    field: Option<String>,
    message: String,
}

impl ApiError {
    fn bad_request(field: Option<String>, message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            field,
            message: message.into(),
        }
    }

    fn loading() -> Self {
        ApiError {
            status: StatusCode::SERVICE_UNAVAILABLE,
            field: None,
            message: "checkpoint is still loading".into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message, "field": self.field }))).into_response()
    }
}

#[derive(Debug, Serialize)]
struct WireSample {
    text: String,
    continuation: String,
    tokens: Vec<TokenId>,
    prompt_len: usize,
    logprobs: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct GenerateResponse {
    samples: Vec<WireSample>,
    model_id: String,
    seed: u64,
    elapsed_ms: f64,
}

/// Parses a request body, naming the offending field on failure.
pub fn parse_request(body: &[u8]) -> Result<GenerationRequest, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    let req: GenerationRequest = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let field = if path == "." {
            missing_field(&inner.to_string())
        } else {
            Some(path)
        };
        ApiError::bad_request(field, inner.to_string())
    })?;
    req.validate()
        .map_err(|(field, msg)| ApiError::bad_request(Some(field.into()), format!("{field}: {msg}")))?;
    Ok(req)
}

fn missing_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("missing field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

async fn generate(State(state): State<AppState>, body: Bytes) -> Result<Json<GenerateResponse>, ApiError> {
    let req = parse_request(&body)?;
    let model = state.get().ok_or_else(ApiError::loading)?;
    let res = tokio::task::spawn_blocking(move || {
        let m = &*model;
        generator::generate(&req, &m.model, &m.store, &m.vocab).map(|r| (r, m.model_id().to_string()))
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        field: None,
        message: e.to_string(),
    })?;
    let (result, model_id) = res.map_err(|e| match e {
        cocon::Error::ContextOverflow { .. } => ApiError::bad_request(Some("max_new_tokens".into()), e.to_string()),
        cocon::Error::InvalidConfig(_) => ApiError::bad_request(None, e.to_string()),
        other => ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            field: None,
            message: other.to_string(),
        },
    })?;
    Ok(Json(GenerateResponse {
        samples: result
            .samples
            .into_iter()
            .map(|s| WireSample {
                text: s.text,
                continuation: s.continuation,
                tokens: s.tokens,
                prompt_len: s.prompt_len,
                logprobs: s.logprobs,
            })
            .collect(),
        model_id,
        seed: result.seed,
        elapsed_ms: result.elapsed_ms,
    }))
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    let status = if state.get().is_some() { "ok" } else { "loading" };
    Json(json!({ "status": status }))
}

async fn config(State(state): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    let m = state.get().ok_or_else(ApiError::loading)?;
    Ok(Json(json!({
        "lm": m.config(),
        "checkpoint_hash": m.checkpoint_hash,
        "model_id": m.model_id(),
    })))
}

/// Binds, starts answering (503 on `/generate` until ready) and loads the
/// checkpoint in the background. A failed load shuts the server down.
pub async fn serve(addr: &str, checkpoint: PathBuf, vocab: PathBuf, ui_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let state = AppState::loading();
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    let (fail_tx, fail_rx) = tokio::sync::oneshot::channel::<anyhow::Error>();
    let loader = state.clone();
    tokio::spawn(async move {
        match tokio::task::spawn_blocking(move || Model::load(&checkpoint, &vocab)).await {
            Ok(Ok(model)) => {
                eprintln!("loaded checkpoint {}", model.model_id());
                loader.set(model);
            }
            Ok(Err(e)) => {
                let _ = fail_tx.send(e);
            }
            Err(e) => {
                let _ = fail_tx.send(anyhow::anyhow!("checkpoint loader panicked: {e}"));
            }
        }
    });
    let failure = Arc::new(std::sync::Mutex::new(None));
    let slot = failure.clone();
    let shutdown = async move {
        match fail_rx.await {
            Ok(e) => *slot.lock().expect("failure slot") = Some(e),
            // loaded fine; serve until killed
            Err(_) => std::future::pending().await,
        }
    };
    axum::serve(listener, router(state, ui_dir))
        .with_graceful_shutdown(shutdown)
        .await
        .context("server stopped")?;
    let failed = failure.lock().expect("failure slot").take();
    match failed {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
