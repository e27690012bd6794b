//! JSON-over-HTTP API for interactive sessions.
//!
//! Routes (all under `/v1`):
//!
//! | method | path | body |
//! |---|---|---|
//! | GET | `/health` | |
//! | POST | `/sessions` | PNG or PGM bytes |
//! | DELETE | `/sessions/{id}` | |
//! | POST | `/sessions/{id}/segment` | `SegPrompt` |
//! | POST | `/sessions/{id}/retrieve` | `{region_id, query, top_k}` |
//! | POST | `/sessions/{id}/compose` | `{region_id, component_id, mode, prompt, steps, seed}` |
//! | POST | `/sessions/{id}/undo` | |
//! | POST | `/sessions/{id}/reference` | PNG or PGM bytes |
//! | POST | `/sessions/{id}/generate` | `{prompt, steps, seed}` |
//! | GET | `/sessions/{id}/images/{name}` | |
//! | GET | `/components/{id}/image` | |
//!
//! Every JSON response carries `api_version`. Errors are
//! `{"api_version": 1, "error": {"code": ..., "message": ...}}`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::config::ServeConfig;
use crate::diffusion::{Checkpoint, DiffusionError};
use crate::imaging::{binarize, decode_color, decode_image, sketch_png_bytes, ImagingError};
use crate::pipeline::{ComposeRequest, GenerateRequest, PipelineError, RetrieveRequest, Workspace};
use crate::retrieval::{ComponentIndex, RetrievalError};
use crate::segmenter::{SegPrompt, SegmentError};

pub const API_VERSION: u32 = 1;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into() }
    }

    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        use PipelineError as P;
        let msg = e.to_string();
        match &e {
            P::UnknownRegion(_) => ApiError::new(StatusCode::NOT_FOUND, "region_not_found", msg),
            P::UnknownComponent(_) => ApiError::new(StatusCode::NOT_FOUND, "component_not_found", msg),
            P::NotOffered { .. } => ApiError::new(StatusCode::CONFLICT, "component_not_offered", msg),
            P::NothingToUndo => ApiError::new(StatusCode::CONFLICT, "nothing_to_undo", msg),
            P::NoIndex | P::NoModel(_) => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "not_loaded", msg),
            P::Segment(SegmentError::AmbiguousPrompt(_)) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "ambiguous_prompt", msg)
            }
            P::Segment(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "segment_failed", msg),
            P::Retrieval(RetrievalError::EmptyIndex) => {
                ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "empty_index", msg)
            }
            P::Retrieval(RetrievalError::UnparseableFilter(_) | RetrievalError::InvalidFilter(_)) => {
                ApiError::bad_request("bad_query", msg)
            }
            P::Diffusion(DiffusionError::InvalidSteps { .. })
            | P::Refine(crate::refine::RefineError::Diffusion(DiffusionError::InvalidSteps { .. })) => {
                ApiError::bad_request("invalid_steps", msg)
            }
            _ if e.is_user_error() => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", msg),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg),
        }
    }
}

impl From<ImagingError> for ApiError {
    fn from(e: ImagingError) -> Self {
        ApiError::bad_request("bad_image", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "api_version": API_VERSION, "error": { "code": self.code, "message": self.message } });
        (self.status, axum::Json(body)).into_response()
    }
}

enum Reply {
    Json(StatusCode, Value),
    Png(Vec<u8>),
}

impl IntoResponse for Reply {
    fn into_response(self) -> Response {
        match self {
            Reply::Json(status, mut v) => {
                v["api_version"] = json!(API_VERSION);
                (status, axum::Json(v)).into_response()
            }
            Reply::Png(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        }
    }
}

fn ok(v: Value) -> Result<Reply, ApiError> {
    Ok(Reply::Json(StatusCode::OK, v))
}

struct Session {
    workspace: Mutex<Workspace>,
    last_used: Mutex<Instant>,
}

/// Artifacts loaded at startup plus the live sessions.
pub struct AppState {
    pub index: Option<Arc<ComponentIndex>>,
    pub model: Option<Arc<Checkpoint>>,
    pub refine_model: Option<Arc<Checkpoint>>,
    pub ttl: Duration,
    sessions: Mutex<HashMap<String, Arc<Session>>>,
}

impl AppState {
    pub fn new(
        index: Option<ComponentIndex>,
        model: Option<Checkpoint>,
        refine_model: Option<Checkpoint>,
        ttl: Duration,
    ) -> Self {
        AppState {
            index: index.map(Arc::new),
            model: model.map(Arc::new),
            refine_model: refine_model.map(Arc::new),
            ttl,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    /// Loads the configured index and checkpoints.
    pub fn load(config: &ServeConfig) -> Result<Self, String> {
        let index = match &config.index {
            Some(p) => Some(ComponentIndex::load(p).map_err(|e| format!("index {}: {e}", p.display()))?),
            None => None,
        };
        let load_ck = |p: &Option<std::path::PathBuf>| -> Result<Option<Checkpoint>, String> {
            match p {
                Some(p) => Checkpoint::load(p).map(Some).map_err(|e| format!("checkpoint {}: {e}", p.display())),
                None => Ok(None),
            }
        };
        let model = load_ck(&config.checkpoint)?;
        let refine = load_ck(&config.refine_checkpoint)?;
        Ok(AppState::new(index, model, refine, Duration::from_secs(config.session_ttl_secs)))
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    fn purge_expired(&self, sessions: &mut HashMap<String, Arc<Session>>) {
        let now = Instant::now();
        sessions.retain(|_, s| now.duration_since(*s.last_used.lock().unwrap()) < self.ttl);
    }

    fn insert(&self, ws: Workspace) -> String {
        let id = hex::encode(rand::random::<[u8; 16]>());
        let s = Arc::new(Session { workspace: Mutex::new(ws), last_used: Mutex::new(Instant::now()) });
        let mut map = self.sessions.lock().unwrap();
        self.purge_expired(&mut map);
        map.insert(id.clone(), s);
        id
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        let mut map = self.sessions.lock().unwrap();
        self.purge_expired(&mut map);
        let s = map
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "session_not_found", "session not found"))?;
        *s.last_used.lock().unwrap() = Instant::now();
        Ok(s)
    }

    /// Runs `f` with the session's workspace locked; requests to one session
    /// serialize, others proceed.
    fn with_session<T>(&self, id: &str, f: impl FnOnce(&mut Workspace) -> Result<T, ApiError>) -> Result<T, ApiError> {
        let s = self.session(id)?;
        let mut ws = s.workspace.lock().unwrap_or_else(|p| p.into_inner());
        f(&mut ws)
    }

    fn index(&self) -> Result<&ComponentIndex, ApiError> {
        self.index.as_deref().ok_or_else(|| PipelineError::NoIndex.into())
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let body = if body.is_empty() { b"{}".as_slice() } else { body };
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("parse_error", e.to_string()))
}

async fn blocking<F>(app: Arc<AppState>, f: F) -> Response
where
    F: FnOnce(&AppState) -> Result<Reply, ApiError> + Send + 'static,
{
    match tokio::task::spawn_blocking(move || f(&app)).await {
        Ok(Ok(r)) => r.into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()).into_response(),
    }
}

fn image_url(id: &str, name: &str) -> String {
    format!("/v1/sessions/{id}/images/{name}")
}

async fn health(State(app): State<Arc<AppState>>) -> Response {
    Reply::Json(
        StatusCode::OK,
        json!({
            "status": "ok",
            "version": env!("CARGO_PKG_VERSION"),
            "index_loaded": app.index.is_some(),
            "checkpoint_loaded": app.model.is_some(),
            "refine_checkpoint_loaded": app.refine_model.is_some(),
            "sessions": app.session_count(),
        }),
    )
    .into_response()
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> Response {
    blocking(app, move |app| {
        let sketch = binarize(&decode_image(&body)?);
        let (w, h) = (sketch.width(), sketch.height());
        let id = app.insert(Workspace::new(sketch));
        Ok(Reply::Json(
            StatusCode::CREATED,
            json!({ "session_id": id, "width": w, "height": h, "rough_url": image_url(&id, "rough.png") }),
        ))
    })
    .await
}

async fn delete_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let removed = app.sessions.lock().unwrap().remove(&id).is_some();
    if removed {
        Reply::Json(StatusCode::OK, json!({ "deleted": id })).into_response()
    } else {
        ApiError::new(StatusCode::NOT_FOUND, "session_not_found", "session not found").into_response()
    }
}

async fn segment(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Response {
    blocking(app, move |app| {
        let prompt: SegPrompt = parse(&body)?;
        app.with_session(&id, |ws| {
            let rid = ws.segment(&prompt)?;
            let r = &ws.regions[rid];
            ok(json!({
                "region_id": rid,
                "bbox": r.bbox(),
                "area": r.area(),
                "confidence": r.confidence,
                "mask_url": image_url(&id, &format!("region-{rid}.png")),
            }))
        })
    })
    .await
}

async fn retrieve(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Response {
    blocking(app, move |app| {
        let req: RetrieveRequest = parse(&body)?;
        let index = app.index()?;
        app.with_session(&id, |ws| {
            let cands = ws.retrieve(index, &req)?;
            let list: Vec<Value> = cands
                .iter()
                .map(|c| {
                    let mut v = serde_json::to_value(c).expect("candidates serialize");
                    v["thumbnail_url"] = json!(format!("/v1/components/{}/image", c.component_id));
                    v
                })
                .collect();
            ok(json!({ "region_id": req.region_id, "candidates": list }))
        })
    })
    .await
}

fn sketch_state(id: &str, ws: &Workspace) -> Value {
    json!({
        "preview_url": image_url(id, "detailed.png"),
        "provenance": ws.provenance(),
    })
}

async fn compose(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Response {
    blocking(app, move |app| {
        let req: ComposeRequest = parse(&body)?;
        let index = app.index()?;
        let refine = app.refine_model.as_deref();
        app.with_session(&id, |ws| {
            ws.compose(index, refine, &req)?;
            ok(sketch_state(&id, ws))
        })
    })
    .await
}

async fn undo(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    blocking(app, move |app| {
        app.with_session(&id, |ws| {
            ws.undo()?;
            ok(sketch_state(&id, ws))
        })
    })
    .await
}

async fn reference(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Response {
    blocking(app, move |app| {
        let img = decode_color(&body)?;
        app.with_session(&id, |ws| {
            let (w, h) = (img.width, img.height);
            ws.reference = Some(img);
            ok(json!({ "reference_url": image_url(&id, "reference.png"), "width": w, "height": h }))
        })
    })
    .await
}

async fn generate(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Response {
    blocking(app, move |app| {
        let req: GenerateRequest = parse(&body)?;
        let model = app.model.as_deref().ok_or(PipelineError::NoModel("generation"))?;
        app.with_session(&id, |ws| {
            let (_, metrics) = ws.generate(model, &req)?;
            ok(json!({
                "image_url": image_url(&id, "render.png"),
                "prompt": req.prompt,
                "steps": req.steps,
                "seed": req.seed,
                "metrics": metrics,
            }))
        })
    })
    .await
}

async fn session_image(State(app): State<Arc<AppState>>, Path((id, name)): Path<(String, String)>) -> Response {
    blocking(app, move |app| {
        app.with_session(&id, |ws| {
            ws.image_png(&name)
                .map(Reply::Png)
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "image_not_found", format!("no image {name:?}")))
        })
    })
    .await
}

async fn component_image(State(app): State<Arc<AppState>>, Path(cid): Path<u64>) -> Response {
    let result = app.index().and_then(|index| {
        index
            .record(cid)
            .map(|r| Reply::Png(sketch_png_bytes(&r.image)))
            .ok_or_else(|| PipelineError::UnknownComponent(cid).into())
    });
    match result {
        Ok(r) => r.into_response(),
        Err(e) => e.into_response(),
    }
}

async fn not_found() -> Response {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route").into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", axum::routing::delete(delete_session))
        .route("/v1/sessions/{id}/segment", post(segment))
        .route("/v1/sessions/{id}/retrieve", post(retrieve))
        .route("/v1/sessions/{id}/compose", post(compose))
        .route("/v1/sessions/{id}/undo", post(undo))
        .route("/v1/sessions/{id}/reference", post(reference))
        .route("/v1/sessions/{id}/generate", post(generate))
        .route("/v1/sessions/{id}/images/{name}", get(session_image))
        .route("/v1/components/{cid}/image", get(component_image))
        .fallback(not_found)
        .with_state(state)
}

/// Binds and serves until interrupted.
pub async fn serve(config: ServeConfig) -> Result<(), String> {
    let state = Arc::new(AppState::load(&config)?);
    let addr = format!("{}:{}", config.host, config.port);
    let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| format!("bind {addr}: {e}"))?;
    log::info!("listening on {addr}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| e.to_string())
}
