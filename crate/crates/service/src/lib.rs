//! HTTP service for interactive query reformulation.
//!
//! Sessions hold an encoded query and its current edit. They live in memory
//! and expire after a configurable idle time. Every model evaluation runs on
//! the blocking pool. Requests against one session are serialized, while
//! separate sessions run independently.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use reform_autodiff::OptimizerConfig;
use reform_core::catalog::{sample_catalog_with, Attribute, Catalog};
use reform_core::config::Config;
use reform_core::encoder::{encode_objective, encode_optimize, EncodeConfig, EncodeResult};
use reform_core::error::CoreError;
use reform_core::image::Image;
use reform_core::pipeline::ModelSet;
use reform_core::reformulator::{attribute_circularity, reformulate, AttributeTarget, TARGET_MARGIN};
use reform_core::retrieval::{SearchIndex, DEFAULT_K};
use reform_core::stylegan::LatentCode;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex as AsyncMutex;

/// Upper bound on `k` for search requests.
pub const MAX_K: usize = 100;

#[derive(Clone, Debug)]
pub struct ServiceSettings {
    pub session_ttl: Duration,
    pub encode: EncodeConfig,
    pub reform: OptimizerConfig,
    pub lambda_anchor: f64,
    pub catalog_seed: u64,
    pub catalog_listings: usize,
    pub catalog_variants: usize,
}

impl ServiceSettings {
    pub fn from_config(cfg: &Config) -> Self {
        ServiceSettings {
            session_ttl: Duration::from_secs(cfg.service.session_ttl_secs),
            encode: cfg.encode_config(),
            reform: cfg.reform.optimizer,
            lambda_anchor: cfg.reform.lambda_anchor,
            catalog_seed: cfg.seed,
            catalog_listings: cfg.service.catalog_listings,
            catalog_variants: cfg.service.catalog_variants,
        }
    }
}

struct Session {
    /// Never modified after encoding.
    original: LatentCode,
    current: LatentCode,
    /// Append-only.
    history: Vec<HistoryEntry>,
    created_at: u64,
    last_access: Instant,
}

#[derive(Clone, Debug, Serialize)]
pub struct HistoryEntry {
    pub targets: BTreeMap<String, f64>,
    pub anchor: f64,
    pub converged: bool,
    pub steps_used: usize,
    pub attributes: BTreeMap<String, f32>,
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub struct AppState {
    models: ModelSet,
    settings: ServiceSettings,
    catalog: Catalog,
    index: SearchIndex,
    thumbnails: Vec<String>,
    sessions: Mutex<HashMap<String, Arc<AsyncMutex<Session>>>>,
}

pub type SharedState = Arc<AppState>;

impl AppState {
    /// Renders the search catalog and indexes it; slow for large catalogs.
    pub fn new(models: ModelSet, settings: ServiceSettings) -> Result<Self, CoreError> {
        settings.encode.validate()?;
        settings.reform.validate()?;
        if models.classifier.space != settings.encode.space {
            return Err(CoreError::InvalidConfig(format!(
                "classifier expects {:?} codes but encoding produces {:?}",
                models.classifier.space, settings.encode.space
            )));
        }
        let catalog = sample_catalog_with(
            settings.catalog_seed,
            settings.catalog_listings,
            settings.catalog_variants + 1,
            &Attribute::ALL,
            models.image_size(),
        )?;
        let index = SearchIndex::build(&catalog, &models.perceptual)?;
        let thumbnails = catalog
            .entries
            .iter()
            .map(|e| e.image.to_png().map(|b| B64.encode(b)))
            .collect::<Result<_, _>>()?;
        Ok(AppState {
            models,
            settings,
            catalog,
            index,
            thumbnails,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    /// Drops sessions idle for longer than the TTL. Sessions busy with a
    /// request are in use and kept.
    pub fn sweep_expired(&self) -> usize {
        let ttl = self.settings.session_ttl;
        let mut map = self.sessions.lock().unwrap();
        let before = map.len();
        map.retain(|_, s| match s.try_lock() {
            Ok(s) => s.last_access.elapsed() <= ttl,
            Err(_) => true,
        });
        before - map.len()
    }

    fn session(&self, id: &str) -> Result<Arc<AsyncMutex<Session>>, ApiError> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session '{id}'")))
    }

    /// 404s and drops the session if it idled past the TTL, else touches it.
    fn check_live(&self, id: &str, session: &mut Session) -> Result<(), ApiError> {
        if session.last_access.elapsed() > self.settings.session_ttl {
            self.sessions.lock().unwrap().remove(id);
            return Err(ApiError::not_found(format!("session '{id}' expired")));
        }
        session.last_access = Instant::now();
        Ok(())
    }

    fn render(&self, code: &LatentCode) -> Result<Image, CoreError> {
        self.models.models().render(code)
    }

    fn attributes_of(&self, code: &LatentCode) -> Result<BTreeMap<String, f32>, CoreError> {
        let out = self.models.classifier.predict(code)?;
        Ok(self.models.classifier.names.iter().cloned().zip(out).collect())
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidImage(_) | CoreError::InvalidArgument(_) | CoreError::InvalidCode(_) | CoreError::Png(_) => {
                ApiError::bad_request(e.to_string())
            }
            other => {
                tracing::error!(error = %other, "request failed");
                ApiError::internal(other.to_string())
            }
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::bad_request(e.body_text())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, CoreError> + Send + 'static) -> Result<T, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError::internal(format!("worker failed: {e}"))),
    }
}

fn decode_image(b64: &str, size: usize) -> Result<Image, ApiError> {
    let bytes = B64.decode(b64.trim()).map_err(|e| ApiError::bad_request(format!("image is not base64: {e}")))?;
    let img = Image::from_png(&bytes).map_err(|e| ApiError::bad_request(format!("image is not a readable PNG: {e}")))?;
    if img.size() != size {
        return Err(ApiError::bad_request(format!("expected a {size}x{size} image, got {0}x{0}", img.size())));
    }
    Ok(img)
}

fn png_b64(img: &Image) -> Result<String, CoreError> {
    Ok(B64.encode(img.to_png()?))
}

#[derive(Clone, Copy, Debug, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodeMode {
    #[default]
    Optimize,
    Fast,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodeRequest {
    pub image: String,
    #[serde(default)]
    pub mode: EncodeMode,
}

#[derive(Serialize)]
pub struct CodeSummary {
    pub space: String,
    pub dim: usize,
    pub norm: f32,
    pub values: Vec<f32>,
}

#[derive(Serialize)]
pub struct EncodeResponse {
    pub session_id: String,
    pub code_summary: CodeSummary,
    pub reconstruction: String,
    pub loss: f64,
    pub attributes: BTreeMap<String, f32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReformulateRequest {
    pub targets: BTreeMap<String, f64>,
    #[serde(default)]
    pub anchor: Option<f64>,
}

#[derive(Serialize)]
pub struct ReformulateResponse {
    pub image: String,
    pub attributes: BTreeMap<String, f32>,
    pub converged: bool,
    pub steps_used: usize,
}

#[derive(Serialize)]
pub struct ResetResponse {
    pub session_id: String,
    pub image: String,
    pub attributes: BTreeMap<String, f32>,
}

#[derive(Serialize)]
pub struct AttributeRange {
    pub min: f32,
    pub max: f32,
    pub circular: bool,
}

#[derive(Serialize)]
pub struct AttributesResponse {
    pub names: Vec<String>,
    pub ranges: BTreeMap<String, AttributeRange>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    pub image: String,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Serialize)]
pub struct SearchHit {
    pub rank: usize,
    pub id: usize,
    pub listing_id: usize,
    pub score: f32,
    pub thumbnail: String,
}

#[derive(Serialize)]
pub struct SearchResponse {
    pub k: usize,
    pub results: Vec<SearchHit>,
}

#[derive(Serialize)]
pub struct HealthResponse {
    pub status: &'static str,
    pub model_hashes: BTreeMap<String, String>,
    pub sessions: usize,
    pub catalog_size: usize,
}

async fn encode(State(st): State<SharedState>, body: Result<Json<EncodeRequest>, JsonRejection>) -> ApiResult<EncodeResponse> {
    let Json(req) = body?;
    let img = decode_image(&req.image, st.models.image_size())?;
    if matches!(req.mode, EncodeMode::Fast) && st.models.encoder.is_none() {
        return Err(ApiError::bad_request("fast mode needs a trained feed-forward encoder"));
    }
    let s = st.clone();
    let (result, recon, attributes) = blocking(move || {
        let models = s.models.models();
        let result: EncodeResult = match req.mode {
            EncodeMode::Optimize => encode_optimize(&img, models, &s.settings.encode, None)?,
            EncodeMode::Fast => {
                let enc = s.models.encoder.as_ref().expect("checked above");
                encode_objective(&img, &enc.encode_fast(&img)?, models, &s.settings.encode)?
            }
        };
        let recon = png_b64(&s.render(&result.code)?)?;
        let attributes = s.attributes_of(&result.code)?;
        Ok((result, recon, attributes))
    })
    .await?;
    let code = result.code;
    let id = uuid::Uuid::new_v4().to_string();
    let session = Session {
        original: code.clone(),
        current: code.clone(),
        history: Vec::new(),
        created_at: unix_now(),
        last_access: Instant::now(),
    };
    st.sessions.lock().unwrap().insert(id.clone(), Arc::new(AsyncMutex::new(session)));
    tracing::info!(session = %id, loss = result.final_loss, "session created");
    Ok(Json(EncodeResponse {
        session_id: id,
        code_summary: CodeSummary {
            space: format!("{:?}", code.space),
            dim: code.dim(),
            norm: code.values.iter().map(|v| v * v).sum::<f32>().sqrt(),
            values: code.values,
        },
        reconstruction: recon,
        loss: result.final_loss,
        attributes,
    }))
}

fn parse_targets(names: &[String], req: &ReformulateRequest) -> Result<AttributeTarget, ApiError> {
    if req.targets.is_empty() {
        return Err(ApiError::bad_request("targets must set at least one attribute"));
    }
    let mut pairs = Vec::with_capacity(req.targets.len());
    for (name, &y) in &req.targets {
        if !names.contains(name) {
            return Err(ApiError::bad_request(format!("unknown attribute '{name}'; expected one of {names:?}")));
        }
        if !(y > 0.0 && y < 1.0) {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "target_out_of_range",
                format!("target for '{name}' must lie strictly between 0 and 1, got {y}"),
            ));
        }
        pairs.push((name.clone(), y as f32));
    }
    Ok(AttributeTarget::from_pairs(names, &pairs)?)
}

async fn reformulate_session(
    State(st): State<SharedState>,
    Path(id): Path<String>,
    body: Result<Json<ReformulateRequest>, JsonRejection>,
) -> ApiResult<ReformulateResponse> {
    let handle = st.session(&id)?;
    let Json(req) = body?;
    let target = parse_targets(&st.models.classifier.names, &req)?;
    let anchor = req.anchor.unwrap_or(st.settings.lambda_anchor);
    if !(anchor >= 0.0 && anchor.is_finite()) {
        return Err(ApiError::bad_request("anchor must be a non-negative number"));
    }
    let mut session = handle.lock().await;
    st.check_live(&id, &mut session)?;
    let start = session.current.clone();
    let s = st.clone();
    let (edit, image, attributes) = blocking(move || {
        let edit = reformulate(&start, &s.models.classifier, &target, &s.settings.reform, anchor)?;
        let image = png_b64(&s.render(&edit.code)?)?;
        let attributes = s.attributes_of(&edit.code)?;
        Ok((edit, image, attributes))
    })
    .await?;
    session.current = edit.code;
    session.history.push(HistoryEntry {
        targets: req.targets,
        anchor,
        converged: edit.converged,
        steps_used: edit.steps_used,
        attributes: attributes.clone(),
    });
    session.last_access = Instant::now();
    tracing::info!(session = %id, edits = session.history.len(), converged = edit.converged, steps = edit.steps_used, "reformulated");
    Ok(Json(ReformulateResponse {
        image,
        attributes,
        converged: edit.converged,
        steps_used: edit.steps_used,
    }))
}

async fn reset_session(State(st): State<SharedState>, Path(id): Path<String>) -> ApiResult<ResetResponse> {
    let handle = st.session(&id)?;
    let mut session = handle.lock().await;
    st.check_live(&id, &mut session)?;
    session.current = session.original.clone();
    let code = session.original.clone();
    let s = st.clone();
    let (image, attributes) = blocking(move || Ok((png_b64(&s.render(&code)?)?, s.attributes_of(&code)?))).await?;
    Ok(Json(ResetResponse { session_id: id, image, attributes }))
}

#[derive(Serialize)]
pub struct SessionResponse {
    pub session_id: String,
    pub created_at: u64,
    pub history: Vec<HistoryEntry>,
}

async fn get_session(State(st): State<SharedState>, Path(id): Path<String>) -> ApiResult<SessionResponse> {
    let handle = st.session(&id)?;
    let mut session = handle.lock().await;
    st.check_live(&id, &mut session)?;
    Ok(Json(SessionResponse {
        session_id: id,
        created_at: session.created_at,
        history: session.history.clone(),
    }))
}

async fn attributes(State(st): State<SharedState>) -> Json<AttributesResponse> {
    let names = st.models.classifier.names.clone();
    let circular = attribute_circularity();
    let ranges = names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let range = AttributeRange {
                min: TARGET_MARGIN,
                max: 1.0 - TARGET_MARGIN,
                circular: circular.get(i).copied().unwrap_or(false),
            };
            (n.clone(), range)
        })
        .collect();
    Json(AttributesResponse { names, ranges })
}

async fn search(State(st): State<SharedState>, body: Result<Json<SearchRequest>, JsonRejection>) -> ApiResult<SearchResponse> {
    let Json(req) = body?;
    let k = req.k.unwrap_or(DEFAULT_K);
    if k == 0 || k > MAX_K {
        return Err(ApiError::bad_request(format!("k must be in 1..={MAX_K}")));
    }
    let img = decode_image(&req.image, st.models.image_size())?;
    let s = st.clone();
    let ranked = blocking(move || s.index.search(&s.models.perceptual, &img, k)).await?;
    let results = ranked
        .entries
        .iter()
        .enumerate()
        .map(|(r, &(id, score))| SearchHit {
            rank: r + 1,
            id,
            listing_id: st.catalog.entry(id).listing_id,
            score,
            thumbnail: st.thumbnails[id].clone(),
        })
        .collect();
    Ok(Json(SearchResponse { k, results }))
}

async fn healthz(State(st): State<SharedState>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok",
        model_hashes: st.models.hashes.clone(),
        sessions: st.session_count(),
        catalog_size: st.catalog.entries.len(),
    })
}

async fn fallback() -> ApiError {
    ApiError::not_found("no such route")
}

async fn log_requests(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let start = Instant::now();
    let res = next.run(req).await;
    tracing::info!(
        method = %method,
        path = %path,
        status = res.status().as_u16(),
        elapsed_ms = start.elapsed().as_secs_f64() * 1e3,
        "request"
    );
    res
}

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/v1/encode", post(encode))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/reformulate", post(reformulate_session))
        .route("/v1/sessions/{id}/reset", post(reset_session))
        .route("/v1/attributes", get(attributes))
        .route("/v1/search", post(search))
        .route("/v1/healthz", get(healthz))
        .fallback(fallback)
        .layer(middleware::from_fn(log_requests))
        .with_state(state)
}

/// Serves on `listener` until the process ends, sweeping expired sessions
/// in the background.
pub async fn serve(listener: tokio::net::TcpListener, state: SharedState) -> std::io::Result<()> {
    let sweeper = state.clone();
    let period = (state.settings.session_ttl / 4).clamp(Duration::from_millis(100), Duration::from_secs(60));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let n = sweeper.sweep_expired();
            if n > 0 {
                tracing::info!(expired = n, "sessions swept");
            }
        }
    });
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}

/// Port from the `PORT` environment variable, 8080 when unset.
pub fn port_from_env() -> Result<u16, String> {
    match std::env::var("PORT") {
        Ok(p) => p.parse().map_err(|_| format!("PORT must be a port number, got '{p}'")),
        Err(_) => Ok(8080),
    }
}

/// Loads models from `dir`, builds the state and serves on `0.0.0.0:port`.
pub async fn run(dir: &std::path::Path, cfg: &Config, port: u16) -> anyhow::Result<()> {
    cfg.validate()?;
    let dir = dir.to_path_buf();
    let settings = ServiceSettings::from_config(cfg);
    let state = tokio::task::spawn_blocking(move || -> Result<AppState, CoreError> {
        let models = ModelSet::load(&dir)?;
        AppState::new(models, settings)
    })
    .await??;
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    serve(listener, Arc::new(state)).await?;
    Ok(())
}
