//! HTTP inference service.
//!
//! Endpoints (all JSON, versioned under `/v1`):
//!
//! - `POST /v1/predict`: multipart form with an `image` file part (PNG or
//!   PPM) and a `meta` JSON part, or a JSON body `{"image": "<base64>", …meta}`.
//! - `GET /v1/health`: `{status, model_id, uptime, segmenter_loaded}`; 503 until the regressor is loaded.
//! - `GET /v1/model`: layer summaries, specs and standardization constants.
//!
//! Every error is a JSON body `{error_code, message}`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use pallor_core::error::PallorError;
use pallor_core::imaging::{decode_image, RgbImage};
use pallor_core::neuralnet::{self, NetworkSpec, Standardization};
use pallor_core::pipeline::{analyze, Models, PipelineConfig, PredictMeta, PredictResponse};
use pallor_core::screening::{validate_cutoffs, Regressor, DEFAULT_CUTOFFS};
use pallor_core::segmentation::SegNet;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
pub const DEFAULT_MAX_BODY_BYTES: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    pub regressor_weights: Option<PathBuf>,
    pub segmenter_weights: Option<PathBuf>,
    pub max_body_bytes: usize,
    pub default_cutoffs: Vec<f64>,
    /// Permissive cross-origin headers, for a browser UI on another origin.
    pub cors: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: DEFAULT_LISTEN.parse().unwrap(),
            regressor_weights: None,
            segmenter_weights: None,
            max_body_bytes: DEFAULT_MAX_BODY_BYTES,
            default_cutoffs: DEFAULT_CUTOFFS.to_vec(),
            cors: false,
        }
    }
}

/// Read-only state shared by all handlers.
#[derive(Debug)]
pub struct AppState {
    pub models: Models,
    pub pipeline: PipelineConfig,
    pub segmenter_id: Option<String>,
    started: Instant,
}

impl AppState {
    pub fn new(models: Models, segmenter_id: Option<String>, pipeline: PipelineConfig) -> Self {
        Self { models, pipeline, segmenter_id, started: Instant::now() }
    }

    /// Loads weights named in `config`. A configured file that does not exist
    /// leaves that model unloaded (the service reports 503); a file that
    /// exists but fails to decode is an error.
    pub fn load(config: &ServerConfig) -> Result<Self, PallorError> {
        validate_cutoffs(&config.default_cutoffs)?;
        let mut models = Models::default();
        let mut segmenter_id = None;
        if let Some(path) = config.regressor_weights.as_ref().filter(|p| p.exists()) {
            models.regressor = Some(Regressor::load(path)?);
        }
        if let Some(path) = config.segmenter_weights.as_ref().filter(|p| p.exists()) {
            let bytes = std::fs::read(path).map_err(|e| PallorError::Weights(format!("{}: {e}", path.display())))?;
            models.segmenter = Some(SegNet::new(neuralnet::decode_weights(&bytes)?)?);
            segmenter_id = Some(neuralnet::content_id(&bytes));
        }
        let pipeline = PipelineConfig { default_cutoffs: config.default_cutoffs.clone(), ..Default::default() };
        Ok(Self::new(models, segmenter_id, pipeline))
    }
}

/// JSON error body with an HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub details: Option<Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), details: None }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "malformed_request", message)
    }

    fn too_large(limit: usize) -> Self {
        Self::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", format!("request body exceeds {limit} bytes"))
    }
}

impl From<PallorError> for ApiError {
    fn from(e: PallorError) -> Self {
        use PallorError::*;
        let status = match &e {
            SegmentationFailed { .. } | UnderFloorCard { .. } | UnderFloorBrightness { .. } | OutOfRange(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            ModelNotLoaded(_) => StatusCode::SERVICE_UNAVAILABLE,
            RoiOutOfBounds(_) | EmptyRegion | UnsupportedFormat(_) | CorruptHeader(_) | InvalidDimensions(_)
            | InvalidConfig(_) | DimensionMismatch(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let details = match &e {
            SegmentationFailed { area, min_area } => Some(json!({ "mask_area": area, "min_area": min_area })),
            UnderFloorCard { channel, mean, floor } => Some(json!({ "channel": channel, "mean": mean, "floor": floor })),
            _ => None,
        };
        Self { status, code: e.code(), message: e.to_string(), details }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error_code": self.code, "message": self.message });
        if let Some(d) = self.details {
            body["details"] = d;
        }
        (self.status, Json(body)).into_response()
    }
}

/// Base64 JSON form of a predict request.
#[derive(Debug, Deserialize)]
struct JsonPredictRequest {
    image: String,
    #[serde(flatten)]
    meta: PredictMeta,
}

fn decode_base64_image(s: &str) -> Result<Vec<u8>, ApiError> {
    // Accept data URLs as produced by browsers.
    let payload = match s.split_once(";base64,") {
        Some((prefix, rest)) if prefix.starts_with("data:") => rest,
        _ => s,
    };
    base64::engine::general_purpose::STANDARD
        .decode(payload.trim())
        .map_err(|e| ApiError::bad_request(format!("image is not valid base64: {e}")))
}

fn parse_meta(bytes: &[u8]) -> Result<PredictMeta, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::bad_request(format!("meta: {e}")))
}

/// Extracts `(image bytes, meta)` from either request encoding.
async fn read_request(req: Request, limit: usize) -> Result<(Vec<u8>, PredictMeta), ApiError> {
    let content_type = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_ascii_lowercase();
    if content_type.starts_with("multipart/form-data") {
        let mut form = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?;
        let (mut image, mut meta) = (None, None);
        loop {
            let field = match form.next_field().await {
                Ok(Some(f)) => f,
                Ok(None) => break,
                Err(e) if e.status() == StatusCode::PAYLOAD_TOO_LARGE => return Err(ApiError::too_large(limit)),
                Err(e) => return Err(ApiError::bad_request(e.body_text())),
            };
            let name = field.name().unwrap_or("").to_string();
            let data = field.bytes().await.map_err(|e| {
                if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
                    ApiError::too_large(limit)
                } else {
                    ApiError::bad_request(e.body_text())
                }
            })?;
            let slot = match name.as_str() {
                "image" => &mut image,
                "meta" => &mut meta,
                _ => continue,
            };
            if slot.replace(data).is_some() {
                return Err(ApiError::bad_request(format!("duplicate {name} part")));
            }
        }
        let image = image.ok_or_else(|| ApiError::bad_request("missing image part"))?;
        let meta = meta.ok_or_else(|| ApiError::bad_request("missing meta part"))?;
        Ok((image.to_vec(), parse_meta(&meta)?))
    } else if content_type.starts_with("application/json") {
        let body = axum::body::to_bytes(req.into_body(), limit).await.map_err(|_| ApiError::too_large(limit))?;
        let parsed: JsonPredictRequest =
            serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("body: {e}")))?;
        Ok((decode_base64_image(&parsed.image)?, parsed.meta))
    } else {
        Err(ApiError::bad_request("expected multipart/form-data or application/json"))
    }
}

/// The library call the service performs for one decoded request.
pub fn predict_image(state: &AppState, image: &RgbImage, meta: &PredictMeta) -> Result<PredictResponse, PallorError> {
    analyze(image, meta, &state.models, &state.pipeline)
}

async fn predict(State(app): State<Arc<Shared>>, req: Request) -> Result<Json<PredictResponse>, ApiError> {
    let (bytes, meta) = read_request(req, app.limit).await?;
    let state = app.clone();
    let result = tokio::task::spawn_blocking(move || -> Result<PredictResponse, PallorError> {
        let image = decode_image(&bytes)?;
        predict_image(&state.state, &image, &meta)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", e.to_string()))?;
    Ok(Json(result?))
}

#[derive(Debug, Serialize)]
struct Health {
    status: &'static str,
    model_id: Option<String>,
    /// Seconds since startup.
    uptime: f64,
    segmenter_loaded: bool,
}

async fn health(State(app): State<Arc<Shared>>) -> Response {
    let models = &app.state.models;
    let loaded = models.regressor.is_some();
    let body = Health {
        status: if loaded { "ok" } else { "unavailable" },
        model_id: models.regressor.as_ref().map(|r| r.model_id().to_string()),
        uptime: app.state.started.elapsed().as_secs_f64(),
        segmenter_loaded: models.segmenter.is_some(),
    };
    let status = if loaded { StatusCode::OK } else { StatusCode::SERVICE_UNAVAILABLE };
    (status, Json(body)).into_response()
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelInfo {
    pub model_id: String,
    pub layers: Vec<String>,
    pub param_count: usize,
    pub spec: NetworkSpec,
    pub standardization: Option<Standardization>,
}

impl ModelInfo {
    fn new(id: &str, net: &neuralnet::Network) -> Self {
        let spec = net.spec().clone();
        Self {
            model_id: id.to_string(),
            layers: spec.layers.iter().map(|l| l.summary()).collect(),
            param_count: spec.param_count(),
            spec,
            standardization: net.standardization.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelsInfo {
    pub regressor: ModelInfo,
    pub segmenter: Option<ModelInfo>,
}

async fn model(State(app): State<Arc<Shared>>) -> Result<Json<ModelsInfo>, ApiError> {
    let s = &app.state;
    let reg = s.models.regressor.as_ref().ok_or_else(|| ApiError::from(PallorError::ModelNotLoaded("regressor".into())))?;
    let segmenter = s
        .models
        .segmenter
        .as_ref()
        .map(|seg| ModelInfo::new(s.segmenter_id.as_deref().unwrap_or(""), seg.network()));
    Ok(Json(ModelsInfo { regressor: ModelInfo::new(reg.model_id(), reg.network()), segmenter }))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

async fn method_not_allowed() -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed on this endpoint")
}

#[derive(Debug)]
struct Shared {
    state: AppState,
    limit: usize,
}

/// Builds the `/v1` router over `state`.
pub fn router(state: AppState, max_body_bytes: usize, cors: bool) -> Router {
    let shared = Arc::new(Shared { state, limit: max_body_bytes });
    let app = Router::new()
        .route("/v1/predict", post(predict))
        .route("/v1/health", get(health))
        .route("/v1/model", get(model))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .layer(DefaultBodyLimit::max(max_body_bytes))
        .with_state(shared);
    if cors {
        app.layer(tower_http::cors::CorsLayer::permissive())
    } else {
        app
    }
}

/// Loads models and serves until ctrl-c.
pub async fn serve(config: ServerConfig) -> Result<(), Box<dyn std::error::Error>> {
    let state = AppState::load(&config)?;
    if state.models.regressor.is_none() {
        eprintln!("warning: no regressor weights loaded; /v1/predict will return 503");
    }
    let app = router(state, config.max_body_bytes, config.cors);
    let listener = tokio::net::TcpListener::bind(config.listen).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
