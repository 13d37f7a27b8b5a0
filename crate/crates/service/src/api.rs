use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use cxr_core::cascade::{run_cascade, FinalClass};
use cxr_core::data::image::decode_image;
use serde::Serialize;
use serde_json::json;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use crate::config::ServiceConfig;
use crate::error::{Result, ServiceError};
use crate::registry::{check_checkpoints_exist, ModelInfo, ModelRegistry};
use crate::store::{HeatmapKind, ListQuery, NewScreening, ScreeningRecord, StageResult, Store};

#[derive(Clone)]
pub struct AppState {
    pub config: Arc<ServiceConfig>,
    pub registry: Arc<ModelRegistry>,
    pub store: Arc<Store>,
}

impl AppState {
    /// Validates the configuration and opens the store; models are not
    /// loaded yet.
    pub fn new(config: ServiceConfig) -> Result<Self> {
        config.validate()?;
        check_checkpoints_exist(&config.registry)?;
        let store = Store::open(&config.data_dir)?;
        let registry = ModelRegistry::new(config.registry.clone())?;
        Ok(AppState {
            config: Arc::new(config),
            registry: Arc::new(registry),
            store: Arc::new(store),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeatmapLinks {
    pub stage2_cam: Option<String>,
    pub stage3_gradcam: Option<String>,
    pub guided: Option<String>,
}

/// JSON shape of one screening, shared by the service and the CLI.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScreeningResponse {
    pub id: u64,
    pub created_at: DateTime<Utc>,
    pub final_class: FinalClass,
    pub stage2: StageResult,
    pub stage3: Option<StageResult>,
    pub heatmaps: HeatmapLinks,
    pub image: String,
    pub flags: Vec<String>,
    pub model_versions: BTreeMap<String, String>,
    pub file_name: Option<String>,
}

impl ScreeningResponse {
    /// `link` maps a heatmap kind (or `None` for the input image) to a
    /// reference such as a URL or a file path.
    pub fn from_record(r: &ScreeningRecord, link: impl Fn(Option<HeatmapKind>) -> String) -> Self {
        let have = |k: HeatmapKind| r.heatmaps.contains(&k).then(|| link(Some(k)));
        ScreeningResponse {
            id: r.id,
            created_at: r.created_at,
            final_class: r.final_class,
            stage2: r.stage2,
            stage3: r.stage3,
            heatmaps: HeatmapLinks {
                stage2_cam: have(HeatmapKind::Stage2Cam),
                stage3_gradcam: have(HeatmapKind::Stage3Gradcam),
                guided: have(HeatmapKind::Guided),
            },
            image: link(None),
            flags: r.flags.clone(),
            model_versions: r.model_versions.clone(),
            file_name: r.file_name.clone(),
        }
    }

    fn with_urls(r: &ScreeningRecord) -> Self {
        Self::from_record(r, |k| match k {
            Some(k) => format!("/v1/screenings/{}/heatmaps/{}", r.id, k.as_str()),
            None => format!("/v1/screenings/{}/image", r.id),
        })
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
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        log::error!("internal error: {e}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }

    fn not_found(what: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("{what} not found"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.code, "message": self.message}))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    let limit = state.config.max_upload_bytes + 64 * 1024;
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/models", get(models))
        .route("/v1/screenings", get(list_screenings).post(create_screening))
        .route("/v1/screenings/{id}", get(get_screening))
        .route("/v1/screenings/{id}/image", get(get_image))
        .route("/v1/screenings/{id}/heatmaps/{kind}", get(get_heatmap))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn healthz(State(state): State<AppState>) -> Response {
    if state.registry.is_loaded() {
        (StatusCode::OK, Json(json!({"status": "ok"}))).into_response()
    } else {
        (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"status": "loading"}))).into_response()
    }
}

async fn models(State(state): State<AppState>) -> Json<Vec<ModelInfo>> {
    Json(state.registry.describe())
}

struct Upload {
    bytes: Vec<u8>,
    file_name: Option<String>,
}

async fn read_upload(mut multipart: Multipart, max: usize) -> ApiResult<Upload> {
    let invalid = |m: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_image", m);
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| invalid(format!("malformed multipart body: {e}")))?
    {
        let is_image = matches!(field.name(), Some("image") | Some("file")) || field.file_name().is_some();
        if !is_image {
            continue;
        }
        let file_name = field.file_name().map(str::to_string);
        let bytes = field.bytes().await.map_err(|e| {
            if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
                ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "too_large", e.body_text())
            } else {
                invalid(format!("could not read upload: {e}"))
            }
        })?;
        if bytes.len() > max {
            return Err(ApiError::new(
                StatusCode::PAYLOAD_TOO_LARGE,
                "too_large",
                format!("upload exceeds {max} bytes"),
            ));
        }
        return Ok(Upload {
            bytes: bytes.to_vec(),
            file_name,
        });
    }
    Err(invalid("no `image` file field in the upload".into()))
}

async fn create_screening(
    State(state): State<AppState>,
    multipart: Multipart,
) -> ApiResult<(StatusCode, Json<ScreeningResponse>)> {
    let upload = read_upload(multipart, state.config.max_upload_bytes).await?;
    let snapshot = state.registry.snapshot().ok_or_else(|| {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "models_loading",
            "models are still loading",
        )
    })?;
    let thresholds = state.config.thresholds;
    let store = state.store.clone();
    let record = tokio::task::spawn_blocking(move || -> ApiResult<ScreeningRecord> {
        let raw = decode_image(&upload.bytes)
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_image", e.to_string()))?;
        let pred = run_cascade(&raw, &snapshot.models, &thresholds).map_err(|e| match e {
            cxr_core::Error::InvalidInput(m) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_image", m),
            other => ApiError::internal(other),
        })?;
        let new = NewScreening::from_prediction(
            &pred,
            &thresholds,
            snapshot.versions.clone(),
            upload.file_name,
            Utc::now(),
        )
        .map_err(ApiError::internal)?;
        store.insert(new).map_err(ApiError::internal)
    })
    .await
    .map_err(ApiError::internal)??;
    Ok((StatusCode::CREATED, Json(ScreeningResponse::with_urls(&record))))
}

#[derive(Serialize)]
struct ListResponse {
    items: Vec<ScreeningResponse>,
    page: usize,
    page_size: usize,
    total: usize,
    pages: usize,
}

async fn list_screenings(State(state): State<AppState>, Query(q): Query<ListQuery>) -> ApiResult<Json<ListResponse>> {
    let page = state
        .store
        .list(&q)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_query", e.to_string()))?;
    Ok(Json(ListResponse {
        items: page.items.iter().map(ScreeningResponse::with_urls).collect(),
        page: page.page,
        page_size: page.page_size,
        total: page.total,
        pages: page.pages,
    }))
}

async fn get_screening(State(state): State<AppState>, Path(id): Path<u64>) -> ApiResult<Json<ScreeningResponse>> {
    let r = state.store.get(id).ok_or_else(|| ApiError::not_found("screening"))?;
    Ok(Json(ScreeningResponse::with_urls(&r)))
}

async fn png_file(path: PathBuf) -> ApiResult<Response> {
    let bytes = tokio::fs::read(&path).await.map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], Body::from(bytes)).into_response())
}

async fn get_image(State(state): State<AppState>, Path(id): Path<u64>) -> ApiResult<Response> {
    let path = state
        .store
        .original_path(id)
        .ok_or_else(|| ApiError::not_found("screening"))?;
    png_file(path).await
}

async fn get_heatmap(State(state): State<AppState>, Path((id, kind)): Path<(u64, String)>) -> ApiResult<Response> {
    let kind: HeatmapKind = kind.parse().map_err(|_| ApiError::not_found("heatmap kind"))?;
    state.store.get(id).ok_or_else(|| ApiError::not_found("screening"))?;
    let path = state
        .store
        .heatmap_path(id, kind)
        .ok_or_else(|| ApiError::not_found("heatmap"))?;
    png_file(path).await
}

/// A server bound to a socket, serving in a background task.
pub struct RunningServer {
    pub addr: SocketAddr,
    pub state: AppState,
    pub handle: JoinHandle<()>,
}

/// Binds and serves `state`. Models load in the background unless
/// `load_models` is false; `/healthz` answers 503 until they are in.
pub async fn start(state: AppState, load_models: bool) -> Result<RunningServer> {
    let cfg = &state.config;
    let listener = TcpListener::bind((cfg.bind.as_str(), cfg.port))
        .await
        .map_err(|e| ServiceError::Config(format!("cannot bind {}:{}: {e}", cfg.bind, cfg.port)))?;
    let addr = listener.local_addr()?;
    if load_models {
        let registry = state.registry.clone();
        tokio::task::spawn_blocking(move || match registry.load_active() {
            Ok(()) => log::info!("models loaded"),
            Err(e) => log::error!("model loading failed: {e}"),
        });
    }
    let app = router(state.clone());
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            log::error!("server stopped: {e}");
        }
    });
    log::info!("listening on http://{addr}");
    Ok(RunningServer { addr, state, handle })
}

/// Runs the service until the process is stopped.
pub async fn serve(config: ServiceConfig) -> Result<()> {
    let server = start(AppState::new(config)?, true).await?;
    server
        .handle
        .await
        .map_err(|e| ServiceError::Config(format!("server task failed: {e}")))
}
