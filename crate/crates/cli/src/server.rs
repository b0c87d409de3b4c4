//! HTTP service for session-based annotation. Bodies are JSON; every
//! coordinate is in pixels of the frame image.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, PoisonError, RwLock};

use axum::body::Bytes;
use axum::extract::rejection::{PathRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use posekit_core::data::Dataset;
use posekit_core::inference::default_tolerance;
use posekit_core::model::{FrameSource, Model, ModelInfo};
use posekit_core::session::{AnnotationSession, ExportBundle, FramePayload, PixelEvidence, PixelHeatmap, SessionSource};
use posekit_core::temporal::DecodeParams;
use posekit_core::Error as CoreError;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

/// Largest heatmap side accepted.
pub const MAX_HEATMAP_RES: usize = 256;
pub const DEFAULT_HEATMAP_RES: usize = 64;

type SharedSession = Arc<RwLock<AnnotationSession>>;

struct Inner {
    model: Arc<Model>,
    dataset: Arc<Dataset>,
    frame: FrameSource,
    refine: bool,
    sessions: RwLock<HashMap<String, SharedSession>>,
    next_id: AtomicU64,
}

/// Shared model, frames and open sessions.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(model: Model, dataset: Dataset, frame: FrameSource, refine: bool) -> Self {
        Self {
            inner: Arc::new(Inner {
                model: Arc::new(model),
                dataset: Arc::new(dataset),
                frame,
                refine,
                sessions: RwLock::new(HashMap::new()),
                next_id: AtomicU64::new(1),
            }),
        }
    }

    pub fn model(&self) -> &Model {
        &self.inner.model
    }

    fn session(&self, id: &str) -> Result<SharedSession, ApiError> {
        self.inner
            .sessions
            .read()
            .unwrap_or_else(PoisonError::into_inner)
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::from(CoreError::NotFound(format!("session '{id}'"))))
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    suggested_tolerance: Option<f64>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody {
                error: "bad_request",
                message: message.into(),
                suggested_tolerance: None,
            },
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: ErrorBody {
                error: "internal",
                message: message.into(),
                suggested_tolerance: None,
            },
        }
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let (status, error) = match &e {
            CoreError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            CoreError::Conflict { .. } => (StatusCode::CONFLICT, "conflict"),
            CoreError::NoConsistentClass => (StatusCode::UNPROCESSABLE_ENTITY, "no_consistent_class"),
            CoreError::Infeasible { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "infeasible"),
            CoreError::Config(_)
            | CoreError::Contract(_)
            | CoreError::Schema(_)
            | CoreError::InvalidAnnotation(_)
            | CoreError::Parse { .. }
            | CoreError::IndexOutOfRange { .. } => (StatusCode::BAD_REQUEST, "bad_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self {
            status,
            body: ErrorBody {
                error,
                message: e.to_string(),
                suggested_tolerance: None,
            },
        }
    }
}

impl From<PathRejection> for ApiError {
    fn from(e: PathRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid body: {e}")))
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResponse {
    pub session_id: String,
    pub version: u64,
    pub source: SessionSource,
    pub decoded_path: Option<Vec<usize>>,
    pub frames: Vec<FramePayload>,
}

fn session_response(s: &AnnotationSession) -> Result<SessionResponse, ApiError> {
    Ok(SessionResponse {
        session_id: s.id.clone(),
        version: s.version(),
        source: s.source.clone(),
        decoded_path: s.decoded_path().map(<[usize]>::to_vec),
        frames: s.payloads()?,
    })
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> ApiResult<SessionResponse> {
    let source: SessionSource = parse_body(&body)?;
    blocking(move || {
        let n = state.inner.next_id.fetch_add(1, Ordering::Relaxed);
        let id = format!("s{n:06}");
        let session = AnnotationSession::new(
            id.clone(),
            state.inner.model.clone(),
            &state.inner.dataset,
            source,
            state.inner.frame,
            state.inner.refine,
        )?;
        let resp = session_response(&session)?;
        tracing::info!(session = %id, frames = session.len(), "session created");
        state
            .inner
            .sessions
            .write()
            .unwrap_or_else(PoisonError::into_inner)
            .insert(id, Arc::new(RwLock::new(session)));
        Ok(Json(resp))
    })
    .await
}

async fn get_session(State(state): State<AppState>, path: Result<Path<String>, PathRejection>) -> ApiResult<SessionResponse> {
    let Path(id) = path?;
    let session = state.session(&id)?;
    blocking(move || {
        let g = session.read().unwrap_or_else(PoisonError::into_inner);
        Ok(Json(session_response(&g)?))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapQuery {
    pub landmark: usize,
    pub res: Option<usize>,
}

async fn heatmap(
    State(state): State<AppState>,
    path: Result<Path<(String, usize)>, PathRejection>,
    query: Result<Query<HeatmapQuery>, QueryRejection>,
) -> ApiResult<PixelHeatmap> {
    let Path((id, t)) = path?;
    let Query(q) = query?;
    let res = q.res.unwrap_or(DEFAULT_HEATMAP_RES);
    if res == 0 || res > MAX_HEATMAP_RES {
        return Err(ApiError::bad_request(format!("res must be in 1..={MAX_HEATMAP_RES}")));
    }
    let session = state.session(&id)?;
    blocking(move || {
        let g = session.read().unwrap_or_else(PoisonError::into_inner);
        Ok(Json(g.heatmap(t, q.landmark, res)?))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvidenceRequest {
    pub landmark: usize,
    pub x: f64,
    pub y: f64,
    /// canonical units
    #[serde(default)]
    pub tolerance: Option<f64>,
    /// expected session version; stale versions are rejected
    #[serde(default)]
    pub version: Option<u64>,
    #[serde(default)]
    pub redecode: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceResponse {
    pub session_id: String,
    pub version: u64,
    pub frame: FramePayload,
    /// every frame after a re-decode
    pub frames: Option<Vec<FramePayload>>,
}

async fn add_evidence(
    State(state): State<AppState>,
    path: Result<Path<(String, usize)>, PathRejection>,
    body: Bytes,
) -> ApiResult<EvidenceResponse> {
    let Path((id, t)) = path?;
    let req: EvidenceRequest = parse_body(&body)?;
    let session = state.session(&id)?;
    let used_tolerance = req.tolerance.unwrap_or_else(|| default_tolerance(state.model().tau()));
    blocking(move || {
        let mut g = session.write().unwrap_or_else(PoisonError::into_inner);
        let click = PixelEvidence {
            landmark: req.landmark,
            x: req.x,
            y: req.y,
            tolerance: req.tolerance,
        };
        let frame = g.apply_evidence(t, click, req.version, req.redecode).map_err(|e| {
            let empty = matches!(e, CoreError::NoConsistentClass);
            let mut err = ApiError::from(e);
            if empty {
                err.body.suggested_tolerance = Some(2.0 * used_tolerance);
            }
            err
        })?;
        let frames = if req.redecode { Some(g.payloads()?) } else { None };
        Ok(Json(EvidenceResponse {
            session_id: g.id.clone(),
            version: g.version(),
            frame,
            frames,
        }))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeRequest {
    pub tau_hmm: Option<f64>,
    pub self_weight: Option<f64>,
    pub neighbor_weight: Option<f64>,
    pub version: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResponse {
    pub session_id: String,
    pub version: u64,
    pub path: Vec<usize>,
    pub frames: Vec<FramePayload>,
}

async fn decode(
    State(state): State<AppState>,
    path: Result<Path<String>, PathRejection>,
    body: Bytes,
) -> ApiResult<DecodeResponse> {
    let Path(id) = path?;
    let req: DecodeRequest = if body.iter().all(u8::is_ascii_whitespace) {
        DecodeRequest::default()
    } else {
        parse_body(&body)?
    };
    let d = DecodeParams::default();
    let params = DecodeParams {
        tau_hmm: req.tau_hmm.or(d.tau_hmm),
        self_weight: req.self_weight.unwrap_or(d.self_weight),
        neighbor_weight: req.neighbor_weight.unwrap_or(d.neighbor_weight),
    };
    let session = state.session(&id)?;
    blocking(move || {
        let mut g = session.write().unwrap_or_else(PoisonError::into_inner);
        let frames = g.decode(params, req.version)?;
        Ok(Json(DecodeResponse {
            session_id: g.id.clone(),
            version: g.version(),
            path: g.decoded_path().map(<[usize]>::to_vec).unwrap_or_default(),
            frames,
        }))
    })
    .await
}

async fn export(State(state): State<AppState>, path: Result<Path<String>, PathRejection>) -> ApiResult<ExportBundle> {
    let Path(id) = path?;
    let session = state.session(&id)?;
    blocking(move || {
        let g = session.read().unwrap_or_else(PoisonError::into_inner);
        Ok(Json(g.export_bundle()?))
    })
    .await
}

async fn model_info(State(state): State<AppState>) -> Json<ModelInfo> {
    Json(state.model().info())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/frames/{t}/heatmap", get(heatmap))
        .route("/sessions/{id}/frames/{t}/evidence", post(add_evidence))
        .route("/sessions/{id}/decode", post(decode))
        .route("/sessions/{id}/export", get(export))
        .route("/model/info", get(model_info))
        .with_state(state)
}

pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}
