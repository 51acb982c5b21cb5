//! HTTP/JSON routes over a [`SessionStore`].
//!
//! Errors are returned as `{code, message, detail}` with a 4xx status for
//! request problems and a 5xx status for numeric or I/O failures. Slice frames
//! are JSON with base64-encoded little-endian float32 data by default, or a raw
//! `application/octet-stream` body with metadata in `x-slice-*` headers when
//! the request's `Accept` header asks for it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::Engine as _;
use gpreg::io::{self, ProjectConfig};
use gpreg::{Axis, GridSpec, LandmarkSet, Point3};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::session::{RefitRequest, Session, SessionError, SessionInputs, SessionVolumes, SliceFrame, SliceKind};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const OCTET_STREAM: &str = "application/octet-stream";

/// All live sessions plus where exports and shutdown flushes go.
pub struct SessionStore {
    sessions: RwLock<BTreeMap<String, Arc<Session>>>,
    next_id: AtomicU64,
    data_dir: PathBuf,
}

impl SessionStore {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self { sessions: RwLock::new(BTreeMap::new()), next_id: AtomicU64::new(1), data_dir: data_dir.into() }
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn get(&self, id: &str) -> Result<Arc<Session>, SessionError> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::NotFound(format!("session {id}")))
    }

    pub fn insert(&self, inputs: SessionInputs) -> Result<Arc<Session>, SessionError> {
        let id = format!("s{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let session = Arc::new(Session::create(id.clone(), inputs)?);
        self.sessions.write().unwrap_or_else(|e| e.into_inner()).insert(id, session.clone());
        Ok(session)
    }

    pub fn ids(&self) -> Vec<String> {
        self.sessions.read().unwrap_or_else(|e| e.into_inner()).keys().cloned().collect()
    }

    /// Writes every session under `<data_dir>/sessions/<id>/`.
    pub fn flush_all(&self) -> Vec<(String, Result<(), SessionError>)> {
        let sessions: Vec<Arc<Session>> = self.sessions.read().unwrap_or_else(|e| e.into_inner()).values().cloned().collect();
        sessions
            .iter()
            .map(|s| (s.id().to_string(), s.flush(&self.data_dir.join("sessions").join(s.id()))))
            .collect()
    }

    fn resolve(&self, path: &str) -> PathBuf {
        let p = PathBuf::from(path);
        if p.is_absolute() {
            p
        } else {
            self.data_dir.join(p)
        }
    }
}

/// Structured error body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default)]
    pub detail: serde_json::Value,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody { code: "bad_request".into(), message: message.into(), detail: serde_json::Value::Null },
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::NotFound(_) => StatusCode::NOT_FOUND,
            SessionError::DuplicateLocation { .. } => StatusCode::CONFLICT,
            SessionError::Precondition(_) | SessionError::Ineligible(_) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::Numeric(_) | SessionError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        let detail = match &e {
            SessionError::DuplicateLocation { existing_id } => json!({ "existing_id": existing_id }),
            _ => serde_json::Value::Null,
        };
        debug_assert_eq!(status.is_client_error(), e.is_client_error());
        Self { status, body: ErrorBody { code: e.code().into(), message: e.to_string(), detail } }
    }
}

impl From<io::IoError> for ApiError {
    fn from(e: io::IoError) -> Self {
        let status = match &e {
            io::IoError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => StatusCode::NOT_FOUND,
            io::IoError::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self { status, body: ErrorBody { code: "invalid_input".into(), message: e.to_string(), detail: serde_json::Value::Null } }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs CPU-bound session work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        body: ErrorBody { code: "internal".into(), message: e.to_string(), detail: serde_json::Value::Null },
    })?
}

/// `POST /sessions` body. Landmarks come inline or from a server-side path;
/// relative paths resolve against the data directory.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    #[serde(default)]
    landmarks: Option<serde_json::Value>,
    #[serde(default)]
    landmarks_path: Option<String>,
    #[serde(default)]
    config: Option<ProjectConfig>,
    #[serde(default)]
    volume_pre: Option<String>,
    #[serde(default)]
    volume_post: Option<String>,
}

async fn create_session(State(store): State<Arc<SessionStore>>, body: Result<Json<CreateRequest>, axum::extract::rejection::JsonRejection>) -> ApiResult<impl IntoResponse> {
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let out = blocking(move || {
        let landmarks = match (&req.landmarks, &req.landmarks_path) {
            (Some(doc), None) => {
                let bytes = serde_json::to_vec(doc).map_err(|e| ApiError::bad_request(e.to_string()))?;
                let parsed = io::parse_landmarks(Path::new("landmarks"), &bytes);
                match parsed {
                    Ok(set) => set,
                    Err(io::IoError::Invalid { message, .. }) => {
                        return Err(SessionError::InvalidLandmarks(message).into());
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            (None, Some(path)) => io::read_landmarks(&store.resolve(path))?,
            _ => return Err(ApiError::bad_request("give exactly one of `landmarks` or `landmarks_path`")),
        };
        let volumes = SessionVolumes {
            pre: req.volume_pre.as_deref().map(|p| io::read_volume(&store.resolve(p))).transpose()?,
            post: req.volume_post.as_deref().map(|p| io::read_volume(&store.resolve(p))).transpose()?,
        };
        let config = req.config.unwrap_or_default();
        let session = store.insert(SessionInputs { landmarks, config, volumes })?;
        let snap = session.snapshot();
        Ok(json!({ "id": session.id(), "revision": snap.revision, "summary": snap.summary() }))
    })
    .await?;
    Ok((StatusCode::CREATED, Json(out)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AddRequest {
    pre: Point3,
    post: Point3,
}

async fn add_landmark(
    State(store): State<Arc<SessionStore>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<AddRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let session = store.get(&id)?;
    let out = blocking(move || Ok(session.add_landmark(req.pre, req.post)?)).await?;
    Ok(Json(out))
}

async fn remove_landmark(State(store): State<Arc<SessionStore>>, UrlPath((id, lid)): UrlPath<(String, String)>) -> ApiResult<impl IntoResponse> {
    let lid: u64 = lid.parse().map_err(|_| ApiError::bad_request(format!("landmark id `{lid}` is not an integer")))?;
    let session = store.get(&id)?;
    let out = blocking(move || Ok(session.remove_landmark(lid)?)).await?;
    Ok(Json(out))
}

#[derive(Debug, Deserialize)]
struct SliceQuery {
    kind: String,
    axis: String,
    index: usize,
}

/// JSON form of a slice frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceBody {
    pub kind: SliceKind,
    pub axis: Axis,
    pub index: usize,
    pub revision: u64,
    /// `[columns, rows]`.
    pub dims: [usize; 2],
    pub spacing: [f64; 2],
    pub grid: GridSpec,
    pub min: f32,
    pub max: f32,
    /// Always `"float32-le"`.
    pub encoding: String,
    /// Base64 of the row-major float32 little-endian frame.
    pub data: String,
}

impl SliceBody {
    pub fn decode(&self) -> Result<Vec<f32>, String> {
        let bytes = base64::engine::general_purpose::STANDARD.decode(&self.data).map_err(|e| e.to_string())?;
        if bytes.len() % 4 != 0 {
            return Err(format!("payload length {} is not a multiple of 4", bytes.len()));
        }
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

fn frame_bytes(frame: &SliceFrame) -> Vec<u8> {
    frame.slice.data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn wants_binary(headers: &HeaderMap) -> bool {
    headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim().starts_with(OCTET_STREAM)))
}

async fn get_slice(
    State(store): State<Arc<SessionStore>>,
    UrlPath(id): UrlPath<String>,
    query: Result<Query<SliceQuery>, axum::extract::rejection::QueryRejection>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let kind: SliceKind = q.kind.parse().map_err(ApiError::bad_request)?;
    let axis: Axis = q.axis.parse().map_err(|e: String| ApiError::bad_request(e))?;
    let session = store.get(&id)?;
    let frame = blocking(move || Ok(session.snapshot().slice(kind, axis, q.index)?)).await?;
    if wants_binary(&headers) {
        let mut resp = frame_bytes(&frame).into_response();
        let h = resp.headers_mut();
        let put = |h: &mut HeaderMap, k: &'static str, v: String| {
            h.insert(k, HeaderValue::from_str(&v).expect("ascii header value"));
        };
        h.insert(header::CONTENT_TYPE, HeaderValue::from_static(OCTET_STREAM));
        put(h, "x-slice-kind", kind.name().into());
        put(h, "x-slice-revision", frame.revision.to_string());
        put(h, "x-slice-dims", format!("{},{}", frame.slice.dims[0], frame.slice.dims[1]));
        put(h, "x-slice-spacing", format!("{},{}", frame.slice.spacing[0], frame.slice.spacing[1]));
        put(h, "x-slice-min", frame.min.to_string());
        put(h, "x-slice-max", frame.max.to_string());
        return Ok(resp);
    }
    let body = SliceBody {
        kind,
        axis,
        index: frame.slice.index,
        revision: frame.revision,
        dims: frame.slice.dims,
        spacing: frame.slice.spacing,
        grid: frame.grid,
        min: frame.min,
        max: frame.max,
        encoding: "float32-le".into(),
        data: base64::engine::general_purpose::STANDARD.encode(frame_bytes(&frame)),
    };
    Ok(Json(body).into_response())
}

async fn refit_kernel(
    State(store): State<Arc<SessionStore>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<RefitRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let session = store.get(&id)?;
    let out = blocking(move || Ok(session.refit_kernel(&req)?)).await?;
    Ok(Json(out))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExportRequest {
    #[serde(default)]
    dir: Option<String>,
}

async fn export(
    State(store): State<Arc<SessionStore>>,
    UrlPath(id): UrlPath<String>,
    body: Option<Json<ExportRequest>>,
) -> ApiResult<impl IntoResponse> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let session = store.get(&id)?;
    let out = blocking(move || {
        let dir = match &req.dir {
            Some(d) => store.resolve(d),
            None => {
                let rev = session.snapshot().revision;
                store.data_dir().join("exports").join(session.id()).join(format!("rev-{rev}"))
            }
        };
        Ok(session.export(&dir)?)
    })
    .await?;
    Ok(Json(out))
}

async fn state(State(store): State<Arc<SessionStore>>, UrlPath(id): UrlPath<String>) -> ApiResult<impl IntoResponse> {
    let session = store.get(&id)?;
    let out = blocking(move || Ok(session.snapshot().state(session.id()))).await?;
    Ok(Json(out))
}

async fn health() -> impl IntoResponse {
    Json(json!({ "status": "ok", "version": VERSION }))
}

async fn not_found() -> ApiError {
    ApiError { status: StatusCode::NOT_FOUND, body: ErrorBody { code: "not_found".into(), message: "no such route".into(), detail: serde_json::Value::Null } }
}

pub fn router(store: Arc<SessionStore>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/landmarks", post(add_landmark))
        .route("/sessions/{id}/landmarks/{lid}", delete(remove_landmark))
        .route("/sessions/{id}/slices", get(get_slice))
        .route("/sessions/{id}/kernel", post(refit_kernel))
        .route("/sessions/{id}/export", post(export))
        .route("/sessions/{id}/state", get(state))
        .fallback(not_found)
        .with_state(store)
}

/// Serves until `shutdown` resolves, then flushes every session to disk.
pub async fn serve(
    listener: tokio::net::TcpListener,
    store: Arc<SessionStore>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(store.clone())).with_graceful_shutdown(shutdown).await?;
    for (id, result) in store.flush_all() {
        if let Err(e) = result {
            eprintln!("failed to flush session {id}: {e}");
        }
    }
    Ok(())
}

/// Landmark set from an inline landmark document, for callers building requests.
pub fn landmark_document(set: &LandmarkSet) -> serde_json::Value {
    serde_json::from_str(&io::landmarks_to_json(set)).expect("landmark JSON is valid")
}
