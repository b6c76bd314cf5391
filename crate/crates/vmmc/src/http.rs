//! HTTP APIs for the review queue and the fraud service.
//!
//! Errors come back as `{"error": "..."}` with a status that tells the
//! client what to do: 404 unknown item, 409 conflicting state, 422 a body
//! the server understood but cannot accept.

use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use vmmc_core::annotation::AnnotationError;
use vmmc_core::fraud::{RegisterOutcome, VerdictStatus};
use vmmc_core::ClassId;

use crate::fraudwatch::{EntryJson, FraudService, FraudServiceError, ObserveOutcome, ObserveRequest};
use crate::review::{DecisionJson, ReviewError, ReviewItemJson, ReviewService, StatsJson};

/// Names the annotator session that leases items.
pub const SESSION_HEADER: &str = "x-review-session";
/// Makes a repeated decision a no-op.
pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    extra: Option<serde_json::Value>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into(), extra: None }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let (Some(serde_json::Value::Object(extra)), Some(obj)) = (self.extra, body.as_object_mut()) {
            obj.extend(extra);
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let status = match &e {
            ReviewError::Annotation(AnnotationError::UnknownItem(_) | AnnotationError::NoAutoRow(_)) => StatusCode::NOT_FOUND,
            ReviewError::Annotation(AnnotationError::NotPending { .. }) | ReviewError::Leased(_) => StatusCode::CONFLICT,
            ReviewError::Annotation(AnnotationError::MissingBox(_) | AnnotationError::BadBox(_)) | ReviewError::UnknownClass(_) | ReviewError::BadBox(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("review: {e}");
        }
        Self::new(status, e.to_string())
    }
}

impl From<FraudServiceError> for ApiError {
    fn from(e: FraudServiceError) -> Self {
        let status = match &e {
            FraudServiceError::Fraud(_) | FraudServiceError::UnknownClass(_) | FraudServiceError::Incomplete(_) | FraudServiceError::BadScores | FraudServiceError::Classifier(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("fraud: {e}");
        }
        Self::new(status, e.to_string())
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("bad request body: {e}")))
}

fn header_str<'a>(headers: &'a HeaderMap, name: &str) -> Option<&'a str> {
    headers.get(name).and_then(|v| v.to_str().ok()).filter(|s| !s.is_empty())
}

/// `GET /review/next`, `GET /review/stats`, `POST /review/reopen`,
/// `POST /review/{id}` and `GET /review/{id}/image`.
pub fn review_router(service: Arc<ReviewService>) -> Router {
    Router::new()
        .route("/review/next", get(review_next))
        .route("/review/stats", get(review_stats))
        .route("/review/reopen", post(review_reopen))
        .route("/review/{id}", get(review_item).post(review_decide))
        .route("/review/{id}/image", get(review_image))
        .with_state(service)
}

async fn review_next(State(s): State<Arc<ReviewService>>, headers: HeaderMap) -> Response {
    let next = match header_str(&headers, SESSION_HEADER) {
        Some(session) => s.lease_next(session, Instant::now()).map(|(item, lease)| (item, Some(lease))),
        None => s.next().map(|item| (item, None)),
    };
    match next {
        Some((item, lease)) => {
            let mut resp = Json(ReviewItemJson::from(&item)).into_response();
            if let Some(lease) = lease {
                resp.headers_mut().insert("x-lease-seconds", lease.as_secs().into());
            }
            resp
        }
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn review_stats(State(s): State<Arc<ReviewService>>) -> Json<StatsJson> {
    Json(s.stats().into())
}

async fn review_item(State(s): State<Arc<ReviewService>>, Path(id): Path<u64>) -> Result<Json<ReviewItemJson>, ApiError> {
    s.item(id).map(|q| Json(ReviewItemJson::from(&q))).ok_or_else(|| ReviewError::from(AnnotationError::UnknownItem(id)).into())
}

async fn review_decide(State(s): State<Arc<ReviewService>>, Path(id): Path<u64>, headers: HeaderMap, body: Bytes) -> Result<Json<ReviewItemJson>, ApiError> {
    let decision = parse_body::<DecisionJson>(&body)?.to_decision()?;
    let item = s.decide_as(id, decision, header_str(&headers, SESSION_HEADER), header_str(&headers, IDEMPOTENCY_HEADER), Instant::now())?;
    Ok(Json(ReviewItemJson::from(&item)))
}

#[derive(Deserialize)]
struct ReopenBody {
    image_path: String,
}

async fn review_reopen(State(s): State<Arc<ReviewService>>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let req: ReopenBody = parse_body(&body)?;
    let id = s.reopen(&req.image_path)?;
    Ok(Json(json!({ "id": id })))
}

fn content_type(path: &std::path::Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    }
}

async fn review_image(State(s): State<Arc<ReviewService>>, Path(id): Path<u64>) -> Result<Response, ApiError> {
    let path = s.image_file(id).ok_or_else(|| ApiError::from(ReviewError::from(AnnotationError::UnknownItem(id))))?;
    let bytes = std::fs::read(&path).map_err(|e| ApiError::new(StatusCode::NOT_FOUND, format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}

/// `POST /observe`, `POST /registry`, `POST /registry/reload` and
/// `GET /verdicts?status=...`.
pub fn fraud_router(service: Arc<FraudService>) -> Router {
    Router::new()
        .route("/observe", post(observe))
        .route("/registry", post(register))
        .route("/registry/reload", post(reload))
        .route("/verdicts", get(verdicts))
        .with_state(service)
}

async fn observe(State(s): State<Arc<FraudService>>, body: Bytes) -> Result<Response, ApiError> {
    let req: ObserveRequest = parse_body(&body)?;
    let outcome = tokio::task::spawn_blocking(move || s.observe(&req)).await.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    match outcome {
        ObserveOutcome::Verdict(v) => Ok(Json(v).into_response()),
        ObserveOutcome::Skipped { skips } => Err(ApiError { extra: Some(json!({ "skips": skips })), ..ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "plate unreadable; frame skipped") }),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterBody {
    pub plate: String,
    pub class_id: i64,
}

async fn register(State(s): State<Arc<FraudService>>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let req: RegisterBody = parse_body(&body)?;
    let class_id = ClassId::try_from(req.class_id).map_err(|_| ApiError::from(FraudServiceError::UnknownClass(req.class_id)))?;
    let outcome = s.register(&req.plate, class_id)?;
    let entry = EntryJson::from(outcome.entry());
    Ok(Json(match outcome {
        RegisterOutcome::Inserted(_) => json!({ "outcome": "inserted", "entry": entry }),
        RegisterOutcome::Unchanged(_) => json!({ "outcome": "unchanged", "entry": entry }),
        RegisterOutcome::Superseded { previous, .. } => json!({ "outcome": "superseded", "entry": entry, "previous_class": previous.index() }),
    }))
}

async fn reload(State(s): State<Arc<FraudService>>) -> Result<Json<serde_json::Value>, ApiError> {
    Ok(Json(json!({ "entries": s.reload()? })))
}

#[derive(Deserialize)]
struct VerdictQuery {
    status: Option<String>,
}

async fn verdicts(State(s): State<Arc<FraudService>>, Query(q): Query<VerdictQuery>) -> Result<Response, ApiError> {
    let status = match q.status.as_deref() {
        None | Some("") => None,
        Some(raw) => Some(VerdictStatus::parse(raw).ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, format!("unknown status {raw:?}")))?),
    };
    Ok(Json(s.verdicts(status)).into_response())
}

/// Binds `addr` and serves `app` until the process ends.
pub async fn serve(app: Router, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await
}
