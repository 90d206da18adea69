//! HTTP projection of a live session. Handlers read the published snapshot;
//! feedback and retrain requests go through the session mailbox.

use std::sync::Arc;
use std::time::Instant;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use invrise_core::dataset::DefectKind;
use invrise_core::harness::RunRecord;
use invrise_core::imaging;
use invrise_core::interaction::{Event, Feedback, FeedbackSource, Neighbors, Role, SessionHandle, SessionPhase, SessionStatus};
use invrise_core::saliency;
use invrise_core::{BinaryMask, Error, Label};

#[derive(Clone)]
pub struct AppState {
    pub session: SessionHandle,
    pub seed: u64,
    pub config_digest: String,
    pub started: Instant,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/session/next", get(next_query))
        .route("/session/feedback", post(feedback))
        .route("/session/retrain", post(retrain))
        .route("/session/status", get(status))
        .route("/session/events", get(events))
        .route("/instance/{id}", get(instance))
        .route("/run/metrics", get(metrics))
        .with_state(Arc::new(state))
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Conflict(_) => StatusCode::CONFLICT,
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::InvalidArgument(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Interrupted(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

fn png_base64(bytes: Vec<u8>) -> String {
    STANDARD.encode(bytes)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryPayload {
    pub id: String,
    pub role: Role,
    pub image_png: String,
    pub predicted: Label,
    pub confidence: f64,
    pub saliency_overlay_png: Option<String>,
    #[serde(flatten)]
    pub neighbors: Neighbors,
}

async fn next_query(State(app): State<Arc<AppState>>) -> Result<Response, ApiError> {
    let snapshot = app.session.snapshot();
    let Some(pending) = snapshot.pending else {
        let code = match snapshot.status.phase {
            SessionPhase::Stopped { .. } | SessionPhase::Failed { .. } => StatusCode::GONE,
            _ => StatusCode::ACCEPTED,
        };
        return Ok((code, Json(snapshot.status)).into_response());
    };
    let instance = app.session.data().dataset.get(&pending.id)?;
    let overlay = match &pending.saliency {
        Some(map) => Some(png_base64(imaging::encode_png8(&saliency::overlay(&instance.image, map)?))),
        None => None,
    };
    Ok(Json(QueryPayload {
        id: pending.id,
        role: pending.role,
        image_png: png_base64(imaging::encode_png8(&instance.image)),
        predicted: pending.predicted,
        confidence: pending.confidence,
        saliency_overlay_png: overlay,
        neighbors: pending.neighbors,
    })
    .into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InstancePayload {
    pub id: String,
    pub label: Label,
    pub defect_kind: Option<DefectKind>,
    pub side: usize,
    pub image_png: String,
    pub defect_mask_png: Option<String>,
}

async fn instance(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<InstancePayload>, ApiError> {
    let inst = app.session.data().dataset.get(&id)?;
    Ok(Json(InstancePayload {
        id: inst.id.clone(),
        label: inst.label,
        defect_kind: inst.defect_kind,
        side: inst.image.side(),
        image_png: png_base64(imaging::encode_png8(&inst.image)),
        defect_mask_png: inst.defect_mask.as_ref().map(|m| png_base64(imaging::encode_mask_png(m))),
    }))
}

/// Feedback as sent by a client; the mask is a base64 PNG.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct FeedbackPayload {
    /// The query being answered; defaults to whatever is pending.
    #[serde(default)]
    pub id: Option<String>,
    pub prediction_correct: bool,
    pub explanation_correct: bool,
    #[serde(default)]
    pub corrected_label: Option<Label>,
    #[serde(default)]
    pub corrected_mask: Option<String>,
}

fn decode_mask(b64: &str) -> Result<BinaryMask, ApiError> {
    let bytes = STANDARD
        .decode(b64.trim())
        .map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("corrected_mask is not base64: {e}")))?;
    imaging::decode_mask_png(&bytes).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("corrected_mask: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> invrise_core::Result<T> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

async fn feedback(
    State(app): State<Arc<AppState>>,
    Json(payload): Json<FeedbackPayload>,
) -> Result<Json<SessionStatus>, ApiError> {
    let id = match payload.id {
        Some(id) => id,
        None => app
            .session
            .snapshot()
            .pending
            .map(|p| p.id)
            .ok_or_else(|| ApiError(StatusCode::CONFLICT, "no query is pending".into()))?,
    };
    let corrected_mask = payload.corrected_mask.as_deref().map(decode_mask).transpose()?;
    let feedback = Feedback {
        prediction_correct: payload.prediction_correct,
        explanation_correct: payload.explanation_correct,
        corrected_label: payload.corrected_label,
        corrected_mask,
        source: FeedbackSource::Human,
    };
    let session = app.session.clone();
    Ok(Json(blocking(move || session.submit_feedback(&id, feedback)).await?))
}

async fn retrain(State(app): State<Arc<AppState>>) -> Result<Json<SessionStatus>, ApiError> {
    let session = app.session.clone();
    Ok(Json(blocking(move || session.retrain()).await?))
}

async fn status(State(app): State<Arc<AppState>>) -> Json<SessionStatus> {
    Json(app.session.snapshot().status)
}

async fn events(State(app): State<Arc<AppState>>) -> Json<Vec<Event>> {
    Json(app.session.events())
}

async fn metrics(State(app): State<Arc<AppState>>) -> Json<RunRecord> {
    let snapshot = app.session.snapshot();
    Json(RunRecord {
        strategy: snapshot.status.strategy,
        seed: app.seed,
        config_digest: app.config_digest.clone(),
        wall_clock_secs: app.started.elapsed().as_secs_f64(),
        stop: match snapshot.status.phase {
            SessionPhase::Stopped { reason } => Some(reason),
            _ => None,
        },
        iterations: snapshot.metrics,
    })
}
