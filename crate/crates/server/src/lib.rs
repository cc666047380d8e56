//! JSON-over-HTTP front of the teaching service. Every response body is
//! `{"ok": true, "data": ...}` or `{"ok": false, "error": <code>, "message": ...}`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dlgf_core::compile::{Catalog, TemplateId};
use dlgf_core::regress::{parse_transcripts, Rating, RegressError};
use dlgf_core::teach::{
    CorrectedDialog, Correction, HyperOverrides, LogDialog, LogFilter, LogStatus, NewTemplate, TeachError, TeachService,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

/// An error as the API reports it.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn bad_request(message: impl ToString) -> ApiError {
        ApiError { status: StatusCode::BAD_REQUEST, code: "BadRequest".into(), message: message.to_string() }
    }
}

pub fn status_of(e: &TeachError) -> StatusCode {
    use TeachError as E;
    match e {
        E::UnknownLog(_) | E::UnknownVersion(_) | E::UnknownRun(_) | E::UnknownTemplate(_) => StatusCode::NOT_FOUND,
        E::Regress(RegressError::UnknownPair(_)) => StatusCode::NOT_FOUND,
        E::RetrainInProgress | E::ConflictingCorrection(_) | E::NoModel | E::NoFlow => StatusCode::CONFLICT,
        E::Regress(RegressError::DuplicateRating(_)) => StatusCode::CONFLICT,
        E::Io(_) | E::Corrupt { .. } | E::Model(_) => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

impl From<TeachError> for ApiError {
    fn from(e: TeachError) -> ApiError {
        ApiError { status: status_of(&e), code: e.code().to_string(), message: e.to_string() }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> ApiError {
        ApiError::bad_request(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> ApiError {
        ApiError::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "ok": false, "error": self.code, "message": self.message }))).into_response()
    }
}

struct Data<T>(T);

impl<T: Serialize> IntoResponse for Data<T> {
    fn into_response(self) -> Response {
        Json(json!({ "ok": true, "data": self.0 })).into_response()
    }
}

type ApiResult<T> = Result<Data<T>, ApiError>;

type Svc = State<Arc<TeachService>>;

/// Runs blocking service work off the async workers.
async fn blocking<T, F>(svc: Arc<TeachService>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&TeachService) -> Result<T, TeachError> + Send + 'static,
{
    match tokio::task::spawn_blocking(move || f(&svc)).await {
        Ok(r) => r.map(Data).map_err(ApiError::from),
        Err(e) => {
            Err(ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, code: "Internal".into(), message: e.to_string() })
        }
    }
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(ApiError::from)
}

#[derive(Debug, Default, Deserialize)]
pub struct LogsQuery {
    /// `unreviewed` (default), `corrected`, `dismissed` or `all`.
    pub status: Option<String>,
    #[serde(default)]
    pub ranked: Option<bool>,
}

#[derive(Debug, Serialize)]
pub struct LogView {
    #[serde(flatten)]
    pub log: LogDialog,
    pub corrected: Option<CorrectedDialog>,
}

#[derive(Debug, Serialize)]
pub struct CorrectionResult {
    pub training_dialog_id: String,
    pub dialog: dlgf_core::compile::TrainingDialog,
    pub template_id: Option<TemplateId>,
}

#[derive(Debug, Default, Deserialize)]
pub struct ChatRequest {
    #[serde(default)]
    pub text: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct RunRequest {
    pub left_model_version: u64,
    pub right_model_version: u64,
    /// Name of a stored set: `logs`, `compiled` or a file under `transcripts/`.
    #[serde(default)]
    pub transcript_set: Option<String>,
    /// Transcripts given inline as JSON Lines.
    #[serde(default)]
    pub transcripts: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct RunCreated {
    pub run_id: u64,
    pub pairs: usize,
    pub needs_rating: usize,
}

#[derive(Debug, Deserialize)]
pub struct RatingsRequest {
    pub ratings: Vec<Rating>,
}

fn parse_status(s: Option<&str>) -> Result<LogFilter, ApiError> {
    let status = match s {
        None | Some("unreviewed") => Some(LogStatus::Unreviewed),
        Some("corrected") => Some(LogStatus::Corrected),
        Some("dismissed") => Some(LogStatus::Dismissed),
        Some("all") => None,
        Some(other) => return Err(ApiError::bad_request(format!("unknown status `{other}`"))),
    };
    Ok(LogFilter { status })
}

async fn list_logs(State(svc): Svc, query: Result<Query<LogsQuery>, QueryRejection>) -> Response {
    let run = || -> Result<Response, ApiError> {
        let Query(q) = query?;
        let filter = parse_status(q.status.as_deref())?;
        Ok(if q.ranked.unwrap_or(true) {
            Data(svc.ranked_logs(filter)).into_response()
        } else {
            Data(svc.logs(filter)).into_response()
        })
    };
    run().unwrap_or_else(IntoResponse::into_response)
}

async fn get_log(State(svc): Svc, Path(id): Path<u64>) -> ApiResult<LogView> {
    let log = svc.log(id)?;
    let corrected = svc.corrected(id);
    Ok(Data(LogView { log, corrected }))
}

async fn post_correction(
    State(svc): Svc,
    payload: Result<Json<Correction>, JsonRejection>,
) -> ApiResult<CorrectionResult> {
    let c = body(payload)?;
    blocking(svc, move |s| {
        let out = s.correct(&c)?;
        Ok(CorrectionResult {
            training_dialog_id: out.dialog.id.clone(),
            dialog: out.dialog,
            template_id: out.template_id,
        })
    })
    .await
}

async fn post_retrain(
    State(svc): Svc,
    payload: Option<Json<HyperOverrides>>,
) -> ApiResult<dlgf_core::teach::RetrainOutcome> {
    let overrides = payload.map(|Json(o)| o).unwrap_or_default();
    blocking(svc, move |s| s.retrain(&overrides)).await
}

async fn get_model(State(svc): Svc) -> ApiResult<dlgf_core::teach::ModelInfo> {
    Ok(Data(svc.model_info()?))
}

async fn post_chat(
    State(svc): Svc,
    Path(conversation): Path<String>,
    payload: Option<Json<ChatRequest>>,
) -> ApiResult<dlgf_core::teach::ChatReply> {
    let text = payload.and_then(|Json(r)| r.text);
    blocking(svc, move |s| s.chat(&conversation, text.as_deref())).await
}

async fn get_templates(State(svc): Svc) -> ApiResult<Catalog> {
    Ok(Data(svc.catalog()))
}

async fn post_template(
    State(svc): Svc,
    payload: Result<Json<NewTemplate>, JsonRejection>,
) -> ApiResult<serde_json::Value> {
    let t = body(payload)?;
    let id = svc.add_template(&t)?;
    Ok(Data(json!({ "template_id": id })))
}

async fn post_run(State(svc): Svc, payload: Result<Json<RunRequest>, JsonRejection>) -> ApiResult<RunCreated> {
    let req = body(payload)?;
    blocking(svc, move |s| {
        let transcripts = match (&req.transcripts, &req.transcript_set) {
            (Some(inline), _) => parse_transcripts(inline)?,
            (None, Some(name)) => s.transcript_set(name)?,
            (None, None) => s.transcript_set("logs")?,
        };
        let run = s.start_run(req.left_model_version, req.right_model_version, &transcripts)?;
        Ok(RunCreated { run_id: run.id, pairs: run.pairs.len(), needs_rating: run.human_pairs() })
    })
    .await
}

async fn get_run(State(svc): Svc, Path(run): Path<u64>) -> ApiResult<dlgf_core::teach::RunQueue> {
    Ok(Data(svc.run_queue(run)?))
}

async fn post_ratings(
    State(svc): Svc,
    Path(run): Path<u64>,
    payload: Result<Json<RatingsRequest>, JsonRejection>,
) -> ApiResult<serde_json::Value> {
    let req = body(payload)?;
    let accepted = svc.rate(run, &req.ratings)?;
    Ok(Data(json!({ "accepted": accepted })))
}

async fn get_report(State(svc): Svc, Path(run): Path<u64>) -> ApiResult<dlgf_core::regress::RatingReport> {
    Ok(Data(svc.report(run)?))
}

async fn not_found() -> ApiError {
    ApiError { status: StatusCode::NOT_FOUND, code: "NotFound".into(), message: "no such endpoint".into() }
}

/// The API routes, plus static files from `assets` for every other path.
pub fn router(svc: Arc<TeachService>, assets: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/logs", get(list_logs))
        .route("/api/logs/{id}", get(get_log))
        .route("/api/corrections", post(post_correction))
        .route("/api/retrain", post(post_retrain))
        .route("/api/model", get(get_model))
        .route("/api/chat/{conversation_id}", post(post_chat))
        .route("/api/templates", get(get_templates).post(post_template))
        .route("/api/regression/run", post(post_run))
        .route("/api/regression/{run}", get(get_run))
        .route("/api/regression/{run}/ratings", post(post_ratings))
        .route("/api/regression/{run}/report", get(get_report))
        .route("/api/{*rest}", axum::routing::any(not_found))
        .with_state(svc);
    match assets {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(not_found),
    }
}

/// Serves until the process is stopped.
pub async fn serve(svc: Arc<TeachService>, addr: SocketAddr, assets: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(svc, assets)).await
}
