//! HTTP/JSON front end for the decomposition pipeline.
//!
//! Endpoints:
//!
//! * `POST /api/datasets`: multipart upload with a `file` part (CSV) and an
//!   optional `spec` part, a JSON object with `treatment_column` and
//!   `outcome_columns` used to validate those columns at upload time.
//!   Returns `{id, summary}`.
//! * `POST /api/decompose`: `{original_id, replication_id, spec,
//!   selection_alpha0?, level?, seed?}`; returns the result document exactly
//!   as the CLI writes it.
//! * `GET /api/health`, `GET /api/version`.
//! * Everything else is served from the static directory, if configured.
//!
//! Errors are `{code, message, detail}` with status 400 (validation), 404
//! (unknown dataset), 409 (selection event absent), 413 (upload too large),
//! 422 (infeasible or failed numerics), 503 (store full) or 504 (timeout).

// `!(x > y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::redundant_guards)]

pub mod error;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;
use tower_http::services::ServeDir;

use shiftdiag_core::report::ENGINE_VERSION;
use shiftdiag_core::{analyze, read_dataset, AnalysisSpec, AnalyzeOptions, Error, Role};

pub use error::{ApiError, ErrorBody};
pub use store::{ColumnKind, ColumnSummary, DatasetSummary, SessionStore, StoreLimits, StoredDataset};

/// Distinct values kept in a categorical column summary.
const MAX_LEVELS: usize = 256;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_upload_bytes: usize,
    pub store: StoreLimits,
    /// Pipeline calls allowed to run at once.
    pub workers: usize,
    pub request_timeout: Duration,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_upload_bytes: 50 * 1024 * 1024,
            store: StoreLimits {
                idle_timeout: Duration::from_secs(3600),
                max_datasets: 256,
                max_total_bytes: 1024 * 1024 * 1024,
            },
            workers: std::thread::available_parallelism().map_or(2, |n| n.get()),
            request_timeout: Duration::from_secs(120),
            static_dir: None,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub store: SessionStore,
    workers: Arc<Semaphore>,
    config: Arc<ServiceConfig>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            store: SessionStore::new(config.store),
            workers: Arc::new(Semaphore::new(config.workers.max(1))),
            config: Arc::new(config),
        }
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.config.max_upload_bytes;
    let static_dir = state.config.static_dir.clone();
    let api = Router::new()
        .route("/api/datasets", post(post_dataset).layer(DefaultBodyLimit::max(limit)))
        .route("/api/decompose", post(post_decompose))
        .route("/api/health", get(health))
        .route("/api/version", get(version))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such resource") }),
    }
}

/// Bind `addr` and serve until interrupted.
pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    let state = AppState::new(config);
    let store = state.store.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            let n = store.evict_idle();
            if n > 0 {
                log::info!("evicted {n} idle datasets");
            }
        }
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn version() -> Json<serde_json::Value> {
    Json(json!({ "name": "shiftdiag", "version": ENGINE_VERSION }))
}

/// Run `job` on the blocking pool under the worker limit and timeout.
async fn run_blocking<T: Send + 'static>(
    state: &AppState,
    job: impl FnOnce() -> Result<T, Error> + Send + 'static,
) -> Result<T, ApiError> {
    let timeout = state.config.request_timeout;
    let work = async {
        let _permit = state.workers.clone().acquire_owned().await.expect("semaphore never closes");
        tokio::task::spawn_blocking(job).await
    };
    match tokio::time::timeout(timeout, work).await {
        Ok(Ok(result)) => result.map_err(ApiError::from),
        Ok(Err(join)) => {
            log::error!("pipeline task failed: {join}");
            Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "pipeline task failed"))
        }
        Err(_) => Err(ApiError::new(
            StatusCode::GATEWAY_TIMEOUT,
            "timeout",
            format!("request exceeded {} s", timeout.as_secs()),
        )),
    }
}

#[derive(Debug, Default, Deserialize)]
struct SpecFragment {
    #[serde(default)]
    treatment_column: Option<String>,
    #[serde(default)]
    outcome_columns: Vec<String>,
}

#[derive(Debug, Serialize)]
struct UploadResponse {
    id: String,
    summary: DatasetSummary,
}

async fn post_dataset(
    State(state): State<AppState>,
    mut multipart: Multipart,
) -> Result<Json<UploadResponse>, ApiError> {
    let mut file = None;
    let mut fragment = SpecFragment::default();
    loop {
        let field = match multipart.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => return Err(multipart_error(e)),
        };
        match field.name() {
            Some("file") => file = Some(field.bytes().await.map_err(multipart_error)?.to_vec()),
            Some("spec") => {
                let raw = field.bytes().await.map_err(multipart_error)?;
                fragment = serde_json::from_slice(&raw)
                    .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_spec", format!("spec part: {e}")))?;
            }
            _ => {}
        }
    }
    let bytes = file.ok_or_else(|| ApiError::bad_request("multipart body has no `file` part"))?;
    let (bytes, summary) = run_blocking(&state, move || {
        let summary = summarize(&bytes, fragment.treatment_column.as_deref(), &fragment.outcome_columns)?;
        Ok((bytes, summary))
    })
    .await?;
    let id = state
        .store
        .insert(StoredDataset { bytes, summary: summary.clone() })
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "store_full", "dataset store is full"))?;
    Ok(Json(UploadResponse { id, summary }))
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    let status = e.status();
    if status == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::new(status, "payload_too_large", "upload exceeds the size limit")
    } else {
        ApiError::new(StatusCode::BAD_REQUEST, "malformed_multipart", e.body_text())
    }
}

struct ColumnScan {
    binary: bool,
    numeric: bool,
    levels: Vec<String>,
    overflow: bool,
}

/// Infer column types and check the declared treatment and outcome columns.
pub fn summarize(bytes: &[u8], treatment: Option<&str>, outcomes: &[String]) -> Result<DatasetSummary, Error> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Csv { row: 0, message: format!("not UTF-8: {e}") })?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(text.as_bytes());
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Csv { row: 0, message: e.to_string() })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn { column: name.to_string() })
    };
    let treat_idx = treatment.map(find).transpose()?;
    let outcome_idx: Vec<usize> = outcomes.iter().map(|c| find(c)).collect::<Result<_, _>>()?;
    let mut scans: Vec<ColumnScan> = headers
        .iter()
        .map(|_| ColumnScan { binary: true, numeric: true, levels: Vec::new(), overflow: false })
        .collect();
    let mut arms = [false; 2];
    let mut rows = 0;
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::Csv { row, message: e.to_string() })?;
        if record.len() != headers.len() {
            return Err(Error::Csv {
                row,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        rows = row;
        for (scan, raw) in scans.iter_mut().zip(record.iter()) {
            let raw = raw.trim();
            let value = raw.parse::<f64>().ok().filter(|v| v.is_finite());
            scan.numeric &= value.is_some();
            scan.binary &= matches!(value, Some(v) if v == 0.0 || v == 1.0);
            if !scan.overflow && !scan.levels.iter().any(|l| l == raw) {
                if scan.levels.len() < MAX_LEVELS {
                    scan.levels.push(raw.to_string());
                } else {
                    scan.overflow = true;
                }
            }
        }
        if let (Some(j), Some(name)) = (treat_idx, treatment) {
            let raw = record[j].trim();
            match raw.parse::<f64>() {
                Ok(v) if v == 0.0 => arms[0] = true,
                Ok(v) if v == 1.0 => arms[1] = true,
                _ => return Err(Error::NonBinaryTreatment { row, column: name.to_string(), value: raw.to_string() }),
            }
        }
        for (&j, name) in outcome_idx.iter().zip(outcomes) {
            let raw = record[j].trim();
            if !raw.parse::<f64>().is_ok_and(f64::is_finite) {
                return Err(Error::NonFinite { row, column: name.clone(), value: raw.to_string() });
            }
        }
    }
    if rows == 0 {
        return Err(Error::TooFewUnits { n: 0, min: 2 });
    }
    if let Some(name) = treatment {
        if !(arms[0] && arms[1]) {
            return Err(Error::SingleArm { column: name.to_string() });
        }
    }
    let columns = headers
        .into_iter()
        .zip(scans)
        .map(|(name, s)| {
            let kind = if s.binary {
                ColumnKind::Binary
            } else if s.numeric {
                ColumnKind::Numeric
            } else {
                ColumnKind::Categorical
            };
            let levels = (kind == ColumnKind::Categorical && !s.overflow).then_some(s.levels);
            ColumnSummary { name, kind, levels }
        })
        .collect();
    Ok(DatasetSummary { rows, columns })
}

#[derive(Debug, Deserialize)]
struct DecomposeRequest {
    original_id: String,
    replication_id: String,
    spec: AnalysisSpec,
    #[serde(default, alias = "selection")]
    selection_alpha0: Option<f64>,
    #[serde(default)]
    level: Option<f64>,
    #[serde(default)]
    seed: Option<u64>,
}

async fn post_decompose(
    State(state): State<AppState>,
    body: Result<Json<DecomposeRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_request", e.body_text()))?;
    let original = state.store.get(&req.original_id).ok_or_else(|| ApiError::unknown_dataset(&req.original_id))?;
    let replication =
        state.store.get(&req.replication_id).ok_or_else(|| ApiError::unknown_dataset(&req.replication_id))?;
    let options = AnalyzeOptions { level: req.level, selection_alpha0: req.selection_alpha0, seed: req.seed };
    let spec = req.spec;
    let doc = run_blocking(&state, move || {
        let d1 = read_dataset(original.bytes.as_slice(), &spec, Role::Original)?;
        let d2 = read_dataset(replication.bytes.as_slice(), &spec, Role::Replication)?;
        analyze(&d1, &d2, &spec, &options)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], doc.to_json()).into_response())
}
