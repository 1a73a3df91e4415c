//! HTTP API over the review store.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use jointlens::service::{run_pipeline, soxai_from_store, CasePage, CaseState, JointCase, PipelineOptions, ReviewVerdict, RunSummary, Store};
use jointlens::soxai::ScatterPoint;
use jointlens::triage::{evaluate, EvalReport};
use jointlens::trust::{trust_report, TrustReport};
use jointlens::xai::{load_explanation, render_overlay};
use jointlens::{preprocess, Config, DatasetManifest, Error, Label, ScorerBackend, TriageThresholds};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

const REGISTRY_FILE: &str = "datasets.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub dataset_id: String,
    pub manifest_path: PathBuf,
    pub entries: usize,
    pub registered_at: DateTime<Utc>,
}

pub struct AppState {
    pub store: Store,
    pub config: Config,
    pub backend: Arc<dyn ScorerBackend>,
    datasets: Mutex<BTreeMap<String, DatasetRecord>>,
    soxai_cache: Mutex<Option<(u64, Arc<SoxaiResponse>)>>,
}

impl AppState {
    /// Opens (or creates) the store under `data_dir` along with its dataset registry.
    pub fn open(data_dir: impl AsRef<Path>, config: Config, backend: Arc<dyn ScorerBackend>) -> jointlens::Result<AppState> {
        let store = Store::open(data_dir, config.service.clone())?;
        let reg_path = store.data_dir().join(REGISTRY_FILE);
        let datasets = match fs::read(&reg_path) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(_) => BTreeMap::new(),
        };
        Ok(AppState {
            store,
            config,
            backend,
            datasets: Mutex::new(datasets),
            soxai_cache: Mutex::new(None),
        })
    }

    fn save_registry(&self, datasets: &BTreeMap<String, DatasetRecord>) -> jointlens::Result<()> {
        let path = self.store.data_dir().join(REGISTRY_FILE);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(datasets)?).map_err(|e| Error::Io {
            path: tmp.clone(),
            source: e,
        })?;
        fs::rename(&tmp, &path).map_err(|e| Error::Io { path, source: e })
    }

    pub fn register_dataset(&self, manifest_path: &Path) -> jointlens::Result<DatasetRecord> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let manifest_path = fs::canonicalize(manifest_path).unwrap_or_else(|_| manifest_path.to_path_buf());
        let mut datasets = self.datasets.lock();
        let rec = DatasetRecord {
            dataset_id: format!("ds{:04}", datasets.len() + 1),
            manifest_path,
            entries: manifest.entries.len(),
            registered_at: Utc::now(),
        };
        datasets.insert(rec.dataset_id.clone(), rec.clone());
        self.save_registry(&datasets)?;
        Ok(rec)
    }

    pub fn dataset(&self, id: &str) -> jointlens::Result<DatasetRecord> {
        self.datasets
            .lock()
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("dataset '{id}'")))
    }
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError(Error::Validation(r.body_text()))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            Error::Parameter(_) => (StatusCode::BAD_REQUEST, "parameter"),
            Error::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            Error::Scorer { .. } => (StatusCode::BAD_GATEWAY, "scorer"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        (status, Json(json!({"error": kind, "message": self.0.to_string()}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = Arc<AppState>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> jointlens::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(Error::Integrity(format!("worker panicked: {e}"))))?
        .map_err(ApiError)
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/datasets", post(register))
        .route("/api/inspect", post(inspect))
        .route("/api/queue", get(queue))
        .route("/api/cases/{id}", get(case))
        .route("/api/cases/{id}/image", get(case_image))
        .route("/api/cases/{id}/explanation", get(case_explanation))
        .route("/api/cases/{id}/overlay", get(case_overlay))
        .route("/api/cases/{id}/verdict", post(verdict))
        .route("/api/cases/{id}/rework", post(rework))
        .route("/api/metrics", get(metrics))
        .route("/api/trust", get(trust))
        .route("/api/soxai", get(soxai))
        .with_state(state)
}

#[derive(Deserialize)]
struct RegisterRequest {
    manifest_path: PathBuf,
}

async fn register(
    State(s): State<Shared>,
    body: Result<Json<RegisterRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<DatasetRecord>)> {
    let Json(req) = body?;
    let rec = blocking(move || s.register_dataset(&req.manifest_path)).await?;
    Ok((StatusCode::CREATED, Json(rec)))
}

#[derive(Deserialize)]
struct InspectRequest {
    dataset_id: String,
    thresholds: Option<TriageThresholds>,
}

async fn inspect(State(s): State<Shared>, body: Result<Json<InspectRequest>, JsonRejection>) -> ApiResult<Json<RunSummary>> {
    let Json(req) = body?;
    let rec = s.dataset(&req.dataset_id)?;
    let summary = blocking(move || {
        let manifest = DatasetManifest::load(&rec.manifest_path)?;
        let opts = PipelineOptions {
            thresholds: req.thresholds.unwrap_or(s.config.thresholds),
            xai: s.config.xai.clone(),
            ..PipelineOptions::default()
        };
        run_pipeline(&s.store, &manifest, s.backend.as_ref(), &opts)
    })
    .await?;
    Ok(Json(summary))
}

#[derive(Deserialize)]
struct QueueQuery {
    state: Option<String>,
    page: Option<usize>,
    per_page: Option<usize>,
}

async fn queue(State(s): State<Shared>, Query(q): Query<QueueQuery>) -> ApiResult<Json<CasePage>> {
    let state = match q.state.as_deref() {
        None => Some(CaseState::InReview),
        Some("all") => None,
        Some(name) => Some(name.parse::<CaseState>()?),
    };
    let per_page = q.per_page.unwrap_or(s.store.config().page_size);
    Ok(Json(s.store.list(state, q.page.unwrap_or(1), per_page)))
}

async fn case(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<JointCase>> {
    Ok(Json(s.store.get(&id)?))
}

fn png(img: image::DynamicImage) -> jointlens::Result<Response> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], buf.into_inner()).into_response())
}

async fn case_image(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let c = s.store.get(&id)?;
    blocking(move || png(image::open(&c.image_path)?)).await
}

fn explanation_path(s: &AppState, id: &str) -> jointlens::Result<(JointCase, PathBuf)> {
    let c = s.store.get(id)?;
    let path = s
        .store
        .explanation_file(&c)
        .ok_or_else(|| Error::NotFound(format!("explanation for '{id}'")))?;
    Ok((c, path))
}

async fn case_explanation(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let (_, path) = explanation_path(&s, &id)?;
    let bytes = fs::read(&path).map_err(|e| Error::Io { path, source: e })?;
    Ok(Json(serde_json::from_slice(&bytes).map_err(Error::from)?))
}

async fn case_overlay(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let (c, path) = explanation_path(&s, &id)?;
    blocking(move || {
        let expl = load_explanation(path)?;
        let img = preprocess(&image::open(&c.image_path)?.to_rgb8())?;
        png(image::DynamicImage::ImageRgba8(render_overlay(&img.to_rgb8(), &expl)?))
    })
    .await
}

#[derive(Deserialize)]
struct VerdictRequest {
    decision: Label,
    operator: String,
    note: Option<String>,
}

async fn verdict(
    State(s): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<VerdictRequest>, JsonRejection>,
) -> ApiResult<Json<JointCase>> {
    let Json(req) = body?;
    let v = ReviewVerdict {
        case_id: id,
        decision: req.decision,
        operator: req.operator,
        note: req.note,
    };
    Ok(Json(blocking(move || s.store.submit_verdict(&v)).await?))
}

async fn rework(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<JointCase>> {
    Ok(Json(blocking(move || s.store.rework(&id)).await?))
}

#[derive(Deserialize)]
struct ThresholdQuery {
    threshold: Option<f64>,
}

impl ThresholdQuery {
    fn get(&self, s: &AppState) -> jointlens::Result<f64> {
        let t = self.threshold.unwrap_or(s.config.eval_threshold);
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Parameter(format!("threshold must be in [0, 1], got {t}")));
        }
        Ok(t)
    }
}

async fn metrics(State(s): State<Shared>, Query(q): Query<ThresholdQuery>) -> ApiResult<Json<EvalReport>> {
    let t = q.get(&s)?;
    Ok(Json(evaluate(&s.store.score_records()?, t)?))
}

async fn trust(State(s): State<Shared>, Query(q): Query<ThresholdQuery>) -> ApiResult<Json<TrustReport>> {
    let t = q.get(&s)?;
    Ok(Json(trust_report(&s.store.score_records()?, t, &s.config.trust)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SoxaiResponse {
    pub n: usize,
    pub final_kl: f64,
    pub points: Vec<ScatterPoint>,
}

async fn soxai(State(s): State<Shared>) -> ApiResult<Json<SoxaiResponse>> {
    let seq = s.store.last_seq();
    if let Some((at, cached)) = s.soxai_cache.lock().as_ref() {
        if *at == seq {
            return Ok(Json(cached.as_ref().clone()));
        }
    }
    let st = s.clone();
    let resp = blocking(move || {
        let out = soxai_from_store(&st.store, Some(st.backend.as_ref()), &st.config.tsne)?;
        Ok(SoxaiResponse {
            n: out.points.len(),
            final_kl: out.kl_history.last().copied().unwrap_or(0.0),
            points: out.points,
        })
    })
    .await?;
    *s.soxai_cache.lock() = Some((seq, Arc::new(resp.clone())));
    Ok(Json(resp))
}
