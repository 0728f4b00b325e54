//! HTTP+JSON service for the mask studio and scripts.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::header::{ACCEPT, CONTENT_TYPE};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use radfield::dataset::{Camera, Dataset};
use radfield::guidance::TargetSpec;
use radfield::losses::LossWeights;
use radfield::mask::{mask_set_from_features, MaskOptions, MaskSet, MaskSetMeta, PatchSelection, DEFAULT_ALPHA, MASKSET_FILE};
use radfield::pipeline::{EditFlags, EditJob, JobStatus, Providers};
use radfield::Error;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::jobs::{spawn_edit, EditTask, JobStore};
use crate::ops::{load_field, mask_preview, maskset_id, view_plane, FeatureCache, LoadedField, ViewKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadRequest,
    NotFound,
    Conflict,
    NumericFault,
    Config,
}

impl ErrorCode {
    fn status(self) -> StatusCode {
        match self {
            ErrorCode::BadRequest => StatusCode::BAD_REQUEST,
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::Conflict => StatusCode::CONFLICT,
            ErrorCode::NumericFault => StatusCode::INTERNAL_SERVER_ERROR,
            ErrorCode::Config => StatusCode::UNPROCESSABLE_ENTITY,
        }
    }
}

/// The body of every non-2xx response.
#[derive(Clone, Debug, Serialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            detail: Value::Null,
        }
    }

    fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match &e {
            Error::Config(_) => ApiError::new(ErrorCode::Config, message),
            Error::Contract(_) | Error::DegenerateField(_) | Error::Mismatch { .. } => {
                ApiError::new(ErrorCode::BadRequest, message)
            }
            Error::NumericFault { index, .. } => {
                ApiError::new(ErrorCode::NumericFault, message).with_detail(json!({ "index": index }))
            }
            Error::MissingFile { path } => {
                ApiError::new(ErrorCode::NotFound, message).with_detail(json!({ "path": path }))
            }
            Error::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
                ApiError::new(ErrorCode::NotFound, message).with_detail(json!({ "path": path }))
            }
            Error::BadMagic { path, .. }
            | Error::Truncated { path, .. }
            | Error::Format { path, .. }
            | Error::Io { path, .. } => ApiError::new(ErrorCode::Config, message).with_detail(json!({ "path": path })),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code.status(), Json(self)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// Shared, read-mostly service state.
pub struct AppState {
    pub field: LoadedField,
    pub cameras: Vec<Camera>,
    pub dataset: Option<Arc<Dataset>>,
    pub workdir: PathBuf,
    pub features: FeatureCache,
    pub providers: Providers,
    pub jobs: Arc<JobStore>,
}

impl AppState {
    pub fn new(
        field: LoadedField,
        cameras: Vec<Camera>,
        dataset: Option<Dataset>,
        workdir: PathBuf,
        providers: Providers,
    ) -> Self {
        Self {
            field,
            cameras,
            dataset: dataset.map(Arc::new),
            features: FeatureCache::new(Some(workdir.join("cache"))),
            workdir,
            providers,
            jobs: Arc::new(JobStore::default()),
        }
    }

    fn maskset_dir(&self, id: &str) -> ApiResult<PathBuf> {
        // Ids are generated here; reject anything that could leave the directory.
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(ApiError::new(ErrorCode::BadRequest, format!("malformed mask set id {id:?}")));
        }
        Ok(self.workdir.join("masksets").join(id))
    }

    fn load_maskset(&self, id: &str) -> ApiResult<MaskSet> {
        let dir = self.maskset_dir(id)?;
        if !dir.join(MASKSET_FILE).exists() {
            return Err(ApiError::new(ErrorCode::NotFound, format!("no mask set {id:?}")));
        }
        Ok(MaskSet::load(&dir)?)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/views", get(views))
        .route("/mask/preview", post(mask_preview_handler))
        .route("/mask/commit", post(mask_commit))
        .route("/masksets", get(masksets))
        .route("/prompts", get(prompts))
        .route("/edit", post(edit))
        .route("/job/{id}", get(job_status))
        .route("/job/{id}/preview", get(job_preview))
        .fallback(|| async { ApiError::new(ErrorCode::NotFound, "no such endpoint") })
        .method_not_allowed_fallback(|| async {
            let err = ApiError::new(ErrorCode::BadRequest, "method not allowed");
            (StatusCode::METHOD_NOT_ALLOWED, Json(err))
        })
        .with_state(state)
}

/// Runs blocking work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(ErrorCode::Config, format!("worker panicked: {e}")))?
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(ErrorCode::BadRequest, format!("invalid request body: {e}")))
}

fn wants_json(headers: &HeaderMap) -> bool {
    headers
        .get(ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("application/json"))
}

/// PNG bytes, or `{"png_b64": …}` when the client asks for JSON.
fn png_response(headers: &HeaderMap, png: Vec<u8>) -> Response {
    if wants_json(headers) {
        Json(json!({ "png_b64": B64.encode(&png) })).into_response()
    } else {
        ([(CONTENT_TYPE, "image/png")], png).into_response()
    }
}

#[derive(Debug, Deserialize)]
struct ViewQuery {
    i: usize,
    kind: String,
    #[serde(default)]
    maskset: Option<String>,
}

async fn views(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    query: std::result::Result<Query<ViewQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Response> {
    let Query(q) = query.map_err(|e| ApiError::new(ErrorCode::BadRequest, e.body_text()))?;
    let kind: ViewKind = q.kind.parse()?;
    let png = blocking(move || {
        let masks = match (kind, &q.maskset) {
            (ViewKind::Mask, Some(id)) => Some(st.load_maskset(id)?),
            (ViewKind::Mask, None) => Some(latest_maskset(&st)?),
            _ => None,
        };
        let features = if kind == ViewKind::FeaturePca {
            Some(st.features.get(&st.field, &st.cameras)?)
        } else {
            None
        };
        let plane = view_plane(
            &st.field.field,
            &st.cameras,
            q.i,
            kind,
            features.as_ref().and_then(|f| f.get(q.i)),
            masks.as_ref(),
        )?;
        Ok(plane.to_png_bytes()?)
    })
    .await?;
    Ok(png_response(&headers, png))
}

fn latest_maskset(st: &AppState) -> ApiResult<MaskSet> {
    let listed = list_masksets(st)?;
    let last = listed
        .last()
        .ok_or_else(|| ApiError::new(ErrorCode::NotFound, "no mask set committed yet"))?;
    st.load_maskset(&last.maskset_id)
}

/// Selection as posted by the client; `alpha` defaults to the usual threshold.
#[derive(Debug, Deserialize)]
struct SelectionRequest {
    view: usize,
    rect: [usize; 4],
    #[serde(default = "default_alpha")]
    alpha: f64,
    #[serde(default)]
    postprocess: bool,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl SelectionRequest {
    fn selection(&self) -> PatchSelection {
        PatchSelection {
            view: self.view,
            rect: self.rect,
            alpha: self.alpha,
        }
    }
}

async fn mask_preview_handler(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: SelectionRequest = parse_json(&body)?;
    blocking(move || {
        let features = st.features.get(&st.field, &st.cameras)?;
        let p = mask_preview(
            &features,
            &req.selection(),
            MaskOptions {
                postprocess: req.postprocess,
            },
        )?;
        Ok(Json(json!({
            "mask_png_b64": B64.encode(&p.png),
            "pixel_count": p.pixel_count,
            "sim_histogram": p.sim_histogram,
        })))
    })
    .await
}

async fn mask_commit(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: SelectionRequest = parse_json(&body)?;
    blocking(move || {
        let features = st.features.get(&st.field, &st.cameras)?;
        let set = mask_set_from_features(
            &features,
            &st.cameras,
            &req.selection(),
            &st.field.id,
            MaskOptions {
                postprocess: req.postprocess,
            },
        )?;
        let id = maskset_id(&set);
        set.save(&st.maskset_dir(&id)?)?;
        Ok(Json(json!({ "maskset_id": id })))
    })
    .await
}

#[derive(Debug, Serialize)]
struct MaskSetSummary {
    maskset_id: String,
    checkpoint_id: String,
    selection: PatchSelection,
    postprocess: bool,
    views: usize,
    modified: u128,
}

/// Committed mask sets, oldest first.
fn list_masksets(st: &AppState) -> ApiResult<Vec<MaskSetSummary>> {
    let root = st.workdir.join("masksets");
    let mut out = Vec::new();
    let Ok(entries) = fs::read_dir(&root) else {
        return Ok(out);
    };
    for entry in entries.flatten() {
        let meta_path = entry.path().join(MASKSET_FILE);
        let Ok(text) = fs::read_to_string(&meta_path) else {
            continue;
        };
        let meta: MaskSetMeta = serde_json::from_str(&text).map_err(|e| {
            ApiError::from(Error::Format {
                path: meta_path.clone(),
                message: e.to_string(),
            })
        })?;
        let modified = fs::metadata(&meta_path)
            .and_then(|m| m.modified())
            .ok()
            .and_then(|t| t.duration_since(std::time::UNIX_EPOCH).ok())
            .map_or(0, |d| d.as_nanos());
        out.push(MaskSetSummary {
            maskset_id: entry.file_name().to_string_lossy().into_owned(),
            checkpoint_id: meta.checkpoint_id,
            selection: meta.selection,
            postprocess: meta.postprocess,
            views: meta.cameras.len(),
            modified,
        });
    }
    out.sort_by(|a, b| (a.modified, &a.maskset_id).cmp(&(b.modified, &b.maskset_id)));
    Ok(out)
}

async fn masksets(State(st): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let list = blocking(move || list_masksets(&st)).await?;
    Ok(Json(json!({ "masksets": list })))
}

#[derive(Debug, Serialize)]
struct PromptEntry<'a> {
    prompt: &'a str,
    target: &'a TargetSpec,
}

async fn prompts(State(st): State<Arc<AppState>>) -> Json<Value> {
    let prompts: Vec<PromptEntry> = st
        .providers
        .prompts
        .prompts
        .iter()
        .map(|(prompt, target)| PromptEntry { prompt, target })
        .collect();
    Json(json!({
        "prompts": prompts,
        "palettes": st.providers.palettes.names(),
    }))
}

/// Loss weights as posted; omitted ones keep their defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct LambdaRequest {
    feature: Option<f64>,
    depth: Option<f64>,
    unmask: Option<f64>,
    clip: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct EditRequest {
    #[serde(default)]
    base_ckpt: Option<PathBuf>,
    maskset_id: String,
    prompt: String,
    #[serde(default)]
    bgt: Option<String>,
    #[serde(default)]
    lambdas: LambdaRequest,
    #[serde(default)]
    steps: Option<usize>,
    #[serde(default)]
    pretrain_steps: Option<usize>,
    #[serde(default)]
    flags: Option<EditFlags>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    n_samples: Option<usize>,
    #[serde(default)]
    status_every: Option<usize>,
}

impl EditRequest {
    fn job(&self) -> EditJob {
        let d = EditJob::default();
        let w = LossWeights {
            lambda_feature: self.lambdas.feature.unwrap_or(d.weights.lambda_feature),
            lambda_depth: self.lambdas.depth.unwrap_or(d.weights.lambda_depth),
            lambda_unmask: self.lambdas.unmask.unwrap_or(d.weights.lambda_unmask),
            lambda_clip: self.lambdas.clip.unwrap_or(d.weights.lambda_clip),
        };
        EditJob {
            prompt: self.prompt.clone(),
            bgt: self.bgt.clone().unwrap_or(d.bgt.clone()),
            weights: w,
            pretrain_steps: self.pretrain_steps.unwrap_or(d.pretrain_steps),
            repaint_steps: self.steps.unwrap_or(d.repaint_steps),
            seed: self.seed.unwrap_or(d.seed),
            flags: self.flags.unwrap_or(d.flags),
            n_samples: self.n_samples.unwrap_or(d.n_samples),
            status_every: self.status_every.unwrap_or(d.status_every),
            ..d
        }
    }
}

async fn edit(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: EditRequest = parse_json(&body)?;
    let job = req.job();
    job.validate(&st.providers)?;
    let st2 = st.clone();
    let (base, masks) = blocking(move || {
        let masks = st2.load_maskset(&req.maskset_id)?;
        let base = match &req.base_ckpt {
            Some(p) => load_field(p)?,
            None => st2.field.clone(),
        };
        Ok((base, masks))
    })
    .await?;
    let n = st.jobs.len();
    let job_id = format!("job-{:04}-{}", n + 1, &base.id[..8]);
    let dir = st.workdir.join("jobs").join(&job_id);
    let pretrain = if st.dataset.is_some() { job.pretrain_steps } else { 0 };
    if let Err(running) = st.jobs.claim(&job_id, dir.clone(), pretrain + job.repaint_steps) {
        return Err(ApiError::new(ErrorCode::Conflict, format!("job {running} is still running"))
            .with_detail(json!({ "running": running })));
    }
    spawn_edit(
        st.jobs.clone(),
        EditTask {
            dir,
            base: base.field,
            masks,
            dataset: st.dataset.clone(),
            job,
            providers: st.providers.clone(),
            job_id: job_id.clone(),
        },
    );
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))))
}

async fn job_status(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<JobStatus>> {
    st.jobs
        .get(&id)
        .map(|r| Json(r.status))
        .ok_or_else(|| ApiError::new(ErrorCode::NotFound, format!("no job {id:?}")))
}

async fn job_preview(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let rec = st
        .jobs
        .get(&id)
        .ok_or_else(|| ApiError::new(ErrorCode::NotFound, format!("no job {id:?}")))?;
    let path = rec
        .latest_preview
        .ok_or_else(|| ApiError::new(ErrorCode::NotFound, format!("job {id:?} has no preview yet")))?;
    let png = read_file(&path)?;
    Ok(png_response(&headers, png))
}

fn read_file(path: &Path) -> ApiResult<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e).into())
}
