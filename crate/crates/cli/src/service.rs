//! HTTP service: sessions (one recorded generation each), heatmaps, masks,
//! annotations, token optimization jobs with a server-sent event stream,
//! and token files.
//!
//! Everything a request produces is written under the data directory and
//! served from `/files/...`:
//!
//! ```text
//! <data>/sessions/<id>/session.json
//! <data>/sessions/<id>/trace/          recorded trace, image.png included
//! <data>/sessions/<id>/annotation.png
//! <data>/sessions/<id>/out/            heatmaps and masks, numbered
//! <data>/tokens/<id>/token.{json,f32}
//! ```

use std::collections::{HashMap, HashSet};
use std::convert::Infallible;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use ovam_core::backend::trace_io::{read_trace, write_trace, TRACE_IMAGE_FILE};
use ovam_core::mask::{write_mask, BinarizationParams, Refiner};
use ovam_core::optimizer::{
    init_attribution_tokens, optimize_tokens_with, read_token_file, write_token_file, EpochEvent,
    GroundTruthMask, OptimizerConfig, TokenFileMeta, TrainingPair,
};
use ovam_core::ovam::{write_heatmap, SelectionConfig};
use ovam_core::raster::BoolGrid;
use ovam_core::{Denoiser, DenoisingTrace, OvamError, TokenEmbeddingMatrix};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::watch;

use crate::commands::ANNOTATION_FILE;
use crate::config::Config;
use crate::error::CliError;
use crate::ops::{self, ResolvedTokens};

// ------------------------------------------------------------------ errors

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub error: CliError,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            error: CliError::new(kind, message),
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} `{id}`"))
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_argument", message)
    }

    fn conflict(kind: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, kind, message)
    }
}

impl From<OvamError> for ApiError {
    fn from(e: OvamError) -> Self {
        let status = match e {
            OvamError::PromptTooLong { .. }
            | OvamError::Dimension { .. }
            | OvamError::NonFinite(_)
            | OvamError::InvalidArgument(_)
            | OvamError::Config(_)
            | OvamError::Divergence { .. }
            | OvamError::ScorerUnavailable => StatusCode::UNPROCESSABLE_ENTITY,
            OvamError::BackendUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            error: e.into(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(r.status(), "bad_request", r.body_text())
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "io", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.error }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    })?
}

// ------------------------------------------------------------------- state

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub backend_id: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub prompt: String,
    pub seed: u64,
    pub steps: usize,
}

pub struct Session {
    pub info: SessionInfo,
    pub trace: Arc<DenoisingTrace>,
    dir: PathBuf,
    /// Serializes annotation writes and the numbering of outputs.
    lock: Mutex<u64>,
}

impl Session {
    fn next_output(&self, dir: &Path, stem: &str) -> ApiResult<PathBuf> {
        let mut n = self.lock.lock().expect("session lock poisoned");
        *n += 1;
        std::fs::create_dir_all(dir)?;
        Ok(dir.join(format!("{:06}-{stem}", *n)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Done {
        token_id: String,
        best_loss: f64,
        best_epoch: usize,
    },
    Failed {
        error: CliError,
    },
}

pub struct Job {
    pub id: String,
    pub class: String,
    pub session_ids: Vec<String>,
    events: Mutex<Vec<EpochEvent>>,
    status: Mutex<JobStatus>,
    /// Bumped after every event and on completion.
    tick: watch::Sender<u64>,
}

impl Job {
    pub fn events(&self) -> Vec<EpochEvent> {
        self.events.lock().expect("job lock poisoned").clone()
    }

    pub fn status(&self) -> JobStatus {
        self.status.lock().expect("job lock poisoned").clone()
    }
}

pub struct AppState {
    pub backend: Arc<dyn Denoiser>,
    pub config: Config,
    pub data_dir: PathBuf,
    refiner: Box<dyn Refiner>,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    jobs: RwLock<HashMap<String, Arc<Job>>>,
    busy: Mutex<HashSet<String>>,
    ids: AtomicU64,
}

impl AppState {
    pub fn new(config: Config, data_dir: PathBuf) -> Result<Arc<Self>, OvamError> {
        let backend = config.backend()?;
        Ok(Self::with_backend(config, backend, data_dir))
    }

    pub fn with_backend(config: Config, backend: Arc<dyn Denoiser>, data_dir: PathBuf) -> Arc<Self> {
        Arc::new(AppState {
            backend,
            refiner: config.refiner(),
            config,
            data_dir,
            sessions: RwLock::new(HashMap::new()),
            jobs: RwLock::new(HashMap::new()),
            busy: Mutex::new(HashSet::new()),
            ids: AtomicU64::new(0),
        })
    }

    fn fresh_id(&self, prefix: &str) -> String {
        let nanos = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos() as u64);
        let n = self.ids.fetch_add(1, Ordering::Relaxed);
        let mixed = ovam_core::backend::splitmix64(nanos ^ n.rotate_left(32) ^ std::process::id() as u64);
        format!("{prefix}{mixed:016x}")
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.data_dir.join("sessions").join(id)
    }

    fn token_dir(&self, id: &str) -> PathBuf {
        self.data_dir.join("tokens").join(id)
    }

    /// In-memory session, or one persisted by an earlier run.
    pub fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        if let Some(s) = self.sessions.read().expect("session map poisoned").get(id) {
            return Ok(s.clone());
        }
        let dir = self.session_dir(id);
        if !valid_id(id) || !dir.join("session.json").is_file() {
            return Err(ApiError::not_found("session", id));
        }
        let info: SessionInfo = serde_json::from_slice(&std::fs::read(dir.join("session.json"))?)
            .map_err(OvamError::from)?;
        let trace = read_trace(&dir.join("trace"))?;
        let outputs = std::fs::read_dir(dir.join("out")).map_or(0, |d| d.count() as u64);
        let s = Arc::new(Session {
            info,
            trace: Arc::new(trace),
            dir,
            lock: Mutex::new(outputs),
        });
        let mut map = self.sessions.write().expect("session map poisoned");
        Ok(map.entry(id.to_string()).or_insert(s).clone())
    }

    pub fn job(&self, id: &str) -> ApiResult<Arc<Job>> {
        self.jobs
            .read()
            .expect("job map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("optimization job", id))
    }

    fn url(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.data_dir).unwrap_or(path);
        let parts: Vec<String> = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect();
        format!("/files/{}", parts.join("/"))
    }

    fn resolve_tokens(
        &self,
        prompt: Option<&str>,
        token_id: Option<&str>,
        index: Option<usize>,
    ) -> ApiResult<ResolvedTokens> {
        match (prompt, token_id) {
            (Some(p), None) => Ok(ResolvedTokens::from_prompt(&*self.backend, p, index)?),
            (None, Some(id)) => {
                let dir = self.token_dir(id);
                if !valid_id(id) || !dir.is_dir() {
                    return Err(ApiError::not_found("token", id));
                }
                Ok(ResolvedTokens::from_token_file(&dir, index)?)
            }
            _ => Err(ApiError::unprocessable(
                "give exactly one of an attribution prompt and token_id",
            )),
        }
    }
}

/// Ids name directories, so only `[A-Za-z0-9_-]` is accepted.
fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/heatmap", post(session_heatmap))
        .route("/sessions/{id}/mask", post(session_mask))
        .route("/sessions/{id}/annotation", get(get_annotation).put(put_annotation))
        .route("/optimizations", post(start_optimization))
        .route("/optimizations/{id}", get(get_optimization))
        .route("/optimizations/{id}/events", get(optimization_events))
        .route("/tokens", get(list_tokens).post(create_token))
        .route("/tokens/{id}", get(get_token).delete(delete_token))
        .route("/files/{*path}", get(get_file))
        .with_state(state)
}

// ---------------------------------------------------------------- sessions

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub prompt: String,
    #[serde(default)]
    pub seed: u64,
    pub steps: Option<usize>,
}

async fn create_session(
    State(st): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(req) = body?;
    let steps = req.steps.unwrap_or(st.config.steps);
    let st2 = st.clone();
    let session = blocking(move || {
        let trace = st2.backend.generate_with_trace(&req.prompt, req.seed, steps)?;
        let id = st2.fresh_id("s");
        let dir = st2.session_dir(&id);
        write_trace(&trace, &dir.join("trace"))?;
        let info = SessionInfo {
            id: id.clone(),
            backend_id: trace.backend_id.clone(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            prompt: req.prompt,
            seed: req.seed,
            steps,
        };
        std::fs::write(
            dir.join("session.json"),
            serde_json::to_vec_pretty(&info).map_err(OvamError::from)?,
        )?;
        Ok(Arc::new(Session {
            info,
            trace: Arc::new(trace),
            dir,
            lock: Mutex::new(0),
        }))
    })
    .await?;
    st.sessions
        .write()
        .expect("session map poisoned")
        .insert(session.info.id.clone(), session.clone());
    let (w, h) = session.trace.image_dims();
    Ok((
        StatusCode::CREATED,
        Json(json!({
            "id": session.info.id,
            "image_url": st.url(&session.dir.join("trace").join(TRACE_IMAGE_FILE)),
            "width": w,
            "height": h,
        })),
    ))
}

async fn get_session(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<Value>> {
    let s = st.session(&id)?;
    let (w, h) = s.trace.image_dims();
    Ok(Json(json!({
        "session": s.info,
        "image_url": st.url(&s.dir.join("trace").join(TRACE_IMAGE_FILE)),
        "width": w,
        "height": h,
        "has_annotation": s.dir.join(ANNOTATION_FILE).is_file(),
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapRequest {
    pub attribution_prompt: Option<String>,
    pub token_id: Option<String>,
    /// Row of interest; defaults to the last word, or a token file's last row.
    pub token_index: Option<usize>,
    /// Defaults to the configured selection.
    pub selection: Option<SelectionConfig>,
    /// Threshold for `area_at_tau`; defaults per token kind.
    pub tau: Option<f64>,
}

async fn session_heatmap(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<HeatmapRequest>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(req) = body?;
    let session = st.session(&id)?;
    let st2 = st.clone();
    blocking(move || {
        let tokens = st2.resolve_tokens(
            req.attribution_prompt.as_deref(),
            req.token_id.as_deref(),
            req.token_index,
        )?;
        let selection = req.selection.unwrap_or_else(|| st2.config.selection.clone());
        let tau = req.tau.unwrap_or(tokens.defaults(&st2.config.mask).tau);
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(ApiError::unprocessable(format!("tau = {tau} must lie in (0, 1]")));
        }
        let (map, hm) = ops::heatmap(&session.trace, &tokens, &selection)?;
        let stats = ops::heatmap_stats(&map, tau)?;
        let prefix = session.next_output(&session.dir.join("out"), "heatmap")?;
        let [raw, meta, png] = write_heatmap(&prefix, &map, tokens.label(), hm.normalization, hm.slices)?;
        Ok(Json(json!({
            "heatmap_url": st2.url(&png),
            "raw_url": st2.url(&raw),
            "meta_url": st2.url(&meta),
            "token": tokens.label(),
            "slices": hm.slices,
            "width": map.width,
            "height": map.height,
            "stats": stats,
        })))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRequest {
    /// Attribution prompt.
    pub token: Option<String>,
    pub token_id: Option<String>,
    pub token_index: Option<usize>,
    pub tau: Option<f64>,
    pub alpha: Option<f64>,
    pub crf: Option<bool>,
    pub use_self_attention: Option<bool>,
    pub threshold_at_latent: Option<bool>,
    pub selection: Option<SelectionConfig>,
}

impl MaskRequest {
    fn params(&self, defaults: BinarizationParams) -> BinarizationParams {
        BinarizationParams {
            tau: self.tau.unwrap_or(defaults.tau),
            alpha: self.alpha.unwrap_or(defaults.alpha),
            use_crf: self.crf.unwrap_or(defaults.use_crf),
            use_self_attention: self.use_self_attention.unwrap_or(defaults.use_self_attention),
            threshold_at_latent: self.threshold_at_latent.unwrap_or(defaults.threshold_at_latent),
        }
    }
}

async fn session_mask(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<MaskRequest>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(req) = body?;
    let session = st.session(&id)?;
    let st2 = st.clone();
    blocking(move || {
        let tokens = st2.resolve_tokens(req.token.as_deref(), req.token_id.as_deref(), req.token_index)?;
        let params = req.params(tokens.defaults(&st2.config.mask));
        params.validate()?;
        let selection = req.selection.clone().unwrap_or_else(|| st2.config.selection.clone());
        let mask = ops::mask(&session.trace, &tokens, &params, &selection, &*st2.refiner)?;
        let mut path = session.next_output(&session.dir.join("out"), "mask")?;
        path.set_extension("png");
        write_mask(&path, &mask, &params)?;
        Ok(Json(json!({
            "mask_url": st2.url(&path),
            "area_fraction": mask.area_fraction,
            "token": tokens.label(),
            "tau": params.tau,
            "alpha": params.alpha,
        })))
    })
    .await
}

async fn put_annotation(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<StatusCode> {
    let session = st.session(&id)?;
    let img = image::load_from_memory_with_format(&body, image::ImageFormat::Png)
        .map_err(|e| ApiError::unprocessable(format!("annotation is not a PNG: {e}")))?;
    let grid = BoolGrid::from_gray(&img.to_luma8());
    let want = session.trace.image_dims();
    if grid.dims() != want {
        return Err(ApiError::conflict(
            "dimension_mismatch",
            format!(
                "annotation is {}x{}, image is {}x{}",
                grid.width, grid.height, want.0, want.1
            ),
        ));
    }
    let _guard = session.lock.lock().expect("session lock poisoned");
    grid.save_png(&session.dir.join(ANNOTATION_FILE))?;
    Ok(StatusCode::NO_CONTENT)
}

async fn get_annotation(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let session = st.session(&id)?;
    let path = session.dir.join(ANNOTATION_FILE);
    if !path.is_file() {
        return Err(ApiError::not_found("annotation for session", &id));
    }
    let bytes = std::fs::read(path)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

// ----------------------------------------------------------- optimizations

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizationRequest {
    pub session_ids: Vec<String>,
    pub class: String,
    /// Partial optimizer config; missing keys take the configured defaults.
    #[serde(default)]
    pub config: Option<Value>,
}

fn merged_config(base: &OptimizerConfig, overlay: Option<&Value>) -> ApiResult<OptimizerConfig> {
    let mut v = serde_json::to_value(base).map_err(OvamError::from)?;
    if let Some(o) = overlay {
        let Value::Object(over) = o else {
            return Err(ApiError::unprocessable("config must be an object"));
        };
        let Value::Object(base) = &mut v else {
            unreachable!("optimizer config serializes to an object")
        };
        for (k, val) in over {
            if !base.contains_key(k) {
                return Err(ApiError::unprocessable(format!("unknown config key `{k}`")));
            }
            base.insert(k.clone(), val.clone());
        }
    }
    let cfg: OptimizerConfig = serde_json::from_value(v)
        .map_err(|e| ApiError::unprocessable(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

async fn start_optimization(
    State(st): State<Arc<AppState>>,
    body: Result<Json<OptimizationRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(req) = body?;
    if req.session_ids.is_empty() {
        return Err(ApiError::unprocessable("session_ids is empty"));
    }
    let cfg = merged_config(&st.config.optimizer, req.config.as_ref())?;
    let sessions = req
        .session_ids
        .iter()
        .map(|id| st.session(id))
        .collect::<ApiResult<Vec<_>>>()?;
    let mut pairs = Vec::new();
    for s in &sessions {
        let path = s.dir.join(ANNOTATION_FILE);
        if !path.is_file() {
            return Err(ApiError::unprocessable(format!(
                "session `{}` has no annotation",
                s.info.id
            )));
        }
        let gt = GroundTruthMask::from_class_mask(BoolGrid::load_png(&path)?);
        pairs.push(TrainingPair::new(s.trace.clone(), gt)?);
    }
    let init = init_attribution_tokens(&req.class, &*st.backend)?;
    {
        let mut busy = st.busy.lock().expect("busy set poisoned");
        if let Some(id) = req.session_ids.iter().find(|id| busy.contains(*id)) {
            return Err(ApiError::conflict(
                "job_running",
                format!("session `{id}` already has a running optimization"),
            ));
        }
        busy.extend(req.session_ids.iter().cloned());
    }
    let job = Arc::new(Job {
        id: st.fresh_id("j"),
        class: req.class.clone(),
        session_ids: req.session_ids.clone(),
        events: Mutex::new(Vec::new()),
        status: Mutex::new(JobStatus::Running),
        tick: watch::channel(0).0,
    });
    st.jobs
        .write()
        .expect("job map poisoned")
        .insert(job.id.clone(), job.clone());
    let (st2, job2) = (st.clone(), job.clone());
    tokio::task::spawn_blocking(move || run_job(&st2, &job2, &pairs, &init, &cfg));
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job.id }))))
}

fn run_job(
    st: &AppState,
    job: &Job,
    pairs: &[TrainingPair],
    init: &TokenEmbeddingMatrix,
    cfg: &OptimizerConfig,
) {
    let result = optimize_tokens_with(pairs, init, cfg, |e| {
        job.events.lock().expect("job lock poisoned").push(e);
        job.tick.send_modify(|n| *n += 1);
    })
    .and_then(|res| {
        let meta = TokenFileMeta::from_result(&job.class, st.backend.id(), &res, cfg, pairs.len());
        write_token_file(&st.token_dir(&job.id), &res.best_tokens, &meta)?;
        Ok(res)
    });
    let status = match result {
        Ok(res) => JobStatus::Done {
            token_id: job.id.clone(),
            best_loss: res.best_loss,
            best_epoch: res.best_epoch,
        },
        Err(e) => {
            log::warn!("optimization {} failed: {e}", job.id);
            JobStatus::Failed { error: e.into() }
        }
    };
    *job.status.lock().expect("job lock poisoned") = status;
    let mut busy = st.busy.lock().expect("busy set poisoned");
    for id in &job.session_ids {
        busy.remove(id);
    }
    drop(busy);
    job.tick.send_modify(|n| *n += 1);
}

async fn get_optimization(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<Value>> {
    let job = st.job(&id)?;
    let events = job.events.lock().expect("job lock poisoned").len();
    Ok(Json(json!({
        "job_id": job.id,
        "class": job.class,
        "session_ids": job.session_ids,
        "epochs_done": events,
        "state": job.status(),
    })))
}

struct EventCursor {
    job: Arc<Job>,
    rx: watch::Receiver<u64>,
    next: usize,
    finished: bool,
}

/// `epoch` events `{epoch, loss, lr}` in order, then one `done` or `error`.
fn event_stream(job: Arc<Job>) -> impl Stream<Item = Result<Event, Infallible>> {
    let rx = job.tick.subscribe();
    let cursor = EventCursor {
        job,
        rx,
        next: 0,
        finished: false,
    };
    stream::unfold(cursor, |mut c| async move {
        loop {
            if c.finished {
                return None;
            }
            // Status first: events are pushed before the status changes, so a
            // finished status means the event list below is complete.
            let status = c.job.status();
            let pending = c.job.events.lock().expect("job lock poisoned").get(c.next).copied();
            if let Some(e) = pending {
                c.next += 1;
                let ev = Event::default().event("epoch").data(json!(e).to_string());
                return Some((Ok(ev), c));
            }
            match status {
                JobStatus::Running => {
                    if c.rx.changed().await.is_err() {
                        c.finished = true;
                    }
                }
                JobStatus::Done { .. } => {
                    c.finished = true;
                    let ev = Event::default().event("done").data(json!(status).to_string());
                    return Some((Ok(ev), c));
                }
                JobStatus::Failed { .. } => {
                    c.finished = true;
                    let ev = Event::default().event("error").data(json!(status).to_string());
                    return Some((Ok(ev), c));
                }
            }
        }
    })
}

async fn optimization_events(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    Ok(Sse::new(event_stream(st.job(&id)?)))
}

// ------------------------------------------------------------------ tokens

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenBody {
    #[serde(default)]
    pub id: Option<String>,
    pub meta: TokenFileMeta,
    /// Row-major values, `rows × embed_dim`.
    pub data: Vec<f64>,
}

async fn list_tokens(State(st): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let dir = st.data_dir.join("tokens");
    let mut out = Vec::new();
    if dir.is_dir() {
        let mut ids: Vec<String> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|id| valid_id(id))
            .collect();
        ids.sort();
        for id in ids {
            // Jobs still writing, or stray directories, are skipped.
            if let Ok((_, meta)) = read_token_file(&st.token_dir(&id)) {
                out.push(json!({
                    "id": id,
                    "label": meta.label,
                    "backend_id": meta.backend_id,
                    "best_loss": meta.best_loss,
                    "rows": meta.rows,
                    "embed_dim": meta.embed_dim,
                }));
            }
        }
    }
    Ok(Json(json!({ "tokens": out })))
}

async fn get_token(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<TokenBody>> {
    let dir = st.token_dir(&id);
    if !valid_id(&id) || !dir.is_dir() {
        return Err(ApiError::not_found("token", &id));
    }
    let (tokens, meta) = read_token_file(&dir)?;
    Ok(Json(TokenBody {
        id: Some(id),
        meta,
        data: tokens.data,
    }))
}

async fn create_token(
    State(st): State<Arc<AppState>>,
    body: Result<Json<TokenBody>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(req) = body?;
    let id = req.id.clone().unwrap_or_else(|| st.fresh_id("t"));
    if !valid_id(&id) {
        return Err(ApiError::unprocessable(format!("invalid token id `{id}`")));
    }
    let dir = st.token_dir(&id);
    if dir.exists() {
        return Err(ApiError::conflict("exists", format!("token `{id}` already exists")));
    }
    let tokens = TokenEmbeddingMatrix::new(req.meta.embed_dim, req.data, req.meta.row_labels.clone())?;
    if tokens.embed_dim != st.backend.embed_dim() {
        return Err(ApiError::unprocessable(format!(
            "token width {} differs from the backend's {}",
            tokens.embed_dim,
            st.backend.embed_dim()
        )));
    }
    write_token_file(&dir, &tokens, &req.meta)?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

async fn delete_token(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<StatusCode> {
    let dir = st.token_dir(&id);
    if !valid_id(&id) || !dir.is_dir() {
        return Err(ApiError::not_found("token", &id));
    }
    std::fs::remove_dir_all(dir)?;
    Ok(StatusCode::NO_CONTENT)
}

// ------------------------------------------------------------------- files

async fn get_file(
    State(st): State<Arc<AppState>>,
    UrlPath(rel): UrlPath<String>,
) -> ApiResult<Response> {
    let rel_path = Path::new(&rel);
    if !rel_path.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(ApiError::not_found("file", &rel));
    }
    let path = st.data_dir.join(rel_path);
    if !path.is_file() {
        return Err(ApiError::not_found("file", &rel));
    }
    let mime = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("json") => "application/json",
        _ => "application/octet-stream",
    };
    let bytes = std::fs::read(&path)?;
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}
