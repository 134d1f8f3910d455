//! Router, shared state and endpoint handlers.

use std::collections::{HashMap, VecDeque};
use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{HeaderMap, HeaderValue};
use axum::response::Response;
use axum::routing::{delete, get, post};
use axum::Router;
use netcomb_core::channel::export::ReShape;
use netcomb_core::combined::RunMetadata;
use netcomb_core::combined::{
    run, RunControl, SampleIndex, SimError, SimMode, SimOutput, SimRequest, SimResult,
    GENERATOR_VERSION,
};
use netcomb_core::csi::{
    generate_or_fetch, system_verify_restored, CsiDataset, CsiDatasetParams, CsiSample,
    VerificationReport,
};
use netcomb_core::rl::{Action, AntennaEnv, EnvState, StepResult};
use netcomb_core::store::{canonical_key, DatasetKey, DatasetStore, NewDataset};
use netcomb_core::traffic::{
    forecast_metrics, forecast_metrics_aligned, topk_report, CellCountSeries, ForecastMetrics,
    TopKCriterion, TopKReport,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::Mutex as AsyncMutex;

use crate::api::{
    parse_body, request_id, respond, respond_bytes, ApiError, CHECKSUM_HEADER, RUN_ID_HEADER,
};

pub const LINK_CHANNEL_KIND: &str = "link_channel";
const FINISHED_RUNS_KEPT: usize = 1024;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_root: PathBuf,
    /// Live environments per server.
    pub max_envs: usize,
    /// Server-side caps, applied on top of whatever the scenario asks for.
    pub max_users: usize,
    pub max_payload_bytes: u64,
    pub max_body_bytes: usize,
}

impl ServiceConfig {
    pub fn new(data_root: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            data_root: data_root.into(),
            max_envs: 64,
            max_users: 20_000,
            max_payload_bytes: 256 * 1024 * 1024,
            max_body_bytes: 256 * 1024 * 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Running,
    Done,
    Failed,
    Cancelled,
}

struct RunEntry {
    mode: SimMode,
    control: RunControl,
    state: Mutex<RunState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub run_id: String,
    pub mode: SimMode,
    pub state: RunState,
    pub ticks_done: u64,
    pub total_ticks: u64,
}

#[derive(Default)]
struct Runs {
    entries: HashMap<String, Arc<RunEntry>>,
    finished: VecDeque<String>,
}

pub struct AppState {
    config: ServiceConfig,
    store: DatasetStore,
    envs: Mutex<HashMap<String, Arc<AsyncMutex<AntennaEnv>>>>,
    runs: Mutex<Runs>,
    key_locks: Mutex<HashMap<String, Arc<AsyncMutex<()>>>>,
}

type Shared = Arc<AppState>;

impl AppState {
    pub fn new(config: ServiceConfig) -> anyhow::Result<Shared> {
        let store = DatasetStore::open(&config.data_root)?;
        Ok(Arc::new(AppState {
            config,
            store,
            envs: Mutex::default(),
            runs: Mutex::default(),
            key_locks: Mutex::default(),
        }))
    }

    pub fn store(&self) -> &DatasetStore {
        &self.store
    }

    fn key_lock(&self, key: &DatasetKey) -> Arc<AsyncMutex<()>> {
        let mut locks = self.key_locks.lock().unwrap();
        // drop locks nobody is holding so the map stays small
        locks.retain(|_, l| Arc::strong_count(l) > 1);
        locks.entry(key.as_str().to_string()).or_default().clone()
    }

    fn env(&self, id: &str) -> Result<Arc<AsyncMutex<AntennaEnv>>, ApiError> {
        self.envs
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown environment {id}")))
    }

    fn start_run(&self, run_id: &str, mode: SimMode) -> Result<Arc<RunEntry>, ApiError> {
        let mut runs = self.runs.lock().unwrap();
        if runs.entries.contains_key(run_id) {
            return Err(ApiError::conflict(format!("run id {run_id} already used")));
        }
        let entry = Arc::new(RunEntry {
            mode,
            control: RunControl::default(),
            state: Mutex::new(RunState::Running),
        });
        runs.entries.insert(run_id.to_string(), entry.clone());
        Ok(entry)
    }

    fn finish_run(&self, run_id: &str, entry: &RunEntry, state: RunState) {
        *entry.state.lock().unwrap() = state;
        let mut runs = self.runs.lock().unwrap();
        runs.finished.push_back(run_id.to_string());
        while runs.finished.len() > FINISHED_RUNS_KEPT {
            if let Some(old) = runs.finished.pop_front() {
                runs.entries.remove(&old);
            }
        }
    }

    /// Server caps layered over the scenario's own limits.
    fn check_guards(&self, req: &SimRequest) -> Result<(), ApiError> {
        let mut capped = req.clone();
        let limits = &mut capped.scenario.limits;
        limits.max_users = limits.max_users.min(self.config.max_users);
        limits.max_payload_bytes = limits.max_payload_bytes.min(self.config.max_payload_bytes);
        capped.validate()?;
        req.validate()?;
        Ok(())
    }
}

pub fn router(state: Shared) -> Router {
    let limit = state.config.max_body_bytes;
    Router::new()
        .route("/v1/simulate", post(simulate))
        .route("/v1/env", post(env_create))
        .route("/v1/env/{id}/reset", post(env_reset))
        .route("/v1/env/{id}/step", post(env_step))
        .route("/v1/env/{id}", delete(env_delete))
        .route("/v1/csi/dataset", post(csi_dataset))
        .route("/v1/csi/verify", post(csi_verify))
        .route("/v1/traffic/evaluate", post(traffic_evaluate))
        .route("/v1/datasets/{key}", get(dataset_download))
        .route("/v1/datasets/{key}/meta", get(dataset_meta))
        .route("/v1/status/{run}", get(run_status).delete(run_cancel))
        .fallback(unknown_route)
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn serve(
    listener: TcpListener,
    state: Shared,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Binds `addr` and serves in the background; handy for tests and demos.
pub async fn spawn(
    config: ServiceConfig,
    addr: SocketAddr,
) -> anyhow::Result<(
    SocketAddr,
    tokio::sync::oneshot::Sender<()>,
    tokio::task::JoinHandle<()>,
)> {
    let state = AppState::new(config)?;
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let handle = tokio::spawn(async move {
        let _ = serve(listener, state, async {
            let _ = rx.await;
        })
        .await;
    });
    Ok((local, tx, handle))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> T + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))
}

async fn unknown_route(headers: HeaderMap) -> Response {
    respond::<()>(
        &request_id(&headers),
        Err(ApiError::not_found("no such endpoint")),
    )
}

// ---- simulate ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub key: String,
    pub download: String,
    pub checksum: String,
    pub shape: ReShape,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateResponse {
    pub run_id: String,
    pub metadata: RunMetadata,
    /// Per-tick series for protocol-stack and coverage runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<SimOutput>,
    /// Link-channel runs land in the store instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetRef>,
}

fn download_path(key: &DatasetKey) -> String {
    format!("/v1/datasets/{key}")
}

/// Cancels the run if the client goes away before it finishes.
struct CancelOnDrop(Arc<RunEntry>, bool);

impl Drop for CancelOnDrop {
    fn drop(&mut self) {
        if !self.1 {
            self.0.control.cancel();
        }
    }
}

pub fn link_channel_key(req: &SimRequest) -> Result<DatasetKey, ApiError> {
    canonical_key(&link_channel_document(req)).map_err(ApiError::from)
}

fn link_channel_document(req: &SimRequest) -> Value {
    json!({ "kind": LINK_CHANNEL_KIND, "request": req })
}

async fn simulate(State(app): State<Shared>, headers: HeaderMap, body: Bytes) -> Response {
    let rid = request_id(&headers);
    let run_id = headers
        .get(RUN_ID_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    respond(&rid, simulate_inner(app, run_id, &body).await)
}

async fn simulate_inner(
    app: Shared,
    run_id: Option<String>,
    body: &[u8],
) -> Result<SimulateResponse, ApiError> {
    let req: SimRequest = parse_body(body)?;
    app.check_guards(&req)?;
    let run_id = match run_id {
        Some(id) if valid_run_id(&id) => id,
        Some(_) => {
            return Err(ApiError::invalid(
                RUN_ID_HEADER,
                "1-64 characters of [A-Za-z0-9_-]",
            ))
        }
        None => uuid::Uuid::new_v4().to_string(),
    };
    let entry = app.start_run(&run_id, req.mode)?;
    let mut guard = CancelOnDrop(entry.clone(), false);
    let result = if req.mode == SimMode::LinkChannel {
        simulate_link_channel(&app, &entry, &run_id, req).await
    } else {
        let e = entry.clone();
        match blocking(move || run(&req, &e.control)).await {
            Ok(Ok(result)) => Ok(SimulateResponse {
                run_id: run_id.clone(),
                metadata: result.metadata,
                output: Some(result.output),
                dataset: None,
            }),
            Ok(Err(e)) => Err(e.into()),
            Err(e) => Err(e),
        }
    };
    guard.1 = true;
    let state = match &result {
        Ok(_) => RunState::Done,
        Err(e) if e.body.code == "cancelled" => RunState::Cancelled,
        Err(_) => RunState::Failed,
    };
    app.finish_run(&run_id, &entry, state);
    result
}

fn valid_run_id(id: &str) -> bool {
    (1..=64).contains(&id.len())
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

async fn simulate_link_channel(
    app: &Shared,
    entry: &Arc<RunEntry>,
    run_id: &str,
    req: SimRequest,
) -> Result<SimulateResponse, ApiError> {
    let key = link_channel_key(&req)?;
    let lock = app.key_lock(&key);
    let _held = lock.lock().await;
    if let Ok(meta) = app.store.meta(&key) {
        let metadata: RunMetadata = serde_json::from_value(meta.extra["metadata"].clone())
            .map_err(|e| ApiError::internal(format!("stored metadata: {e}")))?;
        let shape: ReShape = serde_json::from_value(meta.extra["shape"].clone())
            .map_err(|e| ApiError::internal(format!("stored shape: {e}")))?;
        return Ok(SimulateResponse {
            run_id: run_id.to_string(),
            metadata,
            output: None,
            dataset: Some(DatasetRef {
                download: download_path(&key),
                key: key.to_string(),
                checksum: meta.checksum,
                shape,
                cache_hit: true,
            }),
        });
    }
    let e = entry.clone();
    let store = app.store.clone();
    let k = key.clone();
    let stored = blocking(
        move || -> Result<(RunMetadata, ReShape, String), ApiError> {
            let SimResult { metadata, output } = run(&req, &e.control)?;
            let SimOutput::LinkChannel(ds) = output else {
                return Err(ApiError::internal(
                    "link-channel run returned another output",
                ));
            };
            let receipt = store.put(
                &k,
                NewDataset {
                    kind: LINK_CHANNEL_KIND.into(),
                    params: link_channel_document(&req),
                    generator_version: GENERATOR_VERSION.into(),
                    extra: json!({ "metadata": metadata, "shape": ds.shape, "index": ds.samples }),
                },
                &ds.payload,
            )?;
            Ok((metadata, ds.shape, receipt.checksum))
        },
    )
    .await??;
    let (metadata, shape, checksum) = stored;
    Ok(SimulateResponse {
        run_id: run_id.to_string(),
        metadata,
        output: None,
        dataset: Some(DatasetRef {
            download: download_path(&key),
            key: key.to_string(),
            checksum,
            shape,
            cache_hit: false,
        }),
    })
}

async fn run_status(
    State(app): State<Shared>,
    headers: HeaderMap,
    Path(run): Path<String>,
) -> Response {
    respond(&request_id(&headers), status_of(&app, &run))
}

async fn run_cancel(
    State(app): State<Shared>,
    headers: HeaderMap,
    Path(run): Path<String>,
) -> Response {
    let entry = app.runs.lock().unwrap().entries.get(&run).cloned();
    if let Some(e) = entry {
        if *e.state.lock().unwrap() == RunState::Running {
            e.control.cancel();
        }
    }
    respond(&request_id(&headers), status_of(&app, &run))
}

fn status_of(app: &AppState, run: &str) -> Result<RunStatus, ApiError> {
    let entry = app
        .runs
        .lock()
        .unwrap()
        .entries
        .get(run)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown run {run}")))?;
    let (ticks_done, total_ticks) = entry.control.progress();
    let state = *entry.state.lock().unwrap();
    Ok(RunStatus {
        run_id: run.to_string(),
        mode: entry.mode,
        state,
        ticks_done,
        total_ticks,
    })
}

// ---- environments ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvCreated {
    pub env_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetBody {
    pub episode_len: u64,
    pub seed: u64,
}

async fn env_create(State(app): State<Shared>, headers: HeaderMap, body: Bytes) -> Response {
    respond(&request_id(&headers), env_create_inner(&app, &body))
}

fn env_create_inner(app: &AppState, body: &[u8]) -> Result<EnvCreated, ApiError> {
    let req: SimRequest = parse_body(body)?;
    if req.mode != SimMode::ProtocolStack {
        return Err(ApiError::invalid(
            "mode",
            "environments run the protocol-stack pipeline",
        ));
    }
    app.check_guards(&req)?;
    let env = AntennaEnv::new(req)?;
    let mut envs = app.envs.lock().unwrap();
    if envs.len() >= app.config.max_envs {
        return Err(ApiError::guard(
            "environments",
            envs.len() as u64 + 1,
            app.config.max_envs as u64,
        ));
    }
    let env_id = uuid::Uuid::new_v4().to_string();
    envs.insert(env_id.clone(), Arc::new(AsyncMutex::new(env)));
    Ok(EnvCreated { env_id })
}

fn busy(id: &str) -> ApiError {
    ApiError::conflict(format!("environment {id} is busy with another request"))
}

async fn env_reset(
    State(app): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> Response {
    let result = async {
        let env = app.env(&id)?;
        let b: ResetBody = parse_body(&body)?;
        let mut guard = env.try_lock_owned().map_err(|_| busy(&id))?;
        blocking(move || guard.reset(b.episode_len, b.seed))
            .await?
            .map_err(ApiError::from)
    }
    .await;
    respond::<EnvState>(&request_id(&headers), result)
}

async fn env_step(
    State(app): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> Response {
    let result = async {
        let env = app.env(&id)?;
        let action: Action = parse_body(&body)?;
        let mut guard = env.try_lock_owned().map_err(|_| busy(&id))?;
        blocking(move || guard.step(&action))
            .await?
            .map_err(ApiError::from)
    }
    .await;
    respond::<StepResult>(&request_id(&headers), result)
}

async fn env_delete(
    State(app): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Response {
    let removed = app.envs.lock().unwrap().remove(&id);
    let result = removed
        .map(|_| json!({ "deleted": id }))
        .ok_or_else(|| ApiError::not_found(format!("unknown environment {id}")));
    respond(&request_id(&headers), result)
}

// ---- csi ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiDatasetResponse {
    pub key: String,
    pub cache_hit: bool,
    pub checksum: String,
    pub download: String,
    pub shape: ReShape,
    pub index: Vec<SampleIndex>,
    pub samples: Vec<CsiSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyBody {
    pub params: CsiDatasetParams,
    pub restored: Vec<CsiSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyResponse {
    pub key: String,
    pub report: VerificationReport,
}

async fn fetch_csi(app: &Shared, params: CsiDatasetParams) -> Result<CsiDataset, ApiError> {
    let mut sim = params.scenario.limits.clone();
    sim.max_users = sim.max_users.min(app.config.max_users);
    if params.n_users > sim.max_users {
        return Err(SimError::ResourceGuard {
            what: "users".into(),
            requested: params.n_users as u64,
            limit: sim.max_users as u64,
        }
        .into());
    }
    let key = params.key()?;
    let lock = app.key_lock(&key);
    let _held = lock.lock().await;
    let store = app.store.clone();
    Ok(blocking(move || generate_or_fetch(&params, &store)).await??)
}

async fn csi_dataset(State(app): State<Shared>, headers: HeaderMap, body: Bytes) -> Response {
    let result = async {
        let params: CsiDatasetParams = parse_body(&body)?;
        let ds = fetch_csi(&app, params).await?;
        Ok(CsiDatasetResponse {
            download: download_path(&ds.key),
            key: ds.key.to_string(),
            cache_hit: ds.cache_hit,
            checksum: ds.checksum,
            shape: ds.shape,
            index: ds.index,
            samples: ds.samples,
        })
    }
    .await;
    respond(&request_id(&headers), result)
}

async fn csi_verify(State(app): State<Shared>, headers: HeaderMap, body: Bytes) -> Response {
    let result = async {
        let b: VerifyBody = parse_body(&body)?;
        let ds = fetch_csi(&app, b.params).await?;
        let key = ds.key.to_string();
        let restored = b.restored;
        let report = blocking(move || system_verify_restored(&ds, &restored)).await??;
        Ok(VerifyResponse { key, report })
    }
    .await;
    respond(&request_id(&headers), result)
}

// ---- traffic ----

/// A series either as the text file format or as structured JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeriesInput {
    Text(String),
    Series(CellCountSeries),
}

impl SeriesInput {
    fn into_series(self, field: &str) -> Result<CellCountSeries, ApiError> {
        match self {
            SeriesInput::Series(s) => Ok(s),
            SeriesInput::Text(t) => {
                CellCountSeries::from_text(&t).map_err(|e| ApiError::from(e).field(field))
            }
        }
    }
}

fn default_k() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateBody {
    pub pred: SeriesInput,
    pub truth: SeriesInput,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub criterion: TopKCriterion,
    /// Match bins by index and cells by the truth's set, for series of
    /// different events.
    #[serde(default)]
    pub aligned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateResponse {
    pub metrics: ForecastMetrics,
    pub topk: TopKReport,
}

pub fn evaluate(b: EvaluateBody) -> Result<EvaluateResponse, ApiError> {
    let pred = b.pred.into_series("pred")?;
    let truth = b.truth.into_series("truth")?;
    let metrics = if b.aligned {
        forecast_metrics_aligned(&pred, &truth)?
    } else {
        forecast_metrics(&pred, &truth)?
    };
    let topk = topk_report(&pred, &truth, b.k, b.criterion)?;
    Ok(EvaluateResponse { metrics, topk })
}

async fn traffic_evaluate(headers: HeaderMap, body: Bytes) -> Response {
    respond(
        &request_id(&headers),
        parse_body::<EvaluateBody>(&body).and_then(evaluate),
    )
}

// ---- datasets ----

async fn dataset_download(
    State(app): State<Shared>,
    headers: HeaderMap,
    Path(key): Path<String>,
) -> Response {
    let result = async {
        let key = DatasetKey::parse(&key)?;
        let store = app.store.clone();
        let stored = blocking(move || store.get(&key)).await??;
        let mut h = HeaderMap::new();
        h.insert(
            CHECKSUM_HEADER,
            HeaderValue::from_str(&stored.meta.checksum)
                .map_err(|e| ApiError::internal(e.to_string()))?,
        );
        Ok((stored.payload, h))
    }
    .await;
    respond_bytes(&request_id(&headers), result)
}

async fn dataset_meta(
    State(app): State<Shared>,
    headers: HeaderMap,
    Path(key): Path<String>,
) -> Response {
    let result = DatasetKey::parse(&key)
        .and_then(|k| app.store.meta(&k))
        .map_err(ApiError::from);
    respond(&request_id(&headers), result)
}
