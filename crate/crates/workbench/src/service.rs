//! Labelling-triage HTTP service.
//!
//! Each session lives in `<data root>/sessions/<id>.jsonl`, an append-only
//! log of its creation record, threshold changes and decisions. A mutation
//! is acknowledged only after its log line is synced, and the logs are
//! replayed when the service starts.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Cursor, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use pvad::dataset::{
    normalize_minmax, raw_to_celsius, read_manifest_records, read_png16, rotate_quarter_turns, BinaryLabel, Grid,
    ImageId, ManifestRecord, ModuleId, PlantId,
};
use pvad::evaluation::{module_confusion, savings_report, SavingsReport, DEFAULT_SECONDS_PER_MODULE};
use pvad::index::{aggregate_module, build_index, predict_batch, ModuleVerdict, Prediction};
use pvad::store::{decode_embeddings, read_embeddings, read_predictions};
use pvad::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl ToString) -> Self {
        ApiError { status: StatusCode::BAD_REQUEST, message: message.to_string() }
    }

    fn not_found(message: impl ToString) -> Self {
        ApiError { status: StatusCode::NOT_FOUND, message: message.to_string() }
    }

    fn internal(message: impl ToString) -> Self {
        ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, message: message.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    ConfirmedAnomalous,
    ConfirmedNormal,
    Skipped,
}

/// One line of a session log.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum SessionEvent {
    Created {
        session_id: String,
        created_at: u64,
        delta: f64,
        k: usize,
        labelled: bool,
        #[serde(default)]
        manifest: Option<PathBuf>,
        predictions: Vec<Prediction>,
    },
    Threshold {
        delta: f64,
    },
    Decision {
        module_id: ModuleId,
        verdict: Decision,
    },
}

struct SessionModule {
    plant_id: PlantId,
    module_id: ModuleId,
    predictions: Vec<Prediction>,
    score: f64,
    representative: ImageId,
}

impl SessionModule {
    fn verdict(&self, delta: f64) -> ModuleVerdict {
        let rethresholded: Vec<Prediction> = self.predictions.iter().map(|p| p.with_delta(delta)).collect();
        aggregate_module(&rethresholded).expect("a session module has predictions of one module")
    }
}

pub struct Session {
    id: String,
    created_at: u64,
    delta: f64,
    k: usize,
    labelled: bool,
    /// Ordered by module id.
    modules: Vec<SessionModule>,
    decisions: BTreeMap<ModuleId, Decision>,
    log: File,
}

fn check_delta(delta: f64) -> ApiResult<()> {
    if (0.0..=1.0).contains(&delta) {
        Ok(())
    } else {
        Err(ApiError::bad_request(Error::ThresholdOutOfRange(delta)))
    }
}

fn group_modules(predictions: Vec<Prediction>) -> ApiResult<Vec<SessionModule>> {
    let mut groups: BTreeMap<ModuleId, Vec<Prediction>> = BTreeMap::new();
    for p in predictions {
        groups.entry(p.module_id).or_default().push(p);
    }
    groups
        .into_iter()
        .map(|(module_id, predictions)| {
            let plant_id = predictions[0].plant_id;
            if predictions.iter().any(|p| p.plant_id != plant_id) {
                return Err(ApiError::bad_request(format!("module {module_id} appears under more than one plant")));
            }
            let score = predictions.iter().map(|p| p.score).sum::<f64>() / predictions.len() as f64;
            let representative = predictions
                .iter()
                .max_by(|a, b| a.score.total_cmp(&b.score).then(b.image_id.cmp(&a.image_id)))
                .unwrap()
                .image_id;
            Ok(SessionModule { plant_id, module_id, predictions, score, representative })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub module_id: ModuleId,
    pub plant_id: PlantId,
    pub score: f64,
    pub representative_image_id: ImageId,
    pub verdict: BinaryLabel,
    pub decision: Option<Decision>,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub delta: f64,
    pub total_modules: u64,
    pub modules_to_review: u64,
    pub estimated_review_time_s: f64,
    pub baseline_time_s: f64,
    /// Only with ground-truth labels attached.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimated_lost_anomalies: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub total_modules: u64,
    pub flagged: u64,
    pub decided: u64,
    pub confirmed_anomalous: u64,
    pub confirmed_normal: u64,
    pub skipped: u64,
    pub review_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub session_id: String,
    pub created_at: u64,
    pub delta: f64,
    pub k: usize,
    pub projection: Projection,
    /// Only with ground-truth labels attached.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub savings: Option<SavingsReport>,
    pub progress: Progress,
}

impl Session {
    fn verdicts(&self) -> Vec<ModuleVerdict> {
        self.modules.iter().map(|m| m.verdict(self.delta)).collect()
    }

    fn savings(&self) -> Option<SavingsReport> {
        if !self.labelled {
            return None;
        }
        let m = module_confusion(&self.verdicts());
        let anomalous = m.tp + m.fn_;
        savings_report(
            m.total(),
            anomalous,
            m.tnr().unwrap_or(1.0),
            m.recall().unwrap_or(1.0),
            DEFAULT_SECONDS_PER_MODULE,
        )
        .ok()
    }

    pub fn projection(&self) -> Projection {
        let total = self.modules.len() as u64;
        let flagged = self.verdicts().iter().filter(|v| v.verdict.is_anomalous()).count() as u64;
        let savings = self.savings();
        Projection {
            delta: self.delta,
            total_modules: total,
            modules_to_review: savings.as_ref().map_or(flagged, |s| s.modules_to_review),
            estimated_review_time_s: flagged as f64 * DEFAULT_SECONDS_PER_MODULE,
            baseline_time_s: total as f64 * DEFAULT_SECONDS_PER_MODULE,
            estimated_lost_anomalies: savings.map(|s| s.lost_anomalies),
        }
    }

    /// Undecided first, then score descending, then module id ascending.
    pub fn queue(&self) -> Vec<QueueItem> {
        let mut items: Vec<QueueItem> = self
            .modules
            .iter()
            .map(|m| QueueItem {
                module_id: m.module_id,
                plant_id: m.plant_id,
                score: m.score,
                representative_image_id: m.representative,
                verdict: m.verdict(self.delta).verdict,
                decision: self.decisions.get(&m.module_id).copied(),
                images: m.predictions.len(),
            })
            .collect();
        items.sort_by(|a, b| {
            b.score.total_cmp(&a.score).then(a.plant_id.cmp(&b.plant_id)).then(a.module_id.cmp(&b.module_id))
        });
        items
    }

    pub fn report(&self) -> Report {
        let count = |d: Decision| self.decisions.values().filter(|&&x| x == d).count() as u64;
        let decided = self.decisions.len() as u64;
        Report {
            session_id: self.id.clone(),
            created_at: self.created_at,
            delta: self.delta,
            k: self.k,
            projection: self.projection(),
            savings: self.savings(),
            progress: Progress {
                total_modules: self.modules.len() as u64,
                flagged: self.verdicts().iter().filter(|v| v.verdict.is_anomalous()).count() as u64,
                decided,
                confirmed_anomalous: count(Decision::ConfirmedAnomalous),
                confirmed_normal: count(Decision::ConfirmedNormal),
                skipped: count(Decision::Skipped),
                review_time_s: decided as f64 * DEFAULT_SECONDS_PER_MODULE,
            },
        }
    }

    fn append(&mut self, event: &SessionEvent) -> ApiResult<()> {
        let mut line = serde_json::to_vec(event).map_err(ApiError::internal)?;
        line.push(b'\n');
        self.log.write_all(&line).and_then(|_| self.log.sync_data()).map_err(ApiError::internal)
    }

    fn apply(&mut self, event: SessionEvent) -> ApiResult<()> {
        match event {
            SessionEvent::Threshold { delta } => {
                check_delta(delta)?;
                self.delta = delta;
            }
            SessionEvent::Decision { module_id, verdict } => {
                if self.modules.binary_search_by_key(&module_id, |m| m.module_id).is_err() {
                    return Err(ApiError::not_found(format!("module {module_id} is not part of session {}", self.id)));
                }
                self.decisions.insert(module_id, verdict);
            }
            SessionEvent::Created { .. } => return Err(ApiError::internal("duplicate creation record")),
        }
        Ok(())
    }

    /// Validates, persists, then applies.
    fn commit(&mut self, event: SessionEvent) -> ApiResult<()> {
        match &event {
            SessionEvent::Threshold { delta } => check_delta(*delta)?,
            SessionEvent::Decision { module_id, .. } => {
                if self.modules.binary_search_by_key(module_id, |m| m.module_id).is_err() {
                    return Err(ApiError::not_found(format!("module {module_id} is not part of session {}", self.id)));
                }
            }
            SessionEvent::Created { .. } => return Err(ApiError::internal("duplicate creation record")),
        }
        self.append(&event)?;
        self.apply(event)
    }
}

pub struct AppState {
    data_root: PathBuf,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    images: RwLock<HashMap<ImageId, (ManifestRecord, PathBuf)>>,
}

impl AppState {
    /// Opens the data root, registering `manifest.jsonl` if present and
    /// replaying every session log.
    pub fn open(data_root: impl Into<PathBuf>) -> pvad::Result<Self> {
        let data_root = data_root.into();
        let sessions_dir = data_root.join("sessions");
        std::fs::create_dir_all(&sessions_dir).map_err(|e| Error::io(&sessions_dir, e))?;
        let state = AppState { data_root, sessions: Default::default(), images: Default::default() };
        let default_manifest = state.data_root.join("manifest.jsonl");
        if default_manifest.exists() {
            state.register_manifest(&default_manifest)?;
        }
        let mut logs: Vec<PathBuf> = std::fs::read_dir(&sessions_dir)
            .map_err(|e| Error::io(&sessions_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        logs.sort();
        for path in logs {
            let session = state.replay(&path)?;
            state.sessions.write().unwrap().insert(session.id.clone(), Arc::new(Mutex::new(session)));
        }
        Ok(state)
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.data_root.join(path)
        }
    }

    fn register_manifest(&self, path: &Path) -> pvad::Result<Vec<ManifestRecord>> {
        let records = read_manifest_records(path)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut images = self.images.write().unwrap();
        for r in &records {
            images.insert(r.image_id, (r.clone(), r.resolve(&base)));
        }
        Ok(records)
    }

    fn replay(&self, path: &Path) -> pvad::Result<Session> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>().map_err(|e| Error::io(path, e))?;
        let mut session: Option<Session> = None;
        let count = lines.len();
        for (n, line) in lines.into_iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let event: SessionEvent = match serde_json::from_str(&line) {
                Ok(e) => e,
                // a torn final line was never acknowledged
                Err(_) if n + 1 == count => break,
                Err(e) => return Err(Error::format("session log", path, format!("line {}: {e}", n + 1))),
            };
            match (event, session.as_mut()) {
                (SessionEvent::Created { session_id, created_at, delta, k, labelled, manifest, predictions }, None) => {
                    if let Some(m) = manifest {
                        // previews are best effort if the manifest has moved
                        let _ = self.register_manifest(&m);
                    }
                    let modules = group_modules(predictions).map_err(|e| Error::format("session log", path, e.message))?;
                    let log = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
                    session = Some(Session {
                        id: session_id,
                        created_at,
                        delta,
                        k,
                        labelled,
                        modules,
                        decisions: BTreeMap::new(),
                        log,
                    });
                }
                (event, Some(s)) => s.apply(event).map_err(|e| Error::format("session log", path, e.message))?,
                (_, None) => return Err(Error::format("session log", path, "missing creation record")),
            }
        }
        session.ok_or_else(|| Error::format("session log", path, "empty log"))
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.sessions.read().unwrap().get(id).cloned().ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))
    }

    pub fn create_session(&self, request: CreateSession) -> ApiResult<String> {
        check_delta(request.delta)?;
        let source = read_embeddings(&self.resolve(&request.source_store)).map_err(ApiError::bad_request)?;
        let index = build_index(&source).map_err(ApiError::bad_request)?;
        let predictions_path = self.resolve(&request.predictions);
        let bytes = std::fs::read(&predictions_path).map_err(|e| ApiError::bad_request(Error::io(&predictions_path, e)))?;
        let mut predictions = if bytes.starts_with(b"IREMB") {
            let targets = decode_embeddings(&bytes, &predictions_path).map_err(ApiError::bad_request)?;
            predict_batch(&index, &targets, request.k, request.delta).map_err(ApiError::bad_request)?
        } else {
            read_predictions(&predictions_path).map_err(ApiError::bad_request)?
        };
        if predictions.is_empty() {
            return Err(ApiError::bad_request("no target predictions"));
        }
        let manifest = request.manifest.as_ref().map(|m| self.resolve(m));
        if let Some(m) = &manifest {
            self.register_manifest(m).map_err(ApiError::bad_request)?;
        }
        let labelled = request.labels.is_some();
        match &request.labels {
            Some(path) => {
                let path = self.resolve(path);
                let records = read_manifest_records(&path).map_err(ApiError::bad_request)?;
                let labels: HashMap<ImageId, &ManifestRecord> = records.iter().map(|r| (r.image_id, r)).collect();
                for p in &mut predictions {
                    let r = labels
                        .get(&p.image_id)
                        .filter(|r| r.binary_label.is_some())
                        .ok_or_else(|| ApiError::bad_request(format!("no label for image {}", p.image_id)))?;
                    p.binary_label = r.binary_label;
                    p.fault_class = r.fault_class;
                }
            }
            None => {
                for p in &mut predictions {
                    p.binary_label = None;
                    p.fault_class = None;
                }
            }
        }
        let predictions: Vec<Prediction> = predictions.into_iter().map(|p| p.with_delta(request.delta)).collect();
        let modules = group_modules(predictions.clone())?;

        let id = uuid::Uuid::new_v4().simple().to_string();
        let created_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let path = self.data_root.join("sessions").join(format!("{id}.jsonl"));
        let log = OpenOptions::new().create_new(true).append(true).open(&path).map_err(ApiError::internal)?;
        let mut session = Session {
            id: id.clone(),
            created_at,
            delta: request.delta,
            k: request.k,
            labelled,
            modules,
            decisions: BTreeMap::new(),
            log,
        };
        session.append(&SessionEvent::Created {
            session_id: id.clone(),
            created_at,
            delta: request.delta,
            k: request.k,
            labelled,
            manifest,
            predictions,
        })?;
        self.sessions.write().unwrap().insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(id)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateSession {
    /// Labelled source embedding store.
    pub source_store: PathBuf,
    /// Prediction lines, or a target embedding store to score against the source.
    pub predictions: PathBuf,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Manifest with ground-truth labels for the target images.
    #[serde(default)]
    pub labels: Option<PathBuf>,
    /// Manifest of the target images, for previews.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

fn default_delta() -> f64 {
    pvad::index::DEFAULT_DELTA
}

fn default_k() -> usize {
    pvad::index::DEFAULT_K
}

#[derive(Debug, Deserialize)]
struct QueueParams {
    cursor: Option<String>,
    limit: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueuePage {
    pub items: Vec<QueueItem>,
    pub next_cursor: Option<String>,
    pub total: usize,
}

#[derive(Debug, Deserialize)]
struct ThresholdBody {
    delta: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DecisionBody {
    pub module_id: ModuleId,
    pub verdict: Decision,
}

const DEFAULT_PAGE: usize = 50;

async fn create(State(state): State<Arc<AppState>>, Json(request): Json<CreateSession>) -> ApiResult<impl IntoResponse> {
    let id = tokio::task::spawn_blocking(move || state.create_session(request)).await.map_err(ApiError::internal)??;
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "session_id": id }))))
}

async fn queue(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(params): Query<QueueParams>,
) -> ApiResult<Json<QueuePage>> {
    let session = state.session(&id)?;
    let session = session.lock().unwrap();
    let start = match params.cursor.as_deref() {
        None | Some("") => 0,
        Some(c) => c.parse::<usize>().map_err(|_| ApiError::bad_request(format!("bad cursor {c:?}")))?,
    };
    let limit = params.limit.unwrap_or(DEFAULT_PAGE);
    let all = session.queue();
    let total = all.len();
    let items: Vec<QueueItem> = all.into_iter().skip(start).take(limit).collect();
    let end = start + items.len();
    let next_cursor = (limit > 0 && end < total).then(|| end.to_string());
    Ok(Json(QueuePage { items, next_cursor, total }))
}

async fn threshold(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<ThresholdBody>,
) -> ApiResult<Json<Projection>> {
    let session = state.session(&id)?;
    let mut session = session.lock().unwrap();
    session.commit(SessionEvent::Threshold { delta: body.delta })?;
    Ok(Json(session.projection()))
}

async fn decide(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<DecisionBody>,
) -> ApiResult<Json<serde_json::Value>> {
    let session = state.session(&id)?;
    let mut session = session.lock().unwrap();
    session.commit(SessionEvent::Decision { module_id: body.module_id, verdict: body.verdict })?;
    Ok(Json(serde_json::json!({ "ok": true, "decided": session.decisions.len() })))
}

async fn report(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Report>> {
    let session = state.session(&id)?;
    let report = session.lock().unwrap().report();
    Ok(Json(report))
}

/// Min-max normalized 8-bit rendering of an upright frame.
pub fn preview_pixels(celsius: &Grid<f64>) -> Grid<u8> {
    normalize_minmax(celsius)
}

pub fn encode_png8(grid: &Grid<u8>) -> pvad::Result<Vec<u8>> {
    let image = image::GrayImage::from_raw(grid.width as u32, grid.height as u32, grid.data.clone())
        .ok_or(Error::ShapeMismatch("preview buffer".into()))?;
    let mut out = Cursor::new(Vec::new());
    image
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::InvalidConfig(format!("PNG encoding failed: {e}")))?;
    Ok(out.into_inner())
}

async fn preview(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<u64>) -> ApiResult<Response> {
    let (record, path) = state
        .images
        .read()
        .unwrap()
        .get(&ImageId(id))
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown image {id}")))?;
    let frame = read_png16(&path).map_err(ApiError::not_found)?;
    let raw = Grid::new(frame.height, frame.width, frame.data);
    let upright = rotate_quarter_turns(&raw, record.orientation);
    let pixels = preview_pixels(&raw_to_celsius(&upright, record.gain, record.offset));
    let png = encode_png8(&pixels).map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create))
        .route("/v1/sessions/{id}/queue", get(queue))
        .route("/v1/sessions/{id}/threshold", put(threshold))
        .route("/v1/sessions/{id}/decisions", post(decide))
        .route("/v1/sessions/{id}/report", get(report))
        .route("/v1/images/{id}/preview", get(preview))
        .with_state(state)
}

pub fn serve(addr: SocketAddr, data_root: PathBuf) -> pvad::Result<()> {
    let state = Arc::new(AppState::open(data_root)?);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::io(addr.to_string(), e))?;
        println!("listening on {addr}");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::io(addr.to_string(), e))
    })
}
