//! HTTP labelling service: live annotators act as the oracle of an adaptive
//! sampling session.
//!
//! Sessions are serialized through a per-session writer lock and persisted
//! as JSON documents under `<data_dir>/sessions/` after every mutation;
//! reads serve a snapshot refreshed by each write. Pools are registered
//! through the API or picked up from `<data_dir>/pools/` at startup.
//!
//! Pending queries are leased to an annotator. A stage holds at most
//! `stage_size` draws, counting leased ones, so the stage closes (and the
//! model refits) exactly when its last outstanding label arrives.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use aiseval_core::estimate::EstimateReport;
use aiseval_core::measures::{MeasureSpec, PredictionSource};
use aiseval_core::pool::TestPool;
use aiseval_core::sampler::{AisSampler, Draw, EvalContext, OracleMode, SamplerConfig, SamplerState};
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::experiment::{build_partition, PartitionConfig};
use crate::formats::{write_history, HistoryMeta, REPORT_SCHEMA};
use crate::ingest::load_pool;

pub const SESSION_SCHEMA: &str = "aiseval.session.v1";

const DEFAULT_ANNOTATOR: &str = "default";

// ---------------------------------------------------------------- errors

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn not_found(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    fn conflict(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }

    fn invalid(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({}): {}", self.code, self.status.as_u16(), self.message)
    }
}

impl std::error::Error for ApiError {}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code.into(),
                message: self.message,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<aiseval_core::Error> for ApiError {
    fn from(e: aiseval_core::Error) -> Self {
        use aiseval_core::Error as E;
        match e {
            E::LabelOutOfRange { .. } => Self::invalid("label_out_of_range", e.to_string()),
            E::UnsupportedMeasure { .. }
            | E::InvalidMeasure(_)
            | E::InvalidGrid { .. }
            | E::TreeShape { .. }
            | E::DegenerateStratification { .. }
            | E::DegenerateMeasure
            | E::Config(_) => Self::invalid("invalid_config", e.to_string()),
            E::State(_) => Self::conflict("invalid_state", e.to_string()),
            _ => Self::internal(e.to_string()),
        }
    }
}

impl From<crate::Error> for ApiError {
    fn from(e: crate::Error) -> Self {
        match e {
            crate::Error::Core(core) => core.into(),
            crate::Error::Config(_) => Self::invalid("invalid_config", e.to_string()),
            _ => Self::internal(e.to_string()),
        }
    }
}

pub type ApiResult<T> = Result<T, ApiError>;

// ------------------------------------------------------------- wire types

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Suspended,
    Complete,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub sampler: SamplerConfig,
    pub partition: PartitionConfig,
    /// Stop issuing queries once this many labels are consumed.
    pub budget: Option<usize>,
    /// Sampling seed; drawn at random when absent.
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateSession {
    pub pool_id: String,
    pub measure: MeasureSpec,
    #[serde(default)]
    pub config: SessionConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub pool_id: String,
    pub measure: MeasureSpec,
    pub status: SessionStatus,
    pub stage: usize,
    pub stage_size: usize,
    pub draws_in_stage: usize,
    pub pending: usize,
    pub n_records: usize,
    pub budget_consumed: usize,
    pub budget: Option<usize>,
    pub n_items: usize,
    pub n_classes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPayload {
    pub query_id: String,
    pub item_id: String,
    pub display: String,
    pub stage: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryBatch {
    pub session_id: String,
    pub stage: usize,
    pub status: SessionStatus,
    pub queries: Vec<QueryPayload>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueryParams {
    #[serde(default)]
    pub count: Option<usize>,
    #[serde(default)]
    pub annotator: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelSubmission {
    pub query_id: String,
    pub label: usize,
    #[serde(default)]
    pub annotator: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelAck {
    pub query_id: String,
    pub label: usize,
    /// A repeat of an earlier identical submission.
    pub duplicate: bool,
    pub stage_advanced: bool,
    pub stage: usize,
    pub budget_consumed: usize,
    pub status: SessionStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvanceAck {
    pub stage_advanced: bool,
    /// Unanswered queries discarded with the truncated stage.
    pub dropped: usize,
    pub stage: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateView {
    pub schema: String,
    pub session_id: String,
    pub stage: usize,
    pub status: SessionStatus,
    #[serde(flatten)]
    pub report: EstimateReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolInfo {
    pub pool_id: String,
    pub n_items: usize,
    pub n_classes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegisterPool {
    pub pool_id: String,
    pub pool: TestPool,
}

// -------------------------------------------------------------- sessions

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Pending {
    query_id: String,
    annotator: String,
    item: usize,
    /// Every draw of `item` this stage; all take the one label.
    draws: Vec<Draw>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Answer {
    label: usize,
    stage_advanced: bool,
}

#[derive(Serialize)]
struct SessionDocRef<'a> {
    schema: &'static str,
    id: &'a str,
    pool_id: &'a str,
    measure: &'a MeasureSpec,
    config: &'a SessionConfig,
    seed: u64,
    status: SessionStatus,
    rng: &'a ChaCha20Rng,
    next_query: u64,
    pending: &'a [Pending],
    answered: &'a BTreeMap<String, Answer>,
    expired: &'a BTreeSet<String>,
    sampler: &'a SamplerState,
}

#[derive(Deserialize)]
struct SessionDoc {
    schema: String,
    id: String,
    pool_id: String,
    measure: MeasureSpec,
    config: SessionConfig,
    seed: u64,
    status: SessionStatus,
    rng: ChaCha20Rng,
    next_query: u64,
    pending: Vec<Pending>,
    answered: BTreeMap<String, Answer>,
    expired: BTreeSet<String>,
    sampler: SamplerState,
}

struct SessionCore {
    id: String,
    pool_id: String,
    pool: Arc<TestPool>,
    measure: MeasureSpec,
    config: SessionConfig,
    seed: u64,
    status: SessionStatus,
    rng: ChaCha20Rng,
    next_query: u64,
    pending: Vec<Pending>,
    answered: BTreeMap<String, Answer>,
    expired: BTreeSet<String>,
    sampler: AisSampler,
}

#[derive(Clone, Debug)]
struct Snapshot {
    summary: SessionSummary,
    estimate: Option<EstimateReport>,
}

struct SessionHandle {
    core: Mutex<SessionCore>,
    snapshot: RwLock<Arc<Snapshot>>,
}

impl SessionCore {
    fn stage_size(&self) -> usize {
        self.sampler.config().stage_size
    }

    fn pending_draws(&self) -> usize {
        self.pending.iter().map(|p| p.draws.len()).sum()
    }

    fn capacity(&self) -> usize {
        self.stage_size()
            .saturating_sub(self.sampler.draws_in_stage() + self.pending_draws())
    }

    fn budget_limit(&self) -> usize {
        let m = self.pool.len();
        match self.sampler.config().oracle {
            OracleMode::Deterministic => self.config.budget.unwrap_or(m).min(m),
            OracleMode::Stochastic => self.config.budget.unwrap_or(usize::MAX),
        }
    }

    fn update_completion(&mut self) {
        if self.sampler.budget_consumed() >= self.budget_limit() {
            self.status = SessionStatus::Complete;
            for p in self.pending.drain(..) {
                self.expired.insert(p.query_id);
            }
        }
    }

    fn require_active(&self) -> ApiResult<()> {
        match self.status {
            SessionStatus::Active => Ok(()),
            SessionStatus::Suspended => Err(ApiError::conflict("session_suspended", "session is suspended")),
            SessionStatus::Complete => Err(ApiError::conflict("session_complete", "session budget is exhausted")),
        }
    }

    fn payload(&self, p: &Pending) -> QueryPayload {
        let item = self.pool.item(p.item);
        QueryPayload {
            query_id: p.query_id.clone(),
            item_id: item.id.clone(),
            display: item.display.clone().unwrap_or_else(|| item.id.clone()),
            stage: self.sampler.stage(),
        }
    }

    fn next_queries(&mut self, count: usize, annotator: &str) -> ApiResult<Vec<QueryPayload>> {
        if count > self.stage_size() {
            return Err(ApiError::invalid(
                "count_exceeds_stage",
                format!("count {count} exceeds the stage size {}", self.stage_size()),
            ));
        }
        if count == 0 {
            return Ok(Vec::new());
        }
        self.require_active()?;
        let leased: Vec<QueryPayload> = self
            .pending
            .iter()
            .filter(|p| p.annotator == annotator)
            .map(|p| self.payload(p))
            .collect();
        if !leased.is_empty() {
            return Ok(leased);
        }
        let deterministic = self.sampler.config().oracle == OracleMode::Deterministic;
        // cached items are answered server-side; bound the work on a nearly
        // exhausted pool
        let max_draws = 10 * self.pool.len() + 1000;
        let mut issued = Vec::new();
        let mut draws = 0;
        while issued.len() < count && self.status == SessionStatus::Active && draws < max_draws {
            if self.capacity() == 0 {
                break;
            }
            let draw = self.sampler.draw(&mut self.rng);
            draws += 1;
            if let Some(label) = self.sampler.cached_label(draw.item) {
                self.sampler.record(&draw, label)?;
                self.update_completion();
                continue;
            }
            if deterministic {
                if let Some(p) = self.pending.iter_mut().find(|p| p.item == draw.item) {
                    p.draws.push(draw);
                    continue;
                }
            }
            let query_id = format!("q{}", self.next_query);
            self.next_query += 1;
            self.pending.push(Pending {
                query_id,
                annotator: annotator.to_string(),
                item: draw.item,
                draws: vec![draw],
            });
            issued.push(self.payload(self.pending.last().expect("just pushed")));
        }
        Ok(issued)
    }

    fn submit(&mut self, query_id: &str, label: usize) -> ApiResult<LabelAck> {
        let ack = |core: &Self, label, duplicate, stage_advanced| LabelAck {
            query_id: query_id.to_string(),
            label,
            duplicate,
            stage_advanced,
            stage: core.sampler.stage(),
            budget_consumed: core.sampler.budget_consumed(),
            status: core.status,
        };
        if let Some(prev) = self.answered.get(query_id) {
            return if prev.label == label {
                Ok(ack(self, label, true, prev.stage_advanced))
            } else {
                Err(ApiError::conflict(
                    "conflicting_label",
                    format!("query {query_id} was already answered with label {}", prev.label),
                ))
            };
        }
        if self.expired.contains(query_id) {
            return Err(ApiError::conflict("query_expired", format!("query {query_id} belongs to a closed stage")));
        }
        let idx = self
            .pending
            .iter()
            .position(|p| p.query_id == query_id)
            .ok_or_else(|| ApiError::not_found("unknown_query", format!("no pending query {query_id}")))?;
        let c = self.pool.n_classes();
        if label >= c {
            return Err(ApiError::invalid("label_out_of_range", format!("label {label} outside 0..{c}")));
        }
        if self.status == SessionStatus::Suspended {
            return Err(ApiError::conflict("session_suspended", "session is suspended"));
        }
        let pending = self.pending.remove(idx);
        let mut stage_advanced = false;
        for draw in &pending.draws {
            stage_advanced |= self.sampler.record(draw, label)?.stage_advanced;
        }
        self.answered.insert(
            pending.query_id,
            Answer {
                label,
                stage_advanced,
            },
        );
        self.update_completion();
        Ok(ack(self, label, false, stage_advanced))
    }

    fn force_advance(&mut self) -> ApiResult<AdvanceAck> {
        let dropped = self.pending.len();
        for p in self.pending.drain(..) {
            self.expired.insert(p.query_id);
        }
        let stage_advanced = self.sampler.end_stage()?;
        Ok(AdvanceAck {
            stage_advanced,
            dropped,
            stage: self.sampler.stage(),
        })
    }

    fn summary(&self) -> SessionSummary {
        SessionSummary {
            session_id: self.id.clone(),
            pool_id: self.pool_id.clone(),
            measure: self.measure.clone(),
            status: self.status,
            stage: self.sampler.stage(),
            stage_size: self.stage_size(),
            draws_in_stage: self.sampler.draws_in_stage(),
            pending: self.pending.len(),
            n_records: self.sampler.history().len(),
            budget_consumed: self.sampler.budget_consumed(),
            budget: self.config.budget,
            n_items: self.pool.len(),
            n_classes: self.pool.n_classes(),
            seed: self.seed,
        }
    }

    fn snapshot(&self) -> Snapshot {
        let estimate = if self.sampler.history().is_empty() {
            None
        } else {
            self.sampler.estimate().ok()
        };
        Snapshot {
            summary: self.summary(),
            estimate,
        }
    }

    fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(&SessionDocRef {
            schema: SESSION_SCHEMA,
            id: &self.id,
            pool_id: &self.pool_id,
            measure: &self.measure,
            config: &self.config,
            seed: self.seed,
            status: self.status,
            rng: &self.rng,
            next_query: self.next_query,
            pending: &self.pending,
            answered: &self.answered,
            expired: &self.expired,
            sampler: self.sampler.state(),
        })
    }

    fn export(&self) -> ApiResult<String> {
        let mut out = Vec::new();
        let meta = HistoryMeta {
            measure: Some(&self.measure),
            seed: Some(self.seed),
            oracle: Some(self.sampler.config().oracle),
            pool: Some(&self.pool),
        };
        write_history(&mut out, self.sampler.history(), &self.sampler.proposal().probs, &meta)?;
        String::from_utf8(out).map_err(|e| ApiError::internal(e.to_string()))
    }
}

// --------------------------------------------------------------- service

struct PoolEntry {
    pool: Arc<TestPool>,
    predictions: Arc<PredictionSource>,
}

/// Session manager shared by all request handlers.
pub struct Service {
    data_dir: Option<PathBuf>,
    pools: RwLock<HashMap<String, Arc<PoolEntry>>>,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
}

impl Service {
    /// A service that keeps sessions in memory only.
    pub fn in_memory() -> Self {
        Self {
            data_dir: None,
            pools: RwLock::default(),
            sessions: RwLock::default(),
        }
    }

    /// Opens (or creates) a data directory: registers every pool under
    /// `pools/` by file stem and restores every session under `sessions/`.
    /// Sessions whose pool is missing are skipped and reported.
    pub fn open(data_dir: &Path) -> crate::Result<(Self, Vec<String>)> {
        let service = Self {
            data_dir: Some(data_dir.to_path_buf()),
            pools: RwLock::default(),
            sessions: RwLock::default(),
        };
        let pools_dir = data_dir.join("pools");
        let sessions_dir = data_dir.join("sessions");
        for dir in [&pools_dir, &sessions_dir] {
            fs::create_dir_all(dir).map_err(crate::io_err(dir))?;
        }
        for path in sorted_entries(&pools_dir)? {
            let ext = path.extension().and_then(|e| e.to_str());
            if !matches!(ext, Some("json" | "csv")) || path.to_string_lossy().ends_with(".exact.json") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            service.register_pool(stem, load_pool(&path)?);
        }
        let mut skipped = Vec::new();
        for path in sorted_entries(&sessions_dir)? {
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(crate::io_err(&path))?;
            if let Err(e) = service.restore(&text) {
                skipped.push(format!("{}: {e}", path.display()));
            }
        }
        Ok((service, skipped))
    }

    pub fn register_pool(&self, pool_id: &str, pool: TestPool) {
        let entry = PoolEntry {
            predictions: Arc::new(pool.predictions()),
            pool: Arc::new(pool),
        };
        self.pools.write().expect("pool registry poisoned").insert(pool_id.to_string(), Arc::new(entry));
    }

    pub fn pools(&self) -> Vec<PoolInfo> {
        let mut out: Vec<PoolInfo> = self
            .pools
            .read()
            .expect("pool registry poisoned")
            .iter()
            .map(|(id, e)| PoolInfo {
                pool_id: id.clone(),
                n_items: e.pool.len(),
                n_classes: e.pool.n_classes(),
            })
            .collect();
        out.sort_by(|a, b| a.pool_id.cmp(&b.pool_id));
        out
    }

    fn pool(&self, pool_id: &str) -> ApiResult<Arc<PoolEntry>> {
        self.pools
            .read()
            .expect("pool registry poisoned")
            .get(pool_id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("unknown_pool", format!("no pool `{pool_id}`")))
    }

    fn context(entry: &PoolEntry, measure: &MeasureSpec, config: &SessionConfig) -> ApiResult<EvalContext> {
        config.partition.validate()?;
        let measure = measure.build(entry.predictions.clone())?;
        let partition = build_partition(&entry.pool, &measure, &config.partition)?;
        Ok(EvalContext::new(measure, partition, entry.pool.marginal_vec())?)
    }

    pub fn create_session(&self, request: CreateSession) -> ApiResult<SessionSummary> {
        let entry = self.pool(&request.pool_id)?;
        let config = request.config;
        if let Some(b) = config.budget {
            let deterministic = config.sampler.oracle == OracleMode::Deterministic;
            if b == 0 || (deterministic && b > entry.pool.len()) {
                return Err(ApiError::invalid("invalid_config", format!("budget {b} outside 1..={}", entry.pool.len())));
            }
        }
        let ctx = Self::context(&entry, &request.measure, &config)?;
        let sampler = AisSampler::new(ctx, config.sampler.clone())?;
        let seed = config.seed.unwrap_or_else(|| rand::rng().random());
        let id = loop {
            let id = format!("{:032x}", rand::rng().random::<u128>());
            if !self.sessions.read().expect("session map poisoned").contains_key(&id) {
                break id;
            }
        };
        let core = SessionCore {
            id: id.clone(),
            pool_id: request.pool_id,
            pool: entry.pool.clone(),
            measure: request.measure,
            config,
            seed,
            status: SessionStatus::Active,
            rng: ChaCha20Rng::seed_from_u64(seed),
            next_query: 0,
            pending: Vec::new(),
            answered: BTreeMap::new(),
            expired: BTreeSet::new(),
            sampler,
        };
        let summary = core.summary();
        let handle = Arc::new(SessionHandle {
            snapshot: RwLock::new(Arc::new(core.snapshot())),
            core: Mutex::new(core),
        });
        self.persist(&handle.core.lock().expect("session poisoned"))?;
        self.sessions.write().expect("session map poisoned").insert(id, handle);
        Ok(summary)
    }

    fn restore(&self, text: &str) -> ApiResult<String> {
        let doc: SessionDoc = serde_json::from_str(text).map_err(|e| ApiError::internal(e.to_string()))?;
        if doc.schema != SESSION_SCHEMA {
            return Err(ApiError::internal(format!("unsupported session schema `{}`", doc.schema)));
        }
        let entry = self.pool(&doc.pool_id)?;
        let ctx = Self::context(&entry, &doc.measure, &doc.config)?;
        let sampler = AisSampler::resume(ctx, doc.sampler)?;
        let core = SessionCore {
            id: doc.id.clone(),
            pool_id: doc.pool_id,
            pool: entry.pool.clone(),
            measure: doc.measure,
            config: doc.config,
            seed: doc.seed,
            status: doc.status,
            rng: doc.rng,
            next_query: doc.next_query,
            pending: doc.pending,
            answered: doc.answered,
            expired: doc.expired,
            sampler,
        };
        let handle = Arc::new(SessionHandle {
            snapshot: RwLock::new(Arc::new(core.snapshot())),
            core: Mutex::new(core),
        });
        self.sessions.write().expect("session map poisoned").insert(doc.id.clone(), handle);
        Ok(doc.id)
    }

    fn handle(&self, id: &str) -> ApiResult<Arc<SessionHandle>> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("unknown_session", format!("no session `{id}`")))
    }

    fn persist(&self, core: &SessionCore) -> ApiResult<()> {
        let Some(dir) = &self.data_dir else {
            return Ok(());
        };
        let dir = dir.join("sessions");
        let text = core.to_json().map_err(|e| ApiError::internal(e.to_string()))?;
        let tmp = dir.join(format!("{}.json.tmp", core.id));
        let path = dir.join(format!("{}.json", core.id));
        fs::write(&tmp, text)
            .and_then(|_| fs::rename(&tmp, &path))
            .map_err(|e| ApiError::internal(format!("persisting session: {e}")))
    }

    /// Runs a mutation under the session's writer lock, then persists and
    /// refreshes the read snapshot. A failed mutation leaves both as they
    /// were on disk.
    fn mutate<T>(&self, id: &str, f: impl FnOnce(&mut SessionCore) -> ApiResult<T>) -> ApiResult<T> {
        let handle = self.handle(id)?;
        let mut core = handle.core.lock().expect("session poisoned");
        let out = f(&mut core);
        if out.is_ok() {
            self.persist(&core)?;
        }
        *handle.snapshot.write().expect("snapshot poisoned") = Arc::new(core.snapshot());
        out
    }

    fn read(&self, id: &str) -> ApiResult<Arc<Snapshot>> {
        let handle = self.handle(id)?;
        let snap = handle.snapshot.read().expect("snapshot poisoned").clone();
        Ok(snap)
    }

    pub fn summary(&self, id: &str) -> ApiResult<SessionSummary> {
        Ok(self.read(id)?.summary.clone())
    }

    pub fn next_queries(&self, id: &str, count: usize, annotator: Option<&str>) -> ApiResult<QueryBatch> {
        let annotator = annotator.unwrap_or(DEFAULT_ANNOTATOR);
        self.mutate(id, |core| {
            let queries = core.next_queries(count, annotator)?;
            Ok(QueryBatch {
                session_id: core.id.clone(),
                stage: core.sampler.stage(),
                status: core.status,
                queries,
            })
        })
    }

    pub fn submit_label(&self, id: &str, submission: &LabelSubmission) -> ApiResult<LabelAck> {
        self.mutate(id, |core| core.submit(&submission.query_id, submission.label))
    }

    pub fn estimate(&self, id: &str) -> ApiResult<EstimateView> {
        let snap = self.read(id)?;
        let report = snap
            .estimate
            .clone()
            .ok_or_else(|| ApiError::not_found("no_data", "no labelled draws yet"))?;
        Ok(EstimateView {
            schema: REPORT_SCHEMA.into(),
            session_id: snap.summary.session_id.clone(),
            stage: snap.summary.stage,
            status: snap.summary.status,
            report,
        })
    }

    pub fn export(&self, id: &str) -> ApiResult<String> {
        let handle = self.handle(id)?;
        let core = handle.core.lock().expect("session poisoned");
        core.export()
    }

    pub fn force_advance(&self, id: &str) -> ApiResult<AdvanceAck> {
        self.mutate(id, |core| {
            if core.status == SessionStatus::Complete {
                return Err(ApiError::conflict("session_complete", "session budget is exhausted"));
            }
            core.force_advance()
        })
    }

    pub fn suspend(&self, id: &str) -> ApiResult<SessionSummary> {
        self.mutate(id, |core| {
            core.require_active()?;
            core.status = SessionStatus::Suspended;
            Ok(core.summary())
        })
    }

    pub fn resume(&self, id: &str) -> ApiResult<SessionSummary> {
        self.mutate(id, |core| {
            match core.status {
                SessionStatus::Complete => {
                    return Err(ApiError::conflict("session_complete", "session budget is exhausted"))
                }
                _ => core.status = SessionStatus::Active,
            }
            Ok(core.summary())
        })
    }

    /// The proposal the next draw will use (for audits and tests).
    pub fn current_proposal(&self, id: &str) -> ApiResult<Vec<f64>> {
        let handle = self.handle(id)?;
        let core = handle.core.lock().expect("session poisoned");
        Ok(core.sampler.proposal().probs.clone())
    }
}

fn sorted_entries(dir: &Path) -> crate::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(crate::io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

// ---------------------------------------------------------------- router

type Shared = Arc<Service>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

fn bad_body(e: JsonRejection) -> ApiError {
    ApiError::new(e.status(), "bad_request", e.body_text())
}

async fn list_pools(State(svc): State<Shared>) -> Json<Vec<PoolInfo>> {
    Json(svc.pools())
}

async fn register_pool(State(svc): State<Shared>, body: Result<Json<RegisterPool>, JsonRejection>) -> ApiResult<Response> {
    let Json(req) = body.map_err(bad_body)?;
    let info = PoolInfo {
        pool_id: req.pool_id.clone(),
        n_items: req.pool.len(),
        n_classes: req.pool.n_classes(),
    };
    blocking(move || {
        svc.register_pool(&req.pool_id, req.pool);
        Ok(())
    })
    .await?;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

async fn create_session(State(svc): State<Shared>, body: Result<Json<CreateSession>, JsonRejection>) -> ApiResult<Response> {
    let Json(req) = body.map_err(bad_body)?;
    let summary = blocking(move || svc.create_session(req)).await?;
    Ok((StatusCode::CREATED, Json(summary)).into_response())
}

async fn get_session(State(svc): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionSummary>> {
    svc.summary(&id).map(Json)
}

async fn next_queries(
    State(svc): State<Shared>,
    UrlPath(id): UrlPath<String>,
    params: Result<Query<QueryParams>, QueryRejection>,
) -> ApiResult<Json<QueryBatch>> {
    let Query(params) = params.map_err(|e| ApiError::new(e.status(), "bad_request", e.body_text()))?;
    blocking(move || svc.next_queries(&id, params.count.unwrap_or(1), params.annotator.as_deref()))
        .await
        .map(Json)
}

async fn submit_label(
    State(svc): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<LabelSubmission>, JsonRejection>,
) -> ApiResult<Json<LabelAck>> {
    let Json(req) = body.map_err(bad_body)?;
    blocking(move || svc.submit_label(&id, &req)).await.map(Json)
}

async fn get_estimate(State(svc): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<EstimateView>> {
    svc.estimate(&id).map(Json)
}

async fn export(State(svc): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let body = blocking(move || svc.export(&id)).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

async fn advance(State(svc): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<AdvanceAck>> {
    blocking(move || svc.force_advance(&id)).await.map(Json)
}

async fn suspend(State(svc): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionSummary>> {
    blocking(move || svc.suspend(&id)).await.map(Json)
}

async fn resume(State(svc): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionSummary>> {
    blocking(move || svc.resume(&id)).await.map(Json)
}

async fn fallback() -> ApiError {
    ApiError::not_found("not_found", "no such endpoint")
}

pub fn router(service: Shared) -> Router {
    Router::new()
        .route("/pools", get(list_pools).post(register_pool))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/queries", get(next_queries))
        .route("/sessions/{id}/labels", post(submit_label))
        .route("/sessions/{id}/estimate", get(get_estimate))
        .route("/sessions/{id}/export", get(export))
        .route("/sessions/{id}/advance", post(advance))
        .route("/sessions/{id}/suspend", post(suspend))
        .route("/sessions/{id}/resume", post(resume))
        .fallback(fallback)
        .with_state(service)
}

/// Serves until ctrl-c.
pub async fn serve(service: Shared, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
