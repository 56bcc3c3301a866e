//! HTTP face of the router: chat, feedback, admin and metrics.
//!
//! [`RouterService`] holds all state and does the work synchronously;
//! [`router`] wraps it in axum handlers that hop onto the blocking pool.
//! Build the service outside any async runtime when external providers are
//! configured, since their blocking HTTP clients own a runtime of their own.

use std::collections::{HashMap, VecDeque};
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lru::LruCache;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{Band, Classifier};
use crate::config::{AppConfig, BackendKind};
use crate::context_manager::SessionContext;
use crate::embedding::{Embedding, EmbeddingProvider};
use crate::feedback::{
    propose_intent, ClusterLog, DraftStatus, FeedbackError, FeedbackOutcome, FeedbackTracker, FeedbackWindow,
    IntentDraft, Polarity, ThresholdUpdate, UnhandledEntry,
};
use crate::intent_store::{now_ms, FieldIssue, IntentDefinition, IntentRecord, IntentStore, StoreError};
use crate::jsonl;
use crate::metrics::percentile;
use crate::responder::{
    Blender, ExternalBlender, ReferenceBlender, Responder, ResponderError, ResponseKind, RoutingMode,
};
use crate::retrieval::{read_kb_jsonl, AnswerGenerator, DocumentIndex, ExternalGenerator, ExtractiveGenerator};

pub const INTENTS_FILE: &str = "intents.jsonl";
pub const UNHANDLED_FILE: &str = "unhandled.jsonl";
pub const DRAFTS_FILE: &str = "intent_drafts.jsonl";

const MAX_SESSION_ID_LEN: usize = 128;
const LATENCY_SAMPLES: usize = 10_000;
const SWEEP_EVERY: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("text is empty")]
    EmptyText,
    #[error("invalid session id")]
    InvalidSessionId,
    #[error("unknown turn {turn_index} in session `{session_id}`")]
    UnknownTurn { session_id: String, turn_index: u64 },
    #[error("missing or wrong admin token")]
    Unauthorized,
    #[error("{0} not found")]
    NotFound(String),
    #[error("validation failed")]
    Validation(Vec<FieldIssue>),
    #[error("{0}")]
    Conflict(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error("setup: {0}")]
    Setup(String),
    #[error("internal: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::EmptyText | Self::InvalidSessionId | Self::Validation(_) => StatusCode::BAD_REQUEST,
            Self::UnknownTurn { .. } | Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::Unauthorized => StatusCode::UNAUTHORIZED,
            Self::Conflict(_) => StatusCode::CONFLICT,
            Self::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            Self::Setup(_) | Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Self::EmptyText => "empty_text",
            Self::InvalidSessionId => "invalid_session_id",
            Self::UnknownTurn { .. } => "unknown_turn",
            Self::Unauthorized => "unauthorized",
            Self::NotFound(_) => "not_found",
            Self::Validation(_) => "validation_failed",
            Self::Conflict(_) => "conflict",
            Self::Unavailable(_) => "unavailable",
            Self::Setup(_) | Self::Internal(_) => "internal",
        }
    }
}

impl From<StoreError> for ServiceError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::ValidationFailed(issues) => Self::Validation(issues),
            StoreError::UnknownIntent(id) => Self::NotFound(format!("intent `{id}`")),
            other => Self::Internal(other.to_string()),
        }
    }
}

impl From<ResponderError> for ServiceError {
    fn from(e: ResponderError) -> Self {
        if e.is_empty_text() {
            return Self::EmptyText;
        }
        match e {
            ResponderError::Unavailable(m) => Self::Unavailable(m),
            other => Self::Unavailable(other.to_string()),
        }
    }
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        Self::Internal(e.to_string())
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    issues: Option<&'a [FieldIssue]>,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code(),
            message: self.to_string(),
            issues: match &self {
                Self::Validation(issues) => Some(issues),
                _ => None,
            },
        };
        (self.status(), Json(body)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub session_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub session_id: String,
    pub text: String,
    pub kind: ResponseKind,
    pub intent_id: Option<String>,
    pub confidence: f64,
    pub band: Band,
    pub sources: Vec<String>,
    pub latency_ms: f64,
    pub turn_index: u64,
    /// Served from the response cache without classification.
    pub cache_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub session_id: String,
    pub turn_index: u64,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackAck {
    pub session_id: String,
    pub turn_index: u64,
    /// `counted`, `duplicate`, `stale` or `no_intent`.
    pub outcome: String,
    pub intent_id: Option<String>,
}

/// An intent without its embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentView {
    pub intent_id: String,
    pub display_name: String,
    pub exemplar_texts: Vec<String>,
    pub canned_response: String,
    pub tau_faq: f64,
    pub hit_count: u64,
    pub created_at: u64,
    pub updated_at: u64,
}

impl IntentView {
    fn of(r: &IntentRecord, pending_hits: u64) -> Self {
        Self {
            intent_id: r.intent_id.clone(),
            display_name: r.display_name.clone(),
            exemplar_texts: r.exemplar_texts.clone(),
            canned_response: r.canned_response.clone(),
            tau_faq: r.tau_faq,
            hit_count: pending_hits,
            created_at: r.created_at,
            updated_at: r.updated_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentList {
    pub version: u64,
    pub intents: Vec<IntentView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftView {
    #[serde(flatten)]
    pub draft: IntentDraft,
    /// Live cluster size; absent once the cluster is gone (activated, or
    /// the process restarted).
    pub cluster_size: Option<usize>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivateRequest {
    pub canned_response: String,
    #[serde(default)]
    pub intent_id: Option<String>,
    #[serde(default)]
    pub display_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdView {
    pub intent_id: String,
    pub tau_faq: f64,
    pub window: Option<FeedbackWindow>,
    /// Closed windows for this intent, oldest first.
    pub history: Vec<ThresholdUpdate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdList {
    pub version: u64,
    pub intents: Vec<ThresholdView>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KindCounts {
    pub canned: u64,
    pub rag: u64,
    pub hybrid: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BandCounts {
    pub faq: u64,
    pub contextual: u64,
    pub out_of_domain: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheCounters {
    pub hits: u64,
    pub misses: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceMetrics {
    pub uptime_secs: f64,
    pub requests: u64,
    pub errors: u64,
    pub kinds: KindCounts,
    pub bands: BandCounts,
    /// Over the most recent 10,000 answers.
    pub mean_latency_ms: f64,
    pub latency_p95_ms: f64,
    pub retrieval_calls: u64,
    pub response_cache: CacheCounters,
    pub intent_cache: CacheCounters,
    pub feedback_positive: u64,
    pub feedback_negative: u64,
    pub threshold_updates: usize,
    pub unhandled_logged: u64,
    pub clusters: usize,
    pub flagged_clusters: usize,
    pub pending_drafts: usize,
    pub active_sessions: usize,
    pub store_version: u64,
}

#[derive(Default)]
struct Stats {
    requests: u64,
    errors: u64,
    kinds: KindCounts,
    bands: BandCounts,
    latencies: VecDeque<f64>,
    retrieval_calls: u64,
    response_cache: CacheCounters,
    feedback_positive: u64,
    feedback_negative: u64,
    unhandled_logged: u64,
}

struct SessionSlot {
    /// Distinguishes a session from an earlier, evicted one with the same id.
    uid: u64,
    context: Mutex<SessionContext>,
    last_seen: Mutex<Instant>,
}

struct CachedAnswer {
    store_version: u64,
    intent_id: String,
    text: String,
    confidence: f64,
    query_embedding: Embedding,
}

struct Evolution {
    clusters: ClusterLog,
    drafts: Vec<IntentDraft>,
    /// Pending draft per live cluster.
    by_cluster: HashMap<u64, usize>,
    next_draft: u64,
}

/// The pieces a router is made of, built from configuration.
pub struct Components {
    pub store: Arc<IntentStore>,
    pub index: Arc<DocumentIndex>,
    pub generator: Arc<dyn AnswerGenerator>,
    pub blender: Arc<dyn Blender>,
}

impl Components {
    pub fn from_config(cfg: &AppConfig) -> Result<Self, ServiceError> {
        cfg.validate().map_err(|e| ServiceError::Setup(e.to_string()))?;
        let provider = cfg.embedding.build().map_err(|e| ServiceError::Setup(e.to_string()))?;
        let store = RouterService::open_store(cfg, Arc::clone(&provider))?;
        let kb = match &cfg.retrieval.kb_path {
            Some(path) => {
                let file = std::fs::File::open(path).map_err(|e| ServiceError::Setup(format!("{}: {e}", path.display())))?;
                read_kb_jsonl(std::io::BufReader::new(file)).map_err(|e| ServiceError::Setup(e.to_string()))?
            }
            None => crate::demo::demo_kb(),
        };
        let index = DocumentIndex::build(kb, provider.as_ref()).map_err(|e| ServiceError::Setup(e.to_string()))?;
        let generator: Arc<dyn AnswerGenerator> = match cfg.retrieval.generator.kind {
            BackendKind::Reference => Arc::new(ExtractiveGenerator::new(Arc::clone(&provider))),
            BackendKind::External => Arc::new(
                ExternalGenerator::new(
                    cfg.retrieval.generator.endpoint.clone().unwrap_or_default(),
                    cfg.retrieval.generator.timeout(),
                )
                .map_err(|e| ServiceError::Setup(e.to_string()))?,
            ),
        };
        let blender: Arc<dyn Blender> = match cfg.blender.kind {
            BackendKind::Reference => Arc::new(ReferenceBlender),
            BackendKind::External => Arc::new(
                ExternalBlender::new(cfg.blender.endpoint.clone().unwrap_or_default(), cfg.blender.timeout())
                    .map_err(|e| ServiceError::Setup(e.to_string()))?,
            ),
        };
        Ok(Self {
            store: Arc::new(store),
            index: Arc::new(index),
            generator,
            blender,
        })
    }
}

pub struct RouterService {
    cfg: AppConfig,
    provider: Arc<dyn EmbeddingProvider>,
    store: Arc<IntentStore>,
    index: Arc<DocumentIndex>,
    responder: Responder,
    sessions: Mutex<HashMap<String, Arc<SessionSlot>>>,
    next_uid: AtomicU64,
    last_sweep: Mutex<Instant>,
    responses: Mutex<LruCache<String, CachedAnswer>>,
    tracker: FeedbackTracker,
    evolution: Mutex<Evolution>,
    stats: Mutex<Stats>,
    started: Instant,
}

fn normalize_query(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= MAX_SESSION_ID_LEN
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | ':'))
}

fn outcome_label(o: &FeedbackOutcome) -> (&'static str, Option<String>) {
    match o {
        FeedbackOutcome::Counted { intent_id } => ("counted", Some(intent_id.clone())),
        FeedbackOutcome::Duplicate => ("duplicate", None),
        FeedbackOutcome::Stale => ("stale", None),
        FeedbackOutcome::NoIntent => ("no_intent", None),
    }
}

impl RouterService {
    /// Builds providers, loads or seeds the intent store, and indexes the
    /// knowledge base.
    pub fn from_config(cfg: AppConfig) -> Result<Self, ServiceError> {
        let c = Components::from_config(&cfg)?;
        Self::assemble(cfg, c.store, c.index, c.generator, c.blender)
    }

    /// Wires prebuilt components. The store's provider is used throughout.
    pub fn assemble(
        cfg: AppConfig,
        store: Arc<IntentStore>,
        index: Arc<DocumentIndex>,
        generator: Arc<dyn AnswerGenerator>,
        blender: Arc<dyn Blender>,
    ) -> Result<Self, ServiceError> {
        let provider = Arc::clone(store.provider());
        let responder = Responder::new(Classifier::new(Arc::clone(&provider), cfg.context.clone()), generator, blender)
            .with_mode(cfg.mode)
            .with_top_k(cfg.retrieval.top_k)
            .with_hit_tracking(true);
        let drafts = match Self::data_path(&cfg, DRAFTS_FILE) {
            Some(p) if p.exists() => jsonl::read_file::<IntentDraft>(&p).map_err(|e| ServiceError::Setup(e.to_string()))?,
            _ => Vec::new(),
        };
        let next_draft = drafts
            .iter()
            .filter_map(|d| d.draft_id.strip_prefix("draft-")?.parse::<u64>().ok())
            .max()
            .unwrap_or(0)
            + 1;
        let capacity = NonZeroUsize::new(cfg.session.response_cache_capacity).unwrap_or(NonZeroUsize::MIN);
        Ok(Self {
            tracker: FeedbackTracker::new(cfg.feedback.clone()),
            evolution: Mutex::new(Evolution {
                clusters: ClusterLog::new(cfg.feedback.clone()),
                drafts,
                by_cluster: HashMap::new(),
                next_draft,
            }),
            responses: Mutex::new(LruCache::new(capacity)),
            sessions: Mutex::new(HashMap::new()),
            next_uid: AtomicU64::new(1),
            last_sweep: Mutex::new(Instant::now()),
            stats: Mutex::new(Stats::default()),
            started: Instant::now(),
            provider,
            store,
            index,
            responder,
            cfg,
        })
    }

    fn data_path(cfg: &AppConfig, file: &str) -> Option<PathBuf> {
        cfg.data_dir.as_ref().map(|d| d.join(file))
    }

    fn open_store(cfg: &AppConfig, provider: Arc<dyn EmbeddingProvider>) -> Result<IntentStore, ServiceError> {
        let cap = cfg.store.cache_capacity;
        if let Some(dir) = &cfg.data_dir {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(INTENTS_FILE);
            if path.exists() {
                return IntentStore::load(&path, provider, cap).map_err(|e| ServiceError::Setup(e.to_string()));
            }
        }
        let defs: Vec<IntentDefinition> = match &cfg.store.seed_intents {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| ServiceError::Setup(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| ServiceError::Setup(e.to_string()))?
            }
            None => crate::demo::demo_intents(),
        };
        let store = IntentStore::with_cache_capacity(provider, cap);
        for d in defs {
            store.upsert_intent(d).map_err(|e| ServiceError::Setup(e.to_string()))?;
        }
        if let Some(path) = Self::data_path(cfg, INTENTS_FILE) {
            store.persist(&path).map_err(|e| ServiceError::Setup(e.to_string()))?;
        }
        Ok(store)
    }

    pub fn config(&self) -> &AppConfig {
        &self.cfg
    }

    pub fn store(&self) -> &Arc<IntentStore> {
        &self.store
    }

    pub fn index(&self) -> &Arc<DocumentIndex> {
        &self.index
    }

    pub fn provider(&self) -> &Arc<dyn EmbeddingProvider> {
        &self.provider
    }

    fn persist_store(&self) -> Result<(), ServiceError> {
        if let Some(path) = Self::data_path(&self.cfg, INTENTS_FILE) {
            self.store.persist(&path)?;
        }
        Ok(())
    }

    fn persist_drafts(&self, drafts: &[IntentDraft]) -> Result<(), ServiceError> {
        if let Some(path) = Self::data_path(&self.cfg, DRAFTS_FILE) {
            jsonl::write_file(&path, drafts)?;
        }
        Ok(())
    }

    fn session(&self, session_id: &str) -> Arc<SessionSlot> {
        let now = Instant::now();
        let due = {
            let mut last = self.last_sweep.lock();
            let due = now.duration_since(*last) >= SWEEP_EVERY;
            if due {
                *last = now;
            }
            due
        };
        if due {
            self.evict_idle_at(now);
        }
        let mut sessions = self.sessions.lock();
        let slot = sessions.entry(session_id.to_owned()).or_insert_with(|| {
            Arc::new(SessionSlot {
                uid: self.next_uid.fetch_add(1, Ordering::Relaxed),
                context: Mutex::new(SessionContext::new(session_id)),
                last_seen: Mutex::new(now),
            })
        });
        *slot.last_seen.lock() = now;
        Arc::clone(slot)
    }

    /// Drops sessions idle longer than the configured timeout as of `now`.
    /// Returns how many were removed.
    pub fn evict_idle_at(&self, now: Instant) -> usize {
        let timeout = Duration::from_secs(self.cfg.session.idle_timeout_secs);
        let mut sessions = self.sessions.lock();
        let before = sessions.len();
        sessions.retain(|_, s| now.saturating_duration_since(*s.last_seen.lock()) < timeout);
        before - sessions.len()
    }

    pub fn active_sessions(&self) -> usize {
        self.sessions.lock().len()
    }

    /// The session's recent aggregate history, if it has any turns.
    pub fn session_aggregate(&self, session_id: &str) -> Option<Embedding> {
        let slot = self.sessions.lock().get(session_id).cloned()?;
        let ctx = slot.context.lock();
        ctx.aggregate().cloned()
    }

    fn tracker_key(session_id: &str, uid: u64) -> String {
        format!("{session_id}#{uid}")
    }

    pub fn handle_chat(&self, req: &ChatRequest) -> Result<ChatResponse, ServiceError> {
        let result = self.chat(req);
        let mut stats = self.stats.lock();
        stats.requests += 1;
        match &result {
            Ok(r) => {
                match r.kind {
                    ResponseKind::Canned => stats.kinds.canned += 1,
                    ResponseKind::Rag => stats.kinds.rag += 1,
                    ResponseKind::Hybrid => stats.kinds.hybrid += 1,
                }
                match r.band {
                    Band::Faq => stats.bands.faq += 1,
                    Band::Contextual => stats.bands.contextual += 1,
                    Band::OutOfDomain => stats.bands.out_of_domain += 1,
                }
                if stats.latencies.len() == LATENCY_SAMPLES {
                    stats.latencies.pop_front();
                }
                stats.latencies.push_back(r.latency_ms);
            }
            Err(_) => stats.errors += 1,
        }
        result
    }

    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ServiceError> {
        let text = req.text.trim();
        if text.is_empty() {
            return Err(ServiceError::EmptyText);
        }
        if !valid_session_id(&req.session_id) {
            return Err(ServiceError::InvalidSessionId);
        }
        let slot = self.session(&req.session_id);
        let mut ctx = slot.context.lock();
        let first_turn = ctx.next_turn_index() == 0;
        let key = normalize_query(text);

        let started = Instant::now();
        let cacheable = first_turn && self.responder.mode() != RoutingMode::RagOnly;
        if cacheable {
            if let Some(resp) = self.serve_cached(&key, text, &req.session_id, &mut ctx, started)? {
                drop(ctx);
                self.after_answer(&slot, &resp, None);
                return Ok(resp);
            }
        }

        let version_before = self.store.version();
        let outcome = self.responder.respond(text, &mut ctx, self.store.as_ref(), &self.index)?;
        drop(ctx);
        let r = outcome.response;
        let c = outcome.classification;
        if cacheable && r.kind == ResponseKind::Canned && r.band == Band::Faq && self.store.version() == version_before {
            if let Some(id) = &r.intent_id {
                self.responses.lock().put(
                    key,
                    CachedAnswer {
                        store_version: version_before,
                        intent_id: id.clone(),
                        text: r.text.clone(),
                        confidence: r.confidence,
                        query_embedding: c.query_embedding.clone(),
                    },
                );
            }
        }
        self.stats.lock().retrieval_calls += u64::from(r.retrieval_calls);
        let resp = ChatResponse {
            session_id: req.session_id.clone(),
            text: r.text,
            kind: r.kind,
            intent_id: r.intent_id,
            confidence: r.confidence,
            band: r.band,
            sources: r.sources,
            latency_ms: r.latency_ms,
            turn_index: r.turn_index,
            cache_hit: false,
        };
        self.after_answer(&slot, &resp, Some(&c.query_embedding));
        Ok(resp)
    }

    fn serve_cached(
        &self,
        key: &str,
        text: &str,
        session_id: &str,
        ctx: &mut SessionContext,
        started: Instant,
    ) -> Result<Option<ChatResponse>, ServiceError> {
        let current = self.store.version();
        let hit = {
            let mut cache = self.responses.lock();
            match cache.get(key) {
                Some(a) if a.store_version == current => {
                    Some((a.intent_id.clone(), a.text.clone(), a.confidence, a.query_embedding.clone()))
                }
                Some(_) => {
                    cache.pop(key);
                    None
                }
                None => None,
            }
        };
        let mut stats = self.stats.lock();
        let Some((intent_id, answer, confidence, embedding)) = hit else {
            stats.response_cache.misses += 1;
            return Ok(None);
        };
        stats.response_cache.hits += 1;
        drop(stats);
        let turn_index = ctx
            .append_turn_with_embedding(self.provider.as_ref(), text, embedding, &answer, self.responder.classifier().context_config())
            .map_err(|e| ServiceError::Internal(e.to_string()))?
            .turn_index;
        self.store.record_hit(&intent_id);
        Ok(Some(ChatResponse {
            session_id: session_id.to_owned(),
            text: answer,
            kind: ResponseKind::Canned,
            intent_id: Some(intent_id),
            confidence,
            band: Band::Faq,
            sources: Vec::new(),
            latency_ms: started.elapsed().as_secs_f64() * 1_000.0,
            turn_index,
            cache_hit: true,
        }))
    }

    /// Feedback registration and unhandled-query logging for an answered turn.
    fn after_answer(&self, slot: &SessionSlot, resp: &ChatResponse, query_embedding: Option<&Embedding>) {
        let intent = if resp.band == Band::OutOfDomain { None } else { resp.intent_id.as_deref() };
        let key = Self::tracker_key(&resp.session_id, slot.uid);
        if let Some(update) = self.tracker.register_interaction(&key, resp.turn_index, intent, resp.band, &self.store) {
            tracing::info!(intent = %update.intent_id, old = update.old_tau, new = update.new_tau, "threshold updated");
            if let Err(e) = self.persist_store() {
                tracing::warn!(error = %e, "persisting intents failed");
            }
        }
        if resp.band == Band::OutOfDomain {
            if let Some(emb) = query_embedding {
                if let Err(e) = self.log_unhandled(resp, emb.clone()) {
                    tracing::warn!(error = %e, "logging unhandled query failed");
                }
            }
        }
    }

    fn log_unhandled(&self, resp: &ChatResponse, embedding: Embedding) -> Result<(), ServiceError> {
        let query_text = {
            let sessions = self.sessions.lock();
            let slot = sessions.get(&resp.session_id).cloned();
            drop(sessions);
            slot.and_then(|s| s.context.lock().turn(resp.turn_index).map(|t| t.query_text.clone()))
                .unwrap_or_default()
        };
        if query_text.is_empty() {
            return Ok(());
        }
        let mut evo = self.evolution.lock();
        let cluster_id = evo
            .clusters
            .log_unhandled(&query_text, embedding)
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        self.stats.lock().unhandled_logged += 1;
        if let Some(path) = Self::data_path(&self.cfg, UNHANDLED_FILE) {
            jsonl::append(
                &path,
                &UnhandledEntry {
                    session_id: resp.session_id.clone(),
                    turn_index: resp.turn_index,
                    query_text,
                    confidence: resp.confidence,
                    cluster_id,
                    timestamp: now_ms(),
                },
            )?;
        }
        // Draft or refresh a draft for every flagged cluster, since
        // re-clustering can move members between clusters.
        let flagged: Vec<_> = evo.clusters.clusters().iter().filter(|c| c.flagged).cloned().collect();
        let mut changed = false;
        for cluster in flagged {
            let mut draft = propose_intent(&cluster).map_err(|e| ServiceError::Internal(e.to_string()))?;
            match evo.by_cluster.get(&cluster.cluster_id).copied() {
                Some(i) => {
                    if evo.drafts[i].exemplar_texts != draft.exemplar_texts {
                        evo.drafts[i].exemplar_texts = draft.exemplar_texts;
                        changed = true;
                    }
                }
                None => {
                    let n = evo.next_draft;
                    evo.next_draft += 1;
                    draft.draft_id = format!("draft-{n}");
                    draft.suggested_intent_id = format!("proposed_{n}");
                    tracing::info!(draft = %draft.draft_id, size = cluster.size, "intent draft proposed");
                    evo.drafts.push(draft);
                    let i = evo.drafts.len() - 1;
                    evo.by_cluster.insert(cluster.cluster_id, i);
                    changed = true;
                }
            }
        }
        if changed {
            self.persist_drafts(&evo.drafts)?;
        }
        Ok(())
    }

    pub fn handle_feedback(&self, req: &FeedbackRequest) -> Result<FeedbackAck, ServiceError> {
        let unknown = || ServiceError::UnknownTurn {
            session_id: req.session_id.clone(),
            turn_index: req.turn_index,
        };
        let slot = self.sessions.lock().get(&req.session_id).cloned().ok_or_else(unknown)?;
        if req.turn_index >= slot.context.lock().next_turn_index() {
            return Err(unknown());
        }
        let key = Self::tracker_key(&req.session_id, slot.uid);
        let (_, outcome) = self
            .tracker
            .record_feedback(&key, req.turn_index, req.polarity)
            .map_err(|e| match e {
                FeedbackError::UnknownTurn { .. } => unknown(),
                other => ServiceError::Internal(other.to_string()),
            })?;
        if outcome != FeedbackOutcome::Duplicate {
            let mut stats = self.stats.lock();
            match req.polarity {
                Polarity::Positive => stats.feedback_positive += 1,
                Polarity::Negative => stats.feedback_negative += 1,
            }
        }
        let (label, intent_id) = outcome_label(&outcome);
        Ok(FeedbackAck {
            session_id: req.session_id.clone(),
            turn_index: req.turn_index,
            outcome: label.to_owned(),
            intent_id,
        })
    }

    /// Checks an `Authorization` header value against the admin token.
    pub fn authorize(&self, authorization: Option<&str>) -> Result<(), ServiceError> {
        let expected = self.cfg.admin_token.as_deref().ok_or(ServiceError::Unauthorized)?;
        let given = authorization
            .and_then(|h| h.strip_prefix("Bearer "))
            .ok_or(ServiceError::Unauthorized)?;
        // Length leaks, contents do not.
        let same = given.len() == expected.len()
            && given.bytes().zip(expected.bytes()).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0;
        if same {
            Ok(())
        } else {
            Err(ServiceError::Unauthorized)
        }
    }

    pub fn list_intents(&self) -> IntentList {
        let snap = self.store.snapshot();
        IntentList {
            version: snap.version,
            intents: snap.iter().map(|r| IntentView::of(r, self.store.hit_count(&r.intent_id))).collect(),
        }
    }

    fn view(&self, intent_id: &str) -> Result<IntentView, ServiceError> {
        let snap = self.store.snapshot();
        let r = snap.get(intent_id).ok_or_else(|| ServiceError::NotFound(format!("intent `{intent_id}`")))?;
        Ok(IntentView::of(r, self.store.hit_count(intent_id)))
    }

    pub fn upsert_intent(&self, def: IntentDefinition) -> Result<IntentView, ServiceError> {
        let id = def.intent_id.clone();
        let tau_before = self.store.snapshot().get(&id).map(|r| r.tau_faq);
        self.store.upsert_intent(def)?;
        let view = self.view(&id)?;
        if tau_before != Some(view.tau_faq) {
            self.tracker.forget_intent(&id);
        }
        self.persist_store()?;
        Ok(view)
    }

    pub fn delete_intent(&self, intent_id: &str) -> Result<(), ServiceError> {
        self.store.delete_intent(intent_id)?;
        self.tracker.forget_intent(intent_id);
        self.persist_store()
    }

    pub fn list_drafts(&self) -> Vec<DraftView> {
        let evo = self.evolution.lock();
        evo.drafts
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let live = evo
                    .by_cluster
                    .iter()
                    .find(|(_, &j)| j == i)
                    .and_then(|(cid, _)| evo.clusters.get(*cid));
                DraftView {
                    draft: d.clone(),
                    cluster_size: live.map(|c| c.size),
                    flagged: d.status == DraftStatus::PendingReview && live.is_none_or(|c| c.flagged),
                }
            })
            .collect()
    }

    /// Turns a draft into a live intent with the reviewer's canned response.
    pub fn activate_draft(&self, draft_id: &str, req: &ActivateRequest) -> Result<IntentView, ServiceError> {
        let mut evo = self.evolution.lock();
        let i = evo
            .drafts
            .iter()
            .position(|d| d.draft_id == draft_id)
            .ok_or_else(|| ServiceError::NotFound(format!("draft `{draft_id}`")))?;
        if evo.drafts[i].status == DraftStatus::Activated {
            return Err(ServiceError::Conflict(format!("draft `{draft_id}` is already active")));
        }
        let mut def = evo.drafts[i].to_definition(&req.canned_response, req.intent_id.as_deref());
        if let Some(name) = &req.display_name {
            def.display_name = name.clone();
        }
        let id = def.intent_id.clone();
        if self.store.snapshot().get(&id).is_some() {
            return Err(ServiceError::Conflict(format!("intent `{id}` already exists")));
        }
        self.store.upsert_intent(def)?;
        evo.drafts[i].status = DraftStatus::Activated;
        evo.drafts[i].canned_response = req.canned_response.clone();
        if let Some(cid) = evo.by_cluster.iter().find(|(_, &j)| j == i).map(|(c, _)| *c) {
            evo.by_cluster.remove(&cid);
            evo.clusters.remove(cid);
        }
        self.persist_drafts(&evo.drafts)?;
        drop(evo);
        self.persist_store()?;
        self.view(&id)
    }

    pub fn thresholds(&self) -> ThresholdList {
        let snap = self.store.snapshot();
        let updates = self.tracker.updates();
        ThresholdList {
            version: snap.version,
            intents: snap
                .iter()
                .map(|r| ThresholdView {
                    intent_id: r.intent_id.clone(),
                    tau_faq: r.tau_faq,
                    window: self.tracker.window(&r.intent_id),
                    history: updates.iter().filter(|u| u.intent_id == r.intent_id).cloned().collect(),
                })
                .collect(),
        }
    }

    pub fn metrics(&self) -> ServiceMetrics {
        let stats = self.stats.lock();
        let latencies: Vec<f64> = stats.latencies.iter().copied().collect();
        let mean = if latencies.is_empty() { 0.0 } else { latencies.iter().sum::<f64>() / latencies.len() as f64 };
        let evo = self.evolution.lock();
        let intent_cache = self.store.cache_stats();
        ServiceMetrics {
            uptime_secs: self.started.elapsed().as_secs_f64(),
            requests: stats.requests,
            errors: stats.errors,
            kinds: stats.kinds.clone(),
            bands: stats.bands.clone(),
            mean_latency_ms: mean,
            latency_p95_ms: percentile(&latencies, 95.0),
            retrieval_calls: stats.retrieval_calls,
            response_cache: stats.response_cache.clone(),
            intent_cache: CacheCounters {
                hits: intent_cache.hits,
                misses: intent_cache.misses,
            },
            feedback_positive: stats.feedback_positive,
            feedback_negative: stats.feedback_negative,
            threshold_updates: self.tracker.updates().len(),
            unhandled_logged: stats.unhandled_logged,
            clusters: evo.clusters.clusters().len(),
            flagged_clusters: evo.clusters.clusters().iter().filter(|c| c.flagged).count(),
            pending_drafts: evo.drafts.iter().filter(|d| d.status == DraftStatus::PendingReview).count(),
            active_sessions: self.active_sessions(),
            store_version: self.store.version(),
        }
    }
}

async fn blocking<T, F>(f: F) -> Result<T, ServiceError>
where
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

fn bearer(headers: &HeaderMap) -> Option<String> {
    headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).map(str::to_owned)
}

type Svc = State<Arc<RouterService>>;

async fn chat(State(svc): Svc, Json(req): Json<ChatRequest>) -> Result<Json<ChatResponse>, ServiceError> {
    blocking(move || svc.handle_chat(&req)).await.map(Json)
}

async fn feedback(State(svc): Svc, Json(req): Json<FeedbackRequest>) -> Result<Json<FeedbackAck>, ServiceError> {
    blocking(move || svc.handle_feedback(&req)).await.map(Json)
}

async fn list_intents(State(svc): Svc, headers: HeaderMap) -> Result<Json<IntentList>, ServiceError> {
    svc.authorize(bearer(&headers).as_deref())?;
    Ok(Json(svc.list_intents()))
}

async fn upsert_intent(
    State(svc): Svc,
    headers: HeaderMap,
    Json(def): Json<IntentDefinition>,
) -> Result<Json<IntentView>, ServiceError> {
    svc.authorize(bearer(&headers).as_deref())?;
    blocking(move || svc.upsert_intent(def)).await.map(Json)
}

#[derive(Deserialize)]
struct DeleteParams {
    intent_id: String,
}

async fn delete_intent(
    State(svc): Svc,
    headers: HeaderMap,
    Query(p): Query<DeleteParams>,
) -> Result<StatusCode, ServiceError> {
    svc.authorize(bearer(&headers).as_deref())?;
    blocking(move || svc.delete_intent(&p.intent_id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn list_drafts(State(svc): Svc, headers: HeaderMap) -> Result<Json<Vec<DraftView>>, ServiceError> {
    svc.authorize(bearer(&headers).as_deref())?;
    Ok(Json(svc.list_drafts()))
}

async fn activate_draft(
    State(svc): Svc,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<ActivateRequest>,
) -> Result<Json<IntentView>, ServiceError> {
    svc.authorize(bearer(&headers).as_deref())?;
    blocking(move || svc.activate_draft(&id, &req)).await.map(Json)
}

async fn thresholds(State(svc): Svc, headers: HeaderMap) -> Result<Json<ThresholdList>, ServiceError> {
    svc.authorize(bearer(&headers).as_deref())?;
    Ok(Json(svc.thresholds()))
}

async fn metrics(State(svc): Svc, headers: HeaderMap) -> Result<Json<ServiceMetrics>, ServiceError> {
    svc.authorize(bearer(&headers).as_deref())?;
    Ok(Json(svc.metrics()))
}

pub fn router(service: Arc<RouterService>) -> Router {
    Router::new()
        .route("/v1/chat", post(chat))
        .route("/v1/feedback", post(feedback))
        .route("/v1/admin/intents", get(list_intents).post(upsert_intent).delete(delete_intent))
        .route("/v1/admin/drafts", get(list_drafts))
        .route("/v1/admin/drafts/:id/activate", post(activate_draft))
        .route("/v1/admin/thresholds", get(thresholds))
        .route("/v1/metrics", get(metrics))
        .with_state(service)
}

/// Serves until ctrl-c, sweeping idle sessions once a minute.
pub async fn serve(service: Arc<RouterService>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    let sweeper = Arc::clone(&service);
    let sweep = tokio::spawn(async move {
        let mut tick = tokio::time::interval(SWEEP_EVERY);
        loop {
            tick.tick().await;
            let n = sweeper.evict_idle_at(Instant::now());
            if n > 0 {
                tracing::debug!(evicted = n, "idle sessions evicted");
            }
        }
    });
    let result = axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await;
    sweep.abort();
    result
}

/// Where a service with `data_dir` keeps its files.
pub fn data_files(dir: &Path) -> [PathBuf; 3] {
    [dir.join(INTENTS_FILE), dir.join(UNHANDLED_FILE), dir.join(DRAFTS_FILE)]
}
