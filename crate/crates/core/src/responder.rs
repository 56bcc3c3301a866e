//! From classification to final answer.
//!
//! | band          | plan            | kind   |
//! |---------------|-----------------|--------|
//! | FAQ           | canned only     | Canned |
//! | Contextual    | canned + RAG    | Hybrid |
//! | Out-of-domain | RAG only        | Rag    |
//!
//! When one leg of a Contextual answer fails the surviving leg is served
//! (Canned if retrieval fails, Rag if the canned fetch fails). A failed
//! blend also falls back to the canned text. An FAQ answer whose intent
//! vanished before the fetch goes through RAG instead.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{Band, ClassificationResult, Classifier, ClassifyError};
use crate::context_manager::SessionContext;
use crate::embedding::EmbeddingError;
use crate::intent_store::{IntentRecord, IntentStore, IntentStoreSnapshot, TAU_OOD};
use crate::retrieval::{AnswerGenerator, DocumentIndex, RagResponse, RetrievalError, DEFAULT_TOP_K};

pub const CANNED_FALLBACK_TEXT: &str = "Sorry, I don't have an answer for that yet.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseKind {
    Canned,
    Rag,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Baseline: canned answer for any intent match above 0.5, no history,
    /// never retrieves.
    CannedOnly,
    /// Baseline: every query goes through retrieval.
    RagOnly,
    Hybrid,
}

impl std::str::FromStr for RoutingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "canned_only" | "canned" => Ok(Self::CannedOnly),
            "rag_only" | "rag" => Ok(Self::RagOnly),
            "hybrid" => Ok(Self::Hybrid),
            other => Err(format!("unknown mode `{other}` (canned_only, rag_only, hybrid)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ResponderError {
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("no response path available: {0}")]
    Unavailable(String),
}

impl ResponderError {
    pub fn is_empty_text(&self) -> bool {
        matches!(
            self,
            Self::Embedding(EmbeddingError::EmptyText)
                | Self::Classify(ClassifyError::Embedding(EmbeddingError::EmptyText))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoutePlan {
    pub band: Band,
    pub needs_canned: bool,
    pub needs_rag: bool,
    pub blend_confidence: f64,
}

pub fn plan_route(classification: &ClassificationResult) -> RoutePlan {
    let (needs_canned, needs_rag) = match classification.band {
        Band::Faq => (true, false),
        Band::Contextual => (true, true),
        Band::OutOfDomain => (false, true),
    };
    RoutePlan {
        band: classification.band,
        needs_canned,
        needs_rag,
        blend_confidence: classification.banding_confidence(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalResponse {
    pub text: String,
    pub kind: ResponseKind,
    pub intent_id: Option<String>,
    pub sources: Vec<String>,
    pub latency_ms: f64,
    pub turn_index: u64,
    pub band: Band,
    /// Clamped to `[0, 1]`.
    pub confidence: f64,
    /// Index lookups performed for this response (0 or 1).
    pub retrieval_calls: u32,
    /// Canned text came from the intent cache.
    pub cache_hit: bool,
}

#[derive(Debug, Error)]
#[error("blender unavailable: {0}")]
pub struct BlendError(pub String);

pub trait Blender: Send + Sync {
    fn blend(&self, confidence: f64, canned: &str, rag: &RagResponse) -> Result<String, BlendError>;
}

/// Concatenates both answers, heavier weight first, each tagged with its
/// weight: `"[canned weight 0.72] ...\n\n[retrieved weight 0.28] ..."`.
#[derive(Debug, Default, Clone, Copy)]
pub struct ReferenceBlender;

impl Blender for ReferenceBlender {
    fn blend(&self, c: f64, canned: &str, rag: &RagResponse) -> Result<String, BlendError> {
        let canned_part = format!("[canned weight {c:.2}] {canned}");
        let rag_part = format!("[retrieved weight {:.2}] {}", 1.0 - c, rag.text);
        Ok(if 1.0 - c > c {
            format!("{rag_part}\n\n{canned_part}")
        } else {
            format!("{canned_part}\n\n{rag_part}")
        })
    }
}

pub fn blend_instructions(c: f64) -> String {
    format!(
        "Combine the two answers below into one coherent reply. Give the predefined answer \
         weight {c:.2} and the retrieved answer weight {:.2}. Keep every concrete step or fact \
         from the higher-weighted answer and do not add information found in neither.",
        1.0 - c
    )
}

#[derive(Serialize)]
struct BlendRequest<'a> {
    confidence: f64,
    canned_text: &'a str,
    rag_text: &'a str,
    instructions: String,
}

#[derive(Deserialize)]
struct BlendReply {
    text: String,
}

/// Posts `{confidence, canned_text, rag_text, instructions}` and expects
/// `{text}`.
pub struct ExternalBlender {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl ExternalBlender {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, BlendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BlendError(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            client,
        })
    }
}

impl Blender for ExternalBlender {
    fn blend(&self, c: f64, canned: &str, rag: &RagResponse) -> Result<String, BlendError> {
        let body = BlendRequest {
            confidence: c,
            canned_text: canned,
            rag_text: &rag.text,
            instructions: blend_instructions(c),
        };
        let reply: BlendReply = self
            .client
            .post(&self.endpoint)
            .json(&body)
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| BlendError(e.to_string()))?;
        if reply.text.trim().is_empty() {
            return Err(BlendError("empty text".into()));
        }
        Ok(reply.text)
    }
}

/// Where canned answers come from. [`IntentStore`] is the real one; tests
/// substitute failing sources to drive the degradation paths.
pub trait IntentSource: Send + Sync {
    fn snapshot(&self) -> Arc<IntentStoreSnapshot>;

    /// The record plus whether it was a cache hit.
    fn fetch(&self, intent_id: &str) -> Result<(Arc<IntentRecord>, bool), String>;

    fn record_hit(&self, intent_id: &str);
}

impl IntentSource for IntentStore {
    fn snapshot(&self) -> Arc<IntentStoreSnapshot> {
        IntentStore::snapshot(self)
    }

    fn fetch(&self, intent_id: &str) -> Result<(Arc<IntentRecord>, bool), String> {
        self.lookup(intent_id)
            .ok_or_else(|| format!("intent `{intent_id}` not found"))
    }

    fn record_hit(&self, intent_id: &str) {
        IntentStore::record_hit(self, intent_id)
    }
}

#[derive(Debug, Clone)]
pub struct RespondOutcome {
    pub response: FinalResponse,
    pub classification: ClassificationResult,
}

pub struct Responder {
    classifier: Classifier,
    generator: Arc<dyn AnswerGenerator>,
    blender: Arc<dyn Blender>,
    mode: RoutingMode,
    top_k: usize,
    track_hits: bool,
}

impl Responder {
    pub fn new(classifier: Classifier, generator: Arc<dyn AnswerGenerator>, blender: Arc<dyn Blender>) -> Self {
        Self {
            classifier,
            generator,
            blender,
            mode: RoutingMode::Hybrid,
            top_k: DEFAULT_TOP_K,
            track_hits: true,
        }
    }

    pub fn with_mode(mut self, mode: RoutingMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_top_k(mut self, k: usize) -> Self {
        self.top_k = k.max(1);
        self
    }

    /// Whether FAQ/Contextual answers bump the winning intent's hit count.
    pub fn with_hit_tracking(mut self, on: bool) -> Self {
        self.track_hits = on;
        self
    }

    pub fn mode(&self) -> RoutingMode {
        self.mode
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn classify(
        &self,
        query_text: &str,
        session: &SessionContext,
        snapshot: &IntentStoreSnapshot,
    ) -> Result<ClassificationResult, ResponderError> {
        Ok(match self.mode {
            RoutingMode::CannedOnly => {
                let eq = self.classifier.provider().embed(query_text)?;
                self.classifier.classify_embedded(eq.clone(), eq, snapshot)?
            }
            _ => self.classifier.classify(query_text, session, snapshot)?,
        })
    }

    /// Classify, route, generate, and append the turn to `session`.
    pub fn respond(
        &self,
        query_text: &str,
        session: &mut SessionContext,
        intents: &dyn IntentSource,
        index: &DocumentIndex,
    ) -> Result<RespondOutcome, ResponderError> {
        let started = Instant::now();
        let snapshot = intents.snapshot();
        let classification = self.classify(query_text, session, &snapshot)?;
        self.finish(query_text, classification, session, intents, index, started)
    }

    /// Routes a classification computed elsewhere (or pinned by a test).
    pub fn respond_classified(
        &self,
        query_text: &str,
        classification: ClassificationResult,
        session: &mut SessionContext,
        intents: &dyn IntentSource,
        index: &DocumentIndex,
    ) -> Result<RespondOutcome, ResponderError> {
        self.finish(query_text, classification, session, intents, index, Instant::now())
    }

    fn finish(
        &self,
        query_text: &str,
        classification: ClassificationResult,
        session: &mut SessionContext,
        intents: &dyn IntentSource,
        index: &DocumentIndex,
        started: Instant,
    ) -> Result<RespondOutcome, ResponderError> {
        let draft = match self.mode {
            RoutingMode::CannedOnly => self.canned_only(&classification, intents),
            RoutingMode::RagOnly => {
                let mut d = Draft::new(&classification);
                let rag = self.rag(query_text, &classification, index, &mut d)?;
                d.rag(rag);
                d
            }
            RoutingMode::Hybrid => self.hybrid(query_text, &classification, intents, index)?,
        };
        if self.track_hits && classification.band != Band::OutOfDomain {
            if let (Some(id), true) = (&draft.intent_id, draft.used_canned) {
                intents.record_hit(id);
            }
        }
        let cfg = self.classifier.context_config();
        let provider = self.classifier.provider().clone();
        let turn_index = session
            .append_turn_with_embedding(
                provider.as_ref(),
                query_text,
                classification.query_embedding.clone(),
                &draft.text,
                cfg,
            )?
            .turn_index;
        let response = FinalResponse {
            text: draft.text,
            kind: draft.kind,
            intent_id: draft.intent_id,
            sources: draft.sources,
            latency_ms: started.elapsed().as_secs_f64() * 1_000.0,
            turn_index,
            band: classification.band,
            confidence: classification.banding_confidence(),
            retrieval_calls: draft.retrieval_calls,
            cache_hit: draft.cache_hit,
        };
        Ok(RespondOutcome {
            response,
            classification,
        })
    }

    fn canned_only(&self, c: &ClassificationResult, intents: &dyn IntentSource) -> Draft {
        let mut d = Draft::new(c);
        d.kind = ResponseKind::Canned;
        d.text = CANNED_FALLBACK_TEXT.to_owned();
        if c.banding_confidence() > TAU_OOD {
            if let Some(Ok((record, hit))) = c.best_intent_id.as_deref().map(|id| intents.fetch(id)) {
                d.canned(&record, hit);
                return d;
            }
        }
        d.intent_id = None;
        d
    }

    fn hybrid(
        &self,
        query_text: &str,
        c: &ClassificationResult,
        intents: &dyn IntentSource,
        index: &DocumentIndex,
    ) -> Result<Draft, ResponderError> {
        let plan = plan_route(c);
        let mut d = Draft::new(c);
        let canned = if plan.needs_canned {
            c.best_intent_id.as_deref().map(|id| intents.fetch(id)).and_then(Result::ok)
        } else {
            None
        };
        match plan.band {
            Band::Faq => match canned {
                Some((record, hit)) => d.canned(&record, hit),
                None => {
                    let rag = self.rag(query_text, c, index, &mut d)?;
                    d.rag(rag);
                }
            },
            Band::OutOfDomain => {
                let rag = self.rag(query_text, c, index, &mut d)?;
                d.rag(rag);
            }
            Band::Contextual => {
                let rag = self.rag(query_text, c, index, &mut d);
                match (canned, rag) {
                    (Some((record, hit)), Ok(rag)) => {
                        match self.blender.blend(plan.blend_confidence, &record.canned_response, &rag) {
                            Ok(text) => {
                                d.canned(&record, hit);
                                d.kind = ResponseKind::Hybrid;
                                d.text = text;
                                d.sources = rag.sources;
                            }
                            Err(e) => {
                                tracing::warn!(error = %e, "blend failed, serving canned answer");
                                d.canned(&record, hit);
                            }
                        }
                    }
                    (Some((record, hit)), Err(e)) => {
                        tracing::warn!(error = %e, "retrieval failed, serving canned answer");
                        d.canned(&record, hit);
                    }
                    (None, Ok(rag)) => d.rag(rag),
                    (None, Err(e)) => return Err(e),
                }
            }
        }
        Ok(d)
    }

    fn rag(
        &self,
        query_text: &str,
        c: &ClassificationResult,
        index: &DocumentIndex,
        d: &mut Draft,
    ) -> Result<RagResponse, ResponderError> {
        d.retrieval_calls += 1;
        let unavailable = |e: RetrievalError| ResponderError::Unavailable(e.to_string());
        let retrieved = index.retrieve_top_k(&c.context_embedding, self.top_k).map_err(unavailable)?;
        self.generator
            .generate(query_text, &retrieved, index, &c.context_embedding)
            .map_err(unavailable)
    }
}

struct Draft {
    text: String,
    kind: ResponseKind,
    intent_id: Option<String>,
    sources: Vec<String>,
    retrieval_calls: u32,
    cache_hit: bool,
    used_canned: bool,
}

impl Draft {
    fn new(c: &ClassificationResult) -> Self {
        Self {
            text: String::new(),
            kind: ResponseKind::Rag,
            intent_id: c.best_intent_id.clone(),
            sources: Vec::new(),
            retrieval_calls: 0,
            cache_hit: false,
            used_canned: false,
        }
    }

    fn canned(&mut self, record: &IntentRecord, hit: bool) {
        self.text = record.canned_response.clone();
        self.kind = ResponseKind::Canned;
        self.intent_id = Some(record.intent_id.clone());
        self.sources.clear();
        self.cache_hit = hit;
        self.used_canned = true;
    }

    fn rag(&mut self, rag: RagResponse) {
        self.text = rag.text;
        self.kind = ResponseKind::Rag;
        self.sources = rag.sources;
    }
}
