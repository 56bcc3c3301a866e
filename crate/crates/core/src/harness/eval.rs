//! Batch replay of a corpus through one routing mode.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, CorpusItem};
use super::HarnessError;
use crate::classifier::Classifier;
use crate::context_manager::{ContextConfig, SessionContext};
use crate::embedding::EmbeddingProvider;
use crate::feedback::{FeedbackConfig, FeedbackTracker, Polarity, ThresholdUpdate};
use crate::intent_store::IntentStore;
use crate::metrics::{is_correct, summarize, Baseline, EvalRecord, MetricsReport, CANNED_BASELINE};
use crate::responder::{Blender, ReferenceBlender, Responder, ResponseKind, RoutingMode};
use crate::retrieval::{AnswerGenerator, DocumentIndex, ExtractiveGenerator, DEFAULT_TOP_K};

/// Everything a replay needs. Cheap to clone.
#[derive(Clone)]
pub struct EvalEnv {
    pub store: Arc<IntentStore>,
    pub index: Arc<DocumentIndex>,
    pub provider: Arc<dyn EmbeddingProvider>,
    pub generator: Arc<dyn AnswerGenerator>,
    pub blender: Arc<dyn Blender>,
    pub context: ContextConfig,
    pub top_k: usize,
}

impl EvalEnv {
    /// Reference generator and blender over the given store and index.
    pub fn reference(store: Arc<IntentStore>, index: Arc<DocumentIndex>) -> Self {
        let provider = Arc::clone(store.provider());
        Self {
            generator: Arc::new(ExtractiveGenerator::new(Arc::clone(&provider))),
            blender: Arc::new(ReferenceBlender),
            provider,
            store,
            index,
            context: ContextConfig::default(),
            top_k: DEFAULT_TOP_K,
        }
    }

    /// Configured store, index, generator and blender.
    pub fn from_components(c: crate::service::Components, cfg: &crate::config::AppConfig) -> Self {
        Self {
            provider: Arc::clone(c.store.provider()),
            store: c.store,
            index: c.index,
            generator: c.generator,
            blender: c.blender,
            context: cfg.context.clone(),
            top_k: cfg.retrieval.top_k,
        }
    }

    /// Bundled demo intents and knowledge base with the reference providers.
    pub fn demo() -> Result<Self, HarnessError> {
        let store = crate::demo::demo_store().map_err(|e| HarnessError::Setup(e.to_string()))?;
        let index = crate::demo::demo_index().map_err(|e| HarnessError::Setup(e.to_string()))?;
        Ok(Self::reference(Arc::new(store), Arc::new(index)))
    }

    pub fn responder(&self, mode: RoutingMode, track_hits: bool) -> Responder {
        Responder::new(
            Classifier::new(Arc::clone(&self.provider), self.context.clone()),
            Arc::clone(&self.generator),
            Arc::clone(&self.blender),
        )
        .with_mode(mode)
        .with_top_k(self.top_k)
        .with_hit_tracking(track_hits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub workers: usize,
    /// Rate every answer (thumbs up when correct, down otherwise) and let
    /// the thresholds move. Off by default, which keeps the store untouched.
    pub with_feedback: bool,
    pub feedback: FeedbackConfig,
    pub baseline: Baseline,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            workers: 4,
            with_feedback: false,
            feedback: FeedbackConfig::default(),
            baseline: CANNED_BASELINE,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutcome {
    pub mode: RoutingMode,
    pub workers: usize,
    pub report: MetricsReport,
    pub records: Vec<EvalRecord>,
    pub threshold_updates: Vec<ThresholdUpdate>,
}

impl EvalOutcome {
    /// Everything but wall-clock latency, for replay comparisons.
    pub fn fingerprint(&self) -> Vec<(String, String, Option<ResponseKind>, bool)> {
        self.records
            .iter()
            .map(|r| (r.query_id.clone(), r.response_text.clone(), r.response_kind, r.resolved))
            .collect()
    }
}

fn replay_session(
    items: &[&CorpusItem],
    responder: &Responder,
    env: &EvalEnv,
    tracker: Option<&FeedbackTracker>,
) -> Result<Vec<EvalRecord>, HarnessError> {
    let mut session = SessionContext::new(items[0].session_id.clone());
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let started = Instant::now();
        let result = responder.respond(&item.query_text, &mut session, env.store.as_ref(), &env.index);
        let elapsed = started.elapsed().as_secs_f64() * 1_000.0;
        let mut record = EvalRecord {
            query_id: item.query_id.clone(),
            category: item.category,
            ground_truth_text: item.ground_truth_text.clone(),
            response_text: String::new(),
            response_kind: None,
            latency_ms: elapsed,
            session_id: item.session_id.clone(),
            turn_index: item.turn_index,
            resolved: false,
            retrieval_calls: 0,
            error: None,
        };
        let mut turn = None;
        match result {
            Ok(outcome) => {
                let r = outcome.response;
                record.response_text = r.text;
                record.response_kind = Some(r.kind);
                record.latency_ms = r.latency_ms;
                record.retrieval_calls = r.retrieval_calls;
                turn = Some((r.turn_index, r.intent_id, r.band));
            }
            Err(e) => record.error = Some(e.to_string()),
        }
        record.resolved = is_correct(&record, env.provider.as_ref())?;
        if let (Some(tracker), Some((turn_index, intent, band))) = (tracker, turn) {
            let sid = &session.session_id;
            tracker.register_interaction(sid, turn_index, intent.as_deref(), band, &env.store);
            let polarity = if record.resolved { Polarity::Positive } else { Polarity::Negative };
            // Ratings on a just-closed window are simply stale.
            let _ = tracker.record_feedback(sid, turn_index, polarity);
        }
        out.push(record);
    }
    Ok(out)
}

/// Replays every session of `corpus` through `mode`. Sessions run in
/// parallel on `options.workers` threads; turns within a session run in
/// order. Per-query failures are recorded as unresolved, not raised.
pub fn run_eval(
    corpus: &Corpus,
    mode: RoutingMode,
    env: &EvalEnv,
    options: &EvalOptions,
) -> Result<EvalOutcome, HarnessError> {
    let workers = options.workers.max(1);
    let responder = env.responder(mode, options.with_feedback);
    let tracker = options.with_feedback.then(|| FeedbackTracker::new(options.feedback.clone()));
    let sessions = corpus.sessions();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::Setup(e.to_string()))?;
    let per_session: Vec<Result<Vec<EvalRecord>, HarnessError>> = pool.install(|| {
        sessions
            .par_iter()
            .map(|s| replay_session(s, &responder, env, tracker.as_ref()))
            .collect()
    });
    let position: HashMap<&str, usize> =
        corpus.items.iter().enumerate().map(|(i, item)| (item.query_id.as_str(), i)).collect();
    let mut records = Vec::with_capacity(corpus.len());
    for r in per_session {
        records.extend(r?);
    }
    records.sort_by_key(|r| position.get(r.query_id.as_str()).copied().unwrap_or(usize::MAX));
    let report = summarize(&records, env.provider.as_ref(), options.baseline)?;
    Ok(EvalOutcome {
        mode,
        workers,
        report,
        records,
        threshold_updates: tracker.map(|t| t.updates()).unwrap_or_default(),
    })
}
