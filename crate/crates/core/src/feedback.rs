//! Feedback windows, threshold retuning and intent evolution.
//!
//! Every answered turn that matched an intent counts as one interaction in
//! that intent's window. Thumbs up/down on those turns fill the positive and
//! negative counters. Once a window holds `window_size` interactions it is
//! closed: `tau' = clamp(tau + λ(NFR − PFR), tau_min, tau_max)` is written
//! to the store and the window starts over.
//!
//! The window closes as soon as its `window_size`-th interaction is
//! registered. Ratings that arrive for turns of an already closed window are
//! reported as stale and not counted.
//!
//! Out-of-domain queries go to a [`ClusterLog`]. Clusters that reach `K`
//! members are flagged and can be turned into [`IntentDraft`]s for review.

use std::collections::{HashMap, VecDeque};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::Band;
use crate::embedding::{cosine_similarity, Embedding, EmbeddingError};
use crate::intent_store::{now_ms, IntentDefinition, IntentStore, StoreError, DEFAULT_TAU_FAQ, TAU_OOD};

const MAX_TRACKED_TURNS: usize = 100_000;
const MAX_RECLUSTER_STEPS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackConfig {
    pub lambda: f64,
    pub window_size: u64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub cluster_similarity: f64,
    pub cluster_min_size: usize,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            window_size: 100,
            tau_min: 0.55,
            tau_max: 0.98,
            cluster_similarity: 0.8,
            cluster_min_size: 5,
        }
    }
}

impl FeedbackConfig {
    pub fn validate(&self) -> Result<(), FeedbackError> {
        let bad = |m: String| Err(FeedbackError::InvalidConfig(m));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.window_size == 0 {
            return bad("window_size must be positive".into());
        }
        if !(self.tau_min > TAU_OOD && self.tau_min <= self.tau_max && self.tau_max < 1.0) {
            return bad(format!(
                "need {TAU_OOD} < tau_min <= tau_max < 1, got [{}, {}]",
                self.tau_min, self.tau_max
            ));
        }
        if !(self.cluster_similarity > 0.0 && self.cluster_similarity <= 1.0) {
            return bad("cluster_similarity must be in (0, 1]".into());
        }
        if self.cluster_min_size == 0 {
            return bad("cluster_min_size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("unknown turn {turn_index} in session `{session_id}`")]
    UnknownTurn { session_id: String, turn_index: u64 },
    #[error("window has no interactions")]
    EmptyWindow,
    #[error("cluster {0} is not flagged")]
    ClusterNotFlagged(u64),
    #[error("unknown cluster {0}")]
    UnknownCluster(u64),
    #[error("invalid feedback config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub session_id: String,
    pub turn_index: u64,
    pub intent_id: Option<String>,
    pub polarity: Polarity,
    pub band: Band,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackWindow {
    pub intent_id: String,
    pub window_size: u64,
    pub total_queries: u64,
    pub positive_count: u64,
    pub negative_count: u64,
    /// Number of windows closed before this one.
    pub epoch: u64,
    /// Rephrased follow-ups on this intent. Logged only, no rate weight.
    pub implicit_refinements: u64,
}

impl FeedbackWindow {
    pub fn new(intent_id: impl Into<String>, window_size: u64) -> Self {
        Self {
            intent_id: intent_id.into(),
            window_size,
            total_queries: 0,
            positive_count: 0,
            negative_count: 0,
            epoch: 0,
            implicit_refinements: 0,
        }
    }

    pub fn is_full(&self) -> bool {
        self.total_queries >= self.window_size
    }

    fn reset(&mut self) {
        self.total_queries = 0;
        self.positive_count = 0;
        self.negative_count = 0;
        self.implicit_refinements = 0;
        self.epoch += 1;
    }
}

/// `(NFR, PFR)` = `(negative, positive) / total_queries`.
pub fn compute_rates(window: &FeedbackWindow) -> Result<(f64, f64), FeedbackError> {
    if window.total_queries == 0 {
        return Err(FeedbackError::EmptyWindow);
    }
    let total = window.total_queries as f64;
    Ok((window.negative_count as f64 / total, window.positive_count as f64 / total))
}

pub fn next_threshold(tau: f64, nfr: f64, pfr: f64, cfg: &FeedbackConfig) -> f64 {
    (tau + cfg.lambda * (nfr - pfr)).clamp(cfg.tau_min, cfg.tau_max)
}

/// Applies the update rule to the stored threshold and returns the new value.
pub fn apply_threshold_update(
    intent_id: &str,
    nfr: f64,
    pfr: f64,
    cfg: &FeedbackConfig,
    store: &IntentStore,
) -> Result<f64, FeedbackError> {
    Ok(store.update_tau_faq(intent_id, |tau| next_threshold(tau, nfr, pfr, cfg))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdUpdate {
    pub intent_id: String,
    pub epoch: u64,
    pub total_queries: u64,
    pub nfr: f64,
    pub pfr: f64,
    pub old_tau: f64,
    pub new_tau: f64,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeedbackOutcome {
    /// Counted into the intent's current window.
    Counted { intent_id: String },
    /// The turn was already rated.
    Duplicate,
    /// The turn's window closed before the rating arrived.
    Stale,
    /// The turn matched no intent (out-of-domain answer).
    NoIntent,
}

#[derive(Debug, Clone)]
struct TrackedTurn {
    intent_id: Option<String>,
    band: Band,
    epoch: u64,
    rated: bool,
}

#[derive(Default)]
struct TrackerState {
    windows: HashMap<String, FeedbackWindow>,
    turns: HashMap<(String, u64), TrackedTurn>,
    order: VecDeque<(String, u64)>,
    updates: Vec<ThresholdUpdate>,
    events: u64,
}

/// Thread-safe window bookkeeping. Closing a window and writing the new
/// threshold happen under one lock, so updates for an intent never race.
pub struct FeedbackTracker {
    cfg: FeedbackConfig,
    state: Mutex<TrackerState>,
}

impl FeedbackTracker {
    pub fn new(cfg: FeedbackConfig) -> Self {
        Self {
            cfg,
            state: Mutex::new(TrackerState::default()),
        }
    }

    pub fn config(&self) -> &FeedbackConfig {
        &self.cfg
    }

    /// Registers an answered turn. Turns with an intent count toward that
    /// intent's window, and the interaction that fills the window closes it.
    pub fn register_interaction(
        &self,
        session_id: &str,
        turn_index: u64,
        intent_id: Option<&str>,
        band: Band,
        store: &IntentStore,
    ) -> Option<ThresholdUpdate> {
        let mut st = self.state.lock();
        let mut closed = None;
        let mut epoch = 0;
        if let Some(id) = intent_id {
            let w = st
                .windows
                .entry(id.to_owned())
                .or_insert_with(|| FeedbackWindow::new(id, self.cfg.window_size));
            w.total_queries += 1;
            epoch = w.epoch;
            let full = w.is_full();
            if full {
                closed = self.close(&mut st, id, store);
            }
        }
        let key = (session_id.to_owned(), turn_index);
        let turn = TrackedTurn {
            intent_id: intent_id.map(str::to_owned),
            band,
            epoch,
            rated: false,
        };
        if st.turns.insert(key.clone(), turn).is_none() {
            st.order.push_back(key);
        }
        while st.order.len() > MAX_TRACKED_TURNS {
            if let Some(old) = st.order.pop_front() {
                st.turns.remove(&old);
            }
        }
        closed
    }

    /// Counts a thumbs rating. Each turn takes at most one rating.
    pub fn record_feedback(
        &self,
        session_id: &str,
        turn_index: u64,
        polarity: Polarity,
    ) -> Result<(FeedbackEvent, FeedbackOutcome), FeedbackError> {
        let mut guard = self.state.lock();
        let st = &mut *guard;
        let key = (session_id.to_owned(), turn_index);
        let turn = st.turns.get_mut(&key).ok_or_else(|| FeedbackError::UnknownTurn {
            session_id: session_id.to_owned(),
            turn_index,
        })?;
        let event = FeedbackEvent {
            session_id: session_id.to_owned(),
            turn_index,
            intent_id: turn.intent_id.clone(),
            polarity,
            band: turn.band,
            timestamp: now_ms(),
        };
        if turn.rated {
            return Ok((event, FeedbackOutcome::Duplicate));
        }
        turn.rated = true;
        st.events += 1;
        let (Some(id), epoch) = (turn.intent_id.clone(), turn.epoch) else {
            return Ok((event, FeedbackOutcome::NoIntent));
        };
        let Some(w) = st.windows.get_mut(&id) else {
            return Ok((event, FeedbackOutcome::Stale));
        };
        if w.epoch != epoch {
            return Ok((event, FeedbackOutcome::Stale));
        }
        match polarity {
            Polarity::Positive => w.positive_count += 1,
            Polarity::Negative => w.negative_count += 1,
        }
        Ok((event, FeedbackOutcome::Counted { intent_id: id }))
    }

    /// Logs an implicit refinement signal against the intent's window.
    pub fn record_refinement(&self, intent_id: &str) {
        let mut st = self.state.lock();
        if let Some(w) = st.windows.get_mut(intent_id) {
            w.implicit_refinements += 1;
        }
    }

    /// Closes every window that has reached `window_size`. Only needed after
    /// a config change shrank the window.
    pub fn close_full_windows(&self, store: &IntentStore) -> Vec<ThresholdUpdate> {
        let mut st = self.state.lock();
        let mut full: Vec<String> = st.windows.values().filter(|w| w.is_full()).map(|w| w.intent_id.clone()).collect();
        full.sort();
        full.iter().filter_map(|id| self.close(&mut st, id, store)).collect()
    }

    fn close(&self, st: &mut TrackerState, intent_id: &str, store: &IntentStore) -> Option<ThresholdUpdate> {
        let w = st.windows.get_mut(intent_id)?;
        let (nfr, pfr) = compute_rates(w).ok()?;
        let (epoch, total) = (w.epoch, w.total_queries);
        w.reset();
        let old_tau = store.snapshot().get(intent_id)?.tau_faq;
        match apply_threshold_update(intent_id, nfr, pfr, &self.cfg, store) {
            Ok(new_tau) => {
                let update = ThresholdUpdate {
                    intent_id: intent_id.to_owned(),
                    epoch,
                    total_queries: total,
                    nfr,
                    pfr,
                    old_tau,
                    new_tau,
                    timestamp: now_ms(),
                };
                tracing::info!(intent = intent_id, old_tau, new_tau, nfr, pfr, "threshold updated");
                st.updates.push(update.clone());
                Some(update)
            }
            Err(e) => {
                tracing::warn!(intent = intent_id, error = %e, "threshold update skipped");
                None
            }
        }
    }

    pub fn window(&self, intent_id: &str) -> Option<FeedbackWindow> {
        self.state.lock().windows.get(intent_id).cloned()
    }

    pub fn windows(&self) -> Vec<FeedbackWindow> {
        let mut w: Vec<_> = self.state.lock().windows.values().cloned().collect();
        w.sort_by(|a, b| a.intent_id.cmp(&b.intent_id));
        w
    }

    pub fn updates(&self) -> Vec<ThresholdUpdate> {
        self.state.lock().updates.clone()
    }

    pub fn feedback_events(&self) -> u64 {
        self.state.lock().events
    }

    pub fn forget_intent(&self, intent_id: &str) {
        self.state.lock().windows.remove(intent_id);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMember {
    pub text: String,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnhandledCluster {
    pub cluster_id: u64,
    pub members: Vec<ClusterMember>,
    pub centroid: Embedding,
    pub size: usize,
    pub flagged: bool,
}

impl UnhandledCluster {
    fn refresh(&mut self, min_size: usize) -> Result<(), EmbeddingError> {
        self.size = self.members.len();
        self.flagged = self.size >= min_size;
        if !self.members.is_empty() {
            self.centroid = Embedding::centroid(self.members.iter().map(|m| &m.embedding))?;
        }
        Ok(())
    }
}

/// Incremental nearest-centroid clustering of unresolved queries.
///
/// A query joins the most similar cluster whose centroid is at least
/// `cluster_similarity` away, otherwise it starts a new one. After the
/// centroid moves, members that fell below the bar are ejected and logged
/// again as fresh queries (never back into the cluster that ejected them).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterLog {
    cfg: FeedbackConfig,
    clusters: Vec<UnhandledCluster>,
    next_id: u64,
}

impl ClusterLog {
    pub fn new(cfg: FeedbackConfig) -> Self {
        Self {
            cfg,
            clusters: Vec::new(),
            next_id: 1,
        }
    }

    pub fn clusters(&self) -> &[UnhandledCluster] {
        &self.clusters
    }

    pub fn get(&self, cluster_id: u64) -> Option<&UnhandledCluster> {
        self.clusters.iter().find(|c| c.cluster_id == cluster_id)
    }

    pub fn remove(&mut self, cluster_id: u64) -> Option<UnhandledCluster> {
        let i = self.clusters.iter().position(|c| c.cluster_id == cluster_id)?;
        Some(self.clusters.remove(i))
    }

    /// Adds a query and returns the id of the cluster it ended up in.
    pub fn log_unhandled(&mut self, query_text: &str, embedding: Embedding) -> Result<u64, EmbeddingError> {
        let mut queue = VecDeque::from([(
            ClusterMember {
                text: query_text.to_owned(),
                embedding,
            },
            None,
            true,
        )]);
        let mut home = 0;
        let mut steps = 0;
        while let Some((member, exclude, is_new)) = queue.pop_front() {
            steps += 1;
            let target = if steps > MAX_RECLUSTER_STEPS {
                None
            } else {
                self.nearest(&member.embedding, exclude)?
            };
            let id = match target {
                Some(id) => {
                    let ci = self.index_of(id);
                    let cluster = &mut self.clusters[ci];
                    cluster.members.push(member.clone());
                    cluster.refresh(self.cfg.cluster_min_size)?;
                    for ejected in self.eject_violators(ci)? {
                        queue.push_back((ejected, Some(id), false));
                    }
                    if self.get(id).is_none() {
                        // Everything got ejected; the new member is requeued.
                        continue;
                    }
                    id
                }
                None => self.start_cluster(member.clone())?,
            };
            if is_new || self.get(id).is_some_and(|c| c.members.iter().any(|m| m.text == query_text)) {
                home = id;
            }
        }
        if self.get(home).is_none() {
            home = self
                .clusters
                .iter()
                .find(|c| c.members.iter().any(|m| m.text == query_text))
                .map_or(0, |c| c.cluster_id);
        }
        Ok(home)
    }

    fn index_of(&self, id: u64) -> usize {
        self.clusters.iter().position(|c| c.cluster_id == id).expect("cluster exists")
    }

    fn nearest(&self, e: &Embedding, exclude: Option<u64>) -> Result<Option<u64>, EmbeddingError> {
        let mut best: Option<(u64, f64)> = None;
        for c in &self.clusters {
            if Some(c.cluster_id) == exclude {
                continue;
            }
            let s = cosine_similarity(e, &c.centroid)?;
            if s >= self.cfg.cluster_similarity && best.is_none_or(|(_, b)| s > b) {
                best = Some((c.cluster_id, s));
            }
        }
        Ok(best.map(|b| b.0))
    }

    fn start_cluster(&mut self, member: ClusterMember) -> Result<u64, EmbeddingError> {
        let id = self.next_id;
        self.next_id += 1;
        let mut c = UnhandledCluster {
            cluster_id: id,
            centroid: member.embedding.clone(),
            members: vec![member],
            size: 1,
            flagged: false,
        };
        c.refresh(self.cfg.cluster_min_size)?;
        self.clusters.push(c);
        Ok(id)
    }

    /// Removes members below the similarity bar until the cluster is stable.
    fn eject_violators(&mut self, ci: usize) -> Result<Vec<ClusterMember>, EmbeddingError> {
        let min_sim = self.cfg.cluster_similarity;
        let min_size = self.cfg.cluster_min_size;
        let mut ejected = Vec::new();
        loop {
            let cluster = &mut self.clusters[ci];
            let mut keep = Vec::with_capacity(cluster.members.len());
            let mut out = Vec::new();
            for m in cluster.members.drain(..) {
                if cosine_similarity(&m.embedding, &cluster.centroid)? >= min_sim {
                    keep.push(m);
                } else {
                    out.push(m);
                }
            }
            cluster.members = keep;
            if out.is_empty() {
                break;
            }
            ejected.extend(out);
            if cluster.members.is_empty() {
                self.clusters.remove(ci);
                break;
            }
            cluster.refresh(min_size)?;
        }
        Ok(ejected)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DraftStatus {
    PendingReview,
    Activated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentDraft {
    pub draft_id: String,
    pub cluster_id: u64,
    pub suggested_intent_id: String,
    pub display_name: String,
    pub exemplar_texts: Vec<String>,
    /// Left empty for the reviewer to write.
    pub canned_response: String,
    pub tau_faq: f64,
    pub status: DraftStatus,
    pub created_at: u64,
}

impl IntentDraft {
    /// The store input for activating this draft with the reviewer's
    /// canned response.
    pub fn to_definition(&self, canned_response: &str, intent_id: Option<&str>) -> IntentDefinition {
        IntentDefinition {
            intent_id: intent_id.unwrap_or(&self.suggested_intent_id).to_owned(),
            display_name: self.display_name.clone(),
            exemplar_texts: self.exemplar_texts.clone(),
            canned_response: canned_response.to_owned(),
        }
    }
}

pub fn propose_intent(cluster: &UnhandledCluster) -> Result<IntentDraft, FeedbackError> {
    if !cluster.flagged {
        return Err(FeedbackError::ClusterNotFlagged(cluster.cluster_id));
    }
    Ok(IntentDraft {
        draft_id: format!("draft-{}", cluster.cluster_id),
        cluster_id: cluster.cluster_id,
        suggested_intent_id: format!("proposed_{}", cluster.cluster_id),
        display_name: cluster.members[0].text.clone(),
        exemplar_texts: cluster.members.iter().map(|m| m.text.clone()).collect(),
        canned_response: String::new(),
        tau_faq: DEFAULT_TAU_FAQ,
        status: DraftStatus::PendingReview,
        created_at: now_ms(),
    })
}

/// One line of `unhandled.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnhandledEntry {
    pub session_id: String,
    pub turn_index: u64,
    pub query_text: String,
    pub confidence: f64,
    pub cluster_id: u64,
    pub timestamp: u64,
}
