//! Per-session dialogue history and the contextual query embedding.
//!
//! History aggregation is a recency-decayed sum over the sliding window,
//! most recent turn first with weight `γ`, the one before `γ²`, and so on.
//! The contextual query is a gated convex blend: history only contributes
//! when it is at least `relevance_gate` similar to the query, so a topic
//! switch starts from the bare query again.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_similarity, Embedding, EmbeddingError, EmbeddingProvider};
use crate::intent_store::now_ms;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextConfig {
    pub window_length: usize,
    pub recency_decay: f64,
    pub relevance_gate: f64,
    pub blend_weight: f64,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            window_length: 10,
            recency_decay: 0.7,
            relevance_gate: 0.3,
            blend_weight: 0.7,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContextError {
    #[error("invalid context config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

impl ContextConfig {
    pub fn validate(&self) -> Result<(), ContextError> {
        let bad = |m: &str| Err(ContextError::InvalidConfig(m.to_owned()));
        if self.window_length == 0 {
            return bad("window_length must be positive");
        }
        if !(self.recency_decay > 0.0 && self.recency_decay <= 1.0) {
            return bad("recency_decay must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.relevance_gate) {
            return bad("relevance_gate must be in [0, 1)");
        }
        if !(self.blend_weight > 0.0 && self.blend_weight <= 1.0) {
            return bad("blend_weight must be in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Turn {
    pub query_text: String,
    pub response_text: String,
    pub query_embedding: Embedding,
    /// Embedding of `query_text + " " + response_text`.
    pub turn_embedding: Embedding,
    pub turn_index: u64,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionContext {
    pub session_id: String,
    window: VecDeque<Turn>,
    aggregate: Option<Embedding>,
    next_turn_index: u64,
}

/// `normalize(Σ γ^i · turn_i)` with `i = 1` for the newest turn. `turns` is
/// ordered oldest first. If the weighted sum cancels out (possible only with
/// signed vectors) the newest turn is used.
pub fn aggregate_history<'a, I>(turns: I, cfg: &ContextConfig) -> Result<Option<Embedding>, EmbeddingError>
where
    I: IntoIterator<Item = &'a Embedding>,
    I::IntoIter: DoubleEndedIterator,
{
    let newest_first: Vec<&Embedding> = turns.into_iter().rev().collect();
    let Some(latest) = newest_first.first() else {
        return Ok(None);
    };
    let mut weight = 1.0;
    let terms = newest_first.iter().map(|e| {
        weight *= cfg.recency_decay;
        (weight, *e)
    });
    match Embedding::weighted_sum(terms) {
        Ok(h) => Ok(Some(h)),
        Err(EmbeddingError::ZeroVector) => Ok(Some((*latest).clone())),
        Err(e) => Err(e),
    }
}

/// The contextual query embedding. Identity without history or when the
/// history is less than `relevance_gate` similar to the query.
pub fn contextualize(
    query: &Embedding,
    history: Option<&Embedding>,
    cfg: &ContextConfig,
) -> Result<Embedding, EmbeddingError> {
    let Some(h) = history else {
        return Ok(query.clone());
    };
    if cosine_similarity(query, h)? < cfg.relevance_gate {
        return Ok(query.clone());
    }
    let a = cfg.blend_weight;
    match Embedding::weighted_sum([(a, query), (1.0 - a, h)]) {
        Err(EmbeddingError::ZeroVector) => Ok(query.clone()),
        other => other,
    }
}

impl SessionContext {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            window: VecDeque::new(),
            aggregate: None,
            next_turn_index: 0,
        }
    }

    pub fn window(&self) -> &VecDeque<Turn> {
        &self.window
    }

    pub fn aggregate(&self) -> Option<&Embedding> {
        self.aggregate.as_ref()
    }

    pub fn next_turn_index(&self) -> u64 {
        self.next_turn_index
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn turn(&self, turn_index: u64) -> Option<&Turn> {
        self.window.iter().find(|t| t.turn_index == turn_index)
    }

    /// Contextual embedding for `query` given this session's history.
    pub fn contextualize(&self, query: &Embedding, cfg: &ContextConfig) -> Result<Embedding, EmbeddingError> {
        contextualize(query, self.aggregate.as_ref(), cfg)
    }

    pub fn append_turn(
        &mut self,
        provider: &dyn EmbeddingProvider,
        query_text: &str,
        response_text: &str,
        cfg: &ContextConfig,
    ) -> Result<&Turn, EmbeddingError> {
        if response_text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let query_embedding = provider.embed(query_text)?;
        self.append_turn_with_embedding(provider, query_text, query_embedding, response_text, cfg)
    }

    /// Same as [`append_turn`](Self::append_turn) when the caller already
    /// embedded the query.
    pub fn append_turn_with_embedding(
        &mut self,
        provider: &dyn EmbeddingProvider,
        query_text: &str,
        query_embedding: Embedding,
        response_text: &str,
        cfg: &ContextConfig,
    ) -> Result<&Turn, EmbeddingError> {
        if query_text.trim().is_empty() || response_text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let turn_embedding = provider.embed(&format!("{query_text} {response_text}"))?;
        let turn = Turn {
            query_text: query_text.to_owned(),
            response_text: response_text.to_owned(),
            query_embedding,
            turn_embedding,
            turn_index: self.next_turn_index,
            timestamp: now_ms(),
        };
        self.push(turn, cfg)?;
        Ok(self.window.back().expect("just pushed"))
    }

    fn push(&mut self, turn: Turn, cfg: &ContextConfig) -> Result<(), EmbeddingError> {
        self.next_turn_index = turn.turn_index + 1;
        self.window.push_back(turn);
        while self.window.len() > cfg.window_length.max(1) {
            self.window.pop_front();
        }
        self.aggregate = aggregate_history(self.window.iter().map(|t| &t.turn_embedding), cfg)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;
    use proptest::prelude::*;

    fn v(values: &[f64]) -> Embedding {
        Embedding::normalize(values.to_vec()).unwrap()
    }

    fn close(a: &Embedding, b: &[f64]) {
        for (x, y) in a.values().iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{:?} vs {:?}", a.values(), b);
        }
    }

    #[test]
    fn default_config_is_valid() {
        ContextConfig::default().validate().unwrap();
        let mut c = ContextConfig::default();
        c.relevance_gate = 1.0;
        assert!(c.validate().is_err());
        c = ContextConfig { window_length: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_history_is_absent() {
        let empty: Vec<Embedding> = vec![];
        assert!(aggregate_history(&empty, &ContextConfig::default()).unwrap().is_none());
    }

    #[test]
    fn single_turn_history_is_that_turn() {
        let e = v(&[0.3, 0.4, 1.2]);
        let h = aggregate_history([&e], &ContextConfig::default()).unwrap().unwrap();
        close(&h, e.values());
    }

    #[test]
    fn two_turn_history_matches_hand_oracle() {
        // normalize(0.5·e2 + 0.25·e1) with e1=(1,0) older, e2=(0,1) newer.
        let cfg = ContextConfig { recency_decay: 0.5, ..Default::default() };
        let e1 = v(&[1.0, 0.0]);
        let e2 = v(&[0.0, 1.0]);
        let h = aggregate_history([&e1, &e2], &cfg).unwrap().unwrap();
        close(&h, &[0.4472135954999579, 0.8944271909999159]);
    }

    #[test]
    fn contextualize_without_history_is_identity() {
        let q = v(&[1.0, 2.0]);
        assert_eq!(contextualize(&q, None, &ContextConfig::default()).unwrap(), q);
    }

    #[test]
    fn gate_rejects_orthogonal_history() {
        let q = v(&[1.0, 0.0]);
        let h = v(&[0.0, 1.0]);
        assert_eq!(contextualize(&q, Some(&h), &ContextConfig::default()).unwrap(), q);
    }

    #[test]
    fn blend_matches_hand_oracle() {
        // normalize(0.7·(1,0) + 0.3·(0.6,0.8)) = (0.88,0.24)/‖·‖
        let q = v(&[1.0, 0.0]);
        let h = v(&[0.6, 0.8]);
        let out = contextualize(&q, Some(&h), &ContextConfig::default()).unwrap();
        close(&out, &[0.9647638212377322, 0.2631174057921088]);
    }

    #[test]
    fn contextualize_rejects_dimension_mismatch() {
        let q = v(&[1.0, 0.0]);
        let h = v(&[1.0, 0.0, 0.0]);
        assert!(matches!(
            contextualize(&q, Some(&h), &ContextConfig::default()),
            Err(EmbeddingError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn first_turn_sets_aggregate_to_turn_embedding() {
        let p = HashEmbedder::default();
        let cfg = ContextConfig::default();
        let mut s = SessionContext::new("s");
        assert!(s.aggregate().is_none());
        let te = s.append_turn(&p, "reset my password", "Use the link.", &cfg).unwrap().turn_embedding.clone();
        assert_eq!(s.len(), 1);
        close(s.aggregate().unwrap(), te.values());
    }

    #[test]
    fn window_evicts_oldest() {
        let p = HashEmbedder::default();
        let cfg = ContextConfig::default();
        let mut s = SessionContext::new("s");
        for i in 0..11 {
            s.append_turn(&p, &format!("question {i}"), "answer", &cfg).unwrap();
        }
        assert_eq!(s.len(), 10);
        assert_eq!(s.window().front().unwrap().turn_index, 1);
        assert_eq!(s.next_turn_index(), 11);
    }

    #[test]
    fn empty_query_is_rejected() {
        let p = HashEmbedder::default();
        let mut s = SessionContext::new("s");
        assert_eq!(
            s.append_turn(&p, "  ", "answer", &ContextConfig::default()).unwrap_err(),
            EmbeddingError::EmptyText
        );
        assert!(s.is_empty());
    }

    #[test]
    fn same_transcript_same_context() {
        let p = HashEmbedder::default();
        let cfg = ContextConfig::default();
        let run = || {
            let mut s = SessionContext::new("s");
            let mut out = Vec::new();
            for (q, r) in [("open a ticket", "Done."), ("what about it", "Sure."), ("and billing", "Ok.")] {
                let eq = p.embed(q).unwrap();
                out.push(s.contextualize(&eq, &cfg).unwrap());
                s.append_turn(&p, q, r, &cfg).unwrap();
            }
            out
        };
        assert_eq!(run(), run());
    }

    fn unit(dim: usize) -> impl Strategy<Value = Embedding> {
        proptest::collection::vec(-1.0f64..1.0, dim)
            .prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
            .prop_map(|v| Embedding::normalize(v).unwrap())
    }

    proptest! {
        #[test]
        fn window_never_exceeds_bound(n in 1usize..6, texts in proptest::collection::vec("[a-z]{1,8}( [a-z]{1,8}){0,3}", 0..20)) {
            let p = HashEmbedder::new(16).unwrap();
            let cfg = ContextConfig { window_length: n, ..Default::default() };
            let mut s = SessionContext::new("s");
            for t in &texts {
                s.append_turn(&p, t, "ok", &cfg).unwrap();
                prop_assert!(s.len() <= n);
                prop_assert!(s.window().iter().zip(s.window().iter().skip(1)).all(|(a, b)| a.turn_index < b.turn_index));
            }
            prop_assert_eq!(s.aggregate().is_none(), s.is_empty());
        }

        #[test]
        fn contextualize_output_is_unit_norm(q in unit(6), h in unit(6), gate in 0.0f64..0.99, a in 0.01f64..=1.0) {
            let cfg = ContextConfig { relevance_gate: gate, blend_weight: a, ..Default::default() };
            let out = contextualize(&q, Some(&h), &cfg).unwrap();
            prop_assert!((out.norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn larger_alpha_pulls_toward_query(q in unit(5), h in unit(5), a1 in 0.01f64..=1.0, a2 in 0.01f64..=1.0) {
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let mk = |a| ContextConfig { relevance_gate: 0.0, blend_weight: a, ..Default::default() };
            prop_assume!(cosine_similarity(&q, &h).unwrap() >= 0.0);
            let c_lo = cosine_similarity(&contextualize(&q, Some(&h), &mk(lo)).unwrap(), &q).unwrap();
            let c_hi = cosine_similarity(&contextualize(&q, Some(&h), &mk(hi)).unwrap(), &q).unwrap();
            prop_assert!(c_hi >= c_lo - 1e-12);
        }
    }
}
