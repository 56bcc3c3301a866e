//! Context-aware intent confidence and band assignment.
//!
//! `classify` embeds the query, folds in session history, scores every
//! intent centroid by cosine and keeps the argmax (ties go to the smallest
//! `intent_id`). The winning intent's own `tau_faq` decides the band.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context_manager::{ContextConfig, SessionContext};
use crate::embedding::{cosine_similarity, Embedding, EmbeddingError, EmbeddingProvider};
use crate::intent_store::{IntentStoreSnapshot, DEFAULT_TAU_FAQ, TAU_OOD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Faq,
    Contextual,
    OutOfDomain,
}

impl Band {
    pub fn as_str(self) -> &'static str {
        match self {
            Band::Faq => "faq",
            Band::Contextual => "contextual",
            Band::OutOfDomain => "out_of_domain",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifyError {
    #[error("invalid thresholds: tau_ood {tau_ood} must be below tau_faq {tau_faq}")]
    InvalidThresholds { tau_faq: f64, tau_ood: f64 },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// FAQ iff `c > tau_faq`, Contextual iff `tau_ood < c <= tau_faq`,
/// otherwise OutOfDomain.
pub fn assign_band(c: f64, tau_faq: f64, tau_ood: f64) -> Result<Band, ClassifyError> {
    if tau_ood >= tau_faq || tau_faq.is_nan() || tau_ood.is_nan() {
        return Err(ClassifyError::InvalidThresholds { tau_faq, tau_ood });
    }
    Ok(if c > tau_faq {
        Band::Faq
    } else if c > tau_ood {
        Band::Contextual
    } else {
        Band::OutOfDomain
    })
}

/// Argmax over scores; equal scores resolve to the smallest key. `BTreeMap`
/// iterates in key order so the first maximum seen wins.
pub fn best_intent(scores: &BTreeMap<String, f64>) -> Option<(&str, f64)> {
    let mut best: Option<(&str, f64)> = None;
    for (id, &s) in scores {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((id.as_str(), s));
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationResult {
    pub best_intent_id: Option<String>,
    /// Raw cosine of the winner, in `[-1, 1]`.
    pub confidence: f64,
    pub band: Band,
    /// Threshold the band was assigned with.
    pub tau_faq: f64,
    pub per_intent_scores: BTreeMap<String, f64>,
    #[serde(skip)]
    pub query_embedding: Embedding,
    #[serde(skip)]
    pub context_embedding: Embedding,
}

impl ClassificationResult {
    /// Confidence clamped to `[0, 1]`, as used for banding and reporting.
    pub fn banding_confidence(&self) -> f64 {
        self.confidence.clamp(0.0, 1.0)
    }
}

#[derive(Clone)]
pub struct Classifier {
    provider: Arc<dyn EmbeddingProvider>,
    context: ContextConfig,
}

impl std::fmt::Debug for Classifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Classifier").field("context", &self.context).finish_non_exhaustive()
    }
}

impl Classifier {
    pub fn new(provider: Arc<dyn EmbeddingProvider>, context: ContextConfig) -> Self {
        Self { provider, context }
    }

    pub fn provider(&self) -> &Arc<dyn EmbeddingProvider> {
        &self.provider
    }

    pub fn context_config(&self) -> &ContextConfig {
        &self.context
    }

    pub fn classify(
        &self,
        query_text: &str,
        session: &SessionContext,
        store: &IntentStoreSnapshot,
    ) -> Result<ClassificationResult, ClassifyError> {
        let eq = self.provider.embed(query_text)?;
        let ctx = session.contextualize(&eq, &self.context)?;
        self.classify_embedded(eq, ctx, store)
    }

    /// Scores an already contextualized query.
    pub fn classify_embedded(
        &self,
        query_embedding: Embedding,
        context_embedding: Embedding,
        store: &IntentStoreSnapshot,
    ) -> Result<ClassificationResult, ClassifyError> {
        let mut scores = BTreeMap::new();
        for record in store.iter() {
            let s = cosine_similarity(&context_embedding, &record.exemplar_embedding)?;
            scores.insert(record.intent_id.clone(), s);
        }
        let (best_intent_id, confidence, tau_faq) = match best_intent(&scores) {
            Some((id, c)) => {
                let tau = store.get(id).map_or(DEFAULT_TAU_FAQ, |r| r.tau_faq);
                (Some(id.to_owned()), c, tau)
            }
            None => (None, 0.0, DEFAULT_TAU_FAQ),
        };
        let band = assign_band(confidence.clamp(0.0, 1.0), tau_faq, store.tau_ood.min(TAU_OOD))?;
        Ok(ClassificationResult {
            best_intent_id,
            confidence,
            band,
            tau_faq,
            per_intent_scores: scores,
            query_embedding,
            context_embedding,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;
    use crate::intent_store::{IntentDefinition, IntentRecord, IntentStore};
    use proptest::prelude::*;

    #[test]
    fn table_six_confidences() {
        assert_eq!(assign_band(0.95, 0.85, 0.5).unwrap(), Band::Faq);
        assert_eq!(assign_band(0.70, 0.85, 0.5).unwrap(), Band::Contextual);
        assert_eq!(assign_band(0.40, 0.85, 0.5).unwrap(), Band::OutOfDomain);
        assert_eq!(assign_band(0.75, 0.85, 0.5).unwrap(), Band::Contextual);
    }

    #[test]
    fn band_edges() {
        assert_eq!(assign_band(0.85, 0.85, 0.5).unwrap(), Band::Contextual);
        assert_eq!(assign_band(0.5, 0.85, 0.5).unwrap(), Band::OutOfDomain);
        assert_eq!(assign_band(0.0, 0.85, 0.5).unwrap(), Band::OutOfDomain);
        assert_eq!(assign_band(1.0, 0.85, 0.5).unwrap(), Band::Faq);
    }

    #[test]
    fn inverted_thresholds_are_rejected() {
        assert!(matches!(assign_band(0.7, 0.5, 0.5), Err(ClassifyError::InvalidThresholds { .. })));
        assert!(assign_band(0.7, 0.4, 0.5).is_err());
    }

    #[test]
    fn ties_go_to_smallest_id() {
        let scores: BTreeMap<String, f64> =
            [("b".to_owned(), 0.7), ("a".to_owned(), 0.7), ("c".to_owned(), 0.2)].into();
        assert_eq!(best_intent(&scores), Some(("a", 0.7)));
    }

    fn classifier() -> Classifier {
        Classifier::new(Arc::new(HashEmbedder::default()), ContextConfig::default())
    }

    #[test]
    fn empty_store_is_out_of_domain() {
        let r = classifier()
            .classify("anything at all", &SessionContext::new("s"), &IntentStoreSnapshot::default())
            .unwrap();
        assert_eq!(r.best_intent_id, None);
        assert_eq!(r.confidence, 0.0);
        assert_eq!(r.band, Band::OutOfDomain);
    }

    #[test]
    fn blank_query_is_empty_text() {
        let err = classifier()
            .classify(" \t", &SessionContext::new("s"), &IntentStoreSnapshot::default())
            .unwrap_err();
        assert_eq!(err, ClassifyError::Embedding(EmbeddingError::EmptyText));
    }

    #[test]
    fn winner_uses_its_own_threshold() {
        let store = IntentStore::new(Arc::new(HashEmbedder::default()));
        store
            .upsert_intent(IntentDefinition {
                intent_id: "password_reset".into(),
                display_name: String::new(),
                exemplar_texts: vec!["how do i reset my password".into()],
                canned_response: "Use the Forgot Password link.".into(),
            })
            .unwrap();
        let c = classifier();
        let s = SessionContext::new("s");
        let r = c.classify("how do i reset my password", &s, &store.snapshot()).unwrap();
        assert_eq!(r.band, Band::Faq);
        assert!((r.confidence - 1.0).abs() < 1e-9);
        store.update_tau_faq("password_reset", |_| 0.98).unwrap();
        let r = c.classify("reset my password", &s, &store.snapshot()).unwrap();
        assert_eq!(r.tau_faq, 0.98);
        assert_eq!(r.band, assign_band(r.confidence, 0.98, 0.5).unwrap());
    }

    #[test]
    fn empty_session_equals_context_free_scoring() {
        let store = crate::demo::demo_store().unwrap();
        let c = classifier();
        let q = "how can i download my invoice";
        let a = c.classify(q, &SessionContext::new("s"), &store.snapshot()).unwrap();
        let eq = c.provider().embed(q).unwrap();
        let b = c.classify_embedded(eq.clone(), eq, &store.snapshot()).unwrap();
        assert_eq!(a, b);
    }

    fn record(id: String, v: Vec<f64>) -> IntentRecord {
        IntentRecord {
            intent_id: id.clone(),
            display_name: id,
            exemplar_texts: vec!["x".into()],
            exemplar_embedding: Embedding::normalize(v).unwrap(),
            canned_response: "ok".into(),
            tau_faq: DEFAULT_TAU_FAQ,
            created_at: 0,
            updated_at: 0,
            hit_count: 0,
        }
    }

    proptest! {
        #[test]
        fn bands_partition_unit_interval(c in 0.0f64..=1.0, tau_faq in 0.51f64..=0.98) {
            let in_faq = c > tau_faq;
            let in_ctx = c > 0.5 && c <= tau_faq;
            let in_ood = c <= 0.5;
            prop_assert_eq!(u8::from(in_faq) + u8::from(in_ctx) + u8::from(in_ood), 1);
            let expected = if in_faq { Band::Faq } else if in_ctx { Band::Contextual } else { Band::OutOfDomain };
            prop_assert_eq!(assign_band(c, tau_faq, 0.5).unwrap(), expected);
        }

        #[test]
        fn argmax_invariant_under_positive_scaling(
            scores in proptest::collection::btree_map("[a-e]{1,3}", -1.0f64..1.0, 1..10),
            k in 0.01f64..100.0,
        ) {
            let scaled: BTreeMap<String, f64> = scores.iter().map(|(i, s)| (i.clone(), s * k)).collect();
            prop_assert_eq!(best_intent(&scores).map(|b| b.0), best_intent(&scaled).map(|b| b.0));
        }

        #[test]
        fn raising_threshold_shrinks_faq_set(c in 0.0f64..=1.0, t1 in 0.51f64..=0.98, t2 in 0.51f64..=0.98) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            if assign_band(c, hi, 0.5).unwrap() == Band::Faq {
                prop_assert_eq!(assign_band(c, lo, 0.5).unwrap(), Band::Faq);
            }
        }

        #[test]
        fn classify_matches_brute_force(
            vecs in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 8), 1..6),
            q in proptest::collection::vec(-1.0f64..1.0, 8),
        ) {
            prop_assume!(q.iter().any(|x| x.abs() > 1e-3));
            prop_assume!(vecs.iter().all(|v| v.iter().any(|x| x.abs() > 1e-3)));
            let records: Vec<_> = vecs.iter().enumerate().map(|(i, v)| record(format!("i{i}"), v.clone())).collect();
            let snap = IntentStoreSnapshot::from_records(1, records.clone()).unwrap();
            let eq = Embedding::normalize(q).unwrap();
            let r = classifier().classify_embedded(eq.clone(), eq.clone(), &snap).unwrap();
            // Independent scan: plain dot products, first strict maximum in id order.
            let mut sorted = records;
            sorted.sort_by(|a, b| a.intent_id.cmp(&b.intent_id));
            let mut best = (String::new(), f64::NEG_INFINITY);
            for rec in &sorted {
                let dot: f64 = rec.exemplar_embedding.values().iter().zip(eq.values()).map(|(a, b)| a * b).sum();
                if dot > best.1 { best = (rec.intent_id.clone(), dot); }
            }
            prop_assert_eq!(r.best_intent_id.unwrap(), best.0);
            prop_assert!((r.confidence - best.1).abs() < 1e-12);
        }
    }
}
