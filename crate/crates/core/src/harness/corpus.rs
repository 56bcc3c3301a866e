//! Synthetic evaluation corpus.
//!
//! Three kinds of query are drawn from the intent store and knowledge base:
//!
//! * FAQ: an intent exemplar with only casing and punctuation changed. The
//!   expected answer is the intent's canned response.
//! * Contextual: `"{exemplar} and {doc title}"` for a document paired with
//!   the intent. The expected answer is the canned response followed by
//!   `"{title}: {body}"`.
//! * Out-of-domain: a question about a document no intent is paired with.
//!   The expected answer is `"{title}: {body}"`.
//!
//! Each intent is paired with the knowledge-base document most similar to
//! its centroid plus canned response (greedy, best pair first, one document
//! per intent). Unpaired documents are the out-of-domain topics.
//!
//! Category counts are `floor(total * fraction)` with the remainder handed
//! out by largest fractional part (ties in category order). Follow-ups are
//! split across categories the same way. A follow-up shares a session with
//! its antecedent, which has the same category and target, and refers back
//! to it with a pronoun.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_similarity, tokenize, Embedding, EmbeddingError, EmbeddingProvider};
use crate::intent_store::{IntentRecord, IntentStoreSnapshot};
use crate::jsonl::{self, JsonlError};
use crate::metrics::Category;
use crate::retrieval::{Document, DocumentIndex};

const DETERMINERS: [&str; 4] = ["my", "a", "an", "the"];
const OOD_TEMPLATES: [&str; 4] = ["tell me about {t}", "what about {t}", "{t}", "i have a question on {t}"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("insufficient sources: {0}")]
    InsufficientSources(String),
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub total_queries: u64,
    pub faq_fraction: f64,
    pub contextual_fraction: f64,
    pub ood_fraction: f64,
    pub followup_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            total_queries: 1_000,
            faq_fraction: 0.4,
            contextual_fraction: 0.3,
            ood_fraction: 0.3,
            followup_fraction: 0.2,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn new(total_queries: u64, seed: u64) -> Self {
        Self {
            total_queries,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let fr = [self.faq_fraction, self.contextual_fraction, self.ood_fraction];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidSpec(format!("category fractions {fr:?} must be in [0, 1] and sum to 1")));
        }
        if !(0.0..=0.5).contains(&self.followup_fraction) {
            return Err(CorpusError::InvalidSpec("followup_fraction must be in [0, 0.5]".into()));
        }
        Ok(())
    }

    /// Queries per category, FAQ / Contextual / Out-of-domain.
    pub fn category_counts(&self) -> [u64; 3] {
        let c = distribute(self.total_queries, &[self.faq_fraction, self.contextual_fraction, self.ood_fraction]);
        [c[0], c[1], c[2]]
    }

    /// Follow-up queries per category.
    pub fn followup_counts(&self) -> [u64; 3] {
        let counts = self.category_counts();
        let followups = distribute(self.total_queries, &[self.followup_fraction])[0];
        let weights: Vec<f64> = if self.total_queries == 0 {
            vec![0.0; 3]
        } else {
            counts.iter().map(|&c| c as f64 / self.total_queries as f64).collect()
        };
        let mut f = distribute(followups, &weights);
        // Every follow-up needs an antecedent in the same category.
        for (fi, &ci) in f.iter_mut().zip(&counts) {
            *fi = (*fi).min(ci / 2);
        }
        [f[0], f[1], f[2]]
    }
}

/// Floor of `total * w` per weight, then one extra for the largest
/// fractional parts until the floored sum reaches `round(total * Σw)`.
pub fn distribute(total: u64, weights: &[f64]) -> Vec<u64> {
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w).collect();
    let mut out: Vec<u64> = exact.iter().map(|x| x.floor() as u64).collect();
    let target = exact.iter().sum::<f64>().round() as u64;
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut missing = target.saturating_sub(out.iter().sum());
    for i in order.into_iter().cycle().take(weights.len() * 2) {
        if missing == 0 {
            break;
        }
        out[i] += 1;
        missing -= 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub query_id: String,
    pub session_id: String,
    pub turn_index: u64,
    pub category: Category,
    pub query_text: String,
    pub ground_truth_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<String>,
    #[serde(default)]
    pub is_followup: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn count(&self, category: Category) -> usize {
        self.items.iter().filter(|i| i.category == category).count()
    }

    pub fn followups(&self) -> usize {
        self.items.iter().filter(|i| i.is_followup).count()
    }

    /// Items grouped by session, sessions in order of first appearance.
    pub fn sessions(&self) -> Vec<Vec<&CorpusItem>> {
        let mut index = std::collections::HashMap::new();
        let mut out: Vec<Vec<&CorpusItem>> = Vec::new();
        for item in &self.items {
            let slot = *index.entry(item.session_id.as_str()).or_insert_with(|| {
                out.push(Vec::new());
                out.len() - 1
            });
            out[slot].push(item);
        }
        out
    }

    pub fn write_jsonl<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        jsonl::write_lines(out, &self.items)
    }

    pub fn read_jsonl<R: std::io::BufRead>(input: R) -> Result<Self, CorpusError> {
        Ok(Self {
            items: jsonl::read_lines(input, "corpus")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        Ok(jsonl::write_file(path, &self.items)?)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Ok(Self {
            items: jsonl::read_file(path)?,
        })
    }
}

/// Replaces everything from the last determiner onward with "it":
/// `"how do i reset my password"` becomes `"how do i reset it"`.
pub fn pronominalize(text: &str) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    let cut = words
        .iter()
        .rposition(|w| DETERMINERS.contains(&w.to_lowercase().as_str()))
        .unwrap_or(words.len().saturating_sub(1));
    let mut out: Vec<&str> = words[..cut].to_vec();
    out.push("it");
    out.join(" ")
}

/// Casing and punctuation changes only; token content is preserved.
fn light_variant(text: &str, rng: &mut ChaCha8Rng) -> String {
    let capitalized = {
        let mut c = text.chars();
        c.next().map_or_else(String::new, |f| f.to_uppercase().chain(c).collect())
    };
    match rng.gen_range(0..4) {
        0 => format!("{capitalized}?"),
        1 => text.to_owned(),
        2 => format!("{text}?"),
        _ => capitalized.replace(" i ", " I "),
    }
}

fn doc_answer(doc: &Document) -> String {
    format!("{}: {}", doc.title, doc.body)
}

/// Pairs intents with knowledge-base documents; returns `(intent, doc)`
/// index pairs and the indices of unpaired documents.
pub fn pair_intents_with_docs(
    intents: &[&IntentRecord],
    docs: &[Document],
    provider: &dyn EmbeddingProvider,
) -> Result<(Vec<(usize, usize)>, Vec<usize>), CorpusError> {
    let mut keys = Vec::with_capacity(intents.len());
    for r in intents {
        let canned = provider.embed(&r.canned_response)?;
        keys.push(Embedding::weighted_sum([(1.0, &r.exemplar_embedding), (1.0, &canned)])?);
    }
    let mut candidates = Vec::new();
    for (i, k) in keys.iter().enumerate() {
        for (d, doc) in docs.iter().enumerate() {
            candidates.push((cosine_similarity(k, &doc.embedding)?, i, d));
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_i = HashSet::new();
    let mut used_d = HashSet::new();
    let mut pairs = Vec::new();
    for (_, i, d) in candidates {
        if !used_i.contains(&i) && !used_d.contains(&d) {
            used_i.insert(i);
            used_d.insert(d);
            pairs.push((i, d));
        }
    }
    pairs.sort_unstable();
    let unpaired = (0..docs.len()).filter(|d| !used_d.contains(d)).collect();
    Ok((pairs, unpaired))
}

struct Target {
    category: Category,
    intent: Option<usize>,
    doc: Option<usize>,
}

pub fn generate_corpus(
    spec: &CorpusSpec,
    store: &IntentStoreSnapshot,
    index: &DocumentIndex,
    provider: &dyn EmbeddingProvider,
) -> Result<Corpus, CorpusError> {
    spec.validate()?;
    let counts = spec.category_counts();
    let followups = spec.followup_counts();
    let intents: Vec<&IntentRecord> = store.iter().collect();
    let docs = index.documents();
    if counts[0] + counts[1] > 0 && intents.is_empty() {
        return Err(CorpusError::InsufficientSources("intent store is empty".into()));
    }
    let (pairs, unpaired) = pair_intents_with_docs(&intents, docs, provider)?;
    if counts[1] > 0 && pairs.is_empty() {
        return Err(CorpusError::InsufficientSources("no knowledge-base document to pair with an intent".into()));
    }
    if counts[2] > 0 && unpaired.is_empty() {
        return Err(CorpusError::InsufficientSources(
            "every knowledge-base document is paired with an intent; none left for out-of-domain queries".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Sessions as lists of (target, is_followup).
    let mut sessions: Vec<Vec<(Target, bool)>> = Vec::new();
    for (ci, category) in Category::ALL.into_iter().enumerate() {
        let pick = |rng: &mut ChaCha8Rng| match category {
            Category::PredefinedFaq => Target {
                category,
                intent: Some(rng.gen_range(0..intents.len())),
                doc: None,
            },
            Category::Contextual => {
                let (i, d) = pairs[rng.gen_range(0..pairs.len())];
                Target {
                    category,
                    intent: Some(i),
                    doc: Some(d),
                }
            }
            Category::OutOfDomain => Target {
                category,
                intent: None,
                doc: Some(unpaired[rng.gen_range(0..unpaired.len())]),
            },
        };
        for _ in 0..followups[ci] {
            let t = pick(&mut rng);
            let again = Target {
                category,
                intent: t.intent,
                doc: t.doc,
            };
            sessions.push(vec![(t, false), (again, true)]);
        }
        for _ in 0..counts[ci] - 2 * followups[ci] {
            sessions.push(vec![(pick(&mut rng), false)]);
        }
    }
    sessions.shuffle(&mut rng);

    let mut items = Vec::with_capacity(spec.total_queries as usize);
    for (s, session) in sessions.into_iter().enumerate() {
        let session_id = format!("sess-{s:06}");
        let mut antecedent_text = String::new();
        for (turn, (target, followup)) in session.into_iter().enumerate() {
            let intent = target.intent.map(|i| intents[i]);
            let doc = target.doc.map(|d| &docs[d]);
            let exemplar = intent.map(|r| r.exemplar_texts[rng.gen_range(0..r.exemplar_texts.len())].as_str());
            let title = doc.map(|d| d.title.to_lowercase());
            let (query, truth) = match target.category {
                Category::PredefinedFaq => {
                    let r = intent.expect("faq target has an intent");
                    let ex = exemplar.expect("intent has exemplars");
                    let q = if followup { pronominalize(&antecedent_text) } else { light_variant(ex, &mut rng) };
                    (q, r.canned_response.clone())
                }
                Category::Contextual => {
                    let (r, d) = (intent.expect("intent"), doc.expect("doc"));
                    let ex = exemplar.expect("intent has exemplars");
                    let base = if followup { pronominalize(&antecedent_text) } else { ex.to_owned() };
                    let q = format!("{base} and {}", title.expect("doc title"));
                    (q, format!("{} {}", r.canned_response, doc_answer(d)))
                }
                Category::OutOfDomain => {
                    let d = doc.expect("doc");
                    let t = title.expect("doc title");
                    let q = if followup {
                        let last = tokenize(&d.title).pop().unwrap_or_default();
                        format!("tell me more about that {last}")
                    } else {
                        OOD_TEMPLATES[rng.gen_range(0..OOD_TEMPLATES.len())].replace("{t}", &t)
                    };
                    (q, doc_answer(d))
                }
            };
            if !followup {
                antecedent_text = exemplar.map_or_else(|| query.clone(), str::to_owned);
            }
            items.push(CorpusItem {
                query_id: format!("q-{:06}", items.len()),
                session_id: session_id.clone(),
                turn_index: turn as u64,
                category: target.category,
                query_text: query,
                ground_truth_text: truth,
                intent_id: intent.map(|r| r.intent_id.clone()),
                doc_id: doc.map(|d| d.doc_id.clone()),
                is_followup: followup,
            });
        }
    }
    Ok(Corpus { items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo;
    use proptest::prelude::*;

    fn corpus(spec: &CorpusSpec) -> Corpus {
        let store = demo::demo_store().unwrap();
        let index = demo::demo_index().unwrap();
        generate_corpus(spec, &store.snapshot(), &index, demo::reference_provider().as_ref()).unwrap()
    }

    #[test]
    fn proportions_for_a_thousand() {
        let spec = CorpusSpec::new(1_000, 7);
        assert_eq!(spec.category_counts(), [400, 300, 300]);
        let c = corpus(&spec);
        assert_eq!(c.len(), 1_000);
        assert_eq!(c.count(Category::PredefinedFaq), 400);
        assert_eq!(c.count(Category::Contextual), 300);
        assert_eq!(c.count(Category::OutOfDomain), 300);
        assert_eq!(c.followups(), 200);
    }

    #[test]
    fn ten_queries_two_followups() {
        let spec = CorpusSpec::new(10, 1);
        assert_eq!(spec.category_counts(), [4, 3, 3]);
        assert_eq!(spec.followup_counts(), [1, 1, 0]);
        assert_eq!(corpus(&spec).followups(), 2);
    }

    #[test]
    fn floor_then_distribute() {
        assert_eq!(distribute(7, &[0.4, 0.3, 0.3]), vec![3, 2, 2]);
        assert_eq!(distribute(11, &[0.4, 0.3, 0.3]), vec![5, 3, 3]);
        assert_eq!(distribute(1, &[0.4, 0.3, 0.3]), vec![1, 0, 0]);
        assert_eq!(distribute(0, &[0.4, 0.3, 0.3]), vec![0, 0, 0]);
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = CorpusSpec::new(1_000, 7);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        corpus(&spec).write_jsonl(&mut a).unwrap();
        corpus(&spec).write_jsonl(&mut b).unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        corpus(&CorpusSpec::new(1_000, 8)).write_jsonl(&mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn followups_share_session_and_target() {
        let c = corpus(&CorpusSpec::new(500, 3));
        for session in c.sessions() {
            if session.len() == 2 {
                let (a, f) = (session[0], session[1]);
                assert!(!a.is_followup && f.is_followup);
                assert_eq!((a.category, &a.intent_id, &a.doc_id), (f.category, &f.intent_id, &f.doc_id));
                assert_eq!(f.turn_index, 1);
                assert_eq!(a.ground_truth_text, f.ground_truth_text);
            } else {
                assert_eq!(session.len(), 1);
            }
        }
    }

    #[test]
    fn pronoun_substitution() {
        assert_eq!(pronominalize("how do i reset my password"), "how do i reset it");
        assert_eq!(pronominalize("how do i create an api key"), "how do i create it");
        assert_eq!(pronominalize("open ticket"), "open it");
    }

    #[test]
    fn intents_pair_with_their_topic_docs() {
        let store = demo::demo_store().unwrap();
        let index = demo::demo_index().unwrap();
        let snap = store.snapshot();
        let intents: Vec<_> = snap.iter().collect();
        let (pairs, unpaired) = pair_intents_with_docs(&intents, index.documents(), demo::reference_provider().as_ref()).unwrap();
        assert_eq!(pairs.len(), 10);
        assert_eq!(unpaired.len(), 18);
        let named: Vec<(&str, &str)> = pairs
            .iter()
            .map(|&(i, d)| (intents[i].intent_id.as_str(), index.documents()[d].doc_id.as_str()))
            .collect();
        assert!(named.contains(&("password_reset", "kb-001")));
        assert!(named.contains(&("bucket_create", "kb-008")));
    }

    #[test]
    fn empty_sources_are_rejected() {
        let index = demo::demo_index().unwrap();
        let p = demo::reference_provider();
        let err = generate_corpus(&CorpusSpec::new(10, 1), &IntentStoreSnapshot::default(), &index, p.as_ref());
        assert!(matches!(err, Err(CorpusError::InsufficientSources(_))));
        let store = demo::demo_store().unwrap();
        let err = generate_corpus(&CorpusSpec::new(10, 1), &store.snapshot(), &DocumentIndex::default(), p.as_ref());
        assert!(matches!(err, Err(CorpusError::InsufficientSources(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trip_and_proportions(total in 0u64..400, seed in any::<u64>()) {
            let spec = CorpusSpec::new(total, seed);
            let c = corpus(&spec);
            let counts = spec.category_counts();
            prop_assert_eq!(counts.iter().sum::<u64>(), total);
            prop_assert_eq!(c.count(Category::PredefinedFaq) as u64, counts[0]);
            prop_assert_eq!(c.count(Category::Contextual) as u64, counts[1]);
            prop_assert_eq!(c.count(Category::OutOfDomain) as u64, counts[2]);
            let mut buf = Vec::new();
            c.write_jsonl(&mut buf).unwrap();
            prop_assert_eq!(Corpus::read_jsonl(buf.as_slice()).unwrap(), c);
        }
    }
}
