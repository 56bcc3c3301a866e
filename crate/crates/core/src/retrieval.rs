//! Knowledge-base retrieval and answer generation.
//!
//! [`DocumentIndex`] is an exact brute-force cosine index. Generators turn
//! the ranked passages into an answer: [`ExtractiveGenerator`] copies the
//! best document's most relevant sentences, [`ExternalGenerator`] posts
//! `{query, passages, context_hint}` to an HTTP endpoint and expects
//! `{text}` back.

use std::collections::HashSet;
use std::io::BufRead;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_similarity, Embedding, EmbeddingError, EmbeddingProvider};

pub const DEFAULT_TOP_K: usize = 4;
pub const NO_KNOWLEDGE_TEXT: &str = "no knowledge available";
const MAX_EXTRACTED_SENTENCES: usize = 3;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("duplicate doc_id `{0}`")]
    DuplicateDocId(String),
    #[error("bad knowledge base line {line}: {reason}")]
    CorruptCorpus { line: usize, reason: String },
    #[error("answer generator unavailable: {0}")]
    GeneratorUnavailable(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A knowledge-base entry as stored in `kb.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentSource {
    pub doc_id: String,
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    /// Embedding of `title + " " + body`.
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub ranked: Vec<(String, f64)>,
    pub k_requested: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    ReferenceExtractive,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RagResponse {
    pub text: String,
    pub sources: Vec<String>,
    pub generator_kind: GeneratorKind,
}

pub fn read_kb_jsonl<R: BufRead>(input: R) -> Result<Vec<DocumentSource>, RetrievalError> {
    let mut docs = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc = serde_json::from_str(&line).map_err(|e| RetrievalError::CorruptCorpus {
            line: i + 1,
            reason: e.to_string(),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Immutable after construction; share it behind an `Arc` and swap the
/// whole index to rebuild.
#[derive(Debug, Default)]
pub struct DocumentIndex {
    docs: Vec<Document>,
    calls: AtomicU64,
}

impl DocumentIndex {
    pub fn build(
        sources: Vec<DocumentSource>,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Self, RetrievalError> {
        let mut seen = HashSet::new();
        let mut docs = Vec::with_capacity(sources.len());
        for s in sources {
            if !seen.insert(s.doc_id.clone()) {
                return Err(RetrievalError::DuplicateDocId(s.doc_id));
            }
            let embedding = provider.embed(&format!("{} {}", s.title, s.body))?;
            docs.push(Document {
                doc_id: s.doc_id,
                title: s.title,
                body: s.body,
                embedding,
            });
        }
        Ok(Self {
            docs,
            calls: AtomicU64::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.docs.iter().find(|d| d.doc_id == doc_id)
    }

    /// Number of `retrieve_top_k` calls so far.
    pub fn retrieval_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Exact top-k by cosine; equal scores ordered by `doc_id` ascending.
    pub fn retrieve_top_k(
        &self,
        query: &Embedding,
        k: usize,
    ) -> Result<RetrievalResult, RetrievalError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut scored = Vec::with_capacity(self.docs.len());
        for d in &self.docs {
            scored.push((d.doc_id.as_str(), cosine_similarity(query, &d.embedding)?));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        scored.truncate(k);
        Ok(RetrievalResult {
            ranked: scored.into_iter().map(|(id, s)| (id.to_owned(), s)).collect(),
            k_requested: k,
        })
    }
}

/// Splits after `.`, `!` or `?` when followed by whitespace. Trailing
/// punctuation stays with its sentence.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            if let Some(&(j, next)) = chars.peek() {
                if next.is_whitespace() {
                    let s = text[start..i + c.len_utf8()].trim();
                    if !s.is_empty() {
                        out.push(s);
                    }
                    start = j;
                }
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

pub trait AnswerGenerator: Send + Sync {
    fn kind(&self) -> GeneratorKind;

    /// `context` is the contextual query embedding the retrieval used.
    fn generate(
        &self,
        query_text: &str,
        retrieval: &RetrievalResult,
        index: &DocumentIndex,
        context: &Embedding,
    ) -> Result<RagResponse, RetrievalError>;
}

fn fallback(kind: GeneratorKind) -> RagResponse {
    RagResponse {
        text: NO_KNOWLEDGE_TEXT.to_owned(),
        sources: Vec::new(),
        generator_kind: kind,
    }
}

/// Answers with up to three sentences of the top document, chosen by
/// similarity to the query and emitted in document order, prefixed by the
/// document title: `"{title}: {s1} {s2} {s3}"`.
pub struct ExtractiveGenerator {
    provider: Arc<dyn EmbeddingProvider>,
}

impl ExtractiveGenerator {
    pub fn new(provider: Arc<dyn EmbeddingProvider>) -> Self {
        Self { provider }
    }
}

impl AnswerGenerator for ExtractiveGenerator {
    fn kind(&self) -> GeneratorKind {
        GeneratorKind::ReferenceExtractive
    }

    fn generate(
        &self,
        query_text: &str,
        retrieval: &RetrievalResult,
        index: &DocumentIndex,
        context: &Embedding,
    ) -> Result<RagResponse, RetrievalError> {
        let Some(doc) = retrieval.ranked.first().and_then(|(id, _)| index.get(id)) else {
            return Ok(fallback(self.kind()));
        };
        let query = match self.provider.embed(query_text) {
            Ok(e) => e,
            Err(EmbeddingError::EmptyText) => context.clone(),
            Err(e) => return Err(e.into()),
        };
        let sentences = split_sentences(&doc.body);
        let mut scored = Vec::with_capacity(sentences.len());
        for (pos, s) in sentences.iter().enumerate() {
            let score = match self.provider.embed(s) {
                Ok(e) => cosine_similarity(&query, &e)?,
                Err(EmbeddingError::EmptyText) => f64::NEG_INFINITY,
                Err(e) => return Err(e.into()),
            };
            scored.push((pos, score));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut keep: Vec<usize> = scored.iter().take(MAX_EXTRACTED_SENTENCES).map(|p| p.0).collect();
        keep.sort_unstable();
        let picked: Vec<&str> = keep.iter().map(|&i| sentences[i]).collect();
        Ok(RagResponse {
            text: format!("{}: {}", doc.title, picked.join(" ")),
            sources: vec![doc.doc_id.clone()],
            generator_kind: self.kind(),
        })
    }
}

#[derive(Serialize)]
struct Passage<'a> {
    doc_id: &'a str,
    title: &'a str,
    text: &'a str,
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    query: &'a str,
    passages: Vec<Passage<'a>>,
    context_hint: &'a [f64],
}

#[derive(Deserialize)]
struct GenerateReply {
    text: String,
}

pub struct ExternalGenerator {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl ExternalGenerator {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, RetrievalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| RetrievalError::GeneratorUnavailable(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            client,
        })
    }
}

impl AnswerGenerator for ExternalGenerator {
    fn kind(&self) -> GeneratorKind {
        GeneratorKind::External
    }

    fn generate(
        &self,
        query_text: &str,
        retrieval: &RetrievalResult,
        index: &DocumentIndex,
        context: &Embedding,
    ) -> Result<RagResponse, RetrievalError> {
        let docs: Vec<&Document> = retrieval.ranked.iter().filter_map(|(id, _)| index.get(id)).collect();
        if docs.is_empty() {
            return Ok(fallback(self.kind()));
        }
        let request = GenerateRequest {
            query: query_text,
            passages: docs
                .iter()
                .map(|d| Passage {
                    doc_id: &d.doc_id,
                    title: &d.title,
                    text: &d.body,
                })
                .collect(),
            context_hint: context.values(),
        };
        let unavailable = |e: reqwest::Error| RetrievalError::GeneratorUnavailable(e.to_string());
        let reply: GenerateReply = self
            .client
            .post(&self.endpoint)
            .json(&request)
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(unavailable)?;
        if reply.text.trim().is_empty() {
            return Err(RetrievalError::GeneratorUnavailable("empty text".into()));
        }
        Ok(RagResponse {
            text: reply.text,
            sources: docs.iter().map(|d| d.doc_id.clone()).collect(),
            generator_kind: self.kind(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;
    use proptest::prelude::*;

    fn provider() -> Arc<dyn EmbeddingProvider> {
        Arc::new(HashEmbedder::default())
    }

    fn src(id: &str, title: &str, body: &str) -> DocumentSource {
        DocumentSource {
            doc_id: id.into(),
            title: title.into(),
            body: body.into(),
        }
    }

    fn five_docs() -> Vec<DocumentSource> {
        vec![
            src("d1", "Backups", "Backups run nightly. Snapshots are kept for a week."),
            src("d2", "Billing", "Invoices are monthly. Payment is due in thirty days."),
            src("d3", "Regions", "Three regions are available. New regions open yearly."),
            src("d4", "Quotas", "GPU quota increases need approval. Requests take two days."),
            src("d5", "Backups and regions", "Backups can be copied across regions."),
        ]
    }

    #[test]
    fn empty_index() {
        let p = provider();
        let idx = DocumentIndex::build(vec![], p.as_ref()).unwrap();
        let q = p.embed("anything").unwrap();
        let r = idx.retrieve_top_k(&q, 4).unwrap();
        assert!(r.ranked.is_empty());
        let rag = ExtractiveGenerator::new(p).generate("anything", &r, &idx, &q).unwrap();
        assert_eq!(rag.text, NO_KNOWLEDGE_TEXT);
        assert!(rag.sources.is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let p = provider();
        let docs = vec![src("a", "t", "b"), src("a", "u", "c")];
        assert!(matches!(
            DocumentIndex::build(docs, p.as_ref()),
            Err(RetrievalError::DuplicateDocId(id)) if id == "a"
        ));
    }

    #[test]
    fn self_query_ranks_first() {
        let p = provider();
        let idx = DocumentIndex::build(five_docs(), p.as_ref()).unwrap();
        let q = p.embed("Billing Invoices are monthly. Payment is due in thirty days.").unwrap();
        let r = idx.retrieve_top_k(&q, 2).unwrap();
        assert_eq!(r.ranked[0].0, "d2");
        assert!((r.ranked[0].1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn k_larger_than_corpus_is_truncated() {
        let p = provider();
        let idx = DocumentIndex::build(five_docs(), p.as_ref()).unwrap();
        let q = p.embed("backups").unwrap();
        let r = idx.retrieve_top_k(&q, 50).unwrap();
        assert_eq!(r.ranked.len(), 5);
        assert_eq!(r.k_requested, 50);
        assert_eq!(idx.retrieval_calls(), 1);
    }

    #[test]
    fn ranking_matches_exhaustive_sort() {
        let p = provider();
        let idx = DocumentIndex::build(five_docs(), p.as_ref()).unwrap();
        let q = p.embed("how long are backups kept across regions").unwrap();
        let r = idx.retrieve_top_k(&q, 5).unwrap();
        // Oracle: embed each doc independently, score, stable sort by (-score, id).
        let mut oracle: Vec<(String, f64)> = five_docs()
            .iter()
            .map(|d| {
                let e = p.embed(&format!("{} {}", d.title, d.body)).unwrap();
                let s: f64 = e.values().iter().zip(q.values()).map(|(a, b)| a * b).sum();
                (d.doc_id.clone(), s)
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let ids: Vec<_> = r.ranked.iter().map(|x| x.0.clone()).collect();
        let oracle_ids: Vec<_> = oracle.iter().map(|x| x.0.clone()).collect();
        assert_eq!(ids, oracle_ids);
    }

    #[test]
    fn sentence_splitting_rule() {
        assert_eq!(
            split_sentences("One. Two! Three? Four"),
            vec!["One.", "Two!", "Three?", "Four"]
        );
        assert_eq!(split_sentences("Version 1.2 is out. Done."), vec!["Version 1.2 is out.", "Done."]);
        assert!(split_sentences("   ").is_empty());
    }

    #[test]
    fn single_doc_answer_is_verbatim() {
        let p = provider();
        let body = "Backups run nightly. Snapshots are kept for a week.";
        let idx = DocumentIndex::build(vec![src("d1", "Backups", body)], p.as_ref()).unwrap();
        let q = p.embed("when do backups run").unwrap();
        let r = idx.retrieve_top_k(&q, 4).unwrap();
        let rag = ExtractiveGenerator::new(p).generate("when do backups run", &r, &idx, &q).unwrap();
        assert_eq!(rag.text, format!("Backups: {body}"));
        assert_eq!(rag.sources, vec!["d1".to_owned()]);
    }

    #[test]
    fn picks_oracle_sentences_from_long_doc() {
        // Four sentences; the oracle scores each against the query with the
        // same embedder and keeps the top three in document order.
        let p = provider();
        let body = "Buckets hold objects. Names must be globally unique. \
                    Archive tier is cheapest. Deleting a bucket removes all objects.";
        let docs = vec![
            src("b", "Bucket rules", body),
            src("c", "Compute", "Instances boot fast."),
            src("n", "Networking", "Subnets route traffic."),
        ];
        let idx = DocumentIndex::build(docs, p.as_ref()).unwrap();
        let query = "bucket names must be unique for objects";
        let q = p.embed(query).unwrap();
        let r = idx.retrieve_top_k(&q, 4).unwrap();
        assert_eq!(r.ranked[0].0, "b");
        let rag = ExtractiveGenerator::new(p.clone()).generate(query, &r, &idx, &q).unwrap();
        let sentences = split_sentences(body);
        let mut scores: Vec<(usize, f64)> = sentences
            .iter()
            .enumerate()
            .map(|(i, s)| (i, cosine_similarity(&q, &p.embed(s).unwrap()).unwrap()))
            .collect();
        scores.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut top: Vec<usize> = scores[..3].iter().map(|x| x.0).collect();
        top.sort();
        let expected: Vec<&str> = top.iter().map(|&i| sentences[i]).collect();
        assert_eq!(rag.text, format!("Bucket rules: {}", expected.join(" ")));
        assert!(!rag.text.contains("Archive tier"));
    }

    #[test]
    fn extractive_pipeline_is_deterministic() {
        let p = provider();
        let run = || {
            let idx = DocumentIndex::build(five_docs(), p.as_ref()).unwrap();
            let q = p.embed("gpu quota approval").unwrap();
            let r = idx.retrieve_top_k(&q, 4).unwrap();
            ExtractiveGenerator::new(p.clone()).generate("gpu quota approval", &r, &idx, &q).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn unreachable_external_generator_reports_unavailable() {
        let p = provider();
        let idx = DocumentIndex::build(five_docs(), p.as_ref()).unwrap();
        let q = p.embed("backups").unwrap();
        let r = idx.retrieve_top_k(&q, 2).unwrap();
        let g = ExternalGenerator::new("http://127.0.0.1:9/generate", Duration::from_millis(200)).unwrap();
        assert!(matches!(
            g.generate("backups", &r, &idx, &q),
            Err(RetrievalError::GeneratorUnavailable(_))
        ));
    }

    proptest! {
        #[test]
        fn scores_non_increasing_and_sentences_verbatim(
            bodies in proptest::collection::vec("[a-z]{2,8}( [a-z]{2,8}){1,5}(\\. [a-z]{2,8}( [a-z]{2,8}){1,5}){0,4}\\.", 1..6),
            query in "[a-z]{2,8}( [a-z]{2,8}){0,4}",
            k in 1usize..8,
        ) {
            let p = provider();
            let docs: Vec<_> = bodies.iter().enumerate().map(|(i, b)| src(&format!("d{i}"), "T", b)).collect();
            let idx = DocumentIndex::build(docs, p.as_ref()).unwrap();
            let q = p.embed(&query).unwrap();
            let r = idx.retrieve_top_k(&q, k).unwrap();
            prop_assert!(r.ranked.len() <= k.min(bodies.len()));
            prop_assert!(r.ranked.windows(2).all(|w| w[0].1 >= w[1].1));
            prop_assert!(r.ranked.iter().all(|(id, _)| idx.get(id).is_some()));
            let rag = ExtractiveGenerator::new(p.clone()).generate(&query, &r, &idx, &q).unwrap();
            let doc = idx.get(&rag.sources[0]).unwrap();
            let emitted = rag.text.strip_prefix("T: ").unwrap();
            for s in split_sentences(emitted) {
                prop_assert!(doc.body.contains(s));
            }
        }
    }
}
