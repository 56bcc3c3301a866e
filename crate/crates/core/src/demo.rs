//! Bundled demo data: ten customer-support intents and a small knowledge
//! base. Examples, tests and the `serve` command use these when no data
//! directory is configured.

use std::sync::Arc;

use crate::embedding::{EmbeddingProvider, HashEmbedder};
use crate::intent_store::{IntentDefinition, IntentStore, StoreError};
use crate::retrieval::{read_kb_jsonl, DocumentIndex, DocumentSource, RetrievalError};

pub const DEMO_INTENTS_JSON: &str = include_str!("../data/demo_intents.json");
pub const DEMO_KB_JSONL: &str = include_str!("../data/demo_kb.jsonl");

pub fn demo_intents() -> Vec<IntentDefinition> {
    serde_json::from_str(DEMO_INTENTS_JSON).expect("bundled intents parse")
}

pub fn demo_kb() -> Vec<DocumentSource> {
    read_kb_jsonl(DEMO_KB_JSONL.as_bytes()).expect("bundled kb parses")
}

pub fn reference_provider() -> Arc<dyn EmbeddingProvider> {
    Arc::new(HashEmbedder::default())
}

pub fn demo_store_with(provider: Arc<dyn EmbeddingProvider>) -> Result<IntentStore, StoreError> {
    let store = IntentStore::new(provider);
    for def in demo_intents() {
        store.upsert_intent(def)?;
    }
    Ok(store)
}

/// Demo intents embedded with the reference provider.
pub fn demo_store() -> Result<IntentStore, StoreError> {
    demo_store_with(reference_provider())
}

pub fn demo_index_with(provider: &dyn EmbeddingProvider) -> Result<DocumentIndex, RetrievalError> {
    DocumentIndex::build(demo_kb(), provider)
}

pub fn demo_index() -> Result<DocumentIndex, RetrievalError> {
    demo_index_with(reference_provider().as_ref())
}
