pub mod classifier;
pub mod context_manager;
pub mod demo;
pub mod embedding;
pub mod intent_store;
pub mod retrieval;
pub mod responder;
pub mod jsonl;
pub mod feedback;
pub mod metrics;
pub mod harness;
pub mod config;
pub mod service;
