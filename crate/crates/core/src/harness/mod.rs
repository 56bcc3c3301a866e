//! Corpus generation, batch evaluation and load sweeps.

pub mod corpus;
pub mod eval;
pub mod load;

use thiserror::Error;

pub use corpus::{generate_corpus, Corpus, CorpusError, CorpusItem, CorpusSpec};
pub use eval::{run_eval, EvalEnv, EvalOptions, EvalOutcome};
pub use load::{latency_trend_violations, render_load_table, run_load, LoadReport, LoadRow, MAX_ACCURACY_DROP_POINTS};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("invalid load levels: {0}")]
    InvalidLevels(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}
