//! Scores a query against the demo intents and shows the band it lands in.
//!
//!     cargo run --example classify_query -- "how do i reset my password"

use hybrid_router::classifier::Classifier;
use hybrid_router::context_manager::{ContextConfig, SessionContext};
use hybrid_router::demo;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let query = std::env::args().nth(1).unwrap_or_else(|| "how can i reset my password please".into());
    let store = demo::demo_store()?;
    let classifier = Classifier::new(store.provider().clone(), ContextConfig::default());
    let result = classifier.classify(&query, &SessionContext::new("cli"), &store.snapshot())?;

    println!("query: {query}");
    let mut scores: Vec<_> = result.per_intent_scores.iter().collect();
    scores.sort_by(|a, b| b.1.total_cmp(a.1));
    for (id, s) in scores.iter().take(5) {
        println!("  {s:>7.4}  {id}");
    }
    println!(
        "best {:?} at {:.4} (tau_faq {:.2}) -> {}",
        result.best_intent_id,
        result.banding_confidence(),
        result.tau_faq,
        result.band.as_str()
    );
    Ok(())
}
