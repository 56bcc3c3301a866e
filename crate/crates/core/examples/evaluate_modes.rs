//! Replays one seeded corpus through all three routing modes and prints the
//! comparison tables.
//!
//!     cargo run --example evaluate_modes -- [total_queries] [seed]

use hybrid_router::harness::{generate_corpus, run_eval, CorpusSpec, EvalEnv, EvalOptions};
use hybrid_router::metrics::{render_category_table, render_table};
use hybrid_router::responder::RoutingMode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let total = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1_000);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);

    let env = EvalEnv::demo()?;
    let corpus = generate_corpus(&CorpusSpec::new(total, seed), &env.store.snapshot(), &env.index, env.provider.as_ref())?;
    println!("{} queries, {} follow-ups, seed {seed}\n", corpus.len(), corpus.followups());

    let mut runs = Vec::new();
    for (label, mode) in [
        ("canned-only", RoutingMode::CannedOnly),
        ("rag-only", RoutingMode::RagOnly),
        ("hybrid", RoutingMode::Hybrid),
    ] {
        runs.push((label, run_eval(&corpus, mode, &env, &EvalOptions::default())?.report));
    }
    let rows: Vec<(&str, _)> = runs.iter().map(|(l, r)| (*l, r)).collect();
    println!("{}", render_table(&rows));
    println!("{}", render_category_table(&rows));
    Ok(())
}
