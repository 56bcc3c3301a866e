//! Accuracy, latency and cost efficiency as the corpus grows.
//!
//!     cargo run --release --example load_sweep -- 1000,5000,10000

use hybrid_router::harness::{render_load_table, run_load, CorpusSpec, EvalEnv};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let levels: Vec<u64> = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "1000,2000,4000".into())
        .split(',')
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    let env = EvalEnv::demo()?;
    let report = run_load(&levels, &CorpusSpec::default(), &env, 4)?;
    print!("{}", render_load_table(&report));
    println!("accuracy drop: {:.1} points", report.accuracy_drop_points);
    Ok(())
}
