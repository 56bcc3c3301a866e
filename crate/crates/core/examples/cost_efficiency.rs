//! Cost efficiency against the canned-response baseline (68 ms, 53%).

use hybrid_router::metrics::{cost_efficiency, CANNED_BASELINE};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let b = CANNED_BASELINE;
    println!("{:<20}{:>10}{:>12}{:>8}", "system", "latency", "accuracy", "CE");
    for (name, latency, accuracy) in [("canned", 68.0, 53.0), ("retrieval", 380.0, 91.0), ("hybrid", 180.0, 95.0)] {
        let ce = cost_efficiency(b.latency_ms, b.accuracy_pct, latency, accuracy)?;
        println!("{name:<20}{latency:>8} ms{accuracy:>11}%{ce:>8.3}");
    }
    Ok(())
}
