//! Accuracy and latency as the query volume grows.

use serde::Serialize;

use super::corpus::{generate_corpus, CorpusSpec};
use super::eval::{run_eval, EvalEnv, EvalOptions};
use super::HarnessError;
use crate::metrics::{cost_efficiency, Baseline};
use crate::responder::RoutingMode;

/// Largest acceptable accuracy loss, in percentage points, between the
/// smallest and largest load level.
pub const MAX_ACCURACY_DROP_POINTS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadRow {
    pub load: u64,
    pub accuracy_pct: f64,
    pub mean_latency_ms: f64,
    /// Against the canned-only run at the same load.
    pub cost_efficiency: Option<f64>,
    pub baseline: Baseline,
    /// Mean latency went down compared with the previous level.
    pub latency_trend_violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadReport {
    pub workers: usize,
    pub rows: Vec<LoadRow>,
    pub accuracy_drop_points: f64,
    pub within_drop_bound: bool,
}

/// `out[i]` is true when `latencies[i] < latencies[i - 1]`. Latency is
/// expected to be non-decreasing in load; a dip is reported, not fatal.
pub fn latency_trend_violations(latencies: &[f64]) -> Vec<bool> {
    let mut out = vec![false; latencies.len()];
    for i in 1..latencies.len() {
        out[i] = latencies[i] < latencies[i - 1];
    }
    out
}

/// Runs canned-only and hybrid at each load level. Corpora share the
/// template's fractions and seed and differ only in size. Levels must be
/// strictly increasing.
pub fn run_load(levels: &[u64], template: &CorpusSpec, env: &EvalEnv, workers: usize) -> Result<LoadReport, HarnessError> {
    if levels.is_empty() || levels.contains(&0) {
        return Err(HarnessError::InvalidLevels("need at least one positive level".into()));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HarnessError::InvalidLevels(format!("{levels:?} is not strictly increasing")));
    }
    let snapshot = env.store.snapshot();
    let options = EvalOptions { workers, ..Default::default() };
    let mut rows = Vec::with_capacity(levels.len());
    for &load in levels {
        let spec = CorpusSpec { total_queries: load, ..template.clone() };
        let corpus = generate_corpus(&spec, &snapshot, &env.index, env.provider.as_ref())?;
        let base = run_eval(&corpus, RoutingMode::CannedOnly, env, &options)?.report;
        let hybrid = run_eval(&corpus, RoutingMode::Hybrid, env, &options)?.report;
        let baseline = Baseline {
            latency_ms: base.mean_latency_ms,
            accuracy_pct: base.accuracy_pct,
        };
        tracing::info!(load, accuracy = hybrid.accuracy_pct, latency_ms = hybrid.mean_latency_ms, "load level done");
        rows.push(LoadRow {
            load,
            accuracy_pct: hybrid.accuracy_pct,
            mean_latency_ms: hybrid.mean_latency_ms,
            cost_efficiency: cost_efficiency(
                baseline.latency_ms,
                baseline.accuracy_pct,
                hybrid.mean_latency_ms,
                hybrid.accuracy_pct,
            )
            .ok(),
            baseline,
            latency_trend_violation: false,
        });
    }
    let latencies: Vec<f64> = rows.iter().map(|r| r.mean_latency_ms).collect();
    for (row, v) in rows.iter_mut().zip(latency_trend_violations(&latencies)) {
        row.latency_trend_violation = v;
    }
    let accuracy_drop_points = rows[0].accuracy_pct - rows[rows.len() - 1].accuracy_pct;
    Ok(LoadReport {
        workers: workers.max(1),
        rows,
        accuracy_drop_points,
        within_drop_bound: accuracy_drop_points <= MAX_ACCURACY_DROP_POINTS,
    })
}

fn format_load(n: u64) -> String {
    if n >= 1_000 && n.is_multiple_of(1_000) {
        format!("{}k", n / 1_000)
    } else {
        n.to_string()
    }
}

pub fn render_load_table(report: &LoadReport) -> String {
    let mut out = format!("{:<12}{:>10}{:>14}{:>8}\n", "Query Load", "Accuracy", "Latency", "CE");
    for r in &report.rows {
        let ce = r.cost_efficiency.map_or_else(|| "n/a".to_owned(), |c| format!("{c:.2}"));
        let flag = if r.latency_trend_violation { " *" } else { "" };
        out.push_str(&format!(
            "{:<12}{:>9.1}%{:>11.3} ms{:>8}{flag}\n",
            format_load(r.load),
            r.accuracy_pct,
            r.mean_latency_ms,
            ce
        ));
    }
    out.push_str(&format!("workers: {}\n", report.workers));
    if report.rows.iter().any(|r| r.latency_trend_violation) {
        out.push_str("* mean latency lower than the previous level\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trend_flags_only_dips() {
        assert_eq!(latency_trend_violations(&[1.0, 2.0, 2.0, 1.5, 3.0]), vec![false, false, false, true, false]);
        assert!(latency_trend_violations(&[]).is_empty());
    }

    #[test]
    fn rejects_bad_levels() {
        let env = EvalEnv::demo().unwrap();
        let spec = CorpusSpec::default();
        assert!(matches!(run_load(&[], &spec, &env, 1), Err(HarnessError::InvalidLevels(_))));
        assert!(matches!(run_load(&[200, 100], &spec, &env, 1), Err(HarnessError::InvalidLevels(_))));
        assert!(matches!(run_load(&[0, 100], &spec, &env, 1), Err(HarnessError::InvalidLevels(_))));
    }

    #[test]
    fn small_sweep_renders() {
        let env = EvalEnv::demo().unwrap();
        let report = run_load(&[100, 200], &CorpusSpec::new(0, 3), &env, 2).unwrap();
        assert_eq!(report.rows.len(), 2);
        let table = render_load_table(&report);
        assert!(table.starts_with("Query Load"));
        assert!(table.contains("workers: 2"));
        assert!(report.rows.iter().all(|r| r.cost_efficiency.is_some()));
    }
}
