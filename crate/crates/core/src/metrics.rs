//! Accuracy, latency, cost efficiency and turn efficiency.
//!
//! An FAQ answer is correct only if it is the canned response verbatim
//! (after collapsing whitespace). Any other answer is correct when its
//! embedding is at least 0.90 similar to the ground truth.
//!
//! Cost efficiency compares a candidate to the canned-response baseline:
//! `min(1, (lat_base / lat) * (acc / acc_base))`. Turn efficiency is total
//! turns over resolved queries, where a query counts as resolved when its
//! answer was scored correct.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_similarity, EmbeddingError, EmbeddingProvider};
use crate::responder::ResponseKind;

pub const SIMILARITY_BAR: f64 = 0.90;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("record `{0}` has no ground truth")]
    MissingGroundTruth(String),
    #[error("cost efficiency inputs must be positive")]
    NonPositiveInput,
    #[error("no resolved queries")]
    NoResolvedQueries,
    #[error("no records to evaluate")]
    EmptyEvaluation,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    PredefinedFaq,
    Contextual,
    OutOfDomain,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::PredefinedFaq, Category::Contextual, Category::OutOfDomain];

    pub fn label(self) -> &'static str {
        match self {
            Category::PredefinedFaq => "Predefined FAQ",
            Category::Contextual => "Contextual",
            Category::OutOfDomain => "Out-of-Domain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    pub category: Category,
    pub ground_truth_text: String,
    pub response_text: String,
    /// `None` when the pipeline returned an error for this query.
    pub response_kind: Option<ResponseKind>,
    pub latency_ms: f64,
    pub session_id: String,
    pub turn_index: u64,
    pub resolved: bool,
    #[serde(default)]
    pub retrieval_calls: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Latency and accuracy of the system other results are compared against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub latency_ms: f64,
    pub accuracy_pct: f64,
}

/// Whole-dataset averages of a canned-response deployment (68 ms, 53%).
pub const CANNED_BASELINE: Baseline = Baseline {
    latency_ms: 68.0,
    accuracy_pct: 53.0,
};

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn is_correct(record: &EvalRecord, provider: &dyn EmbeddingProvider) -> Result<bool, MetricsError> {
    if record.ground_truth_text.trim().is_empty() {
        return Err(MetricsError::MissingGroundTruth(record.query_id.clone()));
    }
    if record.error.is_some() || record.response_text.trim().is_empty() {
        return Ok(false);
    }
    match record.category {
        Category::PredefinedFaq => {
            Ok(collapse_whitespace(&record.response_text) == collapse_whitespace(&record.ground_truth_text))
        }
        _ => {
            let response = match provider.embed(&record.response_text) {
                Ok(e) => e,
                Err(EmbeddingError::EmptyText) => return Ok(false),
                Err(e) => return Err(e.into()),
            };
            let truth = provider.embed(&record.ground_truth_text)?;
            Ok(cosine_similarity(&response, &truth)? >= SIMILARITY_BAR)
        }
    }
}

/// Percentage of correct records. An empty slice scores 0.
pub fn score_accuracy(records: &[EvalRecord], provider: &dyn EmbeddingProvider) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for r in records {
        correct += usize::from(is_correct(r, provider)?);
    }
    Ok(correct as f64 / records.len() as f64 * 100.0)
}

pub fn cost_efficiency(lat_base_ms: f64, acc_base_pct: f64, lat_prop_ms: f64, acc_prop_pct: f64) -> Result<f64, MetricsError> {
    let inputs = [lat_base_ms, acc_base_pct, lat_prop_ms, acc_prop_pct];
    if inputs.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(MetricsError::NonPositiveInput);
    }
    Ok(((lat_base_ms / lat_prop_ms) * (acc_prop_pct / acc_base_pct)).min(1.0))
}

pub fn turn_efficiency(total_turns: u64, resolved_queries: u64) -> Result<f64, MetricsError> {
    if resolved_queries == 0 {
        return Err(MetricsError::NoResolvedQueries);
    }
    Ok(total_turns as f64 / resolved_queries as f64)
}

/// Nearest-rank percentile of an unsorted sample; 0 for an empty one.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub count: usize,
    pub correct: usize,
    pub accuracy_pct: f64,
    pub mean_latency_ms: f64,
    pub latency_p95_ms: f64,
    /// `None` when accuracy or latency is zero.
    pub cost_efficiency: Option<f64>,
    /// `None` when nothing was resolved.
    pub turn_efficiency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub total: usize,
    pub resolved: usize,
    pub accuracy_pct: f64,
    pub mean_latency_ms: f64,
    pub latency_p95_ms: f64,
    pub cost_efficiency: Option<f64>,
    pub turn_efficiency: Option<f64>,
    pub retrieval_calls: u64,
    pub baseline: Baseline,
    pub per_category: BTreeMap<Category, CategoryMetrics>,
}

fn aggregate(flags: &[(bool, &EvalRecord)], baseline: Baseline) -> CategoryMetrics {
    let count = flags.len();
    let correct = flags.iter().filter(|(c, _)| *c).count();
    let latencies: Vec<f64> = flags.iter().map(|(_, r)| r.latency_ms).collect();
    let accuracy_pct = if count == 0 { 0.0 } else { correct as f64 / count as f64 * 100.0 };
    let mean_latency_ms = if count == 0 { 0.0 } else { latencies.iter().sum::<f64>() / count as f64 };
    CategoryMetrics {
        count,
        correct,
        accuracy_pct,
        mean_latency_ms,
        latency_p95_ms: percentile(&latencies, 95.0),
        cost_efficiency: cost_efficiency(baseline.latency_ms, baseline.accuracy_pct, mean_latency_ms, accuracy_pct).ok(),
        turn_efficiency: turn_efficiency(count as u64, correct as u64).ok(),
    }
}

pub fn summarize(
    records: &[EvalRecord],
    provider: &dyn EmbeddingProvider,
    baseline: Baseline,
) -> Result<MetricsReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyEvaluation);
    }
    let mut flags = Vec::with_capacity(records.len());
    for r in records {
        flags.push((is_correct(r, provider)?, r));
    }
    let overall = aggregate(&flags, baseline);
    let mut per_category = BTreeMap::new();
    for cat in Category::ALL {
        let subset: Vec<_> = flags.iter().filter(|(_, r)| r.category == cat).copied().collect();
        if !subset.is_empty() {
            per_category.insert(cat, aggregate(&subset, baseline));
        }
    }
    Ok(MetricsReport {
        total: overall.count,
        resolved: overall.correct,
        accuracy_pct: overall.accuracy_pct,
        mean_latency_ms: overall.mean_latency_ms,
        latency_p95_ms: overall.latency_p95_ms,
        cost_efficiency: overall.cost_efficiency,
        turn_efficiency: overall.turn_efficiency,
        retrieval_calls: records.iter().map(|r| u64::from(r.retrieval_calls)).sum(),
        baseline,
        per_category,
    })
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "NA".to_owned(), |x| format!("{x:.digits$}"))
}

/// Aligned text table, one row per named report.
pub fn render_table(rows: &[(&str, &MetricsReport)]) -> String {
    let mut out = String::new();
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("Framework".len());
    let _ = writeln!(
        out,
        "{:<width$}  {:>12}  {:>12}  {:>8}  {:>15}  {:>15}",
        "Framework", "Accuracy (%)", "Latency (ms)", "p95 (ms)", "Cost Efficiency", "Turn Efficiency"
    );
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>12.1}  {:>12.3}  {:>8.3}  {:>15}  {:>15}",
            name,
            r.accuracy_pct,
            r.mean_latency_ms,
            r.latency_p95_ms,
            opt(r.cost_efficiency, 3),
            opt(r.turn_efficiency, 2)
        );
    }
    out
}

/// Per-category rows for one or more reports.
pub fn render_category_table(rows: &[(&str, &MetricsReport)]) -> String {
    let mut out = String::new();
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("Framework".len());
    let _ = writeln!(
        out,
        "{:<width$}  {:<14}  {:>12}  {:>12}  {:>15}",
        "Framework", "Category", "Accuracy (%)", "Latency (ms)", "Cost Efficiency"
    );
    for (name, r) in rows {
        for (cat, m) in &r.per_category {
            let _ = writeln!(
                out,
                "{:<width$}  {:<14}  {:>12.1}  {:>12.3}  {:>15}",
                name,
                cat.label(),
                m.accuracy_pct,
                m.mean_latency_ms,
                opt(m.cost_efficiency, 3)
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;
    use proptest::prelude::*;

    fn rec(id: usize, category: Category, truth: &str, response: &str, latency: f64) -> EvalRecord {
        EvalRecord {
            query_id: format!("q{id}"),
            category,
            ground_truth_text: truth.into(),
            response_text: response.into(),
            response_kind: Some(ResponseKind::Canned),
            latency_ms: latency,
            session_id: format!("s{id}"),
            turn_index: 0,
            resolved: false,
            retrieval_calls: 0,
            error: None,
        }
    }

    fn ce(lat: f64, acc: f64) -> f64 {
        cost_efficiency(68.0, 53.0, lat, acc).unwrap()
    }

    #[test]
    fn cost_efficiency_of_comparison_rows() {
        // Frozen from an independent float evaluation of the formula.
        assert!((ce(380.0, 91.0) - 0.3072492552135055).abs() < 1e-12);
        assert!((ce(180.0, 95.0) - 0.6771488469601677).abs() < 1e-12);
        assert!((ce(376.0, 91.0) - 0.3105178643115215).abs() < 1e-12);
        assert_eq!(ce(68.0, 53.0), 1.0);
        assert_eq!(format!("{:.1}", ce(380.0, 91.0)), "0.3");
        assert_eq!(format!("{:.1}", ce(180.0, 95.0)), "0.7");
    }

    #[test]
    fn cost_efficiency_of_category_rows() {
        let cells = [
            ((65.0, 93.0), 1.0),
            ((65.0, 49.0), 0.9671988388969521),
            ((75.0, 5.0), 0.08553459119496856),
            ((381.0, 92.0), 0.3098103303124845),
            ((379.0, 90.0), 0.3046746652063524),
            ((65.0, 96.0), 1.0),
            ((182.0, 96.0), 0.6767572050590919),
            ((379.0, 93.0), 0.31483048737989744),
        ];
        for ((lat, acc), want) in cells {
            assert!((ce(lat, acc) - want).abs() < 1e-12, "{lat} {acc}");
        }
    }

    #[test]
    fn cost_efficiency_rejects_non_positive() {
        assert!(matches!(cost_efficiency(0.0, 53.0, 1.0, 1.0), Err(MetricsError::NonPositiveInput)));
        assert!(cost_efficiency(68.0, 53.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn turn_efficiency_examples() {
        assert_eq!(turn_efficiency(17, 10).unwrap(), 1.7);
        assert_eq!(turn_efficiency(10, 10).unwrap(), 1.0);
        assert_eq!(turn_efficiency(23, 10).unwrap(), 2.3);
        assert!(matches!(turn_efficiency(5, 0), Err(MetricsError::NoResolvedQueries)));
    }

    #[test]
    fn nearest_rank_percentile() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 95.0), 19.0);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
        assert_eq!(percentile(&[], 95.0), 0.0);
    }

    const CANNED: &str = "Open Settings, choose Security, and click Reset.";
    const DOC: &str = "Backups run nightly and are kept for seven days.";
    const OTHER: &str = "Quota increases require a support request.";

    #[test]
    fn faq_verbatim_rule_ignores_whitespace() {
        let p = HashEmbedder::default();
        let r = rec(0, Category::PredefinedFaq, CANNED, "Open  Settings,\nchoose Security, and click Reset. ", 1.0);
        assert!(is_correct(&r, &p).unwrap());
        // Same tokens, different punctuation: similar but not verbatim.
        let r = rec(0, Category::PredefinedFaq, CANNED, "Open Settings choose Security and click Reset", 1.0);
        assert!(!is_correct(&r, &p).unwrap());
    }

    #[test]
    fn identical_contextual_answer_is_correct() {
        let p = HashEmbedder::default();
        assert!(is_correct(&rec(0, Category::Contextual, DOC, DOC, 1.0), &p).unwrap());
        let missing = rec(0, Category::Contextual, " ", DOC, 1.0);
        assert!(matches!(is_correct(&missing, &p), Err(MetricsError::MissingGroundTruth(_))));
    }

    #[test]
    fn ten_record_fixture_matches_hand_count() {
        let p = HashEmbedder::default();
        let records = vec![
            rec(0, Category::PredefinedFaq, CANNED, CANNED, 1.0),   // correct
            rec(1, Category::PredefinedFaq, CANNED, OTHER, 1.0),    // wrong
            rec(2, Category::PredefinedFaq, CANNED, CANNED, 1.0),   // correct
            rec(3, Category::PredefinedFaq, CANNED, "", 1.0),       // wrong
            rec(4, Category::Contextual, DOC, DOC, 1.0),            // correct
            rec(5, Category::Contextual, DOC, OTHER, 1.0),          // wrong
            rec(6, Category::Contextual, DOC, "backups run nightly and are kept for seven days", 1.0), // correct
            rec(7, Category::OutOfDomain, OTHER, OTHER, 1.0),       // correct
            rec(8, Category::OutOfDomain, OTHER, DOC, 1.0),         // wrong
            rec(9, Category::OutOfDomain, OTHER, CANNED, 1.0),      // wrong
        ];
        assert_eq!(score_accuracy(&records, &p).unwrap(), 50.0);
    }

    #[test]
    fn empty_evaluation() {
        let p = HashEmbedder::default();
        assert!(matches!(summarize(&[], &p, CANNED_BASELINE), Err(MetricsError::EmptyEvaluation)));
    }

    #[test]
    fn all_faq_fixture_has_one_category() {
        let p = HashEmbedder::default();
        let records: Vec<_> = (0..5).map(|i| rec(i, Category::PredefinedFaq, CANNED, CANNED, 2.0)).collect();
        let report = summarize(&records, &p, CANNED_BASELINE).unwrap();
        assert_eq!(report.accuracy_pct, 100.0);
        assert_eq!(report.per_category.keys().copied().collect::<Vec<_>>(), vec![Category::PredefinedFaq]);
        assert_eq!(report.cost_efficiency, Some(1.0));
        assert_eq!(report.turn_efficiency, Some(1.0));
    }

    #[test]
    fn thirty_record_breakdown() {
        let p = HashEmbedder::default();
        // Category c, index i: correct iff i % (c + 2) == 0; latency = 10c + i.
        let mut records = Vec::new();
        for (c, cat) in Category::ALL.into_iter().enumerate() {
            for i in 0..10 {
                let ok = i % (c + 2) == 0;
                let (truth, resp) = match cat {
                    Category::PredefinedFaq => (CANNED, if ok { CANNED } else { OTHER }),
                    _ => (DOC, if ok { DOC } else { OTHER }),
                };
                records.push(rec(c * 10 + i, cat, truth, resp, (10 * c + i) as f64));
            }
        }
        let report = summarize(&records, &p, CANNED_BASELINE).unwrap();
        // Spreadsheet values: correct counts 5, 4, 3; mean latencies 4.5, 14.5, 24.5.
        let expect = [(5, 4.5, 9.0), (4, 14.5, 19.0), (3, 24.5, 29.0)];
        for (cat, (correct, mean, p95)) in Category::ALL.into_iter().zip(expect) {
            let m = &report.per_category[&cat];
            assert_eq!(m.count, 10);
            assert_eq!(m.correct, correct);
            assert_eq!(m.accuracy_pct, correct as f64 * 10.0);
            assert!((m.mean_latency_ms - mean).abs() < 1e-12);
            assert_eq!(m.latency_p95_ms, p95);
            assert_eq!(m.turn_efficiency, Some(10.0 / correct as f64));
        }
        assert_eq!(report.resolved, 12);
        assert_eq!(report.accuracy_pct, 40.0);
        assert!((report.mean_latency_ms - 14.5).abs() < 1e-12);
        let table = render_table(&[("hybrid", &report)]);
        assert!(table.lines().next().unwrap().contains("Cost Efficiency"));
        assert!(table.contains("hybrid"));
    }

    proptest! {
        #[test]
        fn ce_clamped_and_monotone(
            lb in 1.0f64..500.0, ab in 1.0f64..100.0,
            l1 in 1.0f64..500.0, l2 in 1.0f64..500.0, a in 1.0f64..100.0,
        ) {
            let c1 = cost_efficiency(lb, ab, l1, a).unwrap();
            let c2 = cost_efficiency(lb, ab, l2, a).unwrap();
            prop_assert!(c1 <= 1.0 && c2 <= 1.0);
            if l1 < l2 && c2 < 1.0 { prop_assert!(c1 > c2); }
            if l1 <= lb && a >= ab { prop_assert_eq!(c1, 1.0); }
        }

        #[test]
        fn ce_increasing_in_accuracy(lb in 1.0f64..500.0, ab in 1.0f64..100.0, l in 1.0f64..500.0, a1 in 1.0f64..100.0, a2 in 1.0f64..100.0) {
            let (lo, hi) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
            prop_assume!(lo < hi);
            let c_lo = cost_efficiency(lb, ab, l, lo).unwrap();
            let c_hi = cost_efficiency(lb, ab, l, hi).unwrap();
            if c_lo < 1.0 { prop_assert!(c_hi > c_lo); }
        }
    }
}
