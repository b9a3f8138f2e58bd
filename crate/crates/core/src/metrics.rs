//! Precision, recall and F2 at a cutoff, NDCG with binary gains, and
//! per-query (macro) averaging over a run.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::QueryRecord;
use crate::error::{Error, Result};
use crate::runfile::RunEntry;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf2 {
    pub precision: f64,
    pub recall: f64,
    pub f2: f64,
}

/// `5PR / (4P + R)`, zero when both are zero.
pub fn f2(precision: f64, recall: f64) -> f64 {
    let denom = 4.0 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        5.0 * precision * recall / denom
    }
}

fn hits_at_k<S: AsRef<str>>(retrieved: &[S], relevant: &HashSet<&str>, k: usize) -> usize {
    let mut seen = HashSet::new();
    retrieved
        .iter()
        .take(k)
        .map(AsRef::as_ref)
        .filter(|d| relevant.contains(d) && seen.insert(*d))
        .count()
}

pub fn prf2_at_k<S: AsRef<str>, R: AsRef<str>>(
    retrieved: &[S],
    relevant: &[R],
    k: usize,
) -> Result<Prf2> {
    if k == 0 {
        return Err(Error::InvalidInput("cutoff k must be at least 1".into()));
    }
    let relevant: HashSet<&str> = relevant.iter().map(AsRef::as_ref).collect();
    if relevant.is_empty() {
        return Err(Error::InvalidInput("empty relevant set".into()));
    }
    let hits = hits_at_k(retrieved, &relevant, k) as f64;
    let precision = hits / k as f64;
    let recall = hits / relevant.len() as f64;
    Ok(Prf2 {
        precision,
        recall,
        f2: f2(precision, recall),
    })
}

/// Binary-gain NDCG: `Σ rel_i / log2(i + 1)` over the top `k`, divided by the ideal.
pub fn ndcg_at_k<S: AsRef<str>, R: AsRef<str>>(
    retrieved: &[S],
    relevant: &[R],
    k: usize,
) -> Result<f64> {
    let relevant: HashSet<&str> = relevant.iter().map(AsRef::as_ref).collect();
    if relevant.is_empty() {
        return Err(Error::InvalidInput("empty relevant set".into()));
    }
    let mut seen: HashSet<&str> = HashSet::new();
    let dcg: f64 = retrieved
        .iter()
        .take(k)
        .map(AsRef::as_ref)
        .enumerate()
        .filter(|&(_, d)| relevant.contains(d) && seen.insert(d))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..relevant.len().min(k))
        .map(|i| 1.0 / ((i + 2) as f64).log2())
        .sum();
    Ok(if ideal == 0.0 { 0.0 } else { dcg / ideal })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f2: f64,
    pub ndcg: f64,
}

pub fn query_metrics<S: AsRef<str>, R: AsRef<str>>(
    retrieved: &[S],
    relevant: &[R],
    k: usize,
) -> Result<QueryMetrics> {
    let prf = prf2_at_k(retrieved, relevant, k)?;
    Ok(QueryMetrics {
        precision: prf.precision,
        recall: prf.recall,
        f2: prf.f2,
        ndcg: ndcg_at_k(retrieved, relevant, k)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f2: f64,
    pub ndcg: f64,
    pub query_count: usize,
}

/// Unweighted means over queries; all zeros for an empty slice.
pub fn macro_metrics(per_query: &[QueryMetrics]) -> MacroMetrics {
    let n = per_query.len();
    if n == 0 {
        return MacroMetrics::default();
    }
    let mean = |f: fn(&QueryMetrics) -> f64| per_query.iter().map(f).sum::<f64>() / n as f64;
    MacroMetrics {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f2: mean(|m| m.f2),
        ndcg: mean(|m| m.ndcg),
        query_count: n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub query_count: usize,
    /// Judged queries with no run entries; they score zero.
    pub missing_queries: usize,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f2: f64,
    pub ndcg_mean: f64,
    pub per_query: BTreeMap<String, QueryMetrics>,
}

/// Query id -> relevant document ids.
pub type Judgments = BTreeMap<String, Vec<String>>;

/// Query id -> ranked document ids.
pub type Rankings = BTreeMap<String, Vec<String>>;

pub fn judgments_from_records(records: &[QueryRecord]) -> Judgments {
    records
        .iter()
        .map(|r| {
            (
                r.query_id.clone(),
                r.relevant.iter().map(|(l, a)| format!("{l}:{a}")).collect(),
            )
        })
        .collect()
}

/// Groups run entries per query, ordered by rank (file order breaks ties).
pub fn rankings_from_run(entries: &[RunEntry]) -> Rankings {
    let mut grouped: BTreeMap<String, Vec<&RunEntry>> = BTreeMap::new();
    for e in entries {
        grouped.entry(e.query_id.clone()).or_default().push(e);
    }
    grouped
        .into_iter()
        .map(|(q, mut list)| {
            list.sort_by_key(|e| e.rank);
            (q, list.into_iter().map(|e| e.doc_id.clone()).collect())
        })
        .collect()
}

pub fn evaluate(rankings: &Rankings, judgments: &Judgments, k: usize) -> Result<EvalReport> {
    if let Some(q) = rankings.keys().find(|q| !judgments.contains_key(*q)) {
        return Err(Error::InvalidInput(format!(
            "run query '{q}' has no judgments"
        )));
    }
    let mut per_query = BTreeMap::new();
    let mut missing = 0;
    let empty: Vec<String> = Vec::new();
    for (q, relevant) in judgments {
        let retrieved = rankings.get(q).unwrap_or_else(|| {
            missing += 1;
            &empty
        });
        let m = query_metrics(retrieved, relevant, k)
            .map_err(|e| Error::InvalidInput(format!("query '{q}': {e}")))?;
        per_query.insert(q.clone(), m);
    }
    let values: Vec<QueryMetrics> = per_query.values().copied().collect();
    let agg = macro_metrics(&values);
    Ok(EvalReport {
        k,
        query_count: agg.query_count,
        missing_queries: missing,
        macro_precision: agg.precision,
        macro_recall: agg.recall,
        macro_f2: agg.f2,
        ndcg_mean: agg.ndcg,
        per_query,
    })
}

pub fn evaluate_run(
    entries: &[RunEntry],
    judgments: &Judgments,
    k_list: &[usize],
) -> Result<Vec<EvalReport>> {
    let rankings = rankings_from_run(entries);
    k_list
        .iter()
        .map(|&k| evaluate(&rankings, judgments, k))
        .collect()
}

/// Fixed-width summary, one row per cutoff.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>4}  {:>7}  {:>7}  {:>9}  {:>9}  {:>8}  {:>7}",
        "k", "queries", "missing", "macro_P", "macro_R", "macro_F2", "NDCG"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:>4}  {:>7}  {:>7}  {:>9.4}  {:>9.4}  {:>8.4}  {:>7.4}",
            r.k, r.query_count, r.missing_queries, r.macro_precision, r.macro_recall, r.macro_f2, r.ndcg_mean
        );
    }
    out
}
