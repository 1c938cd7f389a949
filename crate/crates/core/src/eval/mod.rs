//! Ranking metrics (MRR@k, both Recall@N flavors, nDCG@k), the expected
//! term-match FLOPS estimate, and a single-threaded QPS harness.
//!
//! Aggregation runs over the qrels queries: a judged query missing from
//! the run scores zero, while run queries without judgments are excluded
//! and counted. Metrics are pure functions of (run, qrels).

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::{DenseIndex, ImpactIndex};
use crate::repr::{Qrels, RunFile, SparseLexVec};
use crate::search::{search_one, EncodedQuery, GateParams, Scheme, SearchConfig, SearchError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no queries to evaluate")]
    NoQueries,
    #[error(transparent)]
    Search(#[from] SearchError),
}

/// Aggregate value plus the per-query breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub per_query: BTreeMap<String, f64>,
    /// Judged queries that entered the mean.
    pub query_count: usize,
    /// Run queries skipped because they have no judgments.
    pub unjudged_queries: usize,
}

fn aggregate(
    name: &str,
    run: &RunFile,
    qrels: &Qrels,
    per_query_metric: impl Fn(&str, &[(String, f64)]) -> f64,
) -> Result<MetricReport, EvalError> {
    if qrels.num_queries() == 0 {
        return Err(EvalError::NoQueries);
    }
    let mut per_query = BTreeMap::new();
    for qid in qrels.queries() {
        let value = match run.ranking(qid) {
            Some(ranking) => per_query_metric(qid, ranking),
            None => 0.0,
        };
        per_query.insert(qid.to_string(), value);
    }
    let unjudged = run.queries().filter(|q| !qrels.contains_query(q)).count();
    let value = per_query.values().sum::<f64>() / per_query.len() as f64;
    Ok(MetricReport {
        name: name.to_string(),
        value,
        query_count: per_query.len(),
        unjudged_queries: unjudged,
        per_query,
    })
}

/// Mean reciprocal rank of the first relevant document within the top k.
pub fn mrr_at_k(run: &RunFile, qrels: &Qrels, k: usize) -> Result<MetricReport, EvalError> {
    aggregate(&format!("mrr@{k}"), run, qrels, |qid, ranking| {
        let relevant = qrels.relevant_docs(qid);
        ranking
            .iter()
            .take(k)
            .position(|(doc, _)| relevant.contains(doc.as_str()))
            .map(|idx| 1.0 / (idx + 1) as f64)
            .unwrap_or(0.0)
    })
}

/// All-positive-macro recall: retrieved relevant in the top n over
/// min(n, number of relevant).
pub fn recall_marco(run: &RunFile, qrels: &Qrels, n: usize) -> Result<MetricReport, EvalError> {
    aggregate(&format!("recall_marco@{n}"), run, qrels, |qid, ranking| {
        let relevant = qrels.relevant_docs(qid);
        if relevant.is_empty() {
            return 0.0;
        }
        let hits = ranking
            .iter()
            .take(n)
            .filter(|(doc, _)| relevant.contains(doc.as_str()))
            .count();
        hits as f64 / n.min(relevant.len()) as f64
    })
}

/// One-positive-enough recall: 1 if any relevant document appears in the
/// top n.
pub fn recall_dpr(run: &RunFile, qrels: &Qrels, n: usize) -> Result<MetricReport, EvalError> {
    aggregate(&format!("recall_dpr@{n}"), run, qrels, |qid, ranking| {
        let relevant = qrels.relevant_docs(qid);
        let hit = ranking
            .iter()
            .take(n)
            .any(|(doc, _)| relevant.contains(doc.as_str()));
        if hit {
            1.0
        } else {
            0.0
        }
    })
}

/// nDCG@k with gains 2^grade - 1 and log2(rank+1) discounts. Queries
/// whose ideal DCG is zero score zero.
pub fn ndcg_at_k(run: &RunFile, qrels: &Qrels, k: usize) -> Result<MetricReport, EvalError> {
    aggregate(&format!("ndcg@{k}"), run, qrels, |qid, ranking| {
        let Some(graded) = qrels.graded(qid) else { return 0.0 };
        let gain = |grade: u32| (2f64.powi(grade as i32)) - 1.0;
        let dcg: f64 = ranking
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, (doc, _))| {
                let g = graded.get(doc).copied().unwrap_or(0);
                gain(g) / ((i + 2) as f64).log2()
            })
            .sum();
        let mut grades: Vec<u32> = graded.values().copied().collect();
        grades.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = grades
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| gain(g) / ((i + 2) as f64).log2())
            .sum();
        if idcg == 0.0 {
            0.0
        } else {
            dcg / idcg
        }
    })
}

/// Expected multiplications per query-document pair: sum over terms of
/// the empirical nonzero probability in documents (from the built index)
/// times the nonzero probability in the query sample.
pub fn flops_metric(index: &ImpactIndex, query_vectors: &[SparseLexVec]) -> Result<f64, EvalError> {
    if query_vectors.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let nq = query_vectors.len() as f64;
    let mut query_counts: BTreeMap<u32, u32> = BTreeMap::new();
    for v in query_vectors {
        for &(term, _) in v.entries() {
            *query_counts.entry(term).or_insert(0) += 1;
        }
    }
    let mut total = 0.0;
    for (&term, &count) in &query_counts {
        let p_q = count as f64 / nq;
        let p_d = index.term_doc_frequency(term);
        total += p_q * p_d;
    }
    Ok(total)
}

/// Latency measurement for one scheme over pre-encoded queries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpsReport {
    pub scheme: String,
    pub queries: usize,
    pub trials: usize,
    pub total_seconds: f64,
    pub qps: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    /// Threads used by the harness; the comparable mode pins to one.
    pub threads: usize,
}

/// Runs every query `trials` times on the current thread and reports
/// throughput and latency percentiles. Queries are pre-encoded so
/// encoding cost is excluded.
pub fn qps_bench(
    scheme: Scheme,
    queries: &[EncodedQuery],
    impact: &ImpactIndex,
    dense: &DenseIndex,
    gate: Option<&GateParams>,
    cfg: &SearchConfig,
    trials: usize,
) -> Result<QpsReport, EvalError> {
    if queries.is_empty() || trials == 0 {
        return Err(EvalError::NoQueries);
    }
    let mut latencies_ms = Vec::with_capacity(queries.len() * trials);
    let start = Instant::now();
    for _ in 0..trials {
        for q in queries {
            let t0 = Instant::now();
            let ranking = search_one(scheme, q, impact, dense, gate, cfg)?;
            std::hint::black_box(&ranking);
            latencies_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    let total = start.elapsed().as_secs_f64();
    latencies_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Nearest-rank percentile.
    let pct = |p: f64| {
        let rank = ((latencies_ms.len() as f64) * p).ceil() as usize;
        latencies_ms[rank.saturating_sub(1).min(latencies_ms.len() - 1)]
    };
    let n = (queries.len() * trials) as f64;
    Ok(QpsReport {
        scheme: scheme.as_str().to_string(),
        queries: queries.len(),
        trials,
        total_seconds: total,
        qps: n / total,
        p50_ms: pct(0.50),
        p95_ms: pct(0.95),
        p99_ms: pct(0.99),
        threads: 1,
    })
}

/// Renders reports as aligned columns.
pub fn format_metric_table(reports: &[MetricReport]) -> String {
    let mut out = String::new();
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(6).max(6);
    out.push_str(&format!("{:<width$}  {:>10}  {:>7}\n", "metric", "value", "queries"));
    for r in reports {
        out.push_str(&format!("{:<width$}  {:>10.6}  {:>7}\n", r.name, r.value, r.query_count));
    }
    out
}
