//! Negative mining: BM25 candidates for warmup, and hard negatives from
//! both representing heads of a warmed checkpoint for continual training.
//!
//! Mining reads the judgments only to exclude positives; scores never see
//! labels. Queries mine in parallel and merge in query order.

use rayon::prelude::*;
use std::collections::HashSet;

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::index::{Bm25Index, DenseIndex, ImpactIndex};
use crate::repr::io::NegativeSource;
use crate::repr::{Qrels, Query};
use crate::search::{encode_queries, search_dense, search_lexicon};

use super::{NegativePool, PipelineError};

/// Mining output: the pool plus diagnostics.
#[derive(Debug, Clone)]
pub struct MiningReport {
    pub pool: NegativePool,
    /// Queries that produced no candidates after positive exclusion.
    pub skipped_queries: Vec<String>,
    /// Mean fraction of shared candidates between the dense and lexicon
    /// pools at the mining depth (dual mining only).
    pub overlap_at_top_n: Option<f64>,
}

/// Top `top_n` BM25 candidates per query, excluding the query's judged
/// relevant documents.
pub fn mine_bm25_negatives(
    queries: &[Query],
    index: &Bm25Index,
    qrels: &Qrels,
    top_n: usize,
) -> MiningReport {
    let mined: Vec<(String, Vec<String>)> = queries
        .par_iter()
        .map(|q| {
            let exclude: HashSet<u32> = qrels
                .relevant_docs(&q.query_id)
                .into_iter()
                .filter_map(|d| index.doc_table().ordinal(d))
                .collect();
            let ranked = index.search(&q.tokens, top_n, Some(&exclude));
            (q.query_id.clone(), ranked.into_iter().map(|(d, _)| d).collect())
        })
        .collect();

    let mut pool = NegativePool::new();
    let mut skipped = Vec::new();
    for (qid, docs) in mined {
        if docs.is_empty() {
            skipped.push(qid);
            continue;
        }
        for doc in docs {
            pool.add(&qid, &doc, NegativeSource::Bm25);
        }
    }
    MiningReport { pool, skipped_queries: skipped, overlap_at_top_n: None }
}

/// Hard negatives from both heads of a warmed checkpoint: `top_n` from
/// lexicon retrieval and `top_n` from dense retrieval, each excluding the
/// query's positives, tagged by source.
pub fn mine_dual_negatives(
    queries: &[Query],
    params: &EncoderParams,
    cfg: &EncoderConfig,
    impact: &ImpactIndex,
    dense: &DenseIndex,
    qrels: &Qrels,
    top_n: usize,
) -> Result<MiningReport, PipelineError> {
    let encoded = encode_queries(queries, params, cfg)?;
    let mined: Vec<(String, Vec<String>, Vec<String>)> = encoded
        .par_iter()
        .map(|q| {
            let positives = qrels.relevant_docs(&q.query_id);
            // Retrieve deep enough that exclusion cannot starve the pool.
            let depth = top_n + positives.len();
            let lex: Vec<String> = search_lexicon(&q.quantized, impact, depth)
                .into_iter()
                .map(|(d, _)| d)
                .filter(|d| !positives.contains(d.as_str()))
                .take(top_n)
                .collect();
            let den: Vec<String> = search_dense(&q.dense, dense, depth)
                .map(|ranked| {
                    ranked
                        .into_iter()
                        .map(|(d, _)| d)
                        .filter(|d| !positives.contains(d.as_str()))
                        .take(top_n)
                        .collect()
                })
                .unwrap_or_default();
            (q.query_id.clone(), den, lex)
        })
        .collect();

    let mut pool = NegativePool::new();
    let mut skipped = Vec::new();
    let mut overlap_sum = 0.0;
    let mut overlap_count = 0usize;
    for (qid, den, lex) in mined {
        if den.is_empty() && lex.is_empty() {
            skipped.push(qid);
            continue;
        }
        let lex_set: HashSet<&str> = lex.iter().map(String::as_str).collect();
        let shared = den.iter().filter(|d| lex_set.contains(d.as_str())).count();
        overlap_sum += shared as f64 / top_n as f64;
        overlap_count += 1;
        for doc in &den {
            pool.add(&qid, doc, NegativeSource::Dense);
        }
        for doc in &lex {
            pool.add(&qid, doc, NegativeSource::Lex);
        }
    }
    let overlap = (overlap_count > 0).then(|| overlap_sum / overlap_count as f64);
    Ok(MiningReport { pool, skipped_queries: skipped, overlap_at_top_n: overlap })
}
