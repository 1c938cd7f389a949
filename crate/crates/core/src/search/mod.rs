//! The retrieval schemes: lexicon impact scoring over the inverted index,
//! exhaustive dense scan, pipelined uni-retrieval (lexicon candidates
//! rescored with dense dot products), query-side gated combination, and
//! the twice-retrieval ensemble baseline.
//!
//! Rankings use one canonical total order everywhere: descending score,
//! ties broken by ascending lexicographic doc id. All searches are
//! read-only over the indexes; query batches run in parallel.

use std::collections::{BinaryHeap, HashMap, HashSet};
use std::cmp::Reverse;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{encode, EncoderConfig, EncoderError, EncoderParams, ParamSet};
use crate::index::{DenseIndex, ImpactIndex, IndexError};
use crate::ndkernel::{Tape, Tensor, Var};
use crate::repr::{quantize, sort_ranking, QuantizedVec, Query, RunFile};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Repr(#[from] crate::repr::ReprError),
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("gate parameters malformed: {0}")]
    Gate(String),
}

/// Retrieval scheme selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Lexicon,
    Dense,
    Uni,
    Gated,
    Ensemble,
}

impl Scheme {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lexicon" => Some(Scheme::Lexicon),
            "dense" => Some(Scheme::Dense),
            "uni" => Some(Scheme::Uni),
            "gated" => Some(Scheme::Gated),
            "ensemble" => Some(Scheme::Ensemble),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Lexicon => "lexicon",
            Scheme::Dense => "dense",
            Scheme::Uni => "uni",
            Scheme::Gated => "gated",
            Scheme::Ensemble => "ensemble",
        }
    }
}

/// Search-time knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Results returned per query.
    pub k_final: usize,
    /// Lexicon candidate depth for uni/gated retrieval. 0 means
    /// lexicon-only; a depth below `k_final` caps the result list at
    /// `k_uni` documents (sweeping small K is a supported analysis).
    pub k_uni: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { k_final: 1000, k_uni: 2048 }
    }
}

impl SearchConfig {
    pub fn validate(&self, _scheme: Scheme) -> Result<(), SearchError> {
        if self.k_final == 0 {
            return Err(SearchError::Config("k_final must be >= 1".into()));
        }
        Ok(())
    }
}

/// Impact scores for every document sharing at least one term with the
/// query, via document-at-a-time traversal of the query's posting lists.
pub fn lexicon_scores(query: &QuantizedVec, index: &ImpactIndex) -> HashMap<u32, u64> {
    struct Cursor<'a> {
        list: &'a [(u32, u16)],
        pos: usize,
        q_impact: u64,
    }
    let mut cursors: Vec<Cursor> = query
        .entries()
        .iter()
        .filter_map(|&(term, q_impact)| {
            let list = index.postings(term);
            (!list.is_empty()).then_some(Cursor { list, pos: 0, q_impact: q_impact as u64 })
        })
        .collect();

    let mut scores: HashMap<u32, u64> = HashMap::new();
    let mut heap: BinaryHeap<Reverse<(u32, usize)>> = cursors
        .iter()
        .enumerate()
        .map(|(i, c)| Reverse((c.list[0].0, i)))
        .collect();

    while let Some(&Reverse((ordinal, _))) = heap.peek() {
        let mut acc = 0u64;
        while let Some(&Reverse((o, i))) = heap.peek() {
            if o != ordinal {
                break;
            }
            heap.pop();
            let cursor = &mut cursors[i];
            let (_, d_impact) = cursor.list[cursor.pos];
            acc += cursor.q_impact * d_impact as u64;
            cursor.pos += 1;
            if cursor.pos < cursor.list.len() {
                heap.push(Reverse((cursor.list[cursor.pos].0, i)));
            }
        }
        scores.insert(ordinal, acc);
    }
    scores
}

fn top_k_from_scores(
    scores: impl IntoIterator<Item = (u32, f64)>,
    index_table: &crate::index::DocTable,
    k: usize,
) -> Vec<(String, f64)> {
    let mut ranked: Vec<(String, f64)> = scores
        .into_iter()
        .map(|(ordinal, s)| (index_table.doc_id(ordinal).to_string(), s))
        .collect();
    sort_ranking(&mut ranked);
    ranked.truncate(k);
    ranked
}

/// Lexicon retrieval: top-k documents by quantized impact dot product.
/// An empty quantized query yields an empty ranking.
pub fn search_lexicon(
    query: &QuantizedVec,
    index: &ImpactIndex,
    k: usize,
) -> Vec<(String, f64)> {
    let scores = lexicon_scores(query, index);
    top_k_from_scores(
        scores.into_iter().map(|(o, s)| (o, s as f64)),
        index.doc_table(),
        k,
    )
}

/// Dense retrieval: exhaustive dot product against every row.
pub fn search_dense(
    query: &[f64],
    index: &DenseIndex,
    k: usize,
) -> Result<Vec<(String, f64)>, SearchError> {
    if query.len() != index.dim() {
        return Err(SearchError::Index(IndexError::DimMismatch {
            index: index.dim(),
            query: query.len(),
        }));
    }
    let scores = (0..index.num_docs() as u32).map(|ordinal| {
        let row = index.row(ordinal);
        let s: f64 = row.iter().zip(query).map(|(a, b)| a * b).sum();
        (ordinal, s)
    });
    Ok(top_k_from_scores(scores, index.doc_table(), k))
}

/// Lexicon candidates for the pipelined schemes: top `k_uni` ordinals
/// with their impact scores in the canonical order.
fn lexicon_candidates(
    query: &QuantizedVec,
    index: &ImpactIndex,
    k_uni: usize,
) -> Vec<(u32, u64)> {
    let scores = lexicon_scores(query, index);
    let mut ranked: Vec<(u32, u64)> = scores.into_iter().collect();
    ranked.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then_with(|| index.doc_table().doc_id(a.0).cmp(index.doc_table().doc_id(b.0)))
    });
    ranked.truncate(k_uni);
    ranked
}

/// Uni-retrieval: lexicon top-K candidate generation, dense rescoring of
/// those candidates, final order by the sum of both scores. Documents
/// outside the lexicon top-K are unreachable. `k_uni == 0` degenerates to
/// lexicon-only retrieval.
pub fn search_uni(
    query: &QuantizedVec,
    query_dense: &[f64],
    impact: &ImpactIndex,
    dense: &DenseIndex,
    cfg: &SearchConfig,
) -> Result<Vec<(String, f64)>, SearchError> {
    if cfg.k_uni == 0 {
        return Ok(search_lexicon(query, impact, cfg.k_final));
    }
    if query_dense.len() != dense.dim() {
        return Err(SearchError::Index(IndexError::DimMismatch {
            index: dense.dim(),
            query: query_dense.len(),
        }));
    }
    let candidates = lexicon_candidates(query, impact, cfg.k_uni);
    let scores = candidates.into_iter().map(|(ordinal, lex_score)| {
        let row = dense.row(ordinal);
        let d: f64 = row.iter().zip(query_dense).map(|(a, b)| a * b).sum();
        (ordinal, lex_score as f64 + d)
    });
    Ok(top_k_from_scores(scores, impact.doc_table(), cfg.k_final))
}

/// Gated retrieval: same candidates as uni-retrieval, final score
/// g * dense + (1 - g) * lexicon with the per-query gate g in (0,1).
pub fn search_gated(
    query: &QuantizedVec,
    query_dense: &[f64],
    gate: f64,
    impact: &ImpactIndex,
    dense: &DenseIndex,
    cfg: &SearchConfig,
) -> Result<Vec<(String, f64)>, SearchError> {
    if !(0.0..=1.0).contains(&gate) {
        return Err(SearchError::Gate(format!("gate value {gate} outside [0,1]")));
    }
    if cfg.k_uni == 0 {
        return Ok(search_lexicon(query, impact, cfg.k_final));
    }
    if query_dense.len() != dense.dim() {
        return Err(SearchError::Index(IndexError::DimMismatch {
            index: dense.dim(),
            query: query_dense.len(),
        }));
    }
    let candidates = lexicon_candidates(query, impact, cfg.k_uni);
    let scores = candidates.into_iter().map(|(ordinal, lex_score)| {
        let row = dense.row(ordinal);
        let d: f64 = row.iter().zip(query_dense).map(|(a, b)| a * b).sum();
        (ordinal, gate * d + (1.0 - gate) * lex_score as f64)
    });
    Ok(top_k_from_scores(scores, impact.doc_table(), cfg.k_final))
}

/// Twice-retrieval ensemble baseline: independent top-(10k) lists from
/// both schemes, union of candidates, sum of both scores (the missing
/// side computed on demand), final top-k.
pub fn search_ensemble(
    query: &QuantizedVec,
    query_dense: &[f64],
    impact: &ImpactIndex,
    dense: &DenseIndex,
    k: usize,
) -> Result<Vec<(String, f64)>, SearchError> {
    if query_dense.len() != dense.dim() {
        return Err(SearchError::Index(IndexError::DimMismatch {
            index: dense.dim(),
            query: query_dense.len(),
        }));
    }
    let k_each = k.saturating_mul(10).max(k);
    let lex_scores = lexicon_scores(query, impact);
    let mut lex_ranked: Vec<(u32, u64)> = lex_scores.iter().map(|(&o, &s)| (o, s)).collect();
    lex_ranked.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then_with(|| impact.doc_table().doc_id(a.0).cmp(impact.doc_table().doc_id(b.0)))
    });
    lex_ranked.truncate(k_each);

    let dense_ranked = search_dense(query_dense, dense, k_each)?;

    let mut union: HashSet<u32> = lex_ranked.iter().map(|&(o, _)| o).collect();
    for (doc_id, _) in &dense_ranked {
        if let Some(ordinal) = impact.doc_table().ordinal(doc_id) {
            union.insert(ordinal);
        }
    }

    let scores = union.into_iter().map(|ordinal| {
        let lex = lex_scores.get(&ordinal).copied().unwrap_or(0) as f64;
        let row = dense.row(ordinal);
        let d: f64 = row.iter().zip(query_dense).map(|(a, b)| a * b).sum();
        (ordinal, lex + d)
    });
    Ok(top_k_from_scores(scores, impact.doc_table(), k))
}

/// Mean fraction of shared candidates in the two runs' top-`depth` lists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapReport {
    pub fraction: f64,
    pub compared_queries: usize,
    pub skipped_queries: usize,
}

pub fn candidate_overlap(run_a: &RunFile, run_b: &RunFile, depth: usize) -> OverlapReport {
    let mut total = 0.0;
    let mut compared = 0;
    let mut skipped = 0;
    for (qid, ranking_a) in run_a.iter() {
        let Some(ranking_b) = run_b.ranking(qid) else {
            skipped += 1;
            continue;
        };
        let top_a: HashSet<&str> = ranking_a.iter().take(depth).map(|(d, _)| d.as_str()).collect();
        let shared = ranking_b
            .iter()
            .take(depth)
            .filter(|(d, _)| top_a.contains(d.as_str()))
            .count();
        total += shared as f64 / depth as f64;
        compared += 1;
    }
    for (qid, _) in run_b.iter() {
        if run_a.ranking(qid).is_none() {
            skipped += 1;
        }
    }
    OverlapReport {
        fraction: if compared == 0 { 0.0 } else { total / compared as f64 },
        compared_queries: compared,
        skipped_queries: skipped,
    }
}

/// Query-side gate: a small feed-forward map from the query dense vector
/// to a logistic weight in (0,1).
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

pub const GATE_HIDDEN: usize = 8;

impl GateParams {
    pub fn init(embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut gauss = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(rows, cols, data).expect("shape matches data")
        };
        GateParams {
            w1: gauss(embed_dim, GATE_HIDDEN),
            b1: Tensor::zeros(1, GATE_HIDDEN),
            w2: gauss(GATE_HIDDEN, 1),
            b2: Tensor::zeros(1, 1),
        }
    }

    /// Gate value for a query dense vector; strictly inside (0,1).
    pub fn value(&self, query_dense: &[f64]) -> f64 {
        let hidden: Vec<f64> = (0..self.w1.cols())
            .map(|j| {
                let mut acc = self.b1.get(0, j);
                for (i, &q) in query_dense.iter().enumerate() {
                    acc += q * self.w1.get(i, j);
                }
                acc.max(0.0)
            })
            .collect();
        let mut z = self.b2.get(0, 0);
        for (i, &h) in hidden.iter().enumerate() {
            z += h * self.w2.get(i, 0);
        }
        1.0 / (1.0 + (-z).exp())
    }

    /// Gate value as a tape graph over bound gate leaves; used for joint
    /// training. Returns g in (0,1) as a 1 x 1 var.
    pub fn on_tape(tape: &mut Tape, vars: &GateVars, query_dense: Var) -> Result<Var, crate::ndkernel::KernelError> {
        let hidden = tape.matmul(query_dense, vars.w1)?;
        let hidden = tape.add_row(hidden, vars.b1)?;
        let hidden = tape.relu(hidden)?;
        let z = tape.matmul(hidden, vars.w2)?;
        let z = tape.add(z, vars.b2)?;
        // sigmoid(z) via a two-way softmax against a zero logit.
        let zero = tape.constant(Tensor::scalar(0.0))?;
        let paired = tape.concat_cols(&[z, zero])?;
        let probs = tape.softmax_rows(paired)?;
        tape.select(probs, 0, 0)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<GateVars, crate::ndkernel::KernelError> {
        Ok(GateVars {
            w1: tape.leaf(self.w1.clone(), trainable)?,
            b1: tape.leaf(self.b1.clone(), trainable)?,
            w2: tape.leaf(self.w2.clone(), trainable)?,
            b2: tape.leaf(self.b2.clone(), trainable)?,
        })
    }

    /// Serializes into a named set for checkpoints.
    pub fn to_set(&self) -> ParamSet {
        let mut set = ParamSet::new();
        set.insert("w1", self.w1.clone());
        set.insert("b1", self.b1.clone());
        set.insert("w2", self.w2.clone());
        set.insert("b2", self.b2.clone());
        set
    }

    pub fn from_set(set: &ParamSet) -> Result<Self, SearchError> {
        let get = |name: &str| {
            set.get(name)
                .cloned()
                .ok_or_else(|| SearchError::Gate(format!("missing gate tensor {name}")))
        };
        Ok(GateParams { w1: get("w1")?, b1: get("b1")?, w2: get("w2")?, b2: get("b2")? })
    }
}

/// Tape handles for the gate parameters.
pub struct GateVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// A query encoded once for searching.
#[derive(Debug, Clone)]
pub struct EncodedQuery {
    pub query_id: String,
    pub dense: Vec<f64>,
    pub quantized: QuantizedVec,
}

/// Encodes queries in parallel (read-only parameters).
pub fn encode_queries(
    queries: &[Query],
    params: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<Vec<EncodedQuery>, SearchError> {
    queries
        .par_iter()
        .map(|q| {
            let repr = encode(params, cfg, &q.tokens)?;
            Ok(EncodedQuery {
                query_id: q.query_id.clone(),
                dense: repr.dense.values().to_vec(),
                quantized: quantize(&repr.lex),
            })
        })
        .collect()
}

/// One scheme dispatch over a pre-encoded query.
pub fn search_one(
    scheme: Scheme,
    query: &EncodedQuery,
    impact: &ImpactIndex,
    dense: &DenseIndex,
    gate: Option<&GateParams>,
    cfg: &SearchConfig,
) -> Result<Vec<(String, f64)>, SearchError> {
    cfg.validate(scheme)?;
    match scheme {
        Scheme::Lexicon => Ok(search_lexicon(&query.quantized, impact, cfg.k_final)),
        Scheme::Dense => search_dense(&query.dense, dense, cfg.k_final),
        Scheme::Uni => search_uni(&query.quantized, &query.dense, impact, dense, cfg),
        Scheme::Gated => {
            let gate = gate.ok_or_else(|| SearchError::Gate("gated scheme needs gate parameters".into()))?;
            let g = gate.value(&query.dense);
            search_gated(&query.quantized, &query.dense, g, impact, dense, cfg)
        }
        Scheme::Ensemble => search_ensemble(&query.quantized, &query.dense, impact, dense, cfg.k_final),
    }
}

/// Per-batch warnings from a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchWarnings {
    pub empty_quantized_queries: usize,
}

/// Searches a whole query batch into a run file. Queries execute in
/// parallel over the immutable indexes.
pub fn batch_search(
    scheme: Scheme,
    queries: &[EncodedQuery],
    impact: &ImpactIndex,
    dense: &DenseIndex,
    gate: Option<&GateParams>,
    cfg: &SearchConfig,
) -> Result<(RunFile, BatchWarnings), SearchError> {
    let rankings: Vec<(String, Vec<(String, f64)>, bool)> = queries
        .par_iter()
        .map(|q| {
            let empty = q.quantized.is_empty() && scheme != Scheme::Dense;
            search_one(scheme, q, impact, dense, gate, cfg)
                .map(|ranking| (q.query_id.clone(), ranking, empty))
        })
        .collect::<Result<_, _>>()?;

    let mut run = RunFile::new();
    let mut warnings = BatchWarnings::default();
    for (qid, ranking, empty) in rankings {
        if empty {
            warnings.empty_quantized_queries += 1;
        }
        run.insert(qid, ranking)?;
    }
    Ok((run, warnings))
}
