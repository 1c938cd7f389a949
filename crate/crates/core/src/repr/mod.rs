//! Core value types shared by every other module: documents, queries,
//! dense and sparse representations, quantized postings, judgments and
//! ranked runs.
//!
//! All types here are immutable after construction and safe to share
//! across threads.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

pub mod io;

/// Term identifier into the vocabulary (0..vocab_size).
pub type TermId = u32;

#[derive(Debug, Error)]
pub enum ReprError {
    #[error("token sequence is empty")]
    EmptyTokens,
    #[error("token sequence has {len} tokens, maximum is {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {token} out of range for vocabulary size {vocab}")]
    TokenOutOfRange { token: u32, vocab: u32 },
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("sparse weight for term {term} must be > 0, got {weight}")]
    NonPositiveWeight { term: TermId, weight: f64 },
    #[error("sparse term ids must be strictly increasing (term {term} repeated or out of order)")]
    UnsortedTerms { term: TermId },
    #[error("dense dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("duplicate doc id {doc_id} in ranking for query {query_id}")]
    DuplicateDoc { query_id: String, doc_id: String },
    #[error("query {query_id} has no judged documents")]
    EmptyJudgments { query_id: String },
}

/// Bounds that token sequences must satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLimits {
    pub vocab_size: u32,
    pub max_seq_len: usize,
}

impl Default for TokenLimits {
    fn default() -> Self {
        TokenLimits { vocab_size: u32::MAX, max_seq_len: 128 }
    }
}

fn check_tokens(tokens: &[u32], limits: &TokenLimits) -> Result<(), ReprError> {
    if tokens.is_empty() {
        return Err(ReprError::EmptyTokens);
    }
    if tokens.len() > limits.max_seq_len {
        return Err(ReprError::TooLong { len: tokens.len(), max: limits.max_seq_len });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= limits.vocab_size) {
        return Err(ReprError::TokenOutOfRange { token: t, vocab: limits.vocab_size });
    }
    Ok(())
}

/// A document: identifier plus token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub tokens: Vec<u32>,
}

impl Document {
    pub fn new(
        doc_id: impl Into<String>,
        tokens: Vec<u32>,
        limits: &TokenLimits,
    ) -> Result<Self, ReprError> {
        check_tokens(&tokens, limits)?;
        Ok(Document { doc_id: doc_id.into(), tokens })
    }
}

/// A query: identifier plus token ids. Same bounds as [`Document`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub query_id: String,
    pub tokens: Vec<u32>,
}

impl Query {
    pub fn new(
        query_id: impl Into<String>,
        tokens: Vec<u32>,
        limits: &TokenLimits,
    ) -> Result<Self, ReprError> {
        check_tokens(&tokens, limits)?;
        Ok(Query { query_id: query_id.into(), tokens })
    }
}

/// Sequence-level dense representation, dimension `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVec {
    values: Vec<f64>,
}

impl DenseVec {
    pub fn new(values: Vec<f64>) -> Result<Self, ReprError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ReprError::NonFinite { context: "dense vector" });
        }
        Ok(DenseVec { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Inner product of two dense vectors of equal dimension.
pub fn dense_dot(a: &DenseVec, b: &DenseVec) -> Result<f64, ReprError> {
    if a.dim() != b.dim() {
        return Err(ReprError::DimMismatch { left: a.dim(), right: b.dim() });
    }
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum())
}

/// Lexicon-weighting representation: term id -> positive weight, term ids
/// strictly increasing, zeros never stored.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseLexVec {
    entries: Vec<(TermId, f64)>,
}

impl SparseLexVec {
    /// Builds from (term, weight) pairs; terms must be strictly increasing
    /// and weights positive and finite.
    pub fn from_pairs(entries: Vec<(TermId, f64)>) -> Result<Self, ReprError> {
        let mut prev: Option<TermId> = None;
        for &(term, weight) in &entries {
            if !weight.is_finite() {
                return Err(ReprError::NonFinite { context: "sparse weight" });
            }
            if weight <= 0.0 {
                return Err(ReprError::NonPositiveWeight { term, weight });
            }
            if let Some(p) = prev {
                if term <= p {
                    return Err(ReprError::UnsortedTerms { term });
                }
            }
            prev = Some(term);
        }
        Ok(SparseLexVec { entries })
    }

    /// Builds from a full activation vector, dropping zeros. Negative or
    /// non-finite activations are rejected.
    pub fn from_dense(activations: &[f64]) -> Result<Self, ReprError> {
        let mut entries = Vec::new();
        for (i, &w) in activations.iter().enumerate() {
            if !w.is_finite() {
                return Err(ReprError::NonFinite { context: "sparse activation" });
            }
            if w < 0.0 {
                return Err(ReprError::NonPositiveWeight { term: i as TermId, weight: w });
            }
            if w > 0.0 {
                entries.push((i as TermId, w));
            }
        }
        Ok(SparseLexVec { entries })
    }

    pub fn entries(&self) -> &[(TermId, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, term: TermId) -> Option<f64> {
        self.entries
            .binary_search_by_key(&term, |&(t, _)| t)
            .ok()
            .map(|i| self.entries[i].1)
    }

    /// Keeps only the `n` highest-weight terms; ties go to the lower term id.
    pub fn top_n(&self, n: usize) -> SparseLexVec {
        if self.entries.len() <= n {
            return self.clone();
        }
        let mut by_weight: Vec<(TermId, f64)> = self.entries.clone();
        // Descending weight, ascending term id on ties.
        by_weight.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        by_weight.truncate(n);
        by_weight.sort_by_key(|&(t, _)| t);
        SparseLexVec { entries: by_weight }
    }
}

/// Dot product over shared term ids (merge join over sorted entries).
pub fn sparse_dot(a: &SparseLexVec, b: &SparseLexVec) -> f64 {
    let (mut i, mut j) = (0, 0);
    let (ae, be) = (&a.entries, &b.entries);
    let mut acc = 0.0;
    while i < ae.len() && j < be.len() {
        match ae[i].0.cmp(&be[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += ae[i].1 * be[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

/// Integer-impact representation: term id -> floor(100 x weight), zero
/// impacts dropped.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QuantizedVec {
    entries: Vec<(TermId, u32)>,
}

impl QuantizedVec {
    /// Builds from entries already sorted by strictly increasing term id
    /// with positive impacts (e.g. reconstructed from an index).
    pub fn from_sorted_entries(entries: Vec<(TermId, u32)>) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
        debug_assert!(entries.iter().all(|&(_, i)| i > 0));
        QuantizedVec { entries }
    }

    pub fn entries(&self) -> &[(TermId, u32)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, term: TermId) -> Option<u32> {
        self.entries
            .binary_search_by_key(&term, |&(t, _)| t)
            .ok()
            .map(|i| self.entries[i].1)
    }
}

// Absorbs binary/decimal representation error so that weights written with
// two decimals (k/100) quantize to exactly k: 0.29f64 * 100.0 is
// 28.999999999999996 and a bare floor would lose a unit.
const QUANT_EPS: f64 = 1e-9;

/// Quantizes a lexicon vector: impact = floor(100 x weight); terms whose
/// impact floors to zero are dropped.
pub fn quantize(v: &SparseLexVec) -> QuantizedVec {
    let entries = v
        .entries
        .iter()
        .filter_map(|&(term, w)| {
            let impact = (100.0 * w + QUANT_EPS).floor();
            // Weights are positive and finite, so impact >= 0 always holds.
            let impact = impact.min(u32::MAX as f64) as u32;
            (impact > 0).then_some((term, impact))
        })
        .collect();
    QuantizedVec { entries }
}

/// Impact dot product of two quantized vectors.
pub fn quantized_dot(a: &QuantizedVec, b: &QuantizedVec) -> u64 {
    let (mut i, mut j) = (0, 0);
    let (ae, be) = (&a.entries, &b.entries);
    let mut acc = 0u64;
    while i < ae.len() && j < be.len() {
        match ae[i].0.cmp(&be[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += ae[i].1 as u64 * be[j].1 as u64;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

/// Relevance judgments: binary relevant sets plus optional graded map.
///
/// A judged document with grade 0 is recorded as judged non-relevant; the
/// binary relevant set holds docs with grade >= 1.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    grades: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Qrels::default()
    }

    pub fn insert(&mut self, query_id: impl Into<String>, doc_id: impl Into<String>, grade: u32) {
        self.grades
            .entry(query_id.into())
            .or_default()
            .insert(doc_id.into(), grade);
    }

    /// Checks the "every query has at least one judged document" invariant.
    pub fn validate(&self) -> Result<(), ReprError> {
        for (qid, docs) in &self.grades {
            if docs.is_empty() {
                return Err(ReprError::EmptyJudgments { query_id: qid.clone() });
            }
        }
        Ok(())
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.grades.keys().map(String::as_str)
    }

    pub fn num_queries(&self) -> usize {
        self.grades.len()
    }

    pub fn contains_query(&self, query_id: &str) -> bool {
        self.grades.contains_key(query_id)
    }

    /// Docs judged relevant (grade >= 1) for a query.
    pub fn relevant_docs(&self, query_id: &str) -> BTreeSet<&str> {
        self.grades
            .get(query_id)
            .map(|m| {
                m.iter()
                    .filter(|&(_, &g)| g >= 1)
                    .map(|(d, _)| d.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> Option<u32> {
        self.grades.get(query_id).and_then(|m| m.get(doc_id)).copied()
    }

    /// Graded judgments for a query (includes grade-0 entries).
    pub fn graded(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.grades.get(query_id)
    }
}

/// Ranked retrieval output: per query, a list of (doc_id, score) held in
/// the canonical total order (descending score, ascending doc id on ties).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunFile {
    rankings: BTreeMap<String, Vec<(String, f64)>>,
}

/// Sorts into the canonical run order: descending score, ties broken by
/// ascending lexicographic doc id.
pub fn sort_ranking(ranking: &mut [(String, f64)]) {
    ranking.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("run scores must be finite")
            .then_with(|| a.0.cmp(&b.0))
    });
}

impl RunFile {
    pub fn new() -> Self {
        RunFile::default()
    }

    /// Inserts a query's ranking, enforcing finite scores, no duplicate doc
    /// ids, and the canonical order.
    pub fn insert(
        &mut self,
        query_id: impl Into<String>,
        mut ranking: Vec<(String, f64)>,
    ) -> Result<(), ReprError> {
        let query_id = query_id.into();
        if ranking.iter().any(|(_, s)| !s.is_finite()) {
            return Err(ReprError::NonFinite { context: "run score" });
        }
        sort_ranking(&mut ranking);
        for w in ranking.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(ReprError::DuplicateDoc {
                    query_id: query_id.clone(),
                    doc_id: w[0].0.clone(),
                });
            }
        }
        self.rankings.insert(query_id, ranking);
        Ok(())
    }

    pub fn ranking(&self, query_id: &str) -> Option<&[(String, f64)]> {
        self.rankings.get(query_id).map(Vec::as_slice)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.rankings.keys().map(String::as_str)
    }

    pub fn num_queries(&self) -> usize {
        self.rankings.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[(String, f64)])> {
        self.rankings.iter().map(|(q, r)| (q.as_str(), r.as_slice()))
    }
}
