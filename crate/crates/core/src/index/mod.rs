//! Build-time retrieval structures: the impact-scored inverted index over
//! quantized lexicon vectors, the flat dense matrix, and a BM25 index used
//! for warmup negative mining.
//!
//! Built indexes are immutable; search only reads them. Document encoding
//! parallelizes across documents with rayon, then a single-threaded merge
//! in corpus order keeps every artifact deterministic.

use std::collections::HashMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::encoder::{encode, EncoderConfig, EncoderError, EncoderParams};
use crate::repr::{quantize, Document, QuantizedVec, SparseLexVec};

pub mod disk;

/// Largest impact storable in a posting (16-bit width); lexicon weights at
/// or above 655.36 clamp here, counted in the build stats.
pub const MAX_IMPACT: u32 = u16::MAX as u32;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("encoding document {doc_id} failed: {source}")]
    Encode {
        doc_id: String,
        #[source]
        source: EncoderError,
    },
    #[error("duplicate doc id {0} in corpus")]
    DuplicateDoc(String),
    #[error("unknown doc id {0}")]
    UnknownDoc(String),
    #[error("dense index dimension {index} does not match query dimension {query}")]
    DimMismatch { index: usize, query: usize },
}

/// Bidirectional ordinal <-> doc id table. Ordinals follow corpus order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DocTable {
    ids: Vec<String>,
    by_id: HashMap<String, u32>,
}

impl DocTable {
    pub fn from_ids(ids: Vec<String>) -> Result<Self, IndexError> {
        let mut by_id = HashMap::with_capacity(ids.len());
        for (ordinal, id) in ids.iter().enumerate() {
            if by_id.insert(id.clone(), ordinal as u32).is_some() {
                return Err(IndexError::DuplicateDoc(id.clone()));
            }
        }
        Ok(DocTable { ids, by_id })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn doc_id(&self, ordinal: u32) -> &str {
        &self.ids[ordinal as usize]
    }

    pub fn ordinal(&self, doc_id: &str) -> Option<u32> {
        self.by_id.get(doc_id).copied()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// Inverted index from term id to (doc ordinal, quantized impact).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImpactIndex {
    vocab_size: u32,
    postings: Vec<Vec<(u32, u16)>>,
    doc_table: DocTable,
    doc_nonzeros: Vec<u32>,
    total_postings: u64,
    top_n: Option<u32>,
    checkpoint_hash: String,
}

impl ImpactIndex {
    /// Builds directly from per-document quantized vectors (ordinal order
    /// matching `doc_table`).
    pub fn from_quantized_vectors(
        doc_table: DocTable,
        vectors: &[QuantizedVec],
        vocab_size: u32,
        top_n: Option<u32>,
        checkpoint_hash: &str,
    ) -> (Self, ImpactBuildStats) {
        assert_eq!(doc_table.len(), vectors.len(), "one vector per document");
        let mut postings: Vec<Vec<(u32, u16)>> = vec![Vec::new(); vocab_size as usize];
        let mut doc_nonzeros = vec![0u32; vectors.len()];
        let mut stats = ImpactBuildStats::default();
        let mut total = 0u64;
        for (ordinal, qvec) in vectors.iter().enumerate() {
            if qvec.is_empty() {
                stats.empty_docs += 1;
            }
            for &(term, impact) in qvec.entries() {
                let clamped = if impact > MAX_IMPACT {
                    stats.clamped_impacts += 1;
                    MAX_IMPACT as u16
                } else {
                    impact as u16
                };
                postings[term as usize].push((ordinal as u32, clamped));
                doc_nonzeros[ordinal] += 1;
                total += 1;
            }
        }
        (
            ImpactIndex {
                vocab_size,
                postings,
                doc_table,
                doc_nonzeros,
                total_postings: total,
                top_n,
                checkpoint_hash: checkpoint_hash.to_string(),
            },
            stats,
        )
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn postings(&self, term: u32) -> &[(u32, u16)] {
        static EMPTY: &[(u32, u16)] = &[];
        self.postings.get(term as usize).map(Vec::as_slice).unwrap_or(EMPTY)
    }

    pub fn doc_table(&self) -> &DocTable {
        &self.doc_table
    }

    pub fn num_docs(&self) -> usize {
        self.doc_table.len()
    }

    pub fn doc_nonzeros(&self) -> &[u32] {
        &self.doc_nonzeros
    }

    pub fn total_postings(&self) -> u64 {
        self.total_postings
    }

    pub fn top_n(&self) -> Option<u32> {
        self.top_n
    }

    pub fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }

    /// Mean number of stored terms per document.
    pub fn mean_doc_nonzeros(&self) -> f64 {
        if self.doc_nonzeros.is_empty() {
            return 0.0;
        }
        self.total_postings as f64 / self.doc_nonzeros.len() as f64
    }

    /// Fraction of documents whose posting for `term` is nonzero.
    pub fn term_doc_frequency(&self, term: u32) -> f64 {
        if self.num_docs() == 0 {
            return 0.0;
        }
        self.postings(term).len() as f64 / self.num_docs() as f64
    }

    /// Reconstructs every document's quantized vector from the postings.
    pub fn forward_vectors(&self) -> Vec<QuantizedVec> {
        let mut per_doc: Vec<Vec<(u32, u32)>> = vec![Vec::new(); self.num_docs()];
        for (term, list) in self.postings.iter().enumerate() {
            for &(ordinal, impact) in list {
                per_doc[ordinal as usize].push((term as u32, impact as u32));
            }
        }
        per_doc
            .into_iter()
            .map(|entries| {
                // Terms were visited in increasing order, so entries are sorted.
                QuantizedVec::from_sorted_entries(entries)
            })
            .collect()
    }
}

/// Build statistics reported alongside an impact index.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ImpactBuildStats {
    pub clamped_impacts: u64,
    pub empty_docs: u64,
}

/// Flat dense matrix: one row per document.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    dim: usize,
    rows: Vec<f64>,
    doc_table: DocTable,
    checkpoint_hash: String,
}

impl DenseIndex {
    /// Builds directly from a row-major matrix (ordinal order matching
    /// `doc_table`).
    pub fn from_rows(
        doc_table: DocTable,
        dim: usize,
        rows: Vec<f64>,
        checkpoint_hash: &str,
    ) -> Result<Self, IndexError> {
        if rows.len() != doc_table.len() * dim {
            return Err(IndexError::DimMismatch { index: doc_table.len() * dim, query: rows.len() });
        }
        Ok(DenseIndex { dim, rows, doc_table, checkpoint_hash: checkpoint_hash.to_string() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_docs(&self) -> usize {
        self.doc_table.len()
    }

    pub fn doc_table(&self) -> &DocTable {
        &self.doc_table
    }

    pub fn row(&self, ordinal: u32) -> &[f64] {
        let i = ordinal as usize;
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }

    pub fn raw_rows(&self) -> &[f64] {
        &self.rows
    }
}

/// Encodes every document once, in parallel, preserving corpus order.
pub fn encode_corpus(
    corpus: &[Document],
    params: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<Vec<crate::encoder::DualRepr>, IndexError> {
    corpus
        .par_iter()
        .map(|doc| {
            encode(params, cfg, &doc.tokens)
                .map_err(|source| IndexError::Encode { doc_id: doc.doc_id.clone(), source })
        })
        .collect()
}

/// Builds the impact index: encode, optionally keep only the `top_n`
/// heaviest terms per document, quantize, invert.
pub fn build_impact_index(
    corpus: &[Document],
    params: &EncoderParams,
    cfg: &EncoderConfig,
    top_n: Option<usize>,
    checkpoint_hash: &str,
) -> Result<(ImpactIndex, ImpactBuildStats), IndexError> {
    let reprs = encode_corpus(corpus, params, cfg)?;
    let quantized: Vec<QuantizedVec> = reprs
        .into_par_iter()
        .map(|r| {
            let lex = match top_n {
                Some(n) => r.lex.top_n(n),
                None => r.lex,
            };
            quantize(&lex)
        })
        .collect();
    build_impact_from_quantized(corpus, quantized, cfg.vocab_size, top_n, checkpoint_hash)
}

fn build_impact_from_quantized(
    corpus: &[Document],
    quantized: Vec<QuantizedVec>,
    vocab_size: u32,
    top_n: Option<usize>,
    checkpoint_hash: &str,
) -> Result<(ImpactIndex, ImpactBuildStats), IndexError> {
    let doc_table = DocTable::from_ids(corpus.iter().map(|d| d.doc_id.clone()).collect())?;
    Ok(ImpactIndex::from_quantized_vectors(
        doc_table,
        &quantized,
        vocab_size,
        top_n.map(|n| n as u32),
        checkpoint_hash,
    ))
}

/// Builds the flat dense matrix: row i is encode(doc_i).dense.
pub fn build_dense_index(
    corpus: &[Document],
    params: &EncoderParams,
    cfg: &EncoderConfig,
    checkpoint_hash: &str,
) -> Result<DenseIndex, IndexError> {
    let reprs = encode_corpus(corpus, params, cfg)?;
    let doc_table = DocTable::from_ids(corpus.iter().map(|d| d.doc_id.clone()).collect())?;
    let mut rows = Vec::with_capacity(corpus.len() * cfg.embed_dim);
    for r in &reprs {
        rows.extend_from_slice(r.dense.values());
    }
    Ok(DenseIndex {
        dim: cfg.embed_dim,
        rows,
        doc_table,
        checkpoint_hash: checkpoint_hash.to_string(),
    })
}

/// Builds both retrieval structures from one encoding pass.
pub fn build_indexes(
    corpus: &[Document],
    params: &EncoderParams,
    cfg: &EncoderConfig,
    top_n: Option<usize>,
    checkpoint_hash: &str,
) -> Result<(ImpactIndex, DenseIndex, ImpactBuildStats), IndexError> {
    let reprs = encode_corpus(corpus, params, cfg)?;
    let doc_table = DocTable::from_ids(corpus.iter().map(|d| d.doc_id.clone()).collect())?;
    let mut rows = Vec::with_capacity(corpus.len() * cfg.embed_dim);
    for r in &reprs {
        rows.extend_from_slice(r.dense.values());
    }
    let dense = DenseIndex {
        dim: cfg.embed_dim,
        rows,
        doc_table,
        checkpoint_hash: checkpoint_hash.to_string(),
    };
    let quantized: Vec<QuantizedVec> = reprs
        .into_par_iter()
        .map(|r| {
            let lex = match top_n {
                Some(n) => r.lex.top_n(n),
                None => r.lex,
            };
            quantize(&lex)
        })
        .collect();
    let (impact, stats) =
        build_impact_from_quantized(corpus, quantized, cfg.vocab_size, top_n, checkpoint_hash)?;
    Ok((impact, dense, stats))
}

/// Encodes and quantizes a query for lexicon search (queries are never
/// top-N sparsified).
pub fn quantize_query(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    tokens: &[u32],
) -> Result<(SparseLexVec, QuantizedVec), EncoderError> {
    let repr = encode(params, cfg, tokens)?;
    let q = quantize(&repr.lex);
    Ok((repr.lex, q))
}

/// Okapi BM25 statistics over the raw token corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    postings: HashMap<u32, Vec<(u32, u32)>>,
    doc_lengths: Vec<u32>,
    avgdl: f64,
    doc_table: DocTable,
    pub k1: f64,
    pub b: f64,
}

pub const BM25_DEFAULT_K1: f64 = 0.9;
pub const BM25_DEFAULT_B: f64 = 0.4;

impl Bm25Index {
    pub fn build(corpus: &[Document], k1: f64, b: f64) -> Result<Self, IndexError> {
        let doc_table = DocTable::from_ids(corpus.iter().map(|d| d.doc_id.clone()).collect())?;
        let mut postings: HashMap<u32, Vec<(u32, u32)>> = HashMap::new();
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        for (ordinal, doc) in corpus.iter().enumerate() {
            doc_lengths.push(doc.tokens.len() as u32);
            let mut tf: HashMap<u32, u32> = HashMap::new();
            for &t in &doc.tokens {
                *tf.entry(t).or_insert(0) += 1;
            }
            let mut terms: Vec<(u32, u32)> = tf.into_iter().collect();
            terms.sort_unstable_by_key(|&(t, _)| t);
            for (term, count) in terms {
                postings.entry(term).or_default().push((ordinal as u32, count));
            }
        }
        let avgdl = if corpus.is_empty() {
            0.0
        } else {
            doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / corpus.len() as f64
        };
        Ok(Bm25Index { postings, doc_lengths, avgdl, doc_table, k1, b })
    }

    pub fn doc_table(&self) -> &DocTable {
        &self.doc_table
    }

    pub fn num_docs(&self) -> usize {
        self.doc_table.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_frequency(&self, term: u32) -> usize {
        self.postings.get(&term).map(Vec::len).unwrap_or(0)
    }

    pub fn idf(&self, term: u32) -> f64 {
        let n = self.num_docs() as f64;
        let df = self.doc_frequency(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Scores every document containing at least one query token. Query
    /// tokens contribute per occurrence.
    pub fn score_all(&self, query_tokens: &[u32]) -> HashMap<u32, f64> {
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for &term in query_tokens {
            let Some(list) = self.postings.get(&term) else { continue };
            let idf = self.idf(term);
            for &(ordinal, tf) in list {
                let tf = tf as f64;
                let dl = self.doc_lengths[ordinal as usize] as f64;
                let norm = tf + self.k1 * (1.0 - self.b + self.b * dl / self.avgdl);
                *scores.entry(ordinal).or_insert(0.0) += idf * tf * (self.k1 + 1.0) / norm;
            }
        }
        scores
    }

    /// Top-k BM25 ranking with the canonical tie order, optionally
    /// excluding a set of ordinals.
    pub fn search(
        &self,
        query_tokens: &[u32],
        k: usize,
        exclude: Option<&std::collections::HashSet<u32>>,
    ) -> Vec<(String, f64)> {
        let scores = self.score_all(query_tokens);
        let mut ranked: Vec<(String, f64)> = scores
            .into_iter()
            .filter(|(ordinal, _)| exclude.map_or(true, |ex| !ex.contains(ordinal)))
            .map(|(ordinal, score)| (self.doc_table.doc_id(ordinal).to_string(), score))
            .collect();
        crate::repr::sort_ranking(&mut ranked);
        ranked.truncate(k);
        ranked
    }
}
