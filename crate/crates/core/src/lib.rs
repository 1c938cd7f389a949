//! Hybrid first-stage retrieval engine.
//!
//! One encoder produces two representations per text: a low-dimensional
//! dense vector and a high-dimensional non-negative lexicon-weighted sparse
//! vector. Documents are served through three first-stage schemes:
//!
//! - **lexicon**: quantized impact scoring over an inverted index,
//! - **dense**: exhaustive inner-product scan over a flat matrix,
//! - **uni**: lexicon candidate generation followed by dense rescoring,
//!   ranked by the sum of both scores.
//!
//! Training runs a three-stage pipeline (BM25-warmup, dual hard-negative
//! mining, continual learning) with contrastive losses on both heads, a
//! FLOPS sparsity regularizer, an agreement KL between the two heads, and
//! optional distillation from external teacher scores.
//!
//! Everything is deterministic given a seed: training, index building and
//! search produce bit-identical artifacts across runs on one machine.

pub mod encoder;
pub mod eval;
pub mod index;
pub mod manifest;
pub mod ndkernel;
pub mod objectives;
pub mod pipeline;
pub mod repr;
pub mod search;
pub mod synth;
