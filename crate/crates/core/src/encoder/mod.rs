//! The dual-representing encoder: a shared transformer trunk feeding a
//! dense sequence head and a global-aware lexicon-weighting head.
//!
//! One parameter set serves queries and documents alike. The trunk
//! (`theta_ctx`) produces token-level embeddings H; the dense stack
//! (`theta_den`) refines H and pools the leading special token into a
//! dense vector u; the lexicon stack (`theta_lex`, which also owns the
//! word embedding table doubling as the output head) consumes H with its
//! first row replaced by u and emits non-negative per-term weights
//! log(1 + maxpool(relu(logits))).
//!
//! Losses on the lexicon head must not optimize `theta_den`. Training
//! therefore recomputes u for the lexicon input through a gradient
//! barrier over the dense-stack parameters: the value is identical, but
//! gradient flowing back from the lexicon head passes through the dense
//! stack into H (and so into `theta_ctx`) without touching `theta_den`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndkernel::{KernelError, Tape, Tensor, Var};
use crate::repr::{DenseVec, ReprError, SparseLexVec};

pub mod checkpoint;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Repr(#[from] ReprError),
    #[error("wrapped input length {len} exceeds max_seq_len {max}")]
    Overlength { len: usize, max: usize },
    #[error("token id {token} out of range for vocabulary size {vocab}")]
    TokenOutOfRange { token: u32, vocab: u32 },
    #[error("missing parameter {group}.{name}")]
    MissingParam { group: &'static str, name: String },
    #[error("invalid encoder config: {0}")]
    Config(String),
}

/// Hyperparameters of the encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: u32,
    pub embed_dim: usize,
    pub layers_ctx: usize,
    pub layers_den: usize,
    pub layers_lex: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    /// Feed the dense vector u into the lexicon head (true) or the plain
    /// leading-token embedding (false).
    pub share_global: bool,
    pub cls_id: u32,
    pub sep_id: u32,
}

impl EncoderConfig {
    /// Desk-scale defaults: 2/2/1 layers over the given vocabulary.
    pub fn toy(vocab_size: u32, embed_dim: usize) -> Self {
        EncoderConfig {
            vocab_size,
            embed_dim,
            layers_ctx: 2,
            layers_den: 2,
            layers_lex: 1,
            heads: 4,
            max_seq_len: 128,
            share_global: true,
            cls_id: 0,
            sep_id: 1,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(EncoderError::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.layers_ctx < 1 || self.layers_den < 1 || self.layers_lex < 1 {
            return Err(EncoderError::Config("layer counts must be >= 1".into()));
        }
        if self.cls_id == self.sep_id {
            return Err(EncoderError::Config("cls_id must differ from sep_id".into()));
        }
        if self.cls_id >= self.vocab_size || self.sep_id >= self.vocab_size {
            return Err(EncoderError::Config("special token ids must be < vocab_size".into()));
        }
        if self.max_seq_len < 3 {
            return Err(EncoderError::Config("max_seq_len must be >= 3".into()));
        }
        Ok(())
    }

    /// Longest raw token sequence that still fits once wrapped in the
    /// special tokens.
    pub fn max_raw_tokens(&self) -> usize {
        self.max_seq_len - 2
    }
}

/// Named tensors with deterministic iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }
}

/// The three parameter groups. The word embedding table lives in `Lex`
/// (it is the lexicon output head) while also feeding the trunk's input
/// embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Ctx,
    Den,
    Lex,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Ctx, ParamGroup::Den, ParamGroup::Lex];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Ctx => "ctx",
            ParamGroup::Den => "den",
            ParamGroup::Lex => "lex",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ctx" => Some(ParamGroup::Ctx),
            "den" => Some(ParamGroup::Den),
            "lex" => Some(ParamGroup::Lex),
            _ => None,
        }
    }
}

/// Name of the tied word-embedding / output-head table inside the lex group.
pub const WORD_EMBEDDING: &str = "w_e";

/// The partitioned parameter sets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EncoderParams {
    pub theta_ctx: ParamSet,
    pub theta_den: ParamSet,
    pub theta_lex: ParamSet,
}

impl EncoderParams {
    /// Gaussian(0, 0.02) weights, zero biases, unit layer-norm gains,
    /// drawn in a fixed order from the seed.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let e = cfg.embed_dim;
        let mut gauss = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            Tensor::new(rows, cols, data).expect("shape matches data")
        };

        let mut theta_ctx = ParamSet::new();
        theta_ctx.insert("pos", gauss(cfg.max_seq_len, e, &mut rng));
        theta_ctx.insert("emb_ln_g", Tensor::new(1, e, vec![1.0; e]).unwrap());
        theta_ctx.insert("emb_ln_b", Tensor::zeros(1, e));
        for l in 0..cfg.layers_ctx {
            init_layer(&mut theta_ctx, l, e, &mut gauss, &mut rng);
        }

        let mut theta_den = ParamSet::new();
        for l in 0..cfg.layers_den {
            init_layer(&mut theta_den, l, e, &mut gauss, &mut rng);
        }

        let mut theta_lex = ParamSet::new();
        theta_lex.insert(WORD_EMBEDDING, gauss(cfg.vocab_size as usize, e, &mut rng));
        for l in 0..cfg.layers_lex {
            init_layer(&mut theta_lex, l, e, &mut gauss, &mut rng);
        }

        Ok(EncoderParams { theta_ctx, theta_den, theta_lex })
    }

    pub fn group(&self, group: ParamGroup) -> &ParamSet {
        match group {
            ParamGroup::Ctx => &self.theta_ctx,
            ParamGroup::Den => &self.theta_den,
            ParamGroup::Lex => &self.theta_lex,
        }
    }

    pub fn group_mut(&mut self, group: ParamGroup) -> &mut ParamSet {
        match group {
            ParamGroup::Ctx => &mut self.theta_ctx,
            ParamGroup::Den => &mut self.theta_den,
            ParamGroup::Lex => &mut self.theta_lex,
        }
    }

    /// Deterministic iteration over every parameter: ctx, then den, then lex.
    pub fn iter(&self) -> impl Iterator<Item = (ParamGroup, &str, &Tensor)> {
        ParamGroup::ALL
            .into_iter()
            .flat_map(move |g| self.group(g).iter().map(move |(n, t)| (g, n, t)))
    }

    pub fn num_values(&self) -> usize {
        ParamGroup::ALL.iter().map(|&g| self.group(g).num_values()).sum()
    }
}

fn init_layer(
    set: &mut ParamSet,
    layer: usize,
    e: usize,
    gauss: &mut impl FnMut(usize, usize, &mut ChaCha8Rng) -> Tensor,
    rng: &mut ChaCha8Rng,
) {
    let ff = 4 * e;
    let p = |name: &str| format!("l{layer}.{name}");
    set.insert(p("attn_wq"), gauss(e, e, rng));
    set.insert(p("attn_bq"), Tensor::zeros(1, e));
    set.insert(p("attn_wk"), gauss(e, e, rng));
    set.insert(p("attn_bk"), Tensor::zeros(1, e));
    set.insert(p("attn_wv"), gauss(e, e, rng));
    set.insert(p("attn_bv"), Tensor::zeros(1, e));
    set.insert(p("attn_wo"), gauss(e, e, rng));
    set.insert(p("attn_bo"), Tensor::zeros(1, e));
    set.insert(p("ln1_g"), Tensor::new(1, e, vec![1.0; e]).unwrap());
    set.insert(p("ln1_b"), Tensor::zeros(1, e));
    set.insert(p("ffn_w1"), gauss(e, ff, rng));
    set.insert(p("ffn_b1"), Tensor::zeros(1, ff));
    set.insert(p("ffn_w2"), gauss(ff, e, rng));
    set.insert(p("ffn_b2"), Tensor::zeros(1, e));
    set.insert(p("ln2_g"), Tensor::new(1, e, vec![1.0; e]).unwrap());
    set.insert(p("ln2_b"), Tensor::zeros(1, e));
}

/// Parameter leaves bound onto a tape for one forward graph.
pub struct Bound {
    pub ctx: BTreeMap<String, Var>,
    pub den: BTreeMap<String, Var>,
    pub lex: BTreeMap<String, Var>,
}

impl Bound {
    pub fn group(&self, group: ParamGroup) -> &BTreeMap<String, Var> {
        match group {
            ParamGroup::Ctx => &self.ctx,
            ParamGroup::Den => &self.den,
            ParamGroup::Lex => &self.lex,
        }
    }

    fn var(&self, group: ParamGroup, name: &str) -> Result<Var, EncoderError> {
        self.group(group)
            .get(name)
            .copied()
            .ok_or_else(|| EncoderError::MissingParam { group: group.as_str(), name: name.into() })
    }
}

/// Adds every parameter to the tape as a leaf.
pub fn bind_params(
    tape: &mut Tape,
    params: &EncoderParams,
    trainable: bool,
) -> Result<Bound, EncoderError> {
    let bind_set = |set: &ParamSet, tape: &mut Tape| -> Result<BTreeMap<String, Var>, EncoderError> {
        let mut out = BTreeMap::new();
        for (name, tensor) in set.iter() {
            out.insert(name.to_string(), tape.leaf(tensor.clone(), trainable)?);
        }
        Ok(out)
    };
    Ok(Bound {
        ctx: bind_set(&params.theta_ctx, tape)?,
        den: bind_set(&params.theta_den, tape)?,
        lex: bind_set(&params.theta_lex, tape)?,
    })
}

/// How the lexicon head obtains its leading global row.
pub enum GlobalMode<'a> {
    /// Recompute u through detached dense-stack parameters: identical
    /// value, no gradient into theta_den (training default).
    Barrier,
    /// Recompute u through constants taken from this snapshot. Used by
    /// finite-difference harnesses that must hold the barrier fixed.
    Pinned(&'a ParamSet),
    /// Reuse the live u directly (inference; do not differentiate lexicon
    /// losses through this).
    Shared,
}

/// Resolved dense-stack binding for the lexicon head's global row, built
/// once per tape and shared by every text encoded on it.
pub struct GlobalBinding {
    /// `None` reuses the live u; otherwise the dense stack reruns with
    /// these parameter vars.
    den: Option<BTreeMap<String, Var>>,
}

pub fn bind_global(
    tape: &mut Tape,
    bound: &Bound,
    mode: &GlobalMode<'_>,
) -> Result<GlobalBinding, EncoderError> {
    let den = match mode {
        GlobalMode::Shared => None,
        GlobalMode::Barrier => {
            let mut detached = BTreeMap::new();
            for (name, &var) in &bound.den {
                detached.insert(name.clone(), tape.detach(var)?);
            }
            Some(detached)
        }
        GlobalMode::Pinned(snapshot) => {
            let mut pinned = BTreeMap::new();
            for (name, _) in &bound.den {
                let tensor = snapshot
                    .get(name)
                    .ok_or_else(|| EncoderError::MissingParam { group: "den", name: name.clone() })?;
                pinned.insert(name.clone(), tape.constant(tensor.clone())?);
            }
            Some(pinned)
        }
    };
    Ok(GlobalBinding { den })
}

fn transformer_layer(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    layer: usize,
    cfg: &EncoderConfig,
    x: Var,
) -> Result<Var, EncoderError> {
    let v = |name: &str, tape_vars: &BTreeMap<String, Var>| -> Result<Var, EncoderError> {
        let key = format!("l{layer}.{name}");
        tape_vars
            .get(&key)
            .copied()
            .ok_or(EncoderError::MissingParam { group: "layer", name: key })
    };
    let e = cfg.embed_dim;
    let heads = cfg.heads;
    let dk = e / heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let q = tape.matmul(x, v("attn_wq", vars)?)?;
    let q = tape.add_row(q, v("attn_bq", vars)?)?;
    let k = tape.matmul(x, v("attn_wk", vars)?)?;
    let k = tape.add_row(k, v("attn_bk", vars)?)?;
    let val = tape.matmul(x, v("attn_wv", vars)?)?;
    let val = tape.add_row(val, v("attn_bv", vars)?)?;

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(val, h * dk, dk)?;
        let scores = tape.matmul_trans_b(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let probs = tape.softmax_rows(scores)?;
        head_outputs.push(tape.matmul(probs, vh)?);
    }
    let attn = tape.concat_cols(&head_outputs)?;
    let attn = tape.matmul(attn, v("attn_wo", vars)?)?;
    let attn = tape.add_row(attn, v("attn_bo", vars)?)?;

    let res1 = tape.add(x, attn)?;
    let norm1 = tape.layer_norm(res1, v("ln1_g", vars)?, v("ln1_b", vars)?)?;

    let ff = tape.matmul(norm1, v("ffn_w1", vars)?)?;
    let ff = tape.add_row(ff, v("ffn_b1", vars)?)?;
    let ff = tape.gelu(ff)?;
    let ff = tape.matmul(ff, v("ffn_w2", vars)?)?;
    let ff = tape.add_row(ff, v("ffn_b2", vars)?)?;

    let res2 = tape.add(norm1, ff)?;
    let norm2 = tape.layer_norm(res2, v("ln2_g", vars)?, v("ln2_b", vars)?)?;
    Ok(norm2)
}

fn run_stack(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    layers: usize,
    cfg: &EncoderConfig,
    mut x: Var,
) -> Result<Var, EncoderError> {
    for l in 0..layers {
        x = transformer_layer(tape, vars, l, cfg, x)?;
    }
    Ok(x)
}

/// Trunk forward: wraps the tokens in the special ids, embeds them with
/// the tied word table plus learned positions, and runs the ctx stack.
/// Returns H with rows [leading, tok_1.., trailing], shape (n+2) x e.
pub fn contextualize(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &EncoderConfig,
    tokens: &[u32],
) -> Result<Var, EncoderError> {
    let wrapped_len = tokens.len() + 2;
    if wrapped_len > cfg.max_seq_len {
        return Err(EncoderError::Overlength { len: wrapped_len, max: cfg.max_seq_len });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(EncoderError::TokenOutOfRange { token: t, vocab: cfg.vocab_size });
    }
    let mut ids = Vec::with_capacity(wrapped_len);
    ids.push(cfg.cls_id);
    ids.extend_from_slice(tokens);
    ids.push(cfg.sep_id);

    let w_e = bound.var(ParamGroup::Lex, WORD_EMBEDDING)?;
    let tok_emb = tape.gather(w_e, &ids)?;
    let pos_table = bound.var(ParamGroup::Ctx, "pos")?;
    let pos = tape.slice_rows(pos_table, 0, wrapped_len)?;
    let summed = tape.add(tok_emb, pos)?;
    let g = bound.var(ParamGroup::Ctx, "emb_ln_g")?;
    let b = bound.var(ParamGroup::Ctx, "emb_ln_b")?;
    let embedded = tape.layer_norm(summed, g, b)?;

    run_stack(tape, &bound.ctx, cfg.layers_ctx, cfg, embedded)
}

/// Dense head: runs the den stack over H and pools the leading row.
pub fn dense_head(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &EncoderConfig,
    h: Var,
) -> Result<Var, EncoderError> {
    let refined = run_stack(tape, &bound.den, cfg.layers_den, cfg, h)?;
    Ok(tape.slice_rows(refined, 0, 1)?)
}

/// Saturation over position-wise vocabulary logits:
/// log(1 + maxpool_over_positions(relu(logits))). Monotone in every logit.
pub fn saturate(tape: &mut Tape, logits: Var) -> Result<Var, KernelError> {
    let active = tape.relu(logits)?;
    let pooled = tape.max_pool_rows(active)?;
    tape.log1p(pooled)
}

/// Lexicon head: replaces H's leading row with the provided global row,
/// runs the lex stack, projects onto the vocabulary through the tied
/// embedding table and saturates. Returns the 1 x |V| activation row.
pub fn lexicon_head(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &EncoderConfig,
    h: Var,
    global_row: Var,
) -> Result<Var, EncoderError> {
    let n_plus_1 = tape.value(h).rows() - 1;
    let rest = tape.slice_rows(h, 1, n_plus_1)?;
    let hat = tape.concat_rows(&[global_row, rest])?;
    let refined = run_stack(tape, &bound.lex, cfg.layers_lex, cfg, hat)?;
    let w_e = bound.var(ParamGroup::Lex, WORD_EMBEDDING)?;
    let logits = tape.matmul_trans_b(refined, w_e)?;
    Ok(saturate(tape, logits)?)
}

/// Both heads' tape outputs for one input.
pub struct EncodedVars {
    /// Dense vector u, 1 x e, differentiable into theta_den.
    pub dense: Var,
    /// Lexicon activation row, 1 x |V|.
    pub lex: Var,
}

/// Full dual forward on an existing tape.
pub fn encode_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &EncoderConfig,
    tokens: &[u32],
    global: &GlobalBinding,
) -> Result<EncodedVars, EncoderError> {
    let h = contextualize(tape, bound, cfg, tokens)?;
    let u = dense_head(tape, bound, cfg, h)?;

    let global_row = if cfg.share_global {
        match &global.den {
            None => u,
            Some(den_vars) => {
                let refined = run_stack(tape, den_vars, cfg.layers_den, cfg, h)?;
                tape.slice_rows(refined, 0, 1)?
            }
        }
    } else {
        // Global sharing ablated: the lexicon head sees the plain
        // leading-token embedding from the trunk.
        tape.slice_rows(h, 0, 1)?
    };

    let lex = lexicon_head(tape, bound, cfg, h, global_row)?;
    Ok(EncodedVars { dense: u, lex })
}

/// Dual representation of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct DualRepr {
    pub dense: DenseVec,
    pub lex: SparseLexVec,
}

/// Inference encode: one forward pass, no gradients.
pub fn encode(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    tokens: &[u32],
) -> Result<DualRepr, EncoderError> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, false)?;
    let global = bind_global(&mut tape, &bound, &GlobalMode::Shared)?;
    let vars = encode_on_tape(&mut tape, &bound, cfg, tokens, &global)?;
    let dense = DenseVec::new(tape.value(vars.dense).data().to_vec())?;
    let lex = SparseLexVec::from_dense(tape.value(vars.lex).data())?;
    Ok(DualRepr { dense, lex })
}

#[cfg(test)]
mod tests;
