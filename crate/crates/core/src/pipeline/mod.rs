//! The three-step training pipeline: warmup on BM25 negatives, hard
//! negative mining from both representing heads, continual learning on
//! the union pool.
//!
//! Everything is deterministic given the stage seeds: query shuffling,
//! negative sampling, optimizer updates. Mining parallelizes across
//! queries; training steps run sequentially on one thread.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::checkpoint::{Checkpoint, CheckpointError};
use crate::encoder::{bind_global, bind_params, EncoderConfig, EncoderError, EncoderParams, GlobalMode, ParamGroup};
use crate::index::{build_indexes, Bm25Index, IndexError, BM25_DEFAULT_B, BM25_DEFAULT_K1};
use crate::manifest::{hash_file, ManifestEntry, ManifestError, RunManifest};
use crate::ndkernel::{KernelError, Tape, Tensor};
use crate::objectives::{stage_loss, LossReport, ObjectiveError, Stage, StageOpts, TrainBatch};
use crate::repr::io::{FormatError, NegativeSource, PoolEntry, TeacherScore};
use crate::repr::{Document, Qrels, Query};
use crate::search::{GateParams, SearchError};

mod adamw;
pub mod mining;

pub use adamw::{scheduled_lr, AdamW};
pub use mining::{mine_bm25_negatives, mine_dual_negatives, MiningReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Per-stage training knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    pub batch_queries: usize,
    pub negatives_per_query: usize,
    pub lr: f64,
    pub seed: u64,
    pub warmup_ratio: f64,
    pub lambda_flops: f64,
    pub steps: usize,
    pub use_distill: bool,
}

impl StageParams {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.batch_queries == 0
            || self.negatives_per_query == 0
            || self.lr <= 0.0
            || !(0.0..=1.0).contains(&self.warmup_ratio)
            || self.lambda_flops < 0.0
        {
            return Err(PipelineError::Invalid("stage parameters out of range".into()));
        }
        Ok(())
    }
}

/// Full pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub warmup: StageParams,
    pub continual: StageParams,
    /// Candidates mined per query and per source.
    pub mining_top_n: usize,
    /// Encoder initialization seed.
    pub init_seed: u64,
    /// Train the query-side gate jointly during warmup.
    pub train_gate: bool,
    pub gate_seed: u64,
}

impl TrainConfig {
    /// Reference defaults: warmup batches 16 queries with 15 negatives at
    /// lr 2e-5 (seed 42, FLOPS weight 0.0016); continual batches 12 at a
    /// third of the rate (seed 22, FLOPS weight 0.0024); 5% warmup ratio;
    /// 200 mined candidates per source.
    pub fn reference(steps_warmup: usize, steps_continual: usize) -> Self {
        TrainConfig {
            warmup: StageParams {
                batch_queries: 16,
                negatives_per_query: 15,
                lr: 2e-5,
                seed: 42,
                warmup_ratio: 0.05,
                lambda_flops: 0.0016,
                steps: steps_warmup,
                use_distill: false,
            },
            continual: StageParams {
                batch_queries: 12,
                negatives_per_query: 15,
                lr: 2e-5 / 3.0,
                seed: 22,
                warmup_ratio: 0.05,
                lambda_flops: 0.0024,
                steps: steps_continual,
                use_distill: false,
            },
            mining_top_n: 200,
            init_seed: 42,
            train_gate: true,
            gate_seed: 7,
        }
    }

    pub fn stage(&self, stage: Stage) -> &StageParams {
        match stage {
            Stage::Warmup => &self.warmup,
            Stage::Continual => &self.continual,
        }
    }
}

/// Mined negatives per query, tagged by source, deduplicated per source.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NegativePool {
    per_query: BTreeMap<String, BTreeMap<NegativeSource, Vec<String>>>,
}

impl NegativePool {
    pub fn new() -> Self {
        NegativePool::default()
    }

    pub fn add(&mut self, query_id: &str, doc_id: &str, source: NegativeSource) {
        let list = self
            .per_query
            .entry(query_id.to_string())
            .or_default()
            .entry(source)
            .or_default();
        if !list.iter().any(|d| d == doc_id) {
            list.push(doc_id.to_string());
        }
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.per_query.keys().map(String::as_str)
    }

    pub fn num_queries(&self) -> usize {
        self.per_query.len()
    }

    pub fn per_source(&self, query_id: &str, source: NegativeSource) -> &[String] {
        self.per_query
            .get(query_id)
            .and_then(|m| m.get(&source))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Sorted deduplicated union over all sources for a query.
    pub fn union_for(&self, query_id: &str) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        if let Some(sources) = self.per_query.get(query_id) {
            for list in sources.values() {
                out.extend(list.iter().map(String::as_str));
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// No negative may equal a judged-relevant document of its query.
    pub fn validate_against(&self, qrels: &Qrels) -> Result<(), PipelineError> {
        for (qid, sources) in &self.per_query {
            let relevant = qrels.relevant_docs(qid);
            for list in sources.values() {
                for doc in list {
                    if relevant.contains(doc.as_str()) {
                        return Err(PipelineError::Invalid(format!(
                            "pool contains positive {doc} as negative for {qid}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_entries(&self) -> Vec<PoolEntry> {
        let mut out = Vec::new();
        for (qid, sources) in &self.per_query {
            for (source, list) in sources {
                for doc in list {
                    out.push(PoolEntry {
                        query_id: qid.clone(),
                        doc_id: doc.clone(),
                        source: *source,
                    });
                }
            }
        }
        out
    }

    pub fn from_entries(entries: &[PoolEntry]) -> Self {
        let mut pool = NegativePool::new();
        for e in entries {
            pool.add(&e.query_id, &e.doc_id, e.source);
        }
        pool
    }
}

/// Teacher scores keyed by query then document.
pub type TeacherMap = BTreeMap<String, BTreeMap<String, f64>>;

pub fn teacher_map(scores: &[TeacherScore]) -> TeacherMap {
    let mut map = TeacherMap::new();
    for s in scores {
        map.entry(s.query_id.clone())
            .or_default()
            .insert(s.doc_id.clone(), s.score);
    }
    map
}

/// The documents drawn for one query in one step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchAudit {
    pub query_id: String,
    pub positive: String,
    pub negatives: Vec<String>,
}

/// One optimizer step's record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub report: LossReport,
    pub gate_loss: Option<f64>,
    pub queries_skipped: usize,
    pub batches: Vec<BatchAudit>,
}

struct QueryQueue {
    order: Vec<usize>,
    cursor: usize,
}

impl QueryQueue {
    fn new(n: usize) -> Self {
        QueryQueue { order: (0..n).collect(), cursor: n }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.cursor >= self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor];
        self.cursor += 1;
        idx
    }
}

/// Draws `m` negatives from the pool union: without replacement when the
/// pool is large enough, padded by resampling with replacement otherwise.
fn sample_negatives(union: &[&str], m: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    if union.is_empty() {
        return Vec::new();
    }
    if union.len() >= m {
        let mut idx: Vec<usize> = (0..union.len()).collect();
        // Partial Fisher-Yates: the first m entries are a uniform draw.
        for i in 0..m {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        idx[..m].iter().map(|&i| union[i].to_string()).collect()
    } else {
        let mut out: Vec<String> = union.iter().map(|s| s.to_string()).collect();
        while out.len() < m {
            out.push(union[rng.gen_range(0..union.len())].to_string());
        }
        out
    }
}

/// Accumulated leaf gradients keyed by `group.name`.
#[derive(Default)]
struct GradAccum {
    sums: BTreeMap<String, Tensor>,
    count: usize,
}

impl GradAccum {
    fn add(&mut self, key: String, grad: &Tensor) {
        match self.sums.get_mut(&key) {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => {
                self.sums.insert(key, grad.clone());
            }
        }
    }
}

/// Runs one training stage in place over the parameters (and the gate, at
/// warmup). Deterministic given (seed, config, corpus).
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    stage: Stage,
    sp: &StageParams,
    enc_cfg: &EncoderConfig,
    corpus: &[Document],
    queries: &[Query],
    qrels: &Qrels,
    pool: &NegativePool,
    teacher: Option<&TeacherMap>,
    params: &mut EncoderParams,
    mut gate: Option<&mut GateParams>,
) -> Result<Vec<StepLog>, PipelineError> {
    sp.validate()?;
    if sp.use_distill && teacher.is_none() {
        return Err(PipelineError::Invalid("distillation enabled but no teacher scores".into()));
    }
    pool.validate_against(qrels)?;
    let doc_by_id: HashMap<&str, &Document> =
        corpus.iter().map(|d| (d.doc_id.as_str(), d)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(sp.seed);
    let mut queue = QueryQueue::new(queries.len());
    let mut optimizer = AdamW::new();
    let mut logs = Vec::with_capacity(sp.steps);

    for step in 1..=sp.steps {
        let mut accum = GradAccum::default();
        let mut gate_loss_sum = 0.0;
        let mut gate_batches = 0usize;
        let mut skipped = 0usize;
        let mut reports: Vec<LossReport> = Vec::new();
        let mut audits: Vec<BatchAudit> = Vec::new();

        for _ in 0..sp.batch_queries {
            let qi = queue.next(&mut rng);
            let query = &queries[qi];

            // Positive: the lexicographically first judged-relevant doc
            // present in the corpus.
            let relevant = qrels.relevant_docs(&query.query_id);
            let Some(positive) = relevant
                .iter()
                .find_map(|d| doc_by_id.get(d).copied())
            else {
                skipped += 1;
                continue;
            };
            let union = pool.union_for(&query.query_id);
            if union.is_empty() {
                skipped += 1;
                continue;
            }
            let negative_ids = sample_negatives(&union, sp.negatives_per_query, &mut rng);
            let negatives: Vec<Document> = negative_ids
                .iter()
                .filter_map(|d| doc_by_id.get(d.as_str()).map(|&doc| doc.clone()))
                .collect();
            if negatives.len() != negative_ids.len() || negatives.is_empty() {
                skipped += 1;
                continue;
            }

            let teacher_scores = if sp.use_distill {
                let per_query = teacher.and_then(|t| t.get(&query.query_id));
                let mut scores = Vec::with_capacity(negatives.len() + 1);
                let mut complete = true;
                for doc in std::iter::once(&positive.doc_id).chain(negative_ids.iter()) {
                    match per_query.and_then(|m| m.get(doc.as_str())) {
                        Some(&s) => scores.push(s),
                        None => {
                            complete = false;
                            break;
                        }
                    }
                }
                if !complete {
                    skipped += 1;
                    continue;
                }
                Some(scores)
            } else {
                None
            };

            let batch = TrainBatch {
                query: query.clone(),
                positive: (*positive).clone(),
                negatives,
                teacher_scores,
            };
            let opts = StageOpts {
                stage,
                lambda_flops: sp.lambda_flops,
                use_distill: sp.use_distill,
            };

            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, params, true)?;
            let global = bind_global(&mut tape, &bound, &GlobalMode::Barrier)?;
            let out = stage_loss(&mut tape, &bound, &global, enc_cfg, &batch, &opts)?;
            tape.backward(out.total)?;

            // The gate learns from detached uni-retrieval scores during
            // warmup: its gradient never perturbs the encoder.
            if stage == Stage::Warmup {
                if let Some(gate) = gate.as_deref_mut() {
                    let gate_vars = gate.bind(&mut tape, true)?;
                    let q_det = tape.detach(out.query_dense)?;
                    let den_det = tape.detach(out.s_den)?;
                    let lex_det = tape.detach(out.s_lex)?;
                    let g = GateParams::on_tape(&mut tape, &gate_vars, q_det)?;
                    let neg_lex = tape.scale(lex_det, -1.0)?;
                    let diff = tape.add(den_det, neg_lex)?;
                    let scaled = tape.matmul(g, diff)?;
                    let combined = tape.add(lex_det, scaled)?;
                    let probs = tape.softmax_rows(combined)?;
                    let g_loss = crate::objectives::contrastive_loss(&mut tape, probs, 0)?;
                    tape.backward(g_loss)?;
                    gate_loss_sum += tape.value(g_loss).item()?;
                    gate_batches += 1;
                    for (tensor_key, var) in [
                        ("gate.w1", gate_vars.w1),
                        ("gate.b1", gate_vars.b1),
                        ("gate.w2", gate_vars.w2),
                        ("gate.b2", gate_vars.b2),
                    ] {
                        if let Some(grad) = tape.grad(var) {
                            accum.add(tensor_key.to_string(), grad);
                        }
                    }
                }
            }

            for group in ParamGroup::ALL {
                for (name, &var) in bound.group(group) {
                    if let Some(grad) = tape.grad(var) {
                        accum.add(format!("{}.{name}", group.as_str()), grad);
                    }
                }
            }
            audits.push(BatchAudit {
                query_id: query.query_id.clone(),
                positive: positive.doc_id.clone(),
                negatives: negative_ids,
            });
            reports.push(out.report);
        }

        accum.count = reports.len();
        let lr = scheduled_lr(sp.lr, step, sp.steps, sp.warmup_ratio);
        if accum.count > 0 {
            let scale = 1.0 / accum.count as f64;
            optimizer.begin_step();
            // Deterministic update order: ctx, den, lex, then the gate.
            for group in ParamGroup::ALL {
                let set = params.group_mut(group);
                let names: Vec<String> = set.iter().map(|(n, _)| n.to_string()).collect();
                for name in names {
                    let key = format!("{}.{name}", group.as_str());
                    if let Some(grad_sum) = accum.sums.get(&key) {
                        let mut grad = grad_sum.clone();
                        for v in grad.data_mut() {
                            *v *= scale;
                        }
                        let tensor = set.get_mut(&name).expect("known parameter");
                        optimizer.update(&key, tensor, &grad, lr);
                    }
                }
            }
            if let Some(gate) = gate.as_deref_mut() {
                let mut set = gate.to_set();
                for name in ["w1", "b1", "w2", "b2"] {
                    let key = format!("gate.{name}");
                    if let Some(grad_sum) = accum.sums.get(&key) {
                        let mut grad = grad_sum.clone();
                        for v in grad.data_mut() {
                            *v *= scale;
                        }
                        let tensor = set.get_mut(name).expect("known gate parameter");
                        optimizer.update(&key, tensor, &grad, lr);
                    }
                }
                *gate = GateParams::from_set(&set)?;
            }
        }

        let mean = mean_report(&reports);
        logs.push(StepLog {
            step,
            lr,
            report: mean,
            gate_loss: (gate_batches > 0).then(|| gate_loss_sum / gate_batches as f64),
            queries_skipped: skipped,
            batches: audits,
        });
    }
    Ok(logs)
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    if reports.is_empty() {
        return LossReport::default();
    }
    let n = reports.len() as f64;
    let mut mean = LossReport::default();
    for r in reports {
        mean.l_con_dense += r.l_con_dense;
        mean.l_con_lex += r.l_con_lex;
        mean.l_flops_doc += r.l_flops_doc;
        mean.l_flops_query += r.l_flops_query;
        mean.l_reg += r.l_reg;
        mean.l_distill += r.l_distill;
        mean.total += r.total;
    }
    mean.l_con_dense /= n;
    mean.l_con_lex /= n;
    mean.l_flops_doc /= n;
    mean.l_flops_query /= n;
    mean.l_reg /= n;
    mean.l_distill /= n;
    mean.total /= n;
    mean
}

/// Artifact paths produced by the full pipeline inside a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineArtifacts {
    pub bm25_pool: PathBuf,
    pub warmup_checkpoint: PathBuf,
    pub warmup_log: PathBuf,
    pub dual_pool: PathBuf,
    pub mining_report: PathBuf,
    pub final_checkpoint: PathBuf,
    pub continual_log: PathBuf,
}

impl PipelineArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        PipelineArtifacts {
            bm25_pool: dir.join("pool_bm25.txt"),
            warmup_checkpoint: dir.join("ckpt_warmup.bin"),
            warmup_log: dir.join("log_warmup.jsonl"),
            dual_pool: dir.join("pool_dual.txt"),
            mining_report: dir.join("mining_dual.json"),
            final_checkpoint: dir.join("ckpt_final.bin"),
            continual_log: dir.join("log_continual.jsonl"),
        }
    }
}

fn write_pool_file(path: &Path, pool: &NegativePool) -> Result<(), PipelineError> {
    let mut buf = Vec::new();
    crate::repr::io::write_pool(&mut buf, &pool.to_entries())?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_pool_file(path: &Path) -> Result<NegativePool, PipelineError> {
    let file = std::fs::File::open(path)?;
    let entries = crate::repr::io::parse_pool(file)?;
    Ok(NegativePool::from_entries(&entries))
}

fn write_log_file(path: &Path, logs: &[StepLog]) -> Result<(), PipelineError> {
    let mut out = String::new();
    for log in logs {
        out.push_str(
            &serde_json::to_string(log)
                .map_err(|e| PipelineError::Invalid(format!("log serialization: {e}")))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Runs warmup, dual mining and continual learning end to end, persisting
/// each stage artifact under `run_dir`. Existing artifacts are reused, so
/// an interrupted pipeline resumes from the last completed stage.
pub fn run_full_pipeline(
    run_dir: &Path,
    enc_cfg: &EncoderConfig,
    tc: &TrainConfig,
    corpus: &[Document],
    queries: &[Query],
    qrels: &Qrels,
    teacher: Option<&TeacherMap>,
) -> Result<PipelineArtifacts, PipelineError> {
    std::fs::create_dir_all(run_dir)?;
    let paths = PipelineArtifacts::in_dir(run_dir);
    let manifest = RunManifest::in_dir(run_dir);

    // Stage 0: BM25 warmup negatives.
    let bm25_pool = if paths.bm25_pool.exists() {
        read_pool_file(&paths.bm25_pool)?
    } else {
        let bm25 = Bm25Index::build(corpus, BM25_DEFAULT_K1, BM25_DEFAULT_B)?;
        let report = mine_bm25_negatives(queries, &bm25, qrels, tc.mining_top_n);
        write_pool_file(&paths.bm25_pool, &report.pool)?;
        let mut entry = ManifestEntry::new("mine-bm25").with_config(&tc.mining_top_n);
        entry.record_artifact(&paths.bm25_pool)?;
        manifest.append(&entry)?;
        report.pool
    };

    // Stage 1: warmup training from a fresh initialization.
    let (mut params, mut gate) = if paths.warmup_checkpoint.exists() {
        let ckpt = Checkpoint::load_from(&paths.warmup_checkpoint)?;
        let gate = ckpt.gate.as_ref().map(GateParams::from_set).transpose()?;
        (ckpt.params, gate)
    } else {
        let mut params = EncoderParams::init(enc_cfg, tc.init_seed)?;
        let mut gate = tc
            .train_gate
            .then(|| GateParams::init(enc_cfg.embed_dim, tc.gate_seed));
        let logs = train_stage(
            Stage::Warmup,
            &tc.warmup,
            enc_cfg,
            corpus,
            queries,
            qrels,
            &bm25_pool,
            teacher,
            &mut params,
            gate.as_mut(),
        )?;
        write_log_file(&paths.warmup_log, &logs)?;
        let mut ckpt = Checkpoint::new(enc_cfg.clone(), params.clone());
        if let Some(g) = &gate {
            ckpt = ckpt.with_gate(g.to_set());
        }
        ckpt.save_to(&paths.warmup_checkpoint)?;
        let mut entry = ManifestEntry::new("train-warmup")
            .with_config(&tc.warmup)
            .with_seed("stage", tc.warmup.seed)
            .with_seed("init", tc.init_seed);
        entry.record_input(&paths.bm25_pool)?;
        entry.record_artifact(&paths.warmup_checkpoint)?;
        entry.record_artifact(&paths.warmup_log)?;
        manifest.append(&entry)?;
        (params, gate)
    };

    // Stage 2: hard negatives from both heads of the warmed model.
    let dual_pool = if paths.dual_pool.exists() {
        read_pool_file(&paths.dual_pool)?
    } else {
        let ckpt_hash = hash_file(&paths.warmup_checkpoint)?;
        let (impact, dense, _) = build_indexes(corpus, &params, enc_cfg, None, &ckpt_hash)?;
        let report = mine_dual_negatives(queries, &params, enc_cfg, &impact, &dense, qrels, tc.mining_top_n)?;
        write_pool_file(&paths.dual_pool, &report.pool)?;
        let report_json = serde_json::json!({
            "overlap_at_top_n": report.overlap_at_top_n,
            "skipped_queries": report.skipped_queries,
        });
        std::fs::write(&paths.mining_report, format!("{report_json:#}\n"))?;
        let mut entry = ManifestEntry::new("mine-dual").with_config(&tc.mining_top_n);
        entry.record_input(&paths.warmup_checkpoint)?;
        entry.record_artifact(&paths.dual_pool)?;
        entry.record_artifact(&paths.mining_report)?;
        manifest.append(&entry)?;
        report.pool
    };

    // Stage 3: continual learning on the union pool.
    if !paths.final_checkpoint.exists() {
        let logs = train_stage(
            Stage::Continual,
            &tc.continual,
            enc_cfg,
            corpus,
            queries,
            qrels,
            &dual_pool,
            teacher,
            &mut params,
            gate.as_mut(),
        )?;
        write_log_file(&paths.continual_log, &logs)?;
        let mut ckpt = Checkpoint::new(enc_cfg.clone(), params);
        if let Some(g) = &gate {
            ckpt = ckpt.with_gate(g.to_set());
        }
        ckpt.save_to(&paths.final_checkpoint)?;
        let mut entry = ManifestEntry::new("train-continual")
            .with_config(&tc.continual)
            .with_seed("stage", tc.continual.seed);
        entry.record_input(&paths.warmup_checkpoint)?;
        entry.record_input(&paths.dual_pool)?;
        entry.record_artifact(&paths.final_checkpoint)?;
        entry.record_artifact(&paths.continual_log)?;
        manifest.append(&entry)?;
    }

    Ok(paths)
}

#[cfg(test)]
mod tests;
