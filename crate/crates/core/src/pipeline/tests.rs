use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::encode;
use crate::repr::{quantize, quantized_dot, TokenLimits};

use super::*;

fn toy_cfg() -> EncoderConfig {
    let mut cfg = EncoderConfig::toy(32, 8);
    cfg.layers_ctx = 1;
    cfg.layers_den = 1;
    cfg.layers_lex = 1;
    cfg.heads = 2;
    cfg.max_seq_len = 16;
    cfg
}

struct Task {
    cfg: EncoderConfig,
    corpus: Vec<Document>,
    queries: Vec<Query>,
    qrels: Qrels,
}

/// A small random task: every query's positive is a distinct doc, and the
/// query borrows a few of its tokens.
fn toy_task(n_docs: usize, n_queries: usize, seed: u64) -> Task {
    let cfg = toy_cfg();
    let limits = TokenLimits { vocab_size: cfg.vocab_size, max_seq_len: cfg.max_raw_tokens() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus: Vec<Document> = (0..n_docs)
        .map(|i| {
            let len = rng.gen_range(4..10);
            let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(2..cfg.vocab_size)).collect();
            Document::new(format!("d{i:04}"), tokens, &limits).unwrap()
        })
        .collect();
    let mut qrels = Qrels::new();
    let queries: Vec<Query> = (0..n_queries)
        .map(|i| {
            let positive = &corpus[i * 3 % n_docs];
            let mut tokens: Vec<u32> = positive.tokens.iter().take(3).copied().collect();
            tokens.push(rng.gen_range(2..cfg.vocab_size));
            let qid = format!("q{i:03}");
            qrels.insert(&qid, &positive.doc_id, 1);
            Query::new(qid, tokens, &limits).unwrap()
        })
        .collect();
    Task { cfg, corpus, queries, qrels }
}

#[test]
fn bm25_mining_matches_oracle_and_excludes_positives() {
    let task = toy_task(40, 6, 3);
    let bm25 = Bm25Index::build(&task.corpus, BM25_DEFAULT_K1, BM25_DEFAULT_B).unwrap();
    let top_n = 10;
    let report = mine_bm25_negatives(&task.queries, &bm25, &task.qrels, top_n);
    report.pool.validate_against(&task.qrels).unwrap();

    for q in &task.queries {
        let mined = report.pool.per_source(&q.query_id, NegativeSource::Bm25);
        // Oracle: rank everything, drop positives, take top_n.
        let positives = task.qrels.relevant_docs(&q.query_id);
        let oracle: Vec<String> = bm25
            .search(&q.tokens, task.corpus.len(), None)
            .into_iter()
            .map(|(d, _)| d)
            .filter(|d| !positives.contains(d.as_str()))
            .take(top_n)
            .collect();
        assert_eq!(mined, oracle.as_slice(), "query {}", q.query_id);
    }

    // top_n = 1 keeps exactly the highest-scoring non-positive.
    let single = mine_bm25_negatives(&task.queries, &bm25, &task.qrels, 1);
    for q in &task.queries {
        assert!(single.pool.per_source(&q.query_id, NegativeSource::Bm25).len() <= 1);
    }
}

#[test]
fn bm25_mining_skips_query_with_only_its_positive() {
    let limits = TokenLimits { vocab_size: 32, max_seq_len: 14 };
    // Token 9 appears only in the positive document.
    let corpus = vec![
        Document::new("pos", vec![9, 9, 9], &limits).unwrap(),
        Document::new("other", vec![5, 6], &limits).unwrap(),
    ];
    let mut qrels = Qrels::new();
    qrels.insert("q", "pos", 1);
    let queries = vec![Query::new("q", vec![9], &limits).unwrap()];
    let bm25 = Bm25Index::build(&corpus, BM25_DEFAULT_K1, BM25_DEFAULT_B).unwrap();
    let report = mine_bm25_negatives(&queries, &bm25, &qrels, 5);
    assert!(report.pool.union_for("q").is_empty());
    assert_eq!(report.skipped_queries, vec!["q".to_string()]);
}

#[test]
fn dual_mining_matches_brute_force_oracles() {
    let task = toy_task(30, 4, 5);
    let params = EncoderParams::init(&task.cfg, 42).unwrap();
    let (impact, dense, _) = build_indexes(&task.corpus, &params, &task.cfg, None, "h").unwrap();
    let top_n = 8;
    let report =
        mine_dual_negatives(&task.queries, &params, &task.cfg, &impact, &dense, &task.qrels, top_n)
            .unwrap();
    report.pool.validate_against(&task.qrels).unwrap();
    assert!(report.overlap_at_top_n.is_some());

    for q in &task.queries {
        let positives = task.qrels.relevant_docs(&q.query_id);
        let q_repr = encode(&params, &task.cfg, &q.tokens).unwrap();
        let q_quant = quantize(&q_repr.lex);

        // Lexicon oracle.
        let mut lex_ranked: Vec<(String, f64)> = task
            .corpus
            .iter()
            .filter_map(|doc| {
                let d = quantize(&encode(&params, &task.cfg, &doc.tokens).unwrap().lex);
                let s = quantized_dot(&q_quant, &d);
                (s > 0).then(|| (doc.doc_id.clone(), s as f64))
            })
            .collect();
        crate::repr::sort_ranking(&mut lex_ranked);
        let lex_oracle: Vec<String> = lex_ranked
            .into_iter()
            .map(|(d, _)| d)
            .filter(|d| !positives.contains(d.as_str()))
            .take(top_n)
            .collect();
        assert_eq!(
            report.pool.per_source(&q.query_id, NegativeSource::Lex),
            lex_oracle.as_slice()
        );

        // Dense oracle.
        let mut den_ranked: Vec<(String, f64)> = task
            .corpus
            .iter()
            .map(|doc| {
                let d = encode(&params, &task.cfg, &doc.tokens).unwrap().dense;
                let s: f64 = q_repr.dense.values().iter().zip(d.values()).map(|(a, b)| a * b).sum();
                (doc.doc_id.clone(), s)
            })
            .collect();
        crate::repr::sort_ranking(&mut den_ranked);
        let den_oracle: Vec<String> = den_ranked
            .into_iter()
            .map(|(d, _)| d)
            .filter(|d| !positives.contains(d.as_str()))
            .take(top_n)
            .collect();
        assert_eq!(
            report.pool.per_source(&q.query_id, NegativeSource::Dense),
            den_oracle.as_slice()
        );
    }
}

#[test]
fn pool_round_trip_and_validation() {
    let mut pool = NegativePool::new();
    pool.add("q1", "d1", NegativeSource::Bm25);
    pool.add("q1", "d1", NegativeSource::Bm25); // dedup per source
    pool.add("q1", "d1", NegativeSource::Lex);
    pool.add("q1", "d2", NegativeSource::Dense);
    assert_eq!(pool.per_source("q1", NegativeSource::Bm25).len(), 1);
    assert_eq!(pool.union_for("q1"), vec!["d1", "d2"]);

    let entries = pool.to_entries();
    let back = NegativePool::from_entries(&entries);
    assert_eq!(pool, back);

    let mut qrels = Qrels::new();
    qrels.insert("q1", "d1", 1);
    assert!(pool.validate_against(&qrels).is_err());
}

fn stage_params(steps: usize, m: usize, lr: f64, seed: u64) -> StageParams {
    StageParams {
        batch_queries: 2,
        negatives_per_query: m,
        lr,
        seed,
        warmup_ratio: 0.05,
        lambda_flops: 0.0,
        steps,
        use_distill: false,
    }
}

#[test]
fn zero_steps_leave_params_unchanged() {
    let task = toy_task(20, 4, 7);
    let bm25 = Bm25Index::build(&task.corpus, BM25_DEFAULT_K1, BM25_DEFAULT_B).unwrap();
    let pool = mine_bm25_negatives(&task.queries, &bm25, &task.qrels, 5).pool;
    let mut params = EncoderParams::init(&task.cfg, 42).unwrap();
    let before = params.clone();
    let logs = train_stage(
        Stage::Warmup,
        &stage_params(0, 3, 1e-3, 42),
        &task.cfg,
        &task.corpus,
        &task.queries,
        &task.qrels,
        &pool,
        None,
        &mut params,
        None,
    )
    .unwrap();
    assert!(logs.is_empty());
    assert_eq!(before, params);
}

#[test]
fn single_step_descends_on_same_batch() {
    let task = toy_task(20, 1, 11);
    let query = &task.queries[0];
    // Pool of exactly M docs: the sampled batch is that set regardless of
    // shuffling order.
    let positives = task.qrels.relevant_docs(&query.query_id);
    let mut pool = NegativePool::new();
    let mut negative_ids = Vec::new();
    for doc in task.corpus.iter().filter(|d| !positives.contains(d.doc_id.as_str())).take(3) {
        pool.add(&query.query_id, &doc.doc_id, NegativeSource::Bm25);
        negative_ids.push(doc.doc_id.clone());
    }

    let mut params = EncoderParams::init(&task.cfg, 42).unwrap();
    let positive_doc = task
        .corpus
        .iter()
        .find(|d| positives.contains(d.doc_id.as_str()))
        .unwrap()
        .clone();
    let batch = TrainBatch {
        query: query.clone(),
        positive: positive_doc,
        negatives: task
            .corpus
            .iter()
            .filter(|d| negative_ids.contains(&d.doc_id))
            .cloned()
            .collect(),
        teacher_scores: None,
    };
    let opts = StageOpts { stage: Stage::Warmup, lambda_flops: 0.0, use_distill: false };
    let before = crate::objectives::stage_loss_value(&params, &task.cfg, &batch, &opts)
        .unwrap()
        .total;

    let sp = StageParams { batch_queries: 1, ..stage_params(1, 3, 5e-4, 42) };
    train_stage(
        Stage::Warmup,
        &sp,
        &task.cfg,
        &task.corpus,
        &task.queries,
        &task.qrels,
        &pool,
        None,
        &mut params,
        None,
    )
    .unwrap();
    let after = crate::objectives::stage_loss_value(&params, &task.cfg, &batch, &opts)
        .unwrap()
        .total;
    assert!(after < before, "loss did not descend: {before} -> {after}");
}

#[test]
fn same_seed_gives_bit_identical_training() {
    let task = toy_task(24, 5, 13);
    let bm25 = Bm25Index::build(&task.corpus, BM25_DEFAULT_K1, BM25_DEFAULT_B).unwrap();
    let pool = mine_bm25_negatives(&task.queries, &bm25, &task.qrels, 6).pool;
    let run = || {
        let mut params = EncoderParams::init(&task.cfg, 42).unwrap();
        let mut gate = GateParams::init(task.cfg.embed_dim, 7);
        let logs = train_stage(
            Stage::Warmup,
            &stage_params(3, 3, 1e-3, 42),
            &task.cfg,
            &task.corpus,
            &task.queries,
            &task.qrels,
            &pool,
            None,
            &mut params,
            Some(&mut gate),
        )
        .unwrap();
        (params, gate, logs.len())
    };
    let (p1, g1, n1) = run();
    let (p2, g2, n2) = run();
    assert_eq!(p1, p2);
    assert_eq!(g1, g2);
    assert_eq!(n1, n2);
}

#[test]
fn batches_never_contain_positives_and_respect_pool() {
    let task = toy_task(30, 6, 17);
    let bm25 = Bm25Index::build(&task.corpus, BM25_DEFAULT_K1, BM25_DEFAULT_B).unwrap();
    let pool = mine_bm25_negatives(&task.queries, &bm25, &task.qrels, 5).pool;
    let mut params = EncoderParams::init(&task.cfg, 42).unwrap();
    let logs = train_stage(
        Stage::Warmup,
        &stage_params(4, 3, 1e-3, 42),
        &task.cfg,
        &task.corpus,
        &task.queries,
        &task.qrels,
        &pool,
        None,
        &mut params,
        None,
    )
    .unwrap();
    for log in &logs {
        for audit in &log.batches {
            let relevant = task.qrels.relevant_docs(&audit.query_id);
            let union = pool.union_for(&audit.query_id);
            for neg in &audit.negatives {
                assert!(!relevant.contains(neg.as_str()), "positive sampled as negative");
                assert!(union.contains(&neg.as_str()), "negative outside the pool");
            }
        }
    }
}

#[test]
fn skips_queries_with_empty_pool() {
    let task = toy_task(20, 3, 19);
    // Pool covers only the first query.
    let mut pool = NegativePool::new();
    let positives = task.qrels.relevant_docs(&task.queries[0].query_id);
    for doc in task.corpus.iter().filter(|d| !positives.contains(d.doc_id.as_str())).take(3) {
        pool.add(&task.queries[0].query_id, &doc.doc_id, NegativeSource::Bm25);
    }
    let mut params = EncoderParams::init(&task.cfg, 42).unwrap();
    let logs = train_stage(
        Stage::Warmup,
        &stage_params(2, 3, 1e-3, 42),
        &task.cfg,
        &task.corpus,
        &task.queries,
        &task.qrels,
        &pool,
        None,
        &mut params,
        None,
    )
    .unwrap();
    assert!(logs.iter().any(|l| l.queries_skipped > 0));
}

#[test]
fn full_pipeline_smoke_resume_and_audit() {
    let task = toy_task(40, 8, 23);
    let dir = tempfile::tempdir().unwrap();
    let mut tc = TrainConfig::reference(2, 2);
    tc.warmup.batch_queries = 3;
    tc.warmup.negatives_per_query = 3;
    tc.warmup.lr = 1e-3;
    tc.continual.batch_queries = 3;
    tc.continual.negatives_per_query = 3;
    tc.continual.lr = 1e-3 / 3.0;
    tc.mining_top_n = 6;

    let paths = run_full_pipeline(
        dir.path(),
        &task.cfg,
        &tc,
        &task.corpus,
        &task.queries,
        &task.qrels,
        None,
    )
    .unwrap();
    for p in [
        &paths.bm25_pool,
        &paths.warmup_checkpoint,
        &paths.warmup_log,
        &paths.dual_pool,
        &paths.final_checkpoint,
        &paths.continual_log,
    ] {
        assert!(p.exists(), "{} missing", p.display());
    }

    // The continual stage seed differs from warmup per the config.
    assert_eq!(tc.warmup.seed, 42);
    assert_eq!(tc.continual.seed, 22);

    // Continual batches draw only from the dual pool union.
    let dual_pool = read_pool_file(&paths.dual_pool).unwrap();
    let log_text = std::fs::read_to_string(&paths.continual_log).unwrap();
    let mut audited = 0;
    for line in log_text.lines() {
        let log: StepLog = serde_json::from_str(line).unwrap();
        for audit in &log.batches {
            let union = dual_pool.union_for(&audit.query_id);
            for neg in &audit.negatives {
                assert!(union.contains(&neg.as_str()));
                audited += 1;
            }
        }
    }
    assert!(audited > 0);

    // Resuming reuses the artifacts byte for byte.
    let final_before = std::fs::read(&paths.final_checkpoint).unwrap();
    let paths2 = run_full_pipeline(
        dir.path(),
        &task.cfg,
        &tc,
        &task.corpus,
        &task.queries,
        &task.qrels,
        None,
    )
    .unwrap();
    assert_eq!(paths, paths2);
    let final_after = std::fs::read(&paths.final_checkpoint).unwrap();
    assert_eq!(final_before, final_after);

    // Manifest captured every stage.
    let entries = RunManifest::in_dir(dir.path()).read_all().unwrap();
    let commands: Vec<&str> = entries.iter().map(|e| e.command.as_str()).collect();
    assert_eq!(commands, ["mine-bm25", "train-warmup", "mine-dual", "train-continual"]);
}

#[test]
fn distill_requires_teacher() {
    let task = toy_task(10, 2, 29);
    let mut pool = NegativePool::new();
    pool.add("q000", "d0001", NegativeSource::Bm25);
    let mut params = EncoderParams::init(&task.cfg, 42).unwrap();
    let mut sp = stage_params(1, 1, 1e-3, 42);
    sp.use_distill = true;
    let result = train_stage(
        Stage::Continual,
        &sp,
        &task.cfg,
        &task.corpus,
        &task.queries,
        &task.qrels,
        &pool,
        None,
        &mut params,
        None,
    );
    assert!(matches!(result, Err(PipelineError::Invalid(_))));
}
