//! Command-line entry point wiring every stage: synthetic task
//! generation, training, mining, indexing, searching, evaluation and
//! latency benchmarking.
//!
//! Outputs land under the directory given per command; relative paths are
//! resolved against `DUALENC_RUN_ROOT` when it is set. Every command that
//! writes artifacts appends an entry to the target directory's
//! `manifest.jsonl` recording seeds, config and content hashes. On error
//! the process exits nonzero with a machine-readable JSON record on
//! stderr.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dualenc::encoder::checkpoint::Checkpoint;
use dualenc::encoder::EncoderConfig;
use dualenc::eval::{format_metric_table, mrr_at_k, ndcg_at_k, qps_bench, recall_dpr, recall_marco};
use dualenc::index::disk::{load_index_dir, save_index_dir};
use dualenc::index::{build_indexes, Bm25Index, BM25_DEFAULT_B, BM25_DEFAULT_K1};
use dualenc::manifest::{hash_file, ManifestEntry, RunManifest};
use dualenc::objectives::Stage;
use dualenc::pipeline::{
    mine_bm25_negatives, mine_dual_negatives, run_full_pipeline, teacher_map, train_stage,
    NegativePool, TrainConfig,
};
use dualenc::repr::io::{
    parse_corpus, parse_pool, parse_qrels, parse_queries, parse_run, parse_teacher_scores,
    write_corpus, write_pool, write_qrels, write_queries, write_run,
};
use dualenc::repr::{Qrels, RunFile, TokenLimits};
use dualenc::search::{batch_search, encode_queries, GateParams, Scheme, SearchConfig};
use dualenc::synth::generate;

mod config;

#[derive(Parser)]
#[command(name = "dualenc", version, about = "Hybrid dense/lexicon first-stage retrieval engine")]
struct Cli {
    /// TOML config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic retrieval task with planted structure.
    Synth(SynthArgs),
    /// Train the encoder (full pipeline or a single stage).
    Train(TrainArgs),
    /// Mine negatives (bm25 warmup pool or dual hard negatives).
    Mine(MineArgs),
    /// Build the impact and dense indexes from a checkpoint.
    Index(IndexArgs),
    /// Search an index and emit a TREC run file.
    Search(SearchArgs),
    /// Evaluate a run file against qrels.
    Eval(EvalArgs),
    /// Measure single-thread search throughput with pre-encoded queries.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for corpus, queries and qrels.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    docs: usize,
    #[arg(long, default_value_t = 1024)]
    vocab: u32,
    #[arg(long, default_value_t = 20)]
    topics: usize,
    #[arg(long, default_value_t = 200)]
    train_queries: usize,
    #[arg(long, default_value_t = 50)]
    dev_queries: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// warmup, continual or full.
    #[arg(long, default_value = "full")]
    stage: String,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Run directory for checkpoints, pools and logs.
    #[arg(long)]
    out: PathBuf,
    /// Negative pool file (required for single-stage runs).
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Starting checkpoint (required for --stage continual).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Teacher score file enabling distillation.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_flops: Option<f64>,
    #[arg(long)]
    batch_queries: Option<usize>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    vocab_size: Option<u32>,
    #[arg(long)]
    embed_dim: Option<usize>,
}

#[derive(Args)]
struct MineArgs {
    /// bm25 or dual.
    #[arg(long)]
    source: String,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Checkpoint (required for --source dual).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    top_n: usize,
    /// Output pool file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Output index directory.
    #[arg(long)]
    out: PathBuf,
    /// Keep only the N heaviest terms per document at build time.
    #[arg(long)]
    top_n: Option<usize>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// lexicon, dense, uni, gated or ensemble.
    #[arg(long, default_value = "uni")]
    scheme: String,
    #[arg(long, default_value_t = 1000)]
    k: usize,
    #[arg(long = "K-uni", default_value_t = 2048)]
    k_uni: usize,
    /// Output TREC run file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "dualenc")]
    tag: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Rank cutoff for MRR and nDCG.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Depth for both recall flavors.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value = "lexicon")]
    scheme: String,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    #[arg(long, default_value_t = 1000)]
    k: usize,
    #[arg(long = "K-uni", default_value_t = 2048)]
    k_uni: usize,
    /// Machine descriptor recorded in the report.
    #[arg(long)]
    machine: Option<String>,
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        let record = serde_json::json!({
            "error": format!("{err:#}"),
        });
        eprintln!("{record}");
        std::process::exit(1);
    }
}

/// Resolves a path against DUALENC_RUN_ROOT when relative.
fn resolve(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("DUALENC_RUN_ROOT") {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring thread pool")?;
    }
    let file_cfg = config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(args) => cmd_synth(args, &file_cfg),
        Command::Train(args) => cmd_train(args, &file_cfg),
        Command::Mine(args) => cmd_mine(args),
        Command::Index(args) => cmd_index(args),
        Command::Search(args) => cmd_search(args, &file_cfg),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args, &file_cfg),
    }
}

fn limits_for(cfg: &EncoderConfig) -> TokenLimits {
    TokenLimits { vocab_size: cfg.vocab_size, max_seq_len: cfg.max_raw_tokens() }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load_from(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_synth(args: SynthArgs, file_cfg: &config::FileConfig) -> Result<()> {
    let mut cfg = file_cfg.synth.clone().unwrap_or_default();
    cfg.n_docs = args.docs;
    cfg.vocab_size = args.vocab;
    cfg.n_topics = args.topics;
    cfg.n_train_queries = args.train_queries;
    cfg.n_dev_queries = args.dev_queries;
    cfg.seed = args.seed;

    let task = generate(&cfg)?;
    let out = resolve(&args.out);
    std::fs::create_dir_all(&out)?;

    let corpus_path = out.join("corpus.jsonl");
    let mut buf = Vec::new();
    write_corpus(&mut buf, &task.corpus)?;
    std::fs::write(&corpus_path, &buf)?;

    let files = [
        ("queries_train.jsonl", {
            let mut b = Vec::new();
            write_queries(&mut b, &task.train_queries)?;
            b
        }),
        ("queries_dev.jsonl", {
            let mut b = Vec::new();
            write_queries(&mut b, &task.dev_queries)?;
            b
        }),
        ("qrels_train.txt", {
            let mut b = Vec::new();
            write_qrels(&mut b, &task.train_qrels)?;
            b
        }),
        ("qrels_dev.txt", {
            let mut b = Vec::new();
            write_qrels(&mut b, &task.dev_qrels)?;
            b
        }),
    ];
    for (name, bytes) in &files {
        std::fs::write(out.join(name), bytes)?;
    }

    let mut entry = ManifestEntry::new("synth").with_config(&cfg).with_seed("synth", cfg.seed);
    entry.record_artifact(&corpus_path)?;
    for (name, _) in &files {
        entry.record_artifact(&out.join(name))?;
    }
    RunManifest::in_dir(&out).append(&entry)?;
    println!(
        "synth: {} docs, {} train queries, {} dev queries -> {}",
        task.corpus.len(),
        task.train_queries.len(),
        task.dev_queries.len(),
        out.display()
    );
    Ok(())
}

fn encoder_config(
    file_cfg: &config::FileConfig,
    vocab_flag: Option<u32>,
    embed_flag: Option<usize>,
) -> Result<EncoderConfig> {
    let mut cfg = EncoderConfig::toy(1024, 24);
    cfg.max_seq_len = 32;
    if let Some(section) = &file_cfg.encoder {
        section.apply(&mut cfg);
    }
    if let Some(v) = vocab_flag {
        cfg.vocab_size = v;
    }
    if let Some(e) = embed_flag {
        cfg.embed_dim = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs, file_cfg: &config::FileConfig) -> Result<()> {
    let enc = encoder_config(file_cfg, args.vocab_size, args.embed_dim)?;
    let limits = limits_for(&enc);
    let corpus = parse_corpus(std::fs::File::open(&args.corpus)?, &limits)
        .with_context(|| format!("parsing corpus {}", args.corpus.display()))?;
    let queries = parse_queries(std::fs::File::open(&args.queries)?, &limits)
        .with_context(|| format!("parsing queries {}", args.queries.display()))?;
    let qrels = parse_qrels(std::fs::File::open(&args.qrels)?)
        .with_context(|| format!("parsing qrels {}", args.qrels.display()))?;
    let teacher = args
        .teacher
        .as_ref()
        .map(|p| -> Result<_> {
            let scores = parse_teacher_scores(std::fs::File::open(p)?)?;
            Ok(teacher_map(&scores))
        })
        .transpose()?;

    let mut tc = TrainConfig::reference(400, 200);
    if let Some(section) = &file_cfg.train {
        section.apply(&mut tc);
    }
    for sp in [&mut tc.warmup, &mut tc.continual] {
        if let Some(v) = args.steps {
            sp.steps = v;
        }
        if let Some(v) = args.lr {
            sp.lr = v;
        }
        if let Some(v) = args.lambda_flops {
            sp.lambda_flops = v;
        }
        if let Some(v) = args.batch_queries {
            sp.batch_queries = v;
        }
        if let Some(v) = args.negatives {
            sp.negatives_per_query = v;
        }
        if let Some(v) = args.seed {
            sp.seed = v;
        }
    }
    if args.teacher.is_some() {
        tc.continual.use_distill = true;
    }

    let out = resolve(&args.out);
    std::fs::create_dir_all(&out)?;

    match args.stage.as_str() {
        "full" => {
            let paths = run_full_pipeline(&out, &enc, &tc, &corpus, &queries, &qrels, teacher.as_ref())?;
            println!("pipeline complete: final checkpoint {}", paths.final_checkpoint.display());
        }
        stage @ ("warmup" | "continual") => {
            let pool_path = args
                .pool
                .as_ref()
                .with_context(|| format!("--stage {stage} needs --pool"))?;
            let pool = NegativePool::from_entries(&parse_pool(std::fs::File::open(pool_path)?)?);
            let (stage_kind, sp) = if stage == "warmup" {
                (Stage::Warmup, &tc.warmup)
            } else {
                (Stage::Continual, &tc.continual)
            };
            let (mut params, mut gate) = match (&args.checkpoint, stage_kind) {
                (Some(ckpt), _) => {
                    let ckpt = load_checkpoint(ckpt)?;
                    let gate = ckpt.gate.as_ref().map(GateParams::from_set).transpose()?;
                    (ckpt.params, gate)
                }
                (None, Stage::Warmup) => (
                    dualenc::encoder::EncoderParams::init(&enc, tc.init_seed)?,
                    tc.train_gate.then(|| GateParams::init(enc.embed_dim, tc.gate_seed)),
                ),
                (None, Stage::Continual) => {
                    bail!("--stage continual needs --checkpoint from the warmup stage")
                }
            };
            let logs = train_stage(
                stage_kind,
                sp,
                &enc,
                &corpus,
                &queries,
                &qrels,
                &pool,
                teacher.as_ref(),
                &mut params,
                gate.as_mut(),
            )?;
            let ckpt_path = out.join(format!("ckpt_{stage}.bin"));
            let mut ckpt = Checkpoint::new(enc.clone(), params);
            if let Some(g) = &gate {
                ckpt = ckpt.with_gate(g.to_set());
            }
            ckpt.save_to(&ckpt_path)?;
            let log_path = out.join(format!("log_{stage}.jsonl"));
            let mut log_text = String::new();
            for log in &logs {
                log_text.push_str(&serde_json::to_string(log)?);
                log_text.push('\n');
            }
            std::fs::write(&log_path, log_text)?;
            let mut entry = ManifestEntry::new(format!("train-{stage}"))
                .with_config(sp)
                .with_seed("stage", sp.seed);
            entry.record_input(pool_path)?;
            entry.record_artifact(&ckpt_path)?;
            entry.record_artifact(&log_path)?;
            RunManifest::in_dir(&out).append(&entry)?;
            println!("{stage} complete: {}", ckpt_path.display());
        }
        other => bail!("unknown stage {other:?} (expected warmup, continual or full)"),
    }
    Ok(())
}

fn cmd_mine(args: MineArgs) -> Result<()> {
    let out = resolve(&args.out);
    let (pool, skipped, overlap, enc_used) = match args.source.as_str() {
        "bm25" => {
            // BM25 mining needs no encoder; parse with loose limits.
            let limits = TokenLimits::default();
            let corpus = parse_corpus(std::fs::File::open(&args.corpus)?, &limits)?;
            let queries = parse_queries(std::fs::File::open(&args.queries)?, &limits)?;
            let qrels = parse_qrels(std::fs::File::open(&args.qrels)?)?;
            let bm25 = Bm25Index::build(&corpus, BM25_DEFAULT_K1, BM25_DEFAULT_B)?;
            let report = mine_bm25_negatives(&queries, &bm25, &qrels, args.top_n);
            (report.pool, report.skipped_queries, None, None)
        }
        "dual" => {
            let ckpt_path = args
                .checkpoint
                .as_ref()
                .context("--source dual needs --checkpoint")?;
            let ckpt = load_checkpoint(ckpt_path)?;
            let limits = limits_for(&ckpt.config);
            let corpus = parse_corpus(std::fs::File::open(&args.corpus)?, &limits)?;
            let queries = parse_queries(std::fs::File::open(&args.queries)?, &limits)?;
            let qrels = parse_qrels(std::fs::File::open(&args.qrels)?)?;
            let hash = hash_file(ckpt_path)?;
            let (impact, dense, _) = build_indexes(&corpus, &ckpt.params, &ckpt.config, None, &hash)?;
            let report = mine_dual_negatives(
                &queries,
                &ckpt.params,
                &ckpt.config,
                &impact,
                &dense,
                &qrels,
                args.top_n,
            )?;
            (report.pool, report.skipped_queries, report.overlap_at_top_n, Some(ckpt.config))
        }
        other => bail!("unknown mining source {other:?} (expected bm25 or dual)"),
    };
    let _ = enc_used;

    let mut buf = Vec::new();
    write_pool(&mut buf, &pool.to_entries())?;
    std::fs::write(&out, buf)?;
    if let Some(dir) = out.parent() {
        let mut entry = ManifestEntry::new(format!("mine-{}", args.source))
            .with_config(&serde_json::json!({"top_n": args.top_n}));
        entry.record_input(&args.corpus)?;
        entry.record_artifact(&out)?;
        RunManifest::in_dir(dir).append(&entry)?;
    }
    println!(
        "mined {} queries into {} ({} skipped{})",
        pool.num_queries(),
        out.display(),
        skipped.len(),
        overlap
            .map(|o| format!(", dense/lexicon overlap {o:.3}"))
            .unwrap_or_default()
    );
    Ok(())
}

fn cmd_index(args: IndexArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let limits = limits_for(&ckpt.config);
    let corpus = parse_corpus(std::fs::File::open(&args.corpus)?, &limits)?;
    let hash = hash_file(&args.checkpoint)?;
    let (impact, dense, stats) =
        build_indexes(&corpus, &ckpt.params, &ckpt.config, args.top_n, &hash)?;
    let out = resolve(&args.out);
    let manifest = save_index_dir(&out, &impact, &dense, stats.clamped_impacts)?;
    if stats.clamped_impacts > 0 {
        eprintln!("warning: {} impacts clamped to 16 bits", stats.clamped_impacts);
    }

    let mut entry = ManifestEntry::new("index")
        .with_config(&serde_json::json!({"top_n": args.top_n}));
    entry.record_input(&args.checkpoint)?;
    entry.record_input(&args.corpus)?;
    for file in ["manifest.json", "docs.txt", "postings.bin", "dense.bin"] {
        entry.record_artifact(&out.join(file))?;
    }
    RunManifest::in_dir(&out).append(&entry)?;
    println!(
        "indexed {} docs, {} postings (top_n {:?}) -> {}",
        manifest.num_docs,
        manifest.total_postings,
        manifest.top_n,
        out.display()
    );
    Ok(())
}

/// Loads an index directory plus its checkpoint, refusing on hash mismatch.
fn load_compatible(
    index_dir: &Path,
    checkpoint: &Path,
) -> Result<(dualenc::index::ImpactIndex, dualenc::index::DenseIndex, Checkpoint)> {
    let (impact, dense, manifest) = load_index_dir(index_dir)
        .with_context(|| format!("loading index {}", index_dir.display()))?;
    let ckpt_hash = hash_file(checkpoint)?;
    if manifest.checkpoint_hash != ckpt_hash {
        bail!(
            "index {} was built from checkpoint {} but {} hashes to {}; refusing to search a mismatched pair",
            index_dir.display(),
            manifest.checkpoint_hash,
            checkpoint.display(),
            ckpt_hash
        );
    }
    let ckpt = load_checkpoint(checkpoint)?;
    Ok((impact, dense, ckpt))
}

fn parse_scheme(s: &str) -> Result<Scheme> {
    Scheme::parse(s).with_context(|| format!("unknown scheme {s:?}"))
}

fn cmd_search(args: SearchArgs, file_cfg: &config::FileConfig) -> Result<()> {
    let mut scheme_name = args.scheme.clone();
    let mut cfg = SearchConfig { k_final: args.k, k_uni: args.k_uni };
    if let Some(section) = &file_cfg.search {
        if let Some(k) = section.k_final {
            cfg.k_final = k;
        }
        if let Some(k) = section.k_uni {
            cfg.k_uni = k;
        }
        if let Some(s) = &section.scheme {
            scheme_name = s.clone();
        }
    }
    let scheme = parse_scheme(&scheme_name)?;
    let (impact, dense, ckpt) = load_compatible(&args.index, &args.checkpoint)?;
    let limits = limits_for(&ckpt.config);
    let queries = parse_queries(std::fs::File::open(&args.queries)?, &limits)?;
    let encoded = encode_queries(&queries, &ckpt.params, &ckpt.config)?;
    let gate = ckpt.gate.as_ref().map(GateParams::from_set).transpose()?;
    let (run, warnings) = batch_search(scheme, &encoded, &impact, &dense, gate.as_ref(), &cfg)?;

    let out = resolve(&args.out);
    let mut buf = Vec::new();
    write_run(&mut buf, &run, &args.tag)?;
    std::fs::write(&out, buf)?;
    if warnings.empty_quantized_queries > 0 {
        eprintln!(
            "warning: {} queries quantized to empty lexicon vectors",
            warnings.empty_quantized_queries
        );
    }
    if let Some(dir) = out.parent() {
        let mut entry = ManifestEntry::new("search").with_config(&serde_json::json!({
            "scheme": scheme.as_str(),
            "k": cfg.k_final,
            "k_uni": cfg.k_uni,
        }));
        entry.record_input(&args.checkpoint)?;
        entry.record_artifact(&out)?;
        RunManifest::in_dir(dir).append(&entry)?;
    }
    println!("searched {} queries ({}) -> {}", queries.len(), scheme.as_str(), out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let run: RunFile = parse_run(std::fs::File::open(&args.run)?)
        .with_context(|| format!("parsing run {}", args.run.display()))?;
    let qrels: Qrels = parse_qrels(std::fs::File::open(&args.qrels)?)
        .with_context(|| format!("parsing qrels {}", args.qrels.display()))?;

    let reports = vec![
        mrr_at_k(&run, &qrels, args.k)?,
        recall_marco(&run, &qrels, args.n)?,
        recall_dpr(&run, &qrels, args.n)?,
        ndcg_at_k(&run, &qrels, args.k)?,
    ];
    print!("{}", format_metric_table(&reports));
    if let Some(out) = &args.out {
        let out = resolve(out);
        let json = serde_json::to_string_pretty(&reports)?;
        std::fs::write(&out, json + "\n")?;
        if let Some(dir) = out.parent() {
            let mut entry = ManifestEntry::new("eval");
            entry.record_input(&args.run)?;
            entry.record_input(&args.qrels)?;
            entry.record_artifact(&out)?;
            RunManifest::in_dir(dir).append(&entry)?;
        }
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs, file_cfg: &config::FileConfig) -> Result<()> {
    let scheme = parse_scheme(&args.scheme)?;
    let mut trials = args.trials;
    let mut machine = args.machine.clone();
    if let Some(section) = &file_cfg.bench {
        if let Some(t) = section.trials {
            trials = t;
        }
        if machine.is_none() {
            machine = section.machine.clone();
        }
    }
    let (impact, dense, ckpt) = load_compatible(&args.index, &args.checkpoint)?;
    let limits = limits_for(&ckpt.config);
    let queries = parse_queries(std::fs::File::open(&args.queries)?, &limits)?;
    // Pre-encode outside the timed region, per the measurement protocol.
    let encoded = encode_queries(&queries, &ckpt.params, &ckpt.config)?;
    let gate = ckpt.gate.as_ref().map(GateParams::from_set).transpose()?;
    let cfg = SearchConfig { k_final: args.k, k_uni: args.k_uni };
    let report = qps_bench(scheme, &encoded, &impact, &dense, gate.as_ref(), &cfg, trials)?;

    let mut json = serde_json::to_value(&report)?;
    if let Some(m) = &machine {
        json["machine"] = serde_json::Value::String(m.clone());
    }
    println!("{}", serde_json::to_string_pretty(&json)?);
    if let Some(out) = &args.out {
        let out = resolve(out);
        std::fs::write(&out, serde_json::to_string_pretty(&json)? + "\n")?;
    }
    Ok(())
}
