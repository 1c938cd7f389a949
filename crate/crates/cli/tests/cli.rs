//! End-to-end exercises of the command-line interface: the full
//! synth -> train -> mine -> index -> search -> eval loop, the lexicon
//! equivalence of uni retrieval at K = 0, artifact compatibility
//! enforcement, and the machine-readable error contract.

use std::path::Path;
use std::process::{Command, Output};

fn dualenc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dualenc"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawning dualenc");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn synth_into(dir: &Path) {
    run_ok(dualenc().args([
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--docs",
        "60",
        "--vocab",
        "512",
        "--topics",
        "8",
        "--train-queries",
        "12",
        "--dev-queries",
        "6",
        "--seed",
        "5",
    ]));
}

#[test]
fn full_loop_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run_dir = tmp.path().join("run");
    synth_into(&data);

    for f in ["corpus.jsonl", "queries_train.jsonl", "queries_dev.jsonl", "qrels_train.txt", "qrels_dev.txt", "manifest.jsonl"] {
        assert!(data.join(f).exists(), "{f} missing after synth");
    }

    // Full three-stage pipeline at a tiny scale.
    run_ok(dualenc().args([
        "train",
        "--stage",
        "full",
        "--corpus",
        data.join("corpus.jsonl").to_str().unwrap(),
        "--queries",
        data.join("queries_train.jsonl").to_str().unwrap(),
        "--qrels",
        data.join("qrels_train.txt").to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--steps",
        "6",
        "--lr",
        "0.002",
        "--batch-queries",
        "2",
        "--negatives",
        "2",
        "--vocab-size",
        "512",
        "--embed-dim",
        "8",
    ]));
    let ckpt = run_dir.join("ckpt_final.bin");
    assert!(ckpt.exists());

    // Standalone mining against the final checkpoint.
    let pool = run_dir.join("pool_extra.txt");
    run_ok(dualenc().args([
        "mine",
        "--source",
        "dual",
        "--corpus",
        data.join("corpus.jsonl").to_str().unwrap(),
        "--queries",
        data.join("queries_train.jsonl").to_str().unwrap(),
        "--qrels",
        data.join("qrels_train.txt").to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--top-n",
        "5",
        "--out",
        pool.to_str().unwrap(),
    ]));
    assert!(pool.exists());

    // Index the corpus.
    let index_dir = run_dir.join("index");
    run_ok(dualenc().args([
        "index",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--corpus",
        data.join("corpus.jsonl").to_str().unwrap(),
        "--out",
        index_dir.to_str().unwrap(),
    ]));

    // Search all schemes; uni at K-uni 0 must equal lexicon byte for byte.
    let mut runs = Vec::new();
    for (scheme, k_uni, name) in [
        ("lexicon", "64", "run_lex.txt"),
        ("uni", "0", "run_uni0.txt"),
        ("uni", "64", "run_uni.txt"),
        ("dense", "64", "run_dense.txt"),
        ("gated", "64", "run_gated.txt"),
        ("ensemble", "64", "run_ens.txt"),
    ] {
        let out = run_dir.join(name);
        run_ok(dualenc().args([
            "search",
            "--index",
            index_dir.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--queries",
            data.join("queries_dev.jsonl").to_str().unwrap(),
            "--scheme",
            scheme,
            "--k",
            "20",
            "--K-uni",
            k_uni,
            "--out",
            out.to_str().unwrap(),
            "--tag",
            "t",
        ]));
        runs.push(out);
    }
    let lex_bytes = std::fs::read(&runs[0]).unwrap();
    let uni0_bytes = std::fs::read(&runs[1]).unwrap();
    assert_eq!(lex_bytes, uni0_bytes, "uni at K=0 differs from lexicon");

    // Evaluate.
    let out = run_ok(dualenc().args([
        "eval",
        "--run",
        runs[2].to_str().unwrap(),
        "--qrels",
        data.join("qrels_dev.txt").to_str().unwrap(),
        "--k",
        "10",
        "--n",
        "20",
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mrr@10"));
    assert!(stdout.contains("recall_marco@20"));
    assert!(stdout.contains("recall_dpr@20"));
    assert!(stdout.contains("ndcg@10"));

    // Bench runs and reports JSON.
    let out = run_ok(dualenc().args([
        "bench",
        "--index",
        index_dir.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--queries",
        data.join("queries_dev.jsonl").to_str().unwrap(),
        "--scheme",
        "lexicon",
        "--trials",
        "2",
        "--k",
        "20",
        "--machine",
        "test-box",
    ]));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["qps"].as_f64().unwrap() > 0.0);
    assert_eq!(report["machine"], "test-box");
}

#[test]
fn synth_is_reproducible_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    synth_into(&a);
    synth_into(&b);
    for f in ["corpus.jsonl", "queries_train.jsonl", "qrels_dev.txt"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs between identical synth runs"
        );
    }
}

#[test]
fn search_refuses_mismatched_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run_dir = tmp.path().join("run");
    std::fs::create_dir_all(&run_dir).unwrap();
    synth_into(&data);

    // Two different single-stage warmup checkpoints.
    for (seed, name) in [("1", "r1"), ("2", "r2")] {
        let pool = run_dir.join(format!("pool_{name}.txt"));
        run_ok(dualenc().args([
            "mine",
            "--source",
            "bm25",
            "--corpus",
            data.join("corpus.jsonl").to_str().unwrap(),
            "--queries",
            data.join("queries_train.jsonl").to_str().unwrap(),
            "--qrels",
            data.join("qrels_train.txt").to_str().unwrap(),
            "--top-n",
            "5",
            "--out",
            pool.to_str().unwrap(),
        ]));
        run_ok(dualenc().args([
            "train",
            "--stage",
            "warmup",
            "--corpus",
            data.join("corpus.jsonl").to_str().unwrap(),
            "--queries",
            data.join("queries_train.jsonl").to_str().unwrap(),
            "--qrels",
            data.join("qrels_train.txt").to_str().unwrap(),
            "--out",
            run_dir.join(name).to_str().unwrap(),
            "--pool",
            pool.to_str().unwrap(),
            "--steps",
            "2",
            "--lr",
            "0.002",
            "--batch-queries",
            "2",
            "--negatives",
            "2",
            "--seed",
            seed,
            "--vocab-size",
            "512",
            "--embed-dim",
            "8",
        ]));
    }
    let ckpt1 = run_dir.join("r1/ckpt_warmup.bin");
    let ckpt2 = run_dir.join("r2/ckpt_warmup.bin");

    let index_dir = run_dir.join("index1");
    run_ok(dualenc().args([
        "index",
        "--checkpoint",
        ckpt1.to_str().unwrap(),
        "--corpus",
        data.join("corpus.jsonl").to_str().unwrap(),
        "--out",
        index_dir.to_str().unwrap(),
    ]));

    // Searching index1 with checkpoint2 must refuse with a JSON error.
    let out = dualenc()
        .args([
            "search",
            "--index",
            index_dir.to_str().unwrap(),
            "--checkpoint",
            ckpt2.to_str().unwrap(),
            "--queries",
            data.join("queries_dev.jsonl").to_str().unwrap(),
            "--scheme",
            "lexicon",
            "--out",
            run_dir.join("never.txt").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let record: serde_json::Value =
        serde_json::from_str(stderr.lines().last().unwrap()).expect("stderr carries a JSON record");
    assert!(record["error"].as_str().unwrap().contains("refusing"));
    assert!(!run_dir.join("never.txt").exists());
}

#[test]
fn eval_contrast_fixture_shows_both_recall_flavors() {
    let tmp = tempfile::tempdir().unwrap();
    let qrels = tmp.path().join("qrels.txt");
    let run = tmp.path().join("run.txt");
    // Two relevant docs, one retrieved in the top five.
    std::fs::write(&qrels, "q 0 r1 1\nq 0 r2 1\n").unwrap();
    std::fs::write(
        &run,
        "q Q0 r1 1 5 t\nq Q0 x1 2 4 t\nq Q0 x2 3 3 t\nq Q0 x3 4 2 t\nq Q0 x4 5 1 t\n",
    )
    .unwrap();
    let out = run_ok(dualenc().args([
        "eval",
        "--run",
        run.to_str().unwrap(),
        "--qrels",
        qrels.to_str().unwrap(),
        "--n",
        "5",
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let grab = |name: &str| -> f64 {
        stdout
            .lines()
            .find(|l| l.starts_with(name))
            .unwrap_or_else(|| panic!("{name} missing in output:\n{stdout}"))
            .split_whitespace()
            .nth(1)
            .unwrap()
            .parse()
            .unwrap()
    };
    let marco = grab("recall_marco@5");
    let dpr = grab("recall_dpr@5");
    assert!((marco - 0.5).abs() < 1e-9);
    assert!((dpr - 1.0).abs() < 1e-9);
}

#[test]
fn config_file_overrides_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_into(&data);
    let cfg_path = tmp.path().join("cfg.toml");
    std::fs::write(
        &cfg_path,
        r#"
[encoder]
vocab_size = 512
embed_dim = 8
max_seq_len = 32

[train.warmup]
steps = 2
lr = 0.002
batch_queries = 2
negatives_per_query = 2

[train.continual]
steps = 2
lr = 0.001
batch_queries = 2
negatives_per_query = 2

[train]
mining_top_n = 4
"#,
    )
    .unwrap();
    // Invalid TOML sections are rejected.
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[nonsense]\nx = 1\n").unwrap();
    let out = dualenc()
        .args(["--config", bad.to_str().unwrap(), "synth", "--out", tmp.path().join("x").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());

    let run_dir = tmp.path().join("run");
    run_ok(dualenc().args([
        "--config",
        cfg_path.to_str().unwrap(),
        "train",
        "--stage",
        "full",
        "--corpus",
        data.join("corpus.jsonl").to_str().unwrap(),
        "--queries",
        data.join("queries_train.jsonl").to_str().unwrap(),
        "--qrels",
        data.join("qrels_train.txt").to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]));
    assert!(run_dir.join("ckpt_final.bin").exists());

    // Flags override the file: forcing an invalid embed_dim must fail.
    let out = dualenc()
        .args([
            "--config",
            cfg_path.to_str().unwrap(),
            "train",
            "--stage",
            "full",
            "--corpus",
            data.join("corpus.jsonl").to_str().unwrap(),
            "--queries",
            data.join("queries_train.jsonl").to_str().unwrap(),
            "--qrels",
            data.join("qrels_train.txt").to_str().unwrap(),
            "--out",
            tmp.path().join("run2").to_str().unwrap(),
            "--embed-dim",
            "9",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success(), "embed_dim 9 with 4 heads should be rejected");
}
