use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ctsr::eval::{Metric, MetricsReport};
use ctsr::index::FeatureIndex;
use ctsr::training::CheckpointRecord;
use tempfile::TempDir;

fn ctsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctsr")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = ctsr(args);
    assert!(
        o.status.success(),
        "ctsr {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("corpus{seed}"));
    ok(&["synth", "--classes", "3", "--per-class", "6", "--length", "32", "--seed", seed, "--out", s(&out)]);
    out
}

fn train(dir: &Path, corpus: &Path, model: &str, name: &str) -> PathBuf {
    let ck = dir.join(name);
    ok(&[
        "train", "--train", s(&corpus.join("train.tsv")), "--val", s(&corpus.join("val.tsv")),
        "--model", model, "--templates", "8", "--length", "32", "--epochs", "2",
        "--steps-per-epoch", "2", "--batch-size", "2", "--seed", "3", "--out", s(&ck),
    ]);
    ck
}

fn index(ck: &Path, corpus: &Path, out: &Path, graph: bool) {
    let mut args = vec!["index", "--checkpoint", s(ck), "--corpus", s(corpus), "--out", s(out)];
    if graph {
        args.extend(["--graph", "--k-graph", "5"]);
    }
    ok(&args);
}

/// Result rows of a query run, comment lines dropped.
fn rows(stdout: &str) -> Vec<Vec<String>> {
    stdout
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split('\t').map(String::from).collect())
        .collect()
}

#[test]
fn synth_writes_splits_and_manifest() {
    let dir = TempDir::new().unwrap();
    let a = synth(dir.path(), "7");
    let count = |p: PathBuf| std::fs::read_to_string(p).unwrap().lines().count();
    assert_eq!(count(a.join("train.tsv")), 18);
    assert_eq!(count(a.join("val.tsv")), 3);
    assert_eq!(count(a.join("test.tsv")), 3);
    let man: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(man["command"], "synth");
    assert_eq!(man["config"]["val_per_class"], 1);

    let c = dir.path().join("again");
    ok(&["synth", "--classes", "3", "--per-class", "6", "--length", "32", "--seed", "7", "--out", s(&c)]);
    for f in ["train.tsv", "val.tsv", "test.tsv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(c.join(f)).unwrap());
    }
}

#[test]
fn synth_rejects_one_class() {
    let dir = TempDir::new().unwrap();
    let o = ctsr(&["synth", "--classes", "1", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn train_index_query_evaluate_round() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let corpus = synth(d, "7");
    let train_tsv = corpus.join("train.tsv");
    let ck = train(d, &corpus, "rn2dwt", "m.ckpt");
    let rec = CheckpointRecord::load(&ck).unwrap();
    assert_eq!(rec.config.n_templates, 8);
    assert!(ck.with_extension("ckpt.log.tsv").exists());
    assert!(ck.with_extension("ckpt.manifest.json").exists());

    // logged best validation NDCG@10 equals a fresh evaluation of the checkpoint
    let idx_path = d.join("train.ctsx");
    index(&ck, &train_tsv, &idx_path, false);
    let rep = d.join("val.json");
    ok(&[
        "evaluate", "--checkpoint", s(&ck), "--index", s(&idx_path), "--queries",
        s(&corpus.join("val.tsv")), "--out", s(&rep),
    ]);
    let r = MetricsReport::from_json(&std::fs::read_to_string(&rep).unwrap()).unwrap();
    assert!((r.mean(Metric::Ndcg, 10).unwrap() - rec.best_val_ndcg10).abs() < 1e-9);

    let idx = FeatureIndex::load(&idx_path).unwrap();
    assert_eq!(idx.len(), 18);
    assert!(idx.graph().is_none());

    // graph section and rebuild determinism
    let g1 = d.join("g1.ctsx");
    let g2 = d.join("g2.ctsx");
    index(&ck, &train_tsv, &g1, true);
    index(&ck, &train_tsv, &g2, true);
    assert_eq!(std::fs::read(&g1).unwrap(), std::fs::read(&g2).unwrap());
    assert_eq!(FeatureIndex::load(&g1).unwrap().graph().unwrap().k(), 5);

    // an indexed series finds itself first at score 0
    let out = ok(&[
        "query", "--checkpoint", s(&ck), "--index", s(&g1), "--queries", s(&train_tsv), "--k", "3",
    ]);
    let exact = rows(&out);
    assert_eq!(exact.len(), 18 * 3);
    for (qi, chunk) in exact.chunks(3).enumerate() {
        assert_eq!(chunk[0][0], "1");
        assert_eq!(chunk[0][1], format!("train:{qi}"));
        assert_eq!(chunk[0][3].parse::<f64>().unwrap(), 0.0);
    }

    // exhaustive ann pool reproduces exact search
    let ann = ok(&[
        "query", "--checkpoint", s(&ck), "--index", s(&g1), "--queries", s(&train_tsv), "--k", "3",
        "--mode", "ann", "--candidates", "18",
    ]);
    assert_eq!(rows(&ann), exact);

    // k beyond n gives n rows
    let test_tsv = corpus.join("test.tsv");
    let big = ok(&["query", "--checkpoint", s(&ck), "--index", s(&idx_path), "--queries", s(&test_tsv), "--k", "50"]);
    assert_eq!(rows(&big).len(), 3 * 18);

    // dump-series needs the corpus and writes one file per query
    let dump = d.join("dump");
    ok(&[
        "query", "--checkpoint", s(&ck), "--index", s(&idx_path), "--corpus", s(&train_tsv), "--queries",
        s(&test_tsv), "--k", "4", "--dump-series", s(&dump), "--out", s(&d.join("q.txt")),
    ]);
    let dumped = std::fs::read_to_string(dump.join("query_0.tsv")).unwrap();
    assert_eq!(dumped.lines().count(), 5);
    assert!(d.join("q.txt.manifest.json").exists());

    // k grid and report reproducibility
    let r1 = d.join("r1.json");
    let r2 = d.join("r2.json");
    for r in [&r1, &r2] {
        ok(&[
            "evaluate", "--checkpoint", s(&ck), "--index", s(&idx_path), "--queries", s(&test_tsv),
            "--k-grid", "5..15", "--out", s(r),
        ]);
    }
    let a = MetricsReport::from_json(&std::fs::read_to_string(&r1).unwrap()).unwrap();
    let b = MetricsReport::from_json(&std::fs::read_to_string(&r2).unwrap()).unwrap();
    assert_eq!(a.k_grid.len(), 11);
    assert_eq!(a.without_timing(), b.without_timing());

    // the trunk runs once per query on the exact path
    let bench = d.join("bench.json");
    let out = ok(&[
        "bench", "--checkpoint", s(&ck), "--index", s(&g1), "--queries", s(&test_tsv), "--modes", "exact,ann",
        "--candidates", "10", "--out", s(&bench),
    ]);
    assert!(out.contains("exact\t18\t"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&bench).unwrap()).unwrap();
    assert_eq!(v["rows"][0]["trunk_calls_per_query"], 1.0);
    assert_eq!(v["rows"][1]["trunk_calls_per_query"], 1.0);
}

#[test]
fn pairwise_checkpoint_paths() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let corpus = synth(d, "5");
    let train_tsv = corpus.join("train.tsv");
    let test_tsv = corpus.join("test.tsv");
    let ck = train(d, &corpus, "rn2d", "p.ckpt");

    let o = ctsr(&["index", "--checkpoint", s(&ck), "--corpus", s(&train_tsv), "--out", s(&d.join("x.ctsx"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rn2d"));

    let o = ctsr(&["query", "--checkpoint", s(&ck), "--corpus", s(&train_tsv), "--queries", s(&test_tsv), "--mode", "ann"]);
    assert_eq!(o.status.code(), Some(2));

    let out = ok(&[
        "query", "--checkpoint", s(&ck), "--corpus", s(&train_tsv), "--queries", s(&test_tsv), "--mode",
        "pairwise", "--k", "4",
    ]);
    assert_eq!(rows(&out).len(), 12);

    let bench = d.join("b.json");
    ok(&[
        "bench", "--pairwise-checkpoint", s(&ck), "--corpus", s(&train_tsv), "--queries", s(&test_tsv),
        "--modes", "pairwise", "--out", s(&bench),
    ]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&bench).unwrap()).unwrap();
    assert_eq!(v["rows"][0]["trunk_calls_per_query"], 18.0);
}

#[test]
fn same_label_corpus_scores_one() {
    let dir = TempDir::new().unwrap();
    let db = dir.path().join("db.tsv");
    let q = dir.path().join("q.tsv");
    std::fs::write(&db, "a\t0\t1\t2\t1\na\t1\t0\t3\t2\na\t2\t2\t0\t1\na\t0\t0\t1\t5\n").unwrap();
    std::fs::write(&q, "a\t1\t2\t3\t4\na\t4\t3\t2\t1\n").unwrap();
    let out = dir.path().join("r.json");
    ok(&[
        "evaluate", "--baseline", "dtw", "--corpus", s(&db), "--queries", s(&q), "--length", "4", "--k-grid",
        "1..3", "--out", s(&out),
    ]);
    let r = MetricsReport::from_json(&std::fs::read_to_string(&out).unwrap()).unwrap();
    for v in r.means.prec.iter().chain(&r.means.ap).chain(&r.means.ndcg) {
        assert_eq!(*v, 1.0);
    }
}

#[test]
fn sweep_rows_match_standalone_runs() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let corpus = synth(d, "9");
    let out = d.join("sweep.json");
    let table = ok(&[
        "sweep-templates", "--train", s(&corpus.join("train.tsv")), "--val", s(&corpus.join("val.tsv")),
        "--test", s(&corpus.join("test.tsv")), "--grid", "8,16", "--length", "32", "--epochs", "1",
        "--steps-per-epoch", "2", "--batch-size", "2", "--seed", "3", "--out", s(&out),
    ]);
    assert_eq!(table.lines().count(), 4);
    let rep: ctsr::cli::SweepReport = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(rep.rows.len(), 2);

    let ck = d.join("k16.ckpt");
    ok(&[
        "train", "--train", s(&corpus.join("train.tsv")), "--val", s(&corpus.join("val.tsv")), "--templates",
        "16", "--length", "32", "--epochs", "1", "--steps-per-epoch", "2", "--batch-size", "2", "--seed", "3",
        "--out", s(&ck),
    ]);
    assert_eq!(std::fs::read(&ck).unwrap(), std::fs::read(d.join("sweep.json.k16.ckpt")).unwrap());
    let idx = d.join("k16.ctsx");
    index(&ck, &corpus.join("train.tsv"), &idx, false);
    let rep_path = d.join("k16.json");
    ok(&[
        "evaluate", "--checkpoint", s(&ck), "--index", s(&idx), "--queries", s(&corpus.join("test.tsv")),
        "--out", s(&rep_path),
    ]);
    let r = MetricsReport::from_json(&std::fs::read_to_string(&rep_path).unwrap()).unwrap();
    let row = &rep.rows[1];
    assert_eq!(row.templates, 16);
    assert_eq!(row.ndcg10, r.mean(Metric::Ndcg, 10).unwrap());
    assert_eq!(row.ap10, r.mean(Metric::Ap, 10).unwrap());
    assert_eq!(row.prec10, r.mean(Metric::Prec, 10).unwrap());
}
