use std::fs;
use std::path::Path;
use std::process::Command;

use cdrec::config::RunConfig;
use cdrec::harness::{self, RunPaths};
use cdrec::io;
use cdrec_core::synthetic::BlockCorpus;

fn write_ratings(path: &Path) {
    let log = BlockCorpus { n_users: 12, n_items: 16, per_user: 12, ..BlockCorpus::default() }.generate().unwrap();
    let mut text = String::new();
    for e in &log.events {
        // low ratings interleaved to exercise the threshold
        text.push_str(&format!("user{}\tmovie{}\t4\t{}\n", e.user, e.item, 100 + e.timestamp));
        text.push_str(&format!("user{}\tmovie{}\t1\t{}\n", e.user, (e.item + 1) % 16, 100 + e.timestamp));
    }
    fs::write(path, text).unwrap();
}

fn config(dir: &Path) -> RunConfig {
    let ratings = dir.join("ratings.tsv");
    write_ratings(&ratings);
    let quote = |p: &Path| toml::Value::String(p.display().to_string()).to_string();
    RunConfig::load(
        None,
        None,
        &[
            format!("paths.ratings={}", quote(&ratings)),
            format!("paths.out_dir={}", quote(&dir.join("run"))),
            "denoiser.dim=16".into(),
            "collab.mf.dim=16".into(),
            "collab.mf.epochs=3".into(),
            "denoiser.seq_len=12".into(),
            "train.epochs=2".into(),
            "train.batch_size=4".into(),
            "sampler.steps=2".into(),
        ],
    )
    .unwrap()
}

#[test]
fn split_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let stats = harness::prepare(&cfg).unwrap();
    assert_eq!(stats.n_users, 12);
    assert_eq!(stats.n_train + stats.n_val + stats.n_test, 12 * 12);
    let prepared = io::read_split(&RunPaths::new(&cfg).split_dir()).unwrap();
    assert_eq!(prepared.stats(), stats);
    let again = dir.path().join("copy");
    io::write_split(&again, &prepared).unwrap();
    assert_eq!(io::read_split(&again).unwrap(), prepared);
}

#[test]
fn embeddings_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    harness::prepare(&cfg).unwrap();
    let bundle = harness::embed(&cfg).unwrap();
    let loaded = io::load_embeddings(&RunPaths::new(&cfg).embeddings(), bundle.n_users, bundle.n_items).unwrap();
    assert_eq!(loaded.users, bundle.users);
    assert_eq!(loaded.items, bundle.items);
    assert!(io::load_embeddings(&RunPaths::new(&cfg).embeddings(), bundle.n_users + 1, bundle.n_items).is_err());
}

#[test]
fn malformed_embeddings_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.txt");
    fs::write(&path, "1 1 2\n0.5 0.5\nNaN 1.0\n").unwrap();
    assert!(io::load_embeddings(&path, 1, 1).is_err());
    fs::write(&path, "1 1 2\n0.5 0.5\n").unwrap();
    assert!(io::load_embeddings(&path, 1, 1).is_err());
}

#[test]
fn train_writes_checkpoint_that_reloads_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    harness::prepare(&cfg).unwrap();
    harness::embed(&cfg).unwrap();
    let summary = harness::train(&cfg).unwrap();
    assert_eq!(summary.epochs.len(), 2);
    let paths = RunPaths::new(&cfg);
    let ckpt = io::load_checkpoint(&paths.model()).unwrap();
    assert!(ckpt.target.is_some());
    let copy = dir.path().join("copy.json");
    io::save_checkpoint(&copy, &ckpt).unwrap();
    assert_eq!(io::load_checkpoint(&copy).unwrap(), ckpt);
    assert_eq!(fs::read_to_string(paths.train_log()).unwrap().lines().count(), 2);

    let model = harness::model_from_checkpoint(&ckpt).unwrap();
    let (report, timing) = harness::evaluate(&cfg, &model).unwrap();
    assert_eq!(timing.len(), 1);
    for v in report.recall.values().chain(report.ndcg.values()) {
        assert!((0.0..=1.0).contains(v));
    }
    assert!(paths.metrics().exists() && paths.baselines().exists());

    let mut out = Vec::new();
    let n = harness::recommend(&cfg, &model, &["user3".into()], 5, &mut out).unwrap();
    assert_eq!(n, 1);
    let line: serde_json::Value = serde_json::from_slice(&out).unwrap();
    assert_eq!(line["user"], "user3");
    assert_eq!(line["items"].as_array().unwrap().len(), 5);
    assert!(harness::recommend(&cfg, &model, &["nobody".into()], 5, &mut Vec::new()).is_err());
}

#[test]
fn rejects_unsupported_checkpoint_version() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    fs::write(&path, r#"{"format":"something-else","version":1}"#).unwrap();
    assert!(io::load_checkpoint(&path).is_err());
}

#[test]
fn cli_end_to_end() {
    let bin = env!("CARGO_BIN_EXE_cdrec");
    let dir = tempfile::tempdir().unwrap();
    let ratings = dir.path().join("ratings.tsv");
    write_ratings(&ratings);
    let out = dir.path().join("run");
    let cli = |args: &[&str]| {
        let o = Command::new(bin)
            .args(["--out", out.to_str().unwrap()])
            .args(["--set", &format!("paths.ratings={}", toml::Value::String(ratings.display().to_string()))])
            .args(["--set", "denoiser.dim=16", "--set", "collab.mf.dim=16", "--set", "collab.mf.epochs=2"])
            .args(["--set", "train.epochs=1", "--set", "train.batch_size=6", "--set", "sampler.steps=2"])
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    cli(&["prepare"]);
    cli(&["embed"]);
    cli(&["train"]);
    cli(&["eval", "--seeds", "0,1"]);
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["seeds"].as_array().unwrap().len(), 2);

    let recs = cli(&["recommend", "--user", "user0", "--k", "3"]);
    assert_eq!(recs.lines().count(), 1);

    let trace = dir.path().join("trace.csv");
    cli(&["trace", "--user", "user1", "--steps", "7", "--runs", "20", "--output", trace.to_str().unwrap()]);
    let text = fs::read_to_string(&trace).unwrap();
    assert_eq!(text.lines().next().unwrap(), "t,position,item_id,I,beta_bar,masked");

    let sweep = dir.path().join("sweep.csv");
    cli(&["sweep", "--grid", "sampler.steps=1,2", "--output", sweep.to_str().unwrap()]);
    assert_eq!(fs::read_to_string(&sweep).unwrap().lines().count(), 3);
}

#[test]
fn cli_reports_bad_override() {
    let o = Command::new(env!("CARGO_BIN_EXE_cdrec")).args(["--set", "train.nonsense=1", "prepare"]).output().unwrap();
    assert!(!o.status.success());
}
