//! The command-line pipeline end to end on a tiny synthetic benchmark.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn knnlm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_knnlm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run knnlm")
}

fn ok(dir: &Path, args: &[&str]) -> Vec<Value> {
    let mut full = vec!["--config", "knnlm.conf", "--set", "adaptor.epochs=2", "--set", "adaptor.width=16"];
    full.extend_from_slice(args);
    let out = knnlm(dir, &full);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("{args:?}: bad JSON line {l}: {e}")))
        .collect()
}

fn synth(dir: &Path) {
    let out = knnlm(dir, &["synth", "--scale", "0.02", "--out", "."]);
    assert!(out.status.success());
    for f in ["generic.txt", "datastore.txt", "valid.txt", "test.txt", "knnlm.conf"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
}

#[test]
fn every_stage_runs_and_reports_json() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);

    let lm = ok(dir, &["build-lm"]);
    assert_eq!(lm[0]["stage"], "build-lm");
    let ds = ok(dir, &["build-datastore"]);
    let count = ds[0]["details"]["count"].as_u64().unwrap();
    assert!(count > 0);
    ok(dir, &["build-index"]);
    assert!(dir.join("datastore.knni").exists());

    let gm = ok(dir, &["prune", "--method", "gm"]);
    let d = &gm[0]["details"];
    assert_eq!(d["total_weight_after"], d["total_weight_before"]);
    assert!(d["output_count"].as_u64().unwrap() <= count);
    for method in ["random", "kmeans", "rank"] {
        let out = format!("{method}.knnd");
        ok(dir, &["prune", "--method", method, "--out", &out]);
        assert!(dir.join(&out).exists());
    }

    let half = ok(dir, &["prune", "--method", "random", "--retain", "0.5", "--out", "half.knnd"]);
    let kept = half[0]["details"]["output_count"].as_u64().unwrap();
    assert_eq!(kept, count.div_ceil(2));
    let exact = ok(dir, &["prune", "--method", "gm", "--gm-k", "2", "--exact", "--out", "gm2.knnd"]);
    assert_eq!(exact[0]["details"]["total_weight_after"], exact[0]["details"]["total_weight_before"]);

    let red = ok(dir, &["reduce", "--dim", "8"]);
    assert_eq!(red[0]["details"]["output_dim"], 8);

    let tune = ok(dir, &["tune-lambda"]);
    let lambda = tune[0]["lambda"].as_f64().unwrap();
    assert!((0.1..=0.9).contains(&lambda));

    let train = ok(dir, &["train-adaptor"]);
    assert_eq!(train.last().unwrap()["stage"], "train-adaptor");
    assert!(dir.join("adaptor.knna").exists());

    let nlm = ok(dir, &["eval", "--mode", "nlm"]);
    let knn = ok(dir, &["eval", "--mode", "knnlm"]);
    let ar = ok(dir, &["eval", "--mode", "knnlm+AR"]);
    assert_eq!(nlm[0]["retrieval_fraction"], 0.0);
    assert_eq!(knn[0]["retrieval_fraction"], 1.0);
    assert!(ar[0]["retrieval_fraction"].as_f64().unwrap() < 1.0);
    assert_eq!(nlm[0]["tokens"], knn[0]["tokens"]);
    assert_eq!(nlm[0]["config_hash"], knn[0]["config_hash"]);
    let pruned = ok(dir, &["eval", "--datastore", "datastore.pruned.knnd", "--max-tokens", "40"]);
    assert_eq!(pruned[0]["tokens"], 40);
    let reduced = ok(dir, &["eval", "--datastore", "datastore.reduced.knnd", "--max-tokens", "40"]);
    assert_eq!(reduced[0]["key_dim"], 8);

    let bench = ok(dir, &["bench", "--repetitions", "1"]);
    assert_eq!(bench.len(), 4);
    let ablate = ok(dir, &["ablate"]);
    assert_eq!(ablate.len(), 5 * 4);
}

#[test]
fn seeded_runs_write_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        synth(dir);
        for stage in ["build-lm", "build-datastore", "build-index"] {
            ok(dir, &["--seed", "5", stage]);
        }
        ok(dir, &["--seed", "5", "prune", "--method", "gm"]);
    }
    for f in ["vocab.txt", "lm.json", "datastore.knnd", "datastore.knni", "datastore.pruned.knnd"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn configuration_problems_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    for args in [
        vec!["--config", "knnlm.conf", "--set", "bogus=1", "build-lm"],
        vec!["--config", "knnlm.conf", "--set", "knn.lambda=3", "build-lm"],
        vec!["--config", "missing.conf", "build-lm"],
        vec!["--config", "knnlm.conf", "build-datastore"],
        vec!["no-such-command"],
        vec!["--config", "knnlm.conf", "prune", "--method", "random", "--retain", "3"],
    ] {
        let out = knnlm(dir, &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn corrupt_artifacts_exit_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    ok(dir, &["build-lm"]);
    ok(dir, &["build-datastore"]);
    let bytes = std::fs::read(dir.join("datastore.knnd")).unwrap();
    std::fs::write(dir.join("short.knnd"), &bytes[..100]).unwrap();
    std::fs::write(dir.join("magic.knnd"), b"XXXXjunk").unwrap();
    for file in ["short.knnd", "magic.knnd"] {
        let out = knnlm(dir, &["--config", "knnlm.conf", "build-index", "--datastore", file]);
        assert_eq!(out.status.code(), Some(3), "{file}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stderr).contains("format error"));
    }
}
