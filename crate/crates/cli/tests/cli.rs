use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn namseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_namseg")).args(args).output().expect("spawn namseg")
}

fn ok(args: &[&str]) -> Output {
    let out = namseg(args);
    assert!(
        out.status.success(),
        "namseg {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> BTreeMap<String, String> {
    fs::read_to_string(dir.join("manifest.txt"))
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn synth(dir: &Path, seed: &str) {
    ok(&["synth", "--seed", seed, "--pos", "30", "--neg", "30", "--size", "32", "--radius-max", "6", "--out", s(dir)]);
}

#[test]
fn synth_is_byte_identical_and_echoes_ratio() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    synth(&a, "7");
    synth(&b, "7");
    assert_eq!(tree(&a), tree(&b));
    let m = manifest(&a);
    assert_eq!(m["split_ratio"], "4:1:1");
    assert_eq!((m["train"].as_str(), m["val"].as_str(), m["test"].as_str()), ("40", "10", "10"));
    assert_eq!(fs::read_to_string(a.join("labels.csv")).unwrap().lines().count(), 61);
}

#[test]
fn usage_errors_exit_two() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(namseg(&["synth", "--out", s(t.path())]).status.code(), Some(2));
    assert_eq!(namseg(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(namseg(&["train", "--seed", "1", "--out", "x", "--data", "y", "--gap-taps", "4"]).status.code(), Some(2));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("synth.cfg");
    fs::write(&cfg, "# small run\nseed=3\npos=9\nneg=9\nsize=32\nradius_max=5\n").unwrap();
    let out = t.path().join("d");
    ok(&["synth", "--config", s(&cfg), "--neg", "6", "--out", s(&out)]);
    let m = manifest(&out);
    assert_eq!((m["seed"].as_str(), m["pos"].as_str(), m["neg"].as_str()), ("3", "9", "6"));
}

#[test]
fn runtime_failures_exit_one() {
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("nope");
    let out = namseg(&["train", "--seed", "1", "--data", s(&missing), "--out", s(&t.path().join("m"))]);
    assert_eq!(out.status.code(), Some(1));
    let data = t.path().join("d");
    synth(&data, "1");
    let out = namseg(&["segment", "--data", s(&data), "--model", s(&missing), "--out", s(&t.path().join("p"))]);
    assert_eq!(out.status.code(), Some(1));
}

fn train_small(data: &Path, out: &Path, gaps: &str, extra: &[&str]) {
    let mut args = vec![
        "train", "--seed", "5", "--data", s(data), "--out", s(out), "--gap-taps", gaps, "--channels", "2,4,4",
        "--head-channels", "4", "--epochs", "2",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn train_echoes_learning_rates_and_is_repeatable() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    synth(&data, "2");
    for (gaps, lr) in [("1", "1e-2"), ("2", "2e-3"), ("3", "1e-3")] {
        let out = t.path().join(format!("m{gaps}"));
        train_small(&data, &out, gaps, &[]);
        let m = manifest(&out);
        assert_eq!(m["initial_lr"], lr);
        assert_eq!(m["lr_decay_per_epoch"], "0.99");
        assert_eq!(m["batch_size"], "30");
        assert!(out.join("model.nsw").exists());
    }
    let again = t.path().join("again");
    train_small(&data, &again, "1", &[]);
    assert_eq!(fs::read(again.join("train_log.csv")).unwrap(), fs::read(t.path().join("m1/train_log.csv")).unwrap());
    assert_eq!(fs::read(again.join("model.nsw")).unwrap(), fs::read(t.path().join("m1/model.nsw")).unwrap());
}

fn decisions(dir: &Path) -> Vec<BTreeMap<String, String>> {
    fs::read_to_string(dir.join("decisions.log"))
        .unwrap()
        .lines()
        .map(|l| {
            l.split_whitespace()
                .filter_map(|kv| kv.split_once('='))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect()
        })
        .collect()
}

#[test]
fn segment_and_eval_end_to_end() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    synth(&data, "4");
    let model = t.path().join("m");
    train_small(&data, &model, "1", &["--epochs", "6"]);
    let weights = model.join("model.nsw");

    let full = t.path().join("full");
    let coarse = t.path().join("coarse");
    ok(&["segment", "--data", s(&data), "--model", s(&weights), "--out", s(&full), "--dump-nam", "--dump-phases"]);
    ok(&["segment", "--data", s(&data), "--model", s(&weights), "--out", s(&coarse), "--coarse-only"]);

    let lines = decisions(&full);
    assert_eq!(lines.len(), 10, "one decision per test slice");
    for d in &lines {
        let pred = full.join("pred").join(format!("{}.masks", d["id"]));
        match d["outcome"].as_str() {
            "no_nodule" | "failed" => assert!(!pred.exists()),
            "segmented" => {
                assert!(pred.exists());
                assert!(full.join("nam").join(format!("{}.txt", d["id"])).exists());
                let single = d["candidates"] == "1";
                let other = coarse.join("pred").join(format!("{}.masks", d["id"]));
                if single {
                    assert_eq!(fs::read(&pred).unwrap(), fs::read(&other).unwrap());
                }
            }
            other => panic!("unexpected outcome {other}"),
        }
    }
    let coarse_lines = decisions(&coarse);
    for (a, b) in lines.iter().zip(&coarse_lines) {
        assert_eq!((&a["id"], &a["outcome"]), (&b["id"], &b["outcome"]));
    }

    let multi = t.path().join("m2");
    train_small(&data, &multi, "2", &["--epochs", "6"]);
    let refined = t.path().join("refined");
    ok(&[
        "segment", "--data", s(&data), "--model", s(&weights), "--multi-model", s(&multi.join("model.nsw")), "--out",
        s(&refined),
    ]);
    let refined_lines = decisions(&refined);
    assert_eq!(refined_lines.len(), 10);
    for (a, b) in lines.iter().zip(&refined_lines) {
        assert_eq!(a["label"], b["label"]);
        if b["outcome"] == "segmented" {
            assert!(matches!(b["scope"].as_str(), "C1" | "Cmulti"));
        }
    }

    let two = t.path().join("two");
    ok(&["segment", "--data", s(&data), "--model", s(&weights), "--out", s(&two), "--two-nodule"]);
    assert_eq!(decisions(&two).len(), 10);

    let ev = t.path().join("ev");
    ok(&["eval", "--data", s(&data), "--pred", s(&full), "--out", s(&ev), "--name", "full"]);
    let metrics = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("config,n_slices,"));
    assert!(metrics.lines().nth(1).unwrap().starts_with("full,10,5,5,"));
    assert!(fs::read_to_string(ev.join("size_bins.csv")).unwrap().starts_with("diam_lo,diam_hi,"));
    assert_eq!(manifest(&ev)["command"], "eval");
}

fn metrics_row(dir: &Path) -> BTreeMap<String, String> {
    let text = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    head.iter().zip(row).map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[test]
fn eval_oracle_and_empty_predictions() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    synth(&data, "9");

    // truth masks as predictions
    let oracle = t.path().join("oracle");
    fs::create_dir_all(&oracle).unwrap();
    copy_test_truth(&data, &oracle.join("pred"));
    let ev = t.path().join("ev1");
    ok(&["eval", "--data", s(&data), "--pred", s(&oracle), "--out", s(&ev)]);
    let m = metrics_row(&ev);
    assert_eq!((m["tpr"].as_str(), m["dice_mean"].as_str(), m["fpr"].as_str()), ("1.000000", "1.000000", "0.000000"));

    let empty = t.path().join("empty");
    fs::create_dir_all(empty.join("pred")).unwrap();
    let ev = t.path().join("ev2");
    ok(&["eval", "--data", s(&data), "--pred", s(&empty), "--out", s(&ev)]);
    assert_eq!(metrics_row(&ev)["tpr"], "0.000000");

    // a prediction for a slice outside the test split
    let stray = t.path().join("stray");
    fs::create_dir_all(stray.join("pred")).unwrap();
    fs::write(stray.join("pred/999999.masks"), "masks 32 32 1\n0,0,2\n").unwrap();
    let out = namseg(&["eval", "--data", s(&data), "--pred", s(&stray), "--out", s(&t.path().join("ev3"))]);
    assert_eq!(out.status.code(), Some(1));
}

fn copy_test_truth(data: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    let splits = fs::read_to_string(data.join("splits.csv")).unwrap();
    for (id, split) in splits.lines().skip(1).filter_map(|l| l.split_once(',')) {
        let name = format!("{:06}.masks", id.parse::<usize>().unwrap());
        let src = data.join("truth").join(&name);
        if split == "test" && src.exists() {
            fs::copy(&src, to.join(&name)).unwrap();
        }
    }
}
