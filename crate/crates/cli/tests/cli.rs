use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn powerprof(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_powerprof"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn powerprof")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = powerprof(dir, args);
    assert!(
        out.status.success(),
        "powerprof {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str], code: i32) -> String {
    let out = powerprof(dir, args);
    assert_eq!(out.status.code(), Some(code), "powerprof {args:?}");
    String::from_utf8(out.stderr).unwrap()
}

fn manifest_digests(path: &Path) -> Vec<(String, String)> {
    let v: serde_json::Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    v["payload"]["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| (a["path"].as_str().unwrap().to_string(), a["sha256"].as_str().unwrap().to_string()))
        .collect()
}

#[test]
fn run_writes_nine_artifacts_and_reruns_identically() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["synth", "--per-class", "100", "--seed", "4", "--telemetry", "--out", "data"]);
    let args = [
        "run",
        "--telemetry",
        "data/telemetry.csv",
        "--jobs",
        "data/jobs.jsonl",
        "--epochs",
        "30",
        "--seed",
        "2",
    ];
    let mut a = args.to_vec();
    a.extend(["--out", "a"]);
    let stdout = ok(d, &a);
    assert!(stdout.contains("800 profiles"));
    let mut b = args.to_vec();
    b.extend(["--out", "b"]);
    ok(d, &b);

    let da = manifest_digests(&d.join("a/manifest.json"));
    assert_eq!(da.len(), 9);
    for (path, _) in &da {
        assert!(d.join("a").join(path).exists(), "{path}");
    }
    assert_eq!(da, manifest_digests(&d.join("b/manifest.json")));
}

#[test]
fn stepwise_commands_and_review_loop() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["synth", "--per-class", "100", "--seed", "3", "--telemetry", "--out", "data"]);
    ok(d, &["ingest", "--telemetry", "data/telemetry.csv", "--jobs", "data/jobs.jsonl", "--out", "p.jsonl"]);
    ok(d, &["features", "--profiles", "p.jsonl", "--out", "X.csv"]);
    let header = fs::read_to_string(d.join("X.csv")).unwrap();
    let header = header.lines().next().unwrap();
    assert!(header.starts_with("job_id,f000,f001"));
    assert!(header.ends_with(",f185"));

    ok(d, &["train-gan", "--features", "X.csv", "--epochs", "40", "--seed", "1", "--out", "gan.json"]);
    ok(d, &["embed", "--model", "gan.json", "--features", "X.csv", "--out", "Z.csv"]);
    let z = fs::read_to_string(d.join("Z.csv")).unwrap();
    assert!(z.starts_with("job_id,z0,z1,z2,z3,z4,z5,z6,z7,z8,z9\n"));
    assert_eq!(z.lines().count(), 801);

    ok(d, &["cluster", "--latents", "Z.csv", "--eps", "0.8", "--min-pts", "10", "--out", "clusters.json"]);
    ok(
        d,
        &[
            "label", "--clusters", "clusters.json", "--profiles", "p.jsonl", "--features", "X.csv", "--latents",
            "Z.csv", "--min-class-size", "30", "--out", "catalog.json",
        ],
    );
    ok(
        d,
        &["train-classifier", "--latents", "Z.csv", "--labels", "catalog.json", "--sweep-out", "sweep.csv", "--out", "clf.json"],
    );
    assert!(fs::read_to_string(d.join("sweep.csv")).unwrap().starts_with("tau,normalized_tau,"));

    ok(d, &["classify", "--model", "clf.json", "--latents", "Z.csv", "--threshold", "auto", "--out", "pred.jsonl"]);
    let preds = fs::read_to_string(d.join("pred.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 800);
    for line in preds.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["outcome"].is_u64() || v["outcome"] == "UNKNOWN");
        assert!(v["min_distance"].is_f64());
        assert!(v["distances"].is_array());
    }
    ok(d, &["classify", "--model", "clf.json", "--latents", "Z.csv", "--threshold", "0", "--out", "zero.jsonl"]);
    let zero = fs::read_to_string(d.join("zero.jsonl")).unwrap();
    assert!(zero.lines().all(|l| l.contains("\"UNKNOWN\"")));

    let metrics = ok(d, &["evaluate", "--model", "clf.json", "--latents", "Z.csv", "--labels", "catalog.json"]);
    let m: serde_json::Value = serde_json::from_str(&metrics).unwrap();
    assert!(m["closed_acc"].as_f64().unwrap() > 0.9);

    ok(d, &["temporal-eval", "--latents", "Z.csv", "--labels", "data/labels.csv", "--out", "temporal.csv"]);
    let table = fs::read_to_string(d.join("temporal.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 5 * 3);

    // a new pattern arrives
    fs::write(
        d.join("novel.json"),
        r#"[{"family":"ramp_down","base_power":1000,"swing_amplitude":450,"period":4,"noise_std":8,"intensity":"low"}]"#,
    )
    .unwrap();
    ok(d, &["synth", "--spec", "novel.json", "--per-class", "120", "--prefix", "new", "--seed", "5", "--out", "new"]);
    ok(d, &["features", "--profiles", "new/profiles.jsonl", "--out", "Xn.csv"]);
    ok(d, &["embed", "--model", "gan.json", "--features", "Xn.csv", "--out", "Zn.csv"]);
    let pooled = ok(
        d,
        &[
            "pool", "--model", "clf.json", "--latents", "Zn.csv", "--features", "Xn.csv", "--profiles",
            "new/profiles.jsonl", "--pool", "pool.json",
        ],
    );
    assert!(pooled.contains("pool now holds"));
    let rc = ok(d, &["recluster", "--pool", "pool.json", "--proposals", "book.json", "--out", "review"]);
    assert!(rc.contains("1 new proposal(s)"), "{rc}");
    assert!(d.join("review/proposal-0-medoid.csv").exists());
    assert!(d.join("review/proposal-0-samples.csv").exists());

    let list = ok(d, &["review", "list", "--proposals", "book.json"]);
    assert!(list.contains("pending"));
    let review = [
        "review", "approve", "0", "--proposals", "book.json", "--catalog", "catalog.json", "--pool", "pool.json",
        "--operator", "ops",
    ];
    let approved = ok(d, &review);
    assert!(approved.contains("approved as class"));
    let err = fails(d, &review, 3);
    assert!(err.contains("already decided"));
    assert!(!d.join("catalog.json.lock").exists());

    let retrain = [
        "retrain", "--catalog", "catalog.json", "--proposals", "book.json", "--model", "clf.json", "--latents", "Z.csv",
        "--pool", "pool.json", "--archive", "archive.json", "--out", "clf2.json",
    ];
    let out = ok(d, &retrain);
    assert!(out.contains("v1 -> v2"), "{out}");
    let archive: serde_json::Value = serde_json::from_slice(&fs::read(d.join("archive.json")).unwrap()).unwrap();
    assert_eq!(archive["payload"]["entries"].as_array().unwrap().len(), 1);
    let again = ok(d, &retrain);
    assert!(again.contains("nothing approved"));
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();

    let err = fails(d, &["run", "--telemetry", "missing.csv", "--jobs", "missing.jsonl", "--out", "r"], 3);
    assert!(err.contains("stage=ingest"), "{err}");
    fails(d, &["run", "--out", "r"], 2);
    fails(d, &["features", "--profiles", "missing.jsonl", "--out", "x.csv"], 3);
    fails(d, &["no-such-command"], 2);

    fs::write(d.join("bad.json"), "{ not json").unwrap();
    let err = fails(d, &["run", "--config", "bad.json", "--out", "r"], 2);
    assert!(err.contains("invalid config"));
    fs::write(d.join("cfg.json"), r#"{"gan": {"clip": -1.0}, "inputs": {"profiles": "p.jsonl"}}"#).unwrap();
    fails(d, &["run", "--config", "cfg.json", "--out", "r"], 2);

    ok(d, &["synth", "--per-class", "1", "--min-len", "8", "--max-len", "8", "--out", "s"]);
    fails(d, &["synth", "--per-class", "1", "--min-len", "4", "--max-len", "8", "--out", "s2"], 2);
    fails(d, &["features", "--profiles", "s/profiles.jsonl"], 2);
}

#[test]
fn artifact_errors() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["synth", "--per-class", "20", "--min-len", "20", "--max-len", "40", "--out", "s"]);
    ok(d, &["features", "--profiles", "s/profiles.jsonl", "--out", "X.csv"]);
    ok(d, &["train-gan", "--features", "X.csv", "--epochs", "1", "--out", "gan.json"]);

    let text = fs::read_to_string(d.join("gan.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["version"] = 99.into();
    fs::write(d.join("v99.json"), serde_json::to_string(&v).unwrap()).unwrap();
    let err = fails(d, &["embed", "--model", "v99.json", "--features", "X.csv", "--out", "Z.csv"], 2);
    assert!(err.contains("unsupported version 99"), "{err}");

    fs::write(d.join("cut.json"), &text[..text.len() / 2]).unwrap();
    let err = fails(d, &["embed", "--model", "cut.json", "--features", "X.csv", "--out", "Z.csv"], 3);
    assert!(err.contains("corrupt artifact"), "{err}");

    let err = fails(d, &["classify", "--model", "gan.json", "--latents", "X.csv", "--out", "p.jsonl"], 3);
    assert!(err.contains("kind"), "{err}");

    ok(d, &["embed", "--model", "gan.json", "--features", "X.csv", "--out", "Z.csv"]);
    let z = fs::read_to_string(d.join("Z.csv")).unwrap();
    fs::remove_file(d.join("Z.csv")).unwrap();
    ok(d, &["embed", "--model", "gan.json", "--features", "X.csv", "--out", "Z.csv"]);
    assert_eq!(z, fs::read_to_string(d.join("Z.csv")).unwrap());
}
