use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn cde(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cde"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = cde(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.trim()).expect("one JSON summary line")
}

/// Exit code and the parsed single-line error.
fn fails(dir: &Path, args: &[&str]) -> (i32, Value) {
    let out = cde(dir, args);
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim().lines().count(), 1, "{stderr}");
    (out.status.code().unwrap(), serde_json::from_str(stderr.trim()).unwrap())
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn without_timestamp(path: &Path) -> Value {
    let mut v = read_json(path);
    v.as_object_mut().unwrap().remove("created_unix");
    v
}

const SMALL: &[&str] = &["--set", "synth.pairs_per_domain=48"];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn cluster_then_inspect_covers_everything_but_drops() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &with(&["synth-data", "--out-dir", "o"], SMALL));
    ok(d, &["embed", "--pairs", "o/train.jsonl", "--out-dir", "o"]);
    ok(d, &["cluster", "--pairs", "o/train.jsonl", "--phi", "o/phi.cde", "--psi", "o/psi.cde", "--out-dir", "o", "--set", "cluster.k=2"]);
    let pack = ok(d, &["pack", "--pairs", "o/train.jsonl", "--clusters", "o/clusters.jsonl", "--out-dir", "o", "--set", "pack.batch_size=8"]);
    let report = ok(
        d,
        &["inspect-plan", "--pairs", "o/train.jsonl", "--plan", "o/plan.jsonl", "--drops", "o/drops.json", "--out-dir", "o"],
    );
    let n = report["pairs"].as_u64().unwrap();
    assert_eq!(report["covered"].as_u64().unwrap(), n - report["dropped"].as_u64().unwrap());
    assert_eq!(report["covered"], pack["covered"]);
    assert_eq!(report["partition_ok"], true);
    assert_eq!(report["domain_pure_batches"], report["batches"]);
    let stats = ok(
        d,
        &["filter-stats", "--pairs", "o/train.jsonl", "--plan", "o/plan.jsonl", "--phi", "o/phi.cde", "--psi", "o/psi.cde", "--out-dir", "o"],
    );
    assert_eq!(stats["batches"], report["batches"]);
}

#[test]
fn identical_runs_write_identical_manifests() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        ok(d, &with(&["synth-data", "--seed", "5", "--out-dir", "o"], SMALL));
        ok(d, &["embed", "--pairs", "o/train.jsonl", "--seed", "5", "--out-dir", "o"]);
    }
    for m in ["o/manifest-synth-data.json", "o/manifest-embed.json"] {
        assert_eq!(without_timestamp(&a.path().join(m)), without_timestamp(&b.path().join(m)), "{m}");
    }
    let (x, y) = (a.path().join("o/pairs.jsonl"), b.path().join("o/pairs.jsonl"));
    assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    let m = read_json(&a.path().join("o/manifest-synth-data.json"));
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config"]["synth.pairs_per_domain"], "48");
    assert_eq!(m["config"]["train.temperature"], "0.02");
}

#[test]
fn input_hash_tracks_file_bytes() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &with(&["synth-data", "--out-dir", "o"], SMALL));
    let hash = |d: &Path| read_json(&d.join("e/manifest-embed.json"))["inputs"]["o/train.jsonl"].clone();
    ok(d, &["embed", "--pairs", "o/train.jsonl", "--out-dir", "e"]);
    let first = hash(d);
    assert_eq!(first.as_str().unwrap().len(), 64);
    ok(d, &["embed", "--pairs", "o/train.jsonl", "--out-dir", "e"]);
    assert_eq!(hash(d), first);
    // Rewriting identical bytes keeps the hash; appending a byte changes it.
    let path = d.join("o/train.jsonl");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes).unwrap();
    ok(d, &["embed", "--pairs", "o/train.jsonl", "--out-dir", "e"]);
    assert_eq!(hash(d), first);
    std::fs::write(&path, [bytes.as_slice(), b"\n"].concat()).unwrap();
    ok(d, &["embed", "--pairs", "o/train.jsonl", "--out-dir", "e"]);
    assert_ne!(hash(d), first);
}

#[test]
fn replay_reproduces_outputs_and_refuses_changed_inputs() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &with(&["synth-data", "--out-dir", "o", "--seed", "3"], SMALL));
    ok(d, &["embed", "--pairs", "o/train.jsonl", "--out-dir", "o"]);
    ok(d, &["cluster", "--pairs", "o/train.jsonl", "--phi", "o/phi.cde", "--psi", "o/psi.cde", "--out-dir", "o", "--seed", "3"]);
    ok(d, &["replay", "o/manifest-cluster.json", "--out-dir", "r"]);
    assert_eq!(std::fs::read(d.join("o/clusters.jsonl")).unwrap(), std::fs::read(d.join("r/clusters.jsonl")).unwrap());
    let (a, b) = (read_json(&d.join("o/manifest-cluster.json")), read_json(&d.join("r/manifest-cluster.json")));
    assert_eq!(a["config"], b["config"]);
    assert_eq!(a["inputs"], b["inputs"]);

    let phi = d.join("o/phi.cde");
    let mut bytes = std::fs::read(&phi).unwrap();
    bytes.push(0);
    std::fs::write(&phi, bytes).unwrap();
    let (code, err) = fails(d, &["replay", "o/manifest-cluster.json", "--out-dir", "r2"]);
    assert_eq!(code, 1);
    assert!(err["message"].as_str().unwrap().contains("phi.cde"), "{err}");
}

#[test]
fn exit_codes_and_error_lines() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let (code, err) = fails(d, &["embed", "--pairs", "missing.jsonl"]);
    assert_eq!((code, err["error"].as_str().unwrap()), (2, "missing_input"));
    let (code, _) = fails(d, &["synth-data", "--config", "missing.conf"]);
    assert_eq!(code, 2);

    for bad in [
        vec!["synth-data", "--set", "cluster.kk=3"],
        vec!["synth-data", "--set", "cluster.k=three"],
        vec!["synth-data", "--set", "train.temperature=0"],
        vec!["synth-data", "--set", "nonsense"],
        vec!["no-such-command"],
    ] {
        let (code, err) = fails(d, &bad);
        assert_eq!((code, err["error"].as_str().unwrap()), (3, "config"), "{bad:?}");
    }
    std::fs::write(d.join("bad.conf"), "cluster.k = 4\ntrain.bogus = 1\n").unwrap();
    assert_eq!(fails(d, &["synth-data", "--config", "bad.conf"]).0, 3);

    ok(d, &with(&["synth-data", "--out-dir", "o"], SMALL));
    let (code, err) = fails(
        d,
        &["train", "biencoder", "--pairs", "o/train.jsonl", "--out-dir", "nan", "--set", "train.lr_peak=1e300", "--set", "model.dim=8"],
    );
    assert_eq!((code, err["error"].as_str().unwrap()), (4, "numerical"), "{err}");
}

#[test]
fn config_file_then_flags() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    std::fs::write(d.join("run.conf"), "# small corpus\nsynth.pairs_per_domain = 20\nseed = 4\neval.test_fraction = 0.25\n").unwrap();
    let s = ok(d, &["synth-data", "--config", "run.conf", "--set", "synth.n_domains=2", "--seed", "9", "--out-dir", "o"]);
    assert_eq!(s["pairs"], 40);
    assert_eq!(s["test"], 10);
    let m = read_json(&d.join("o/manifest-synth-data.json"));
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["synth.n_domains"], "2");
}

#[test]
fn default_pipeline_fits_the_time_budget() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let start = Instant::now();
    ok(d, &["synth-data", "--out-dir", "o"]);
    ok(d, &["embed", "--pairs", "o/train.jsonl", "--out-dir", "o"]);
    ok(d, &["cluster", "--pairs", "o/train.jsonl", "--phi", "o/phi.cde", "--psi", "o/psi.cde", "--out-dir", "o"]);
    ok(d, &["pack", "--pairs", "o/train.jsonl", "--clusters", "o/clusters.jsonl", "--out-dir", "o"]);
    ok(d, &["filter-stats", "--pairs", "o/train.jsonl", "--plan", "o/plan.jsonl", "--phi", "o/phi.cde", "--psi", "o/psi.cde", "--out-dir", "o"]);
    for kind in ["biencoder", "cde"] {
        let dir = format!("o/{kind}");
        let tr = ok(d, &["train", kind, "--pairs", "o/train.jsonl", "--clusters", "o/clusters.jsonl", "--out-dir", &dir]);
        assert!(tr["steps"].as_u64().unwrap() > 0);
        let model = format!("{dir}/model.bin");
        let ev = ok(d, &["eval", "--pairs", "o/test.jsonl", "--model", &model, "--out-dir", &dir]);
        let ndcg = ev["mean_ndcg10"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&ndcg));
    }
    let m = "o/cde/model.bin";
    ok(d, &["sweep-context", "--pairs", "o/test.jsonl", "--model", m, "--out-dir", "o/cde"]);
    ok(d, &["domain-matrix", "--pairs", "o/test.jsonl", "--model", m, "--out-dir", "o/cde"]);
    ok(d, &["analyze-idf", "--train-pairs", "o/train.jsonl", "--test-pairs", "o/test.jsonl", "--model", m, "--out-dir", "o/cde"]);
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(600), "default pipeline took {elapsed:?}");

    let sweep = std::fs::read_to_string(d.join("o/cde/sweep.csv")).unwrap();
    assert!(sweep.starts_with("context_size,mean_ndcg10"));
    let log = std::fs::read_to_string(d.join("o/cde/train_log.csv")).unwrap();
    assert!(log.starts_with("step,lr,loss,masked_cells,batch_hardness"));
    assert!(d.join("o/cde/checkpoints/epoch1.bin").exists());
}

#[test]
fn contextual_commands_reject_a_biencoder() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &with(&["synth-data", "--out-dir", "o"], SMALL));
    ok(d, &["train", "biencoder", "--pairs", "o/train.jsonl", "--out-dir", "b", "--set", "model.dim=8"]);
    let (code, _) = fails(d, &["sweep-context", "--pairs", "o/test.jsonl", "--model", "b/model.bin"]);
    assert_eq!(code, 3);
    let ev = ok(d, &["eval", "--pairs", "o/test.jsonl", "--model", "b/model.bin", "--out-dir", "b"]);
    assert_eq!(ev["strategy"], "null-null");
}
