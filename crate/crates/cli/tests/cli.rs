use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "corpus.preset=one-domain",
    "--set",
    "eval.heldout=30",
    "--set",
    "eval.dialogues=30",
    "--set",
    "action.epochs=2",
    "--set",
    "action.context_epochs=2",
    "--set",
    "vrnn.epochs=2",
    "--set",
    "policy.episodes=20",
];

fn actvrnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_actvrnn")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = actvrnn(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

fn run_chain(root: &Path) {
    let (c, a, r, pol, e) = (
        root.join("c"),
        root.join("a"),
        root.join("r"),
        root.join("p"),
        root.join("e"),
    );
    ok(&with_small(&[
        "gen-corpus",
        "--n",
        "60",
        "--seed",
        "3",
        "--split",
        "0.2,0.8,0",
        "--out",
        p(&c),
    ]));
    ok(&["train-actions", "--corpus", p(&c), "--out", p(&a)]);
    ok(&["train-reward", "--enriched", p(&a), "--out", p(&r)]);
    ok(&["train-policy", "--reward", p(&r), "--episodes", "20", "--out", p(&pol)]);
    ok(&["evaluate", "--policy", p(&pol), "--out", p(&e)]);
}

#[test]
fn stages_chain_and_record_config_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    run_chain(dir.path());
    for stage in ["c", "a", "r", "p", "e"] {
        let conf = fs::read_to_string(dir.path().join(stage).join("config.conf")).unwrap();
        assert!(conf.starts_with("# config_hash="), "{stage}");
        assert!(conf.contains("seed=3"), "{stage}");
        assert!(conf.contains("corpus.preset = one-domain"), "{stage}");
    }
    let log = fs::read_to_string(dir.path().join("p/episodes.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 21);
    let header: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(header["stage"], "train-policy");
    assert_eq!(header["seed"], 3);
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("e/metrics.json")).unwrap()).unwrap();
    let success = metrics["success_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&success));
}

#[test]
fn reruns_are_byte_identical() {
    let (x, y) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_chain(x.path());
    run_chain(y.path());
    for file in [
        "c/corpus.jsonl",
        "c/partial.jsonl",
        "a/enriched.json",
        "r/reward.json",
        "p/policy.json",
        "p/episodes.jsonl",
        "e/metrics.json",
    ] {
        assert_eq!(
            fs::read(x.path().join(file)).unwrap(),
            fs::read(y.path().join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn missing_upstream_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = actvrnn(&[
        "train-policy",
        "--reward",
        p(&dir.path().join("absent")),
        "--out",
        p(dir.path()),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("run `train-reward` first"), "{err}");

    let out = actvrnn(&[
        "train-actions",
        "--corpus",
        p(dir.path()),
        "--out",
        p(&dir.path().join("a")),
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `gen-corpus` first"));
}

#[test]
fn bad_arguments_fail() {
    let out = actvrnn(&["gen-corpus", "--bogus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert!(!actvrnn(&["frobnicate"]).status.success());

    let dir = tempfile::tempdir().unwrap();
    let out = actvrnn(&["gen-corpus", "--set", "action.colour=red", "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("action.colour"));
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_actvrnn"))
        .args(with_small(&["gen-corpus", "--n", "20"]))
        .env("ACTVRNN_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("gen-corpus/corpus.jsonl").exists());
}

#[test]
fn gradcheck_reports_every_objective() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["gradcheck", "--out", p(dir.path())]);
    let reports: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 7);
    assert!(reports.iter().all(|r| r["pass"] == true));
    assert!(dir.path().join("gradcheck.json").exists());
}

#[test]
fn reproduce_preset_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t2");
    let args = with_small(&[
        "reproduce",
        "--preset",
        "table2-small",
        "--seed",
        "7",
        "--set",
        "corpus.size=40",
        "--set",
        "grid.rewards=handcrafted,act-vrnn",
        "--out",
        p(&out),
    ]);
    ok(&args);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let first = summary.lines().next().unwrap();
    assert!(first.starts_with("# config_hash="));
    assert_eq!(summary.lines().count(), 4, "{summary}");
    assert!(out.join("cells/f0.1-p0.9-u0_act-vrnn_full/seed-7/done.json").exists());

    let before = fs::read(out.join("grid.csv")).unwrap();
    ok(&args);
    assert_eq!(before, fs::read(out.join("grid.csv")).unwrap());
}
