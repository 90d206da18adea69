use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn invrise(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_invrise"))
        .args(args)
        .current_dir(dir)
        .env_remove("INVRISE_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = r#"{
  "dataset": {"ok": 14, "no_seam": 6, "nok": 10, "side": 16, "channels": 1, "seed": 2},
  "splits": [0.3, 0.15, 0.2, 0.35],
  "backgrounds": 2,
  "train": {"learning_rate": 0.05, "max_epochs": 2, "patience": 2},
  "architecture": {"input_side": 16},
  "masks": {"k": 16, "l": 4},
  "interactions_per_iteration": 2,
  "iteration_budget": 3
}"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    fs::write(&config, TINY).unwrap();
    (dir, config)
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_deterministic() {
    let (dir, config) = setup();
    let c = config.to_str().unwrap();
    ok(invrise(&["--config", c, "gen-data", "--seed", "7", "--out", "a"], dir.path()));
    ok(invrise(&["--config", c, "gen-data", "--seed", "7", "--out", "b"], dir.path()));
    let a = tree(&dir.path().join("a"));
    assert!(a.len() > 30);
    assert!(a == tree(&dir.path().join("b")));
    ok(invrise(&["--config", c, "gen-data", "--seed", "8", "--out", "c"], dir.path()));
    assert!(a != tree(&dir.path().join("c")));
}

#[test]
fn train_explain_and_evaluate() {
    let (dir, config) = setup();
    let c = config.to_str().unwrap();
    ok(invrise(&["--config", c, "gen-data", "--out", "data"], dir.path()));
    let trained = ok(invrise(&["--config", c, "train", "--data", "data", "--out", "model.ckpt"], dir.path()));
    let summary: serde_json::Value = serde_json::from_str(trained.trim()).unwrap();
    assert_eq!(summary["epochs"], 2);
    assert!(dir.path().join("model.ckpt").is_file());

    let manifest = fs::read_to_string(dir.path().join("data/manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    let id = manifest["instances"][0]["id"].as_str().unwrap().to_string();
    let explained = ok(invrise(
        &["--config", c, "explain", &id, "--data", "data", "--checkpoint", "model.ckpt", "--out", "maps", "--method", "rise"],
        dir.path(),
    ));
    let e: serde_json::Value = serde_json::from_str(explained.trim()).unwrap();
    assert_eq!(e["id"], id.as_str());
    assert!(dir.path().join(format!("maps/{id}-rise.sal")).is_file());
    assert!(dir.path().join(format!("maps/{id}-rise-overlay.png")).is_file());

    ok(invrise(
        &["--config", c, "eval-explanations", "--data", "data", "--checkpoint", "model.ckpt", "--split", "all", "--out", "t2.csv"],
        dir.path(),
    ));
    let csv = fs::read_to_string(dir.path().join("t2.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,model,dice,jaccard,hit_acc");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("InvRISE,conv-scorer,"));
    assert!(lines[2].starts_with("RISE,conv-scorer,"));
}

#[test]
fn compare_shape_determinism_and_replay() {
    let (dir, config) = setup();
    let c = config.to_str().unwrap();
    ok(invrise(&["--config", c, "compare", "--seeds", "1,2", "--interactions", "1", "--out", "r1"], dir.path()));
    ok(invrise(&["--config", c, "compare", "--seeds", "1,2", "--interactions", "1", "--out", "r2"], dir.path()));
    let csv = fs::read_to_string(dir.path().join("r1/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 2 * (3 + 1));
    assert_eq!(csv.lines().next().unwrap(), "strategy,seed,iteration,acc,f1,mcc,|T|,|U|");
    let strip_runs = |t: Vec<(String, Vec<u8>)>| t.into_iter().filter(|(n, _)| n != "runs.json").collect::<Vec<_>>();
    assert!(strip_runs(tree(&dir.path().join("r1"))) == strip_runs(tree(&dir.path().join("r2"))));

    let replayed = ok(invrise(&["replay", "r1"], dir.path()));
    assert_eq!(replayed.lines().filter(|l| l.starts_with("verified ")).count(), 10);

    let log = "r1/events/near-caipi-seed1.json";
    let mismatch = Command::new(env!("CARGO_BIN_EXE_invrise"))
        .args(["replay", log])
        .current_dir(dir.path())
        .env("INVRISE_SEED", "9")
        .output()
        .unwrap();
    assert!(!mismatch.status.success());
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("seed mismatch"));

    let text = fs::read_to_string(dir.path().join(log)).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["metrics"][1]["accuracy"] = serde_json::json!(0.123);
    fs::write(dir.path().join("bad.json"), value.to_string()).unwrap();
    assert!(!invrise(&["replay", "bad.json"], dir.path()).status.success());
}

#[test]
fn env_seed_overrides_config() {
    let (dir, config) = setup();
    let c = config.to_str().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_invrise"))
        .args(["--config", c, "compare", "--strategies", "random-add", "--budget", "0", "--out", "r"])
        .current_dir(dir.path())
        .env("INVRISE_SEED", "42")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    ok(out);
    assert!(dir.path().join("r/events/random-add-seed42.json").is_file());
}

#[test]
fn bad_invocations_fail_with_diagnostics() {
    let (dir, _) = setup();
    let unknown = invrise(&["compare", "--no-such-flag"], dir.path());
    assert!(!unknown.status.success());
    assert!(!unknown.stderr.is_empty());

    let missing = invrise(&["--config", "nope.json", "compare"], dir.path());
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.json"));

    fs::write(dir.path().join("broken.json"), "{ not json").unwrap();
    assert!(!invrise(&["--config", "broken.json", "compare"], dir.path()).status.success());
    assert!(!invrise(&["replay", "missing-dir"], dir.path()).status.success());
}
