use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn selfsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selfsynth"))
        .args(args)
        .args(["--log", "warn"])
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Toy data with a shortened schedule.
fn quick_setup(dir: &Path) -> PathBuf {
    ok(&selfsynth(&["toy-data", "--out", s(dir)]));
    let cfg = std::fs::read_to_string(dir.join("pipeline.toml")).unwrap();
    let cfg: String = cfg
        .lines()
        .map(|l| {
            if l.starts_with("max_steps") {
                "max_steps = 4".to_string()
            } else if l.starts_with("validate_every") {
                "validate_every = 2".to_string()
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    let path = dir.join("quick.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

fn lineage(run: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(run.join("lineage.json")).unwrap()).unwrap()
}

#[test]
fn stop_after_phase_one_then_verify_and_tamper() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_setup(dir.path());
    let runs = dir.path().join("out");
    let stdout = ok(&selfsynth(&["pipeline", "-c", s(&cfg), "--out", s(&runs), "--stop-after", "1"]));
    let run = PathBuf::from(stdout.lines().last().unwrap());
    assert_eq!(run, runs.join("run-001"));
    for f in ["config.toml", "tokenizer.bpe", "init.ssckpt", "lineage.json", "phase1/record.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(!run.join("phase2").exists());
    let lin = lineage(&run);
    assert_eq!(lin["phases"].as_array().unwrap().len(), 1);
    assert!(ok(&selfsynth(&["verify-lineage", s(&run)])).contains("lineage ok"));

    // same seed, same digests
    let stdout = ok(&selfsynth(&["pipeline", "-c", s(&cfg), "--out", s(&runs), "--stop-after", "1"]));
    let again = PathBuf::from(stdout.lines().last().unwrap());
    assert_eq!(again, runs.join("run-002"));
    let lin2 = lineage(&again);
    assert_eq!(lin["init_digest"], lin2["init_digest"]);
    assert_eq!(lin["phases"][0]["best_digest"], lin2["phases"][0]["best_digest"]);
    assert_eq!(lin["tokenizer_sha256"], lin2["tokenizer_sha256"]);

    let mut bad = lin.clone();
    bad["phases"][0]["start_digest"] = serde_json::json!("0".repeat(64));
    std::fs::write(run.join("lineage.json"), serde_json::to_string(&bad).unwrap()).unwrap();
    let out = selfsynth(&["verify-lineage", s(&run)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("phase 1"));

    let ck = run.join(lin["phases"][0]["best_checkpoint"].as_str().unwrap());
    std::fs::write(run.join("lineage.json"), serde_json::to_string(&lin).unwrap()).unwrap();
    let mut bytes = std::fs::read(&ck).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x40;
    std::fs::write(&ck, bytes).unwrap();
    assert!(!selfsynth(&["verify-lineage", s(&run)]).status.success());
}

#[test]
fn tokenizer_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_setup(dir.path());
    let a = dir.path().join("a.bpe");
    let b = dir.path().join("b.bpe");
    let msg = ok(&selfsynth(&["tokenize-train", "-c", s(&cfg), "--out", s(&a)]));
    assert!(msg.starts_with("512 entries, 252 merges"), "{msg}");
    ok(&selfsynth(&["tokenize-train", "-c", s(&cfg), "--out", s(&b)]));
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn full_size_preset_needs_consent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_setup(dir.path());
    let out = selfsynth(&["pipeline", "-c", s(&cfg), "--preset", "paper", "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--i-have-the-compute"));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let out = selfsynth(&["tokenize-train", "-c", s(&missing), "--out", s(&dir.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "preset = \"desk\"\nseed = \"seven\"\n").unwrap();
    assert!(!selfsynth(&["tokenize-train", "-c", s(&bad), "--out", s(&dir.path().join("x"))]).status.success());

    assert!(!selfsynth(&["verify-lineage", s(dir.path())]).status.success());
    assert!(!selfsynth(&["no-such-command"]).status.success());
}
