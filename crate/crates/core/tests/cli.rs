use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn card(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_card"))
        .args(args)
        .env_remove("CARD_SEED")
        .env_remove("CARD_OUT_DIR")
        .output()
        .unwrap()
}

fn card_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_card")).args(args).env_remove("CARD_OUT_DIR").env(key, value).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const QUERY: &str = "What is the boiling point of water at sea level?";

#[test]
fn generate_is_deterministic_and_masks_the_diagonal() {
    let team = fixture("team.toml");
    let args = ["generate", "--manifest", s(&team), "--query", QUERY];
    let a = stdout(&card(&args));
    assert_eq!(a, stdout(&card(&args)));
    assert!(a.contains("Masked"));
    assert!(a.contains("Knowlegable Expert"));
    assert!(a.contains("schedule"));
}

#[test]
fn seed_from_environment_changes_initialization() {
    let team = fixture("team.toml");
    let args = ["generate", "--manifest", s(&team), "--query", QUERY, "--machine"];
    let base = stdout(&card(&args));
    let other = stdout(&card_env(&args, "CARD_SEED", "7"));
    assert_ne!(base, other);
    let flag = stdout(&card(&[&args[..], &["--seed", "7"]].concat()));
    assert_eq!(other, flag);
}

#[test]
fn generate_writes_outputs_and_rejects_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let team = fixture("team.toml");
    let out = dir.path().join("out");
    stdout(&card(&["generate", "--manifest", s(&team), "--query", QUERY, "--out-dir", s(&out)]));
    assert!(out.join("matrix.txt").is_file());
    assert!(out.join("topology.txt").is_file());
    let missing = dir.path().join("nope.txt");
    let o = card(&["generate", "--manifest", s(&team), "--query", QUERY, "--checkpoint", s(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
}

#[test]
fn train_with_zero_steps_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("zero");
    let o = stdout(&card(&["train", "--steps", "0", "--eval-episodes", "1", "--seed", "3", "--out-dir", s(&out)]));
    let init = dir.path().join("init.txt");
    card_core::GeneratorParams::with_default_dims(3).save(&init).unwrap();
    assert_eq!(std::fs::read(out.join("checkpoint.txt")).unwrap(), std::fs::read(&init).unwrap());
    assert_eq!(std::fs::read_to_string(out.join("metrics.tsv")).unwrap().lines().count(), 1);
    assert!(o.contains("untrained mean_utility"));
}

#[test]
fn train_metrics_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        stdout(&card(&[
            "train",
            "--steps",
            "3",
            "--batch",
            "4",
            "--eval-episodes",
            "1",
            "--checkpoint-every",
            "2",
            "--out-dir",
            s(&out),
        ]));
        out
    };
    let (a, b) = (run("a"), run("b"));
    let ma = std::fs::read(a.join("metrics.tsv")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("metrics.tsv")).unwrap());
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 4);
    assert!(a.join("checkpoint-step-2.txt").is_file());
    assert_eq!(std::fs::read(a.join("checkpoint.txt")).unwrap(), std::fs::read(b.join("checkpoint.txt")).unwrap());
}

#[test]
fn adapt_tracks_condition_changes_without_touching_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt.txt");
    card_core::GeneratorParams::with_default_dims(5).save(&ckpt).unwrap();
    let team = fixture("team.toml");
    let degraded = fixture("team-degraded-tool.toml");
    let same =
        stdout(&card(&["adapt", "--checkpoint", s(&ckpt), "--old", s(&team), "--new", s(&team), "--query", QUERY]));
    assert!(same.contains("changed 0 of 20"), "{same}");
    assert!(same.trim_end().ends_with("unchanged"));
    let moved =
        stdout(&card(&["adapt", "--checkpoint", s(&ckpt), "--old", s(&team), "--new", s(&degraded), "--query", QUERY]));
    assert!(!moved.contains("changed 0 of"), "{moved}");
    assert!(moved.trim_end().ends_with("unchanged"));
}

#[test]
fn report_on_published_matrices() {
    let files: Vec<PathBuf> = (1..=4).map(|k| fixture(&format!("matrix{k}.txt"))).collect();
    let args: Vec<&str> = ["report"].into_iter().chain(files.iter().map(|p| s(p))).collect();
    let text = stdout(&card(&args));
    assert!(text.starts_with("Comparison & r & p & Strength & Sig. \\\\\n"));
    assert_eq!(text.matches(" vs ").count(), 6);
    assert!(text.contains("matrix1 & 0.4195"), "{text}");
    let json = stdout(&card(&[&args[..], &["--json"]].concat()));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["comparisons"].as_array().unwrap().len(), 6);
}

#[test]
fn report_error_codes() {
    let one = fixture("matrix1.txt");
    assert_eq!(card(&["report", s(&one)]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let small = dir.path().join("small.txt");
    std::fs::write(&small, "0 0.5 0.2\n0.1 0 0.3\n0.7 0.4 0\n").unwrap();
    assert_eq!(card(&["report", s(&one), s(&small)]).status.code(), Some(3));

    let broken = dir.path().join("broken.txt");
    std::fs::write(&broken, "0 0.5 0.2\n0.1 zero 0.3\n0.7 0.4 0\n").unwrap();
    let o = card(&["report", s(&small), s(&broken)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("broken.txt:2:"), "{err}");
}
