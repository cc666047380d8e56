use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use tempfile::TempDir;

fn fonts_mini() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/flows/fonts-mini.json")
}

fn command(cwd: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dlgf"));
    cmd.current_dir(cwd);
    for (key, _) in std::env::vars() {
        if key.starts_with("DLGF_") {
            cmd.env_remove(key);
        }
    }
    cmd
}

fn run(cwd: &Path, args: &[&str]) -> Output {
    command(cwd).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn imported(dir: &Path) {
    let fonts = fonts_mini();
    stdout(&run(dir, &["import", fonts.to_str().unwrap()]));
    stdout(&run(dir, &["compile"]));
}

#[test]
fn import_and_compile_report_counts() {
    let dir = TempDir::new().unwrap();
    let fonts = fonts_mini();
    let out = stdout(&run(dir.path(), &["import", fonts.to_str().unwrap()]));
    assert_eq!(out.trim(), "imported fonts-mini: 6 nodes, 7 edges, 2 entities");
    let out = stdout(&run(dir.path(), &["compile"]));
    assert_eq!(out.trim(), "4 walks, 4 dialogs, 6 templates, 6 masks");
    assert!(dir.path().join("dlgf-data/dialogs/compiled.jsonl").exists());
}

#[test]
fn training_twice_with_one_seed_gives_one_hash() {
    let dir = TempDir::new().unwrap();
    imported(dir.path());
    let first = stdout(&run(dir.path(), &["--seed", "7", "train"]));
    let second = stdout(&run(dir.path(), &["--seed", "7", "train"]));
    assert!(first.starts_with("model v1\n"));
    assert!(second.starts_with("model v2\n"));
    let hash = |s: &str| s.lines().find(|l| l.starts_with("hash ")).unwrap().to_string();
    assert_eq!(hash(&first), hash(&second));
    assert!(first.contains("accuracy 1.0000"));
}

#[test]
fn chat_reads_stdin_and_logs_the_conversation() {
    let dir = TempDir::new().unwrap();
    imported(dir.path());
    stdout(&run(dir.path(), &["train"]));
    let mut child = command(dir.path()).arg("chat").stdin(Stdio::piped()).stdout(Stdio::piped()).spawn().unwrap();
    child.stdin.take().unwrap().write_all(b"app\nyes\n").unwrap();
    let out = stdout(&child.wait_with_output().unwrap());
    assert!(out.starts_with("Would you like to change the font size"));
    assert!(out.contains("Most apps let you change the font size"));
    assert!(out.contains("Great! Glad that helped."));
    assert!(out.trim_end().ends_with("log 1"));
    let logs = stdout(&run(dir.path(), &["logs", "--status", "all"]));
    assert!(logs.starts_with("1\t"));
}

#[test]
fn replay_of_compiled_dialogs_matches_the_rules() {
    let dir = TempDir::new().unwrap();
    imported(dir.path());
    stdout(&run(dir.path(), &["train"]));
    let out = stdout(&run(dir.path(), &["replay", "--left", "rules", "--right", "v1", "--set", "compiled"]));
    assert_eq!(out.lines().next().unwrap(), "run 1: 4 pairs, 4 identical, 0 to rate");
    let report = stdout(&run(dir.path(), &["report", "1"]));
    assert!(report.contains("overall variation +0.00%"));
}

#[test]
fn mismatched_transcripts_exit_with_one() {
    let dir = TempDir::new().unwrap();
    imported(dir.path());
    stdout(&run(dir.path(), &["train"]));
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"id\":\"x\",\"user_turns\":[\"a\"],\"system_turns\":[[\"q\"]]}\n").unwrap();
    let out = run(dir.path(), &["replay", "--left", "1", "--right", "rules", "--transcripts", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("TranscriptMismatch"));
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run(dir.path(), &["bogus"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["serve", "--port", "80"]).status.code(), Some(2));
    std::fs::write(dir.path().join("dlgf.toml"), "port = 80\n").unwrap();
    assert_eq!(run(dir.path(), &["compile"]).status.code(), Some(2));
    std::fs::write(dir.path().join("dlgf.toml"), "colour = 1\n").unwrap();
    assert_eq!(run(dir.path(), &["compile"]).status.code(), Some(2));
    let missing = run(dir.path(), &["--config", "nope.toml", "compile"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn flags_beat_environment_beats_file() {
    let dir = TempDir::new().unwrap();
    let fonts = fonts_mini();
    let fonts = fonts.to_str().unwrap();
    std::fs::write(dir.path().join("dlgf.toml"), "data_dir = \"from-file\"\n").unwrap();

    stdout(&run(dir.path(), &["import", fonts]));
    assert!(dir.path().join("from-file/flow.json").exists());

    let out = command(dir.path()).env("DLGF_DATA_DIR", "from-env").args(["import", fonts]).output().unwrap();
    stdout(&out);
    assert!(dir.path().join("from-env/flow.json").exists());

    let out = command(dir.path())
        .env("DLGF_DATA_DIR", "from-env-2")
        .args(["--data-dir", "from-flag", "import", fonts])
        .output()
        .unwrap();
    stdout(&out);
    assert!(dir.path().join("from-flag/flow.json").exists());
    assert!(!dir.path().join("from-env-2").exists());
}

#[test]
fn hyperparameters_from_file_and_flags() {
    let dir = TempDir::new().unwrap();
    imported(dir.path());
    std::fs::write(dir.path().join("dlgf.toml"), "seed = 3\n[hyper]\nembedding_dim = 0\n").unwrap();
    let out = run(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("TrainingFailed"));
    stdout(&run(dir.path(), &["--embedding-dim", "8", "train"]));
}

#[test]
fn gradcheck_passes_on_tiny_shapes() {
    let dir = TempDir::new().unwrap();
    let out = stdout(&run(dir.path(), &["gradcheck", "--seeds", "3"]));
    let max: f64 = out.lines().last().unwrap().trim_start_matches("max ").parse().unwrap();
    assert!(max < 1e-4, "{out}");
}

#[test]
fn exported_flow_imports_again() {
    let dir = TempDir::new().unwrap();
    imported(dir.path());
    let exported = dir.path().join("exported.json");
    stdout(&run(dir.path(), &["export-flow", "--out", exported.to_str().unwrap()]));
    let again = TempDir::new().unwrap();
    let out = stdout(&run(again.path(), &["import", exported.to_str().unwrap()]));
    assert_eq!(out.trim(), "imported fonts-mini: 6 nodes, 7 edges, 2 entities");
    assert_eq!(stdout(&run(again.path(), &["compile"])).trim(), "4 walks, 4 dialogs, 6 templates, 6 masks");
}
