use std::path::Path;
use std::process::{Command, Output};

fn taskbias(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taskbias"))
        .arg("--root")
        .arg(root)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(taskbias(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(taskbias(dir.path(), &["frobnicate"]).status.code(), Some(1));
    let o = taskbias(dir.path(), &["gen-data", "--corpus.no_such_key", "3"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = taskbias(dir.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("pretrain"));
}

#[test]
fn missing_artifacts_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = taskbias(dir.path(), &["probe"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not found"), "{}", stderr(&o));
    let o = taskbias(dir.path(), &["--config", "missing.toml", "gen-data"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn gen_data_writes_a_manifest_and_pair_splits() {
    let dir = tempfile::tempdir().unwrap();
    let o = taskbias(dir.path(), &["gen-data", "--corpus.count", "40", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let corpus = dir.path().join("corpus");
    assert!(corpus.join("manifest.jsonl").exists());
    for pair in ["pair_object_action.json", "pair_object_scene_text.json", "pair_action_scene_text.json"] {
        assert!(corpus.join("pairs").join(pair).exists(), "{pair}");
    }
    let reports = dir.path().join("reports");
    assert!(reports.join("summary.json").exists());
    let runs: Vec<_> = std::fs::read_dir(&reports).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).collect();
    assert_eq!(runs.len(), 1);
}
