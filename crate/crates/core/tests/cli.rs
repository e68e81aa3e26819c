use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "seed = 1
[data]
train_episodes = 12
eval_episodes = 6
[sft]
max_updates = 20
log_every = 10
";

fn pdpo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdpo"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env_remove("PDPO_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn gen_data_writes_requested_episode_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = pdpo(dir.path(), &["gen-data", "--seed", "7", "--episodes", "100"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("episodes.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 100);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("# resolved configuration"));
    assert!(stdout.contains("seed = 7"));
    assert!(dir.path().join("config.toml").exists());
    assert!(dir.path().join("streams").read_dir().unwrap().count() > 100);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = pdpo(dir.path(), &["gen-data", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("usage"));
}

#[test]
fn zero_workers_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pdpo(dir.path(), &["gen-data", "--workers", "0"]).status.code(), Some(1));
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[sft]\nlr = \"fast\"\n").unwrap();
    let out = pdpo(dir.path(), &["--config", path.to_str().unwrap(), "gen-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = pdpo(dir.path(), &["eval", "--checkpoint", "absent.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn check_grad_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = pdpo(dir.path(), &["check-grad", "--instances", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Vec<pdpo::gradcheck::SuiteEntry> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report.len(), pdpo::gradcheck::LOSSES.len());
    assert!(report.iter().all(|e| e.report.passed && e.report.max_rel_error < 1e-4));
}

#[test]
fn avsync_inspect_prints_order_and_pool() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert_eq!(pdpo(dir.path(), &["--config", &cfg, "gen-data"]).status.code(), Some(0));
    let out = pdpo(dir.path(), &["--config", &cfg, "avsync-inspect", "--index", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let order = stdout.lines().find_map(|l| l.strip_prefix("order ")).expect("order line");
    assert!(!order.is_empty() && order.chars().all(|c| c == 'A' || c == 'V'));
    assert!(stdout.lines().any(|l| l.starts_with("pooled [")));

    let stream = dir.path().join("streams").read_dir().unwrap().next().unwrap().unwrap().path();
    let from_file = pdpo(dir.path(), &["--config", &cfg, "avsync-inspect", "--stream", stream.to_str().unwrap()]);
    assert_eq!(from_file.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&from_file.stdout).contains("order "));
}

#[test]
fn sft_and_eval_are_independent_of_worker_count() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path());
    let mut evals = Vec::new();
    for workers in ["1", "3"] {
        let dir = root.path().join(format!("w{workers}"));
        for stage in [&["sft"][..], &["eval", "--mode", "major-at-n", "--n", "3"]] {
            let mut args = vec!["--config", cfg.as_str(), "--workers", workers];
            args.extend_from_slice(stage);
            let out = pdpo(&dir, &args);
            assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        }
        evals.push((
            std::fs::read(dir.join("sft.ckpt")).unwrap(),
            std::fs::read_to_string(dir.join("eval.json")).unwrap(),
        ));
    }
    assert_eq!(evals[0], evals[1]);
}
