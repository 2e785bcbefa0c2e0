use std::path::Path;
use std::process::{Command, Output};

use turbo_ai::channel::ChannelBatch;

const SMALL_SWEEP: &str = r#"
run_id = "cli-sweep"
seed = 5
snr_db = [0.0, 10.0]
k_eval = 2048

[spatial]
m = 4
n = 8

[train]
window = 64
"#;

const SMALL_TRAIN: &str = r#"
run_id = "cli-train"
seed = 9
snr_db = [5.0]
iterations = 2
k_eval = 1024

[spatial]
m = 2
n = 4

[train]
window = 64
samples = 6400
max_steps = 1500
patience = 400
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_turbo-ai"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn cost_prints_the_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["cost", "--m", "8", "--n", "16"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let ratio: f64 = text.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!((ratio - 455.1).abs() < 0.1, "{text}");
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["eval", "--chain", "nowhere"])), 1);
    assert_eq!(code(&run(dir.path(), &["sweep", "--config", "missing.toml"])), 1);
    let out = run(dir.path(), &["cost", "--bogus"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8(out.stderr).unwrap().contains("Usage"));
    assert_eq!(code(&run(dir.path(), &[])), 1);
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL_SWEEP).unwrap();
    let out = run(dir.path(), &["eval", "--config", "c.toml", "--chain", "no_such_chain"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn seeded_sweep_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL_SWEEP).unwrap();
    let a = run(dir.path(), &["sweep", "--check", "--config", "c.toml", "--out", "a"]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let b = run(dir.path(), &["sweep", "--check", "--config", "c.toml", "--out", "b", "--threads", "1"]);
    assert_eq!(code(&b), 0);
    let csv_a = std::fs::read(dir.path().join("a/nmse_vs_snr.csv")).unwrap();
    let csv_b = std::fs::read(dir.path().join("b/nmse_vs_snr.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    let text = String::from_utf8(csv_a).unwrap();
    assert!(text.starts_with("# config_hash="));
    assert_eq!(text.lines().count(), 2 + 2 * 6);

    let c = run(dir.path(), &["sweep", "--config", "c.toml", "--out", "c", "--seed", "6"]);
    assert_eq!(code(&c), 0);
    assert_ne!(std::fs::read(dir.path().join("c/nmse_vs_snr.csv")).unwrap(), text.as_bytes());
}

#[test]
fn export_batch_writes_a_readable_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["export-batch", "--k", "20", "--snr", "3", "--out", "o"]);
    assert_eq!(code(&out), 0);
    let file = std::fs::File::open(dir.path().join("o/batch.bin")).unwrap();
    let batch = ChannelBatch::read_from(std::io::BufReader::new(file)).unwrap();
    assert_eq!((batch.len(), batch.m, batch.n), (20, 8, 16));
    assert!((batch.snr_db - 3.0).abs() < 1e-12);
}

#[test]
fn turbo_train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL_TRAIN).unwrap();
    let out = run(dir.path(), &["turbo-train", "--config", "c.toml", "--out", "o"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let chain = dir.path().join("o/chain_5dB");
    assert!(chain.join("manifest.toml").exists());
    let chain = chain.to_str().unwrap();
    let out = run(dir.path(), &["eval", "--config", "c.toml", "--chain", chain, "--out", "o"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(dir.path().join("o/trace.csv")).unwrap();
    assert!(trace.lines().count() >= 2);
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            turbo_ai::harness::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            count += 1;
        }
    }
    assert!(count >= 4);
}
