//! End-to-end behaviour of the `dinet` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
[data]
num_classes = 3
clips_per_class_per_domain = 10
clip_shape = [1, 8, 16, 16]
shape_radius = [2.0, 3.0]

[model]
input_shape = [1, 8, 16, 16]
feature_dim = 8
num_actions = 3
domain_hidden = [8, 4]

[[model.blocks]]
kind = "plain"
out_channels = 4
downsample = true

[[model.blocks]]
kind = "grouped_residual"
out_channels = 8
cardinality = 2
downsample = true

[train]
epochs = 2
batch_size = 4
base_lr = 0.02
"#;

fn dinet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dinet")).args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn failed_with(out: &Output, code: i32, class: &str) {
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "stderr: {stderr}");
    assert!(stderr.starts_with(&format!("error[{class}]: ")), "stderr: {stderr}");
    assert_eq!(stderr.trim_end().lines().count(), 1, "stderr: {stderr}");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    config: PathBuf,
    data: PathBuf,
}

impl Fixture {
    fn new(seed: u64) -> Self {
        let dir = TempDir::new().unwrap();
        let config = dir.path().join("small.toml");
        fs::write(&config, SMALL).unwrap();
        let data = dir.path().join("data");
        ok(&dinet(&["generate-data", "--config", s(&config), "--seed", &seed.to_string(), "--out", s(&data)]));
        Self { dir, config, data }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let out = self.path(out);
        let mut args = vec!["train", "--config", s(&self.config), "--data", s(&self.data), "--out", s(&out)];
        args.extend_from_slice(extra);
        dinet(&args)
    }

    fn read(&self, run: &str, file: &str) -> String {
        fs::read_to_string(self.path(run).join(file)).unwrap()
    }
}

#[test]
fn generate_data_writes_the_default_dataset() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("data");
    let res = dinet(&["generate-data", "--seed", "1", "--out", s(&out)]);
    ok(&res);
    let index = fs::read_to_string(out.join("index.csv")).unwrap();
    assert_eq!(index.lines().count(), 601);
    assert_eq!(index.lines().filter(|l| l.ends_with(",test")).count(), 240);
    assert_eq!(fs::read_dir(out.join("clips")).unwrap().count(), 600);
    assert!(out.join("config.toml").is_file());
}

#[test]
fn refuses_a_non_empty_output_without_force() {
    let fx = Fixture::new(1);
    let again = dinet(&["generate-data", "--config", s(&fx.config), "--out", s(&fx.data)]);
    failed_with(&again, 4, "refused");
    ok(&dinet(&["generate-data", "--config", s(&fx.config), "--out", s(&fx.data), "--force"]));
}

#[test]
fn seed_controls_the_payloads() {
    let a = Fixture::new(1);
    let b = Fixture::new(1);
    let c = Fixture::new(2);
    let clip = |fx: &Fixture| {
        let mut files: Vec<_> = fs::read_dir(fx.data.join("clips")).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        fs::read(&files[0]).unwrap()
    };
    assert_eq!(clip(&a), clip(&b));
    assert_ne!(clip(&a), clip(&c));
    let echoed = fs::read_to_string(c.data.join("config.toml")).unwrap();
    assert!(echoed.contains("seed = 2"));
}

#[test]
fn training_is_deterministic_and_batches_match_across_modes() {
    let fx = Fixture::new(3);
    ok(&fx.train("a", &[]));
    ok(&fx.train("b", &[]));
    ok(&fx.train("base", &["--mode", "source-only"]));
    assert_eq!(fx.read("a", "history.csv"), fx.read("b", "history.csv"));
    assert_eq!(fx.read("a", "batch_hashes.csv"), fx.read("base", "batch_hashes.csv"));
    assert_ne!(fx.read("a", "history.csv"), fx.read("base", "history.csv"));
    assert!(fx.read("a", "history.csv").starts_with("step,epoch,p,lambda,lr,loss_action,loss_domain,objective_F\n"));
}

#[test]
fn resume_continues_the_same_run() {
    let fx = Fixture::new(4);
    ok(&fx.train("full", &[]));
    let stopped = fx.train("part", &["--stop-after-steps", "7"]);
    ok(&stopped);
    assert!(String::from_utf8_lossy(&stopped.stdout).contains("--resume"));
    let ckpt = fx.path("part").join("checkpoint.ckpt");
    ok(&dinet(&["train", "--data", s(&fx.data), "--resume", s(&ckpt)]));
    assert_eq!(fx.read("full", "history.csv"), fx.read("part", "history.csv"));
    assert_eq!(fx.read("full", "metrics.json"), fx.read("part", "metrics.json"));
}

#[test]
fn eval_reports_a_consistent_confusion_matrix() {
    let fx = Fixture::new(5);
    ok(&fx.train("run", &[]));
    let ckpt = fx.path("run").join("checkpoint.ckpt");
    let eval_dir = fx.path("eval");
    ok(&dinet(&["eval", "--checkpoint", s(&ckpt), "--data", s(&fx.data), "--out", s(&eval_dir)]));
    let confusion = fs::read_to_string(eval_dir.join("confusion.csv")).unwrap();
    let rows: Vec<Vec<u64>> = confusion
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval_dir.join("metrics.json")).unwrap()).unwrap();
    let trace: u64 = (0..3).map(|k| rows[k][k]).sum();
    let total: u64 = rows.iter().flatten().sum();
    assert_eq!(metrics["target"]["top1_accuracy"].as_f64().unwrap(), trace as f64 / total as f64);
    assert!(rows.iter().all(|r| r.iter().sum::<u64>() == total / 3));
    assert_eq!(fx.read("run", "metrics.json"), fs::read_to_string(eval_dir.join("metrics.json")).unwrap());
}

#[test]
fn missing_data_directory_is_a_path_error() {
    let dir = TempDir::new().unwrap();
    let out = dinet(&["train", "--data", s(&dir.path().join("nope")), "--out", s(&dir.path().join("run"))]);
    failed_with(&out, 3, "path");
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let fx = Fixture::new(6);
    ok(&fx.train("run", &[]));
    let ckpt = fx.path("run").join("checkpoint.ckpt");
    let bytes = fs::read(&ckpt).unwrap();
    let bad = fx.path("bad.ckpt");
    fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    let out = dinet(&["eval", "--checkpoint", s(&bad), "--data", s(&fx.data), "--out", s(&fx.path("e"))]);
    failed_with(&out, 5, "corrupt");
}

#[test]
fn invalid_config_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nbatch_size = 3\n").unwrap();
    let out = dinet(&["generate-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    failed_with(&out, 2, "invalid-argument");
}

#[test]
fn grad_check_passes_and_catches_an_injected_fault() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("gc");
    let good = dinet(&["grad-check", "--scope", "ops", "--configs", "3", "--out", s(&out_dir)]);
    ok(&good);
    assert!(out_dir.join("gradcheck.json").is_file());
    let bad = dinet(&["grad-check", "--scope", "ops", "--configs", "3", "--inject-fault", "conv3d-backward-sign"]);
    failed_with(&bad, 6, "grad-check");
    let stdout = String::from_utf8_lossy(&bad.stdout);
    let failing: Vec<&str> = stdout.lines().filter(|l| l.ends_with("FAIL")).collect();
    assert_eq!(failing.len(), 1, "{stdout}");
    assert!(failing[0].starts_with("conv3d "));
}
