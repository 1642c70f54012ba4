use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hdit::config::{DatasetSource, RunConfig};
use hdit::train::{CHECKPOINT_FILE, METRICS_FILE};

fn hdit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// A small conditional run: toy 32² model, tiny batch, short sampler.
fn write_config(dir: &Path, steps: u64) -> PathBuf {
    let mut cfg = RunConfig::smoke(dir.join("run"));
    cfg.dataset = DatasetSource::Shapes { count: 64 };
    cfg.training.training_steps = steps;
    cfg.training.batch_size = 4;
    cfg.training.sample_grid_rows = 1;
    cfg.sampler.sampling_steps = 3;
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(config: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", s(config)];
    args.extend_from_slice(extra);
    let out = hdit(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn ten_step_run_writes_ten_metric_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 10);
    train(&config, &[]);
    let csv = std::fs::read_to_string(dir.path().join("run").join(METRICS_FILE)).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("step,"));
    assert_eq!(lines.count(), 10);
    assert!(dir.path().join("run").join(CHECKPOINT_FILE).exists());
}

#[test]
fn resumed_run_matches_uninterrupted_run_bitwise() {
    let straight = tempfile::tempdir().unwrap();
    let config = write_config(straight.path(), 10);
    train(&config, &[]);

    let split = tempfile::tempdir().unwrap();
    let config = write_config(split.path(), 10);
    train(&config, &["--stop-at", "5"]);
    let csv = std::fs::read_to_string(split.path().join("run").join(METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
    train(&config, &["--resume"]);

    for file in [CHECKPOINT_FILE, METRICS_FILE] {
        let a = std::fs::read(straight.path().join("run").join(file)).unwrap();
        let b = std::fs::read(split.path().join("run").join(file)).unwrap();
        assert!(a == b, "{file} differs after resume");
    }
}

#[test]
fn resume_without_checkpoint_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 10);
    assert_eq!(code(&hdit(&["train", "--config", s(&config), "--resume"])), 2);
}

#[test]
fn missing_dataset_folder_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 10);
    let mut cfg = RunConfig::load(&config).unwrap();
    cfg.dataset = DatasetSource::Folder {
        path: dir.path().join("no-such-folder"),
    };
    std::fs::write(&config, cfg.to_toml()).unwrap();
    let out = hdit(&["train", "--config", s(&config)]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn malformed_or_unknown_config_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 10);
    let text = std::fs::read_to_string(&config).unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, format!("{text}\nunexpected_key = 1\n")).unwrap();
    assert_eq!(code(&hdit(&["train", "--config", s(&bad)])), 2);
    std::fs::write(&bad, "seed = [").unwrap();
    assert_eq!(code(&hdit(&["train", "--config", s(&bad)])), 2);
    assert_eq!(code(&hdit(&["train", "--config", s(&dir.path().join("absent.toml"))])), 2);
}

fn sample(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let ckpt = config.parent().unwrap().join("run").join(CHECKPOINT_FILE);
    let mut args = vec!["sample", "--config", s(config), "--checkpoint", s(&ckpt), "--out-dir", s(out)];
    args.extend_from_slice(extra);
    let o = hdit(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map(|rd| {
            rd.map(|e| {
                let e = e.unwrap();
                (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
            })
            .collect()
        })
        .unwrap_or_default();
    files.sort();
    files
}

#[test]
fn sampling_is_seeded_guided_and_honours_count() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 10);
    train(&config, &[]);

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    sample(&config, &a, &["--count", "2", "--seed", "3", "--class", "1"]);
    sample(&config, &b, &["--count", "2", "--seed", "3", "--class", "1"]);
    let first = read_dir_sorted(&a);
    assert_eq!(first.len(), 2);
    assert_eq!(first[0].0, "sample_3_0.ppm");
    assert_eq!(first, read_dir_sorted(&b));

    let (c1, c0) = (dir.path().join("w1"), dir.path().join("w0"));
    sample(&config, &c1, &["--count", "1", "--class", "0", "--cfg-scale", "1"]);
    sample(&config, &c0, &["--count", "1", "--class", "0", "--cfg-scale", "0"]);
    assert_ne!(read_dir_sorted(&c1)[0].1, read_dir_sorted(&c0)[0].1);

    let none = dir.path().join("none");
    sample(&config, &none, &["--count", "0"]);
    assert!(read_dir_sorted(&none).is_empty());

    let ckpt = dir.path().join("run").join(CHECKPOINT_FILE);
    let out = hdit(&["sample", "--config", s(&config), "--checkpoint", s(&ckpt), "--class", "9"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn cost_sweep_rows_and_bad_resolutions() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let out = hdit(&["cost", "--resolutions", "128", "--csv", s(&csv)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "x,y,r");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("128,"));

    for bad in ["0", "128,abc", "100", ""] {
        let out = hdit(&["cost", "--resolutions", bad]);
        assert_eq!(code(&out), 2, "resolutions {bad:?} accepted");
    }
    let out = hdit(&["cost", "--arch", "dit", "--resolutions", "128,256"]);
    assert_eq!(code(&out), 0);
}

#[test]
fn verify_passes_and_reports_an_injected_fault() {
    let out = hdit(&["verify", "--suite", "invariants"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let out = hdit(&["verify", "--suite", "invariants", "--inject-negative-tau"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    assert_eq!(code(&hdit(&["verify", "--suite", "nonsense"])), 2);
}

#[test]
fn shipped_smoke_config_matches_the_builtin_one() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    assert_eq!(RunConfig::load(&path).unwrap(), RunConfig::smoke("runs/smoke".into()));
}
