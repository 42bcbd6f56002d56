use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn eqgan(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eqgan"))
        .args(args)
        .env("EQGAN_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

const TINY: &[&str] = &[
    "train",
    "--smoke",
    "--iterations",
    "4",
    "--batch-size",
    "2",
    "--log-every",
    "1",
    "--checkpoint-every",
    "2",
    "--synthetic-images",
    "40",
];

#[test]
fn usage_and_config_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&eqgan(dir.path(), &["--help"])), 0);
    assert_eq!(code(&eqgan(dir.path(), &["train", "--no-such-flag"])), 2);
    assert_eq!(code(&eqgan(dir.path(), &["frobnicate"])), 2);

    let out = eqgan(dir.path(), &["train", "--smoke", "--k", "1"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "iterations = 10\nlamda_rec = 0.7\n").unwrap();
    let out = eqgan(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("lamda_rec") && stderr.contains("lambda_rec"), "{stderr}");

    let out = eqgan(dir.path(), &["train", "--smoke", "--lr", "fast"]);
    assert_eq!(code(&out), 3);

    let out = eqgan(dir.path(), &["eval", "--checkpoint", dir.path().join("missing").to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn train_then_every_downstream_command() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let out = eqgan(root, TINY);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let run = root.join("train");
    let manifest = fs::read_to_string(run.join("manifest.txt")).unwrap();
    assert!(manifest.contains("code_version = ") && manifest.contains("seed = 0"));
    assert!(manifest.contains("iterations = 4"));
    let losses = fs::read_to_string(run.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 5);
    assert_eq!(fs::read_to_string(run.join("checkpoints/LAST")).unwrap().trim(), "ckpt-00000004");

    // `last` resolves to the newest checkpoint of the default train run.
    let out = eqgan(root, &["eval", "--per-category", "4", "--k", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(root.join("eval/metrics.csv")).unwrap();
    assert!(metrics.lines().last().unwrap().starts_with("mean,"));
    assert!(root.join("eval/split.csv").exists() && root.join("eval/manifest.txt").exists());

    let out = eqgan(root, &["generate", "--count", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let grids = fs::read_dir(root.join("generate"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("grid_"))
        .count();
    assert_eq!(grids, 2);

    let out = eqgan(root, &["dump-features"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let maps = fs::read_dir(root.join("features")).unwrap().count();
    assert_eq!(maps, 2 * 5 + 1);

    let ckpt = run.join("checkpoints/ckpt-00000004");
    let pair = format!("2={}", ckpt.display());
    let out = eqgan(root, &["sweep", "--checkpoint", &pair, "--k-values", "2,3", "--per-category", "4"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = fs::read_to_string(root.join("sweep/sweep.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().collect();
    assert!(rows[1].starts_with("2,") && !rows[1].starts_with("2,,"));
    assert!(rows[2].starts_with("3,,"), "{sweep}");
    assert!(root.join("sweep/sweep.svg").exists());

    let out = eqgan(root, &["classify", "--epochs", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(root.join("classify/accuracy.txt")).unwrap().contains("augmented_accuracy"));
}

#[test]
fn resume_continues_to_the_configured_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut args = TINY.to_vec();
    args.extend(["--stop-at", "2"]);
    assert_eq!(code(&eqgan(root, &args)), 0);
    let run = root.join("train");
    assert_eq!(fs::read_to_string(run.join("checkpoints/LAST")).unwrap().trim(), "ckpt-00000002");
    let ckpt = run.join("checkpoints");
    let out = eqgan(root, &["train", "--resume", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(run.join("checkpoints/LAST")).unwrap().trim(), "ckpt-00000004");
    assert_eq!(fs::read_to_string(run.join("losses.csv")).unwrap().lines().count(), 5);
}

#[test]
fn make_synthetic_writes_category_folders() {
    let dir = tempfile::tempdir().unwrap();
    let out = eqgan(dir.path(), &["make-synthetic", "--categories", "3", "--images", "4", "--size", "16"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cats: Vec<_> = fs::read_dir(dir.path().join("synthetic")).unwrap().collect();
    assert_eq!(cats.len(), 3);
    for c in cats {
        assert_eq!(fs::read_dir(c.unwrap().path()).unwrap().count(), 4);
    }
}
