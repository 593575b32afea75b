use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mtbit::data::{read_f32, read_mask, DELTA_FILE, IMG_FILES, MANIFEST_FILE, MASK_FILE};

fn mtbit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtbit"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let o = mtbit(args, cwd);
    assert_eq!(code(&o), 0, "{args:?}\n{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// Relative path -> bytes for every file below `root`.
fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn tile_dirs(root: &Path) -> usize {
    fs::read_dir(root).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count()
}

#[test]
fn unknown_command_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&mtbit(&["frobnicate"], dir.path())), 2);
    assert_eq!(code(&mtbit(&["train", "--bogus"], dir.path())), 2);
}

#[test]
fn unknown_config_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), "[synth]\ntiles = 3\n").unwrap();
    let o = mtbit(&["dataset", "gen", "--config", "run.toml", "--out", "d"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("tiles"));
    assert!(!dir.path().join("d").exists());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), "preset = \"desk\"\n[synth]\nn_tiles = 3\nseed = 1\n").unwrap();
    ok(&["dataset", "gen", "--config", "run.toml", "--tiles", "2", "--seed", "5", "--out", "d"], dir.path());
    let d = dir.path().join("d");
    assert_eq!(tile_dirs(&d), 2);
    let echoed: toml::Table = fs::read_to_string(d.join("effective_config.toml")).unwrap().parse().unwrap();
    assert_eq!(echoed["preset"].as_str(), Some("desk"));
    assert_eq!(echoed["synth"]["n_tiles"].as_integer(), Some(2));
    assert_eq!(echoed["synth"]["seed"].as_integer(), Some(5));
}

#[test]
fn dataset_gen_validate_stats() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["dataset", "gen", "--seed", "7", "--tiles", "8", "--out", "d"], dir.path());
    let d = dir.path().join("d");
    assert!(d.join(MANIFEST_FILE).is_file());
    assert_eq!(tile_dirs(&d), 8);

    let report = ok(&["dataset", "validate", "--dataset", "d"], dir.path());
    assert!(report.contains("8 tiles, 0 errors"), "{report}");

    let stats: serde_json::Value = serde_json::from_str(&ok(&["dataset", "stats", "--dataset", "d"], dir.path())).unwrap();
    let tiles: u64 = stats.as_array().unwrap().iter().map(|s| s["tiles"].as_u64().unwrap()).sum();
    assert_eq!(tiles, 8);

    // break one tile
    let first = fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).min().unwrap();
    fs::write(first.join(MASK_FILE), b"junk").unwrap();
    assert_eq!(code(&mtbit(&["dataset", "validate", "--dataset", "d"], dir.path())), 1);
}

#[test]
fn missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&mtbit(&["dataset", "gen"], dir.path())), 2);
    assert_eq!(code(&mtbit(&["train", "--out", "r"], dir.path())), 2);
    assert_eq!(code(&mtbit(&["eval", "--checkpoint", "nope.ckpt", "--out", "e"], dir.path())), 1);
    assert_eq!(code(&mtbit(&["predict", "--checkpoint", "x", "--img1", "a"], dir.path())), 2);
}

/// Desk-preset dataset plus a trained checkpoint under `dir`.
fn desk_run(dir: &Path, steps: &str) {
    ok(&["dataset", "gen", "--preset", "desk", "--out", "d"], dir);
    ok(&["train", "--preset", "desk", "--dataset", "d", "--max-steps", steps, "--out", "r"], dir);
}

#[test]
fn runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        desk_run(dir, "20");
        ok(&["eval", "--dataset", "d", "--split", "train", "--checkpoint", "r/final.ckpt", "--out", "e"], dir);
    }
    for sub in ["d", "r", "e"] {
        let (sa, sb) = (snapshot(&a.path().join(sub)), snapshot(&b.path().join(sub)));
        assert!(!sa.is_empty());
        assert!(sa == sb, "{sub} differs");
    }
    let log = fs::read_to_string(a.path().join("r/log.csv")).unwrap();
    assert_eq!(log.lines().count(), 21);
    for f in ["report.json", "report.csv", "histogram.csv"] {
        assert!(a.path().join("e").join(f).is_file(), "{f}");
    }
}

#[test]
fn resume_continues_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    desk_run(d, "6");
    ok(&["train", "--preset", "desk", "--dataset", "d", "--max-steps", "3", "--out", "h"], d);
    ok(&["train", "--resume", "h/final.ckpt", "--dataset", "d", "--max-steps", "6", "--out", "h"], d);
    assert_eq!(fs::read(d.join("r/final.ckpt")).unwrap(), fs::read(d.join("h/final.ckpt")).unwrap());
    assert_eq!(fs::read(d.join("r/log.csv")).unwrap(), fs::read(d.join("h/log.csv")).unwrap());
    let o = mtbit(&["train", "--resume", "h/final.ckpt", "--dataset", "d", "--lr", "1", "--out", "h"], d);
    assert_eq!(code(&o), 2);
}

#[test]
fn predict_writes_rasters_report_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    desk_run(d, "10");
    ok(&["predict", "--checkpoint", "r/final.ckpt", "--tile", "d/tile_0000", "--trace", "--out", "p"], d);
    let p = d.join("p");
    let mask = read_mask(&p.join(MASK_FILE)).unwrap();
    let dh = read_f32(&p.join(DELTA_FILE)).unwrap();
    assert_eq!((mask.width, dh.width), (16, 16));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n"].as_u64(), Some(256));
    // 2 epochs, L = 2 tokens
    assert_eq!(snapshot(&p.join("attention")).len(), 4);

    ok(&["export-attn", "--checkpoint", "r/final.ckpt", "--tile", "d/tile_0000", "--out", "a"], d);
    let mut exported = snapshot(&d.join("a"));
    exported.retain(|(path, _)| path.extension().is_some_and(|e| e == "r32"));
    assert_eq!(exported, snapshot(&p.join("attention")));
}

#[test]
fn identical_images_give_zero_elevation_change() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["dataset", "gen", "--preset", "desk", "--out", "d"], d);
    // no training: heads keep their zero bias
    ok(&["train", "--preset", "desk", "--dataset", "d", "--epochs", "0", "--out", "r"], d);
    let img = format!("d/tile_0003/{}", IMG_FILES[0]);
    ok(&["predict", "--checkpoint", "r/final.ckpt", "--img1", &img, "--img2", &img, "--out", "p"], d);
    let dh = read_f32(&d.join("p").join(DELTA_FILE)).unwrap();
    assert!(dh.values.iter().all(|&v| v == 0.0));
    assert_eq!(read_mask(&d.join("p").join(MASK_FILE)).unwrap().count_ones(), 0);
    assert!(!d.join("p/report.json").exists());
}

#[test]
fn gradcheck_passes_on_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--out", "g"], dir.path());
    assert!(out.contains("max rel err"), "{out}");
    assert!(out.trim_end().lines().last().unwrap().starts_with("PASS"), "{out}");
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("g/gradcheck.json")).unwrap()).unwrap();
    assert_eq!(r["n_params"].as_u64(), Some(4955));
}
