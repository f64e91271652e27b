use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn curvreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curvreg"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = curvreg(args);
    assert!(
        out.status.success(),
        "curvreg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Two small synthetic scans at a coarse resolution.
fn small_set() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(
        &cfg,
        "config_version = 1\n[projection]\nazimuth_resolution_deg = 1.0\n\
         elevation_resolution_deg = 1.0\n[synth]\nscans = 2\n",
    )
    .unwrap();
    let set = dir.path().join("set");
    ok(&["--config", s(&cfg), "--seed", "2", "synth", "-o", s(&set)]);
    (dir, cfg)
}

#[test]
fn unknown_subcommand_prints_synopsis() {
    let out = curvreg(&["frobnicate"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage: curvreg"), "{err}");
}

#[test]
fn help_lists_every_subcommand() {
    let help = ok(&["--help"]);
    for cmd in [
        "project", "coeffs", "features", "register", "batch", "synth", "selftest",
    ] {
        assert!(help.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn self_registration_is_identity() {
    let (dir, cfg) = small_set();
    let scan = dir.path().join("set/scans/scan_000.ply");
    let json = ok(&[
        "--config",
        s(&cfg),
        "--no-timings",
        "register",
        s(&scan),
        s(&scan),
    ]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["convention"], "data_to_model");
    assert!(v.get("timings_s").is_none());
    let r: Vec<f64> = v["rotation"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    let t: Vec<f64> = v["translation"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    assert!(
        r.iter().zip(eye).all(|(a, b)| (a - b).abs() < 1e-6),
        "{r:?}"
    );
    assert!(t.iter().all(|x| x.abs() < 1e-6), "{t:?}");

    let with = ok(&["--config", s(&cfg), "register", s(&scan), s(&scan)]);
    let v: serde_json::Value = serde_json::from_str(&with).unwrap();
    assert!(v["timings_s"]["total"].is_number());
}

#[test]
fn artifact_subcommands_write_their_files() {
    let (dir, cfg) = small_set();
    let d = dir.path();
    let scan = d.join("set/scans/scan_000.ply");
    let other = d.join("set/scans/scan_001.ply");
    let c = s(&cfg);

    ok(&[
        "--config",
        c,
        "project",
        s(&scan),
        "-o",
        s(&d.join("r.pgm")),
    ]);
    let side = fs::read_to_string(d.join("r.pgm.txt")).unwrap();
    assert!(side.contains("az_res_deg=1"), "{side}");
    assert!(fs::read(d.join("r.pgm"))
        .unwrap()
        .starts_with(b"P5\n360 180\n65535\n"));

    ok(&[
        "--config",
        c,
        "coeffs",
        s(&d.join("r.pgm")),
        "-o",
        s(&d.join("m.pgm")),
        "--raw",
        s(&d.join("c.bin")),
    ]);
    assert!(fs::read(d.join("m.pgm"))
        .unwrap()
        .starts_with(b"P5\n360 180\n"));
    assert!(fs::read(d.join("c.bin")).unwrap().starts_with(b"FDCT"));

    let out = ok(&["--config", c, "features", s(&scan), "-o", s(&d.join("f"))]);
    let n: usize = out.split_whitespace().next().unwrap().parse().unwrap();
    let csv = fs::read_to_string(d.join("f.keypoints.csv")).unwrap();
    assert_eq!(csv.lines().count(), n + 1);
    assert_eq!(
        fs::metadata(d.join("f.descriptors.bin")).unwrap().len() as usize,
        n * 128 * 4
    );

    ok(&[
        "--config",
        c,
        "register",
        s(&scan),
        s(&other),
        "-o",
        s(&d.join("r.json")),
        "--matches",
        s(&d.join("m.csv")),
    ]);
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    let matches = fs::read_to_string(d.join("m.csv")).unwrap();
    assert_eq!(
        matches.lines().count() as u64,
        v["matches"].as_u64().unwrap() + 1
    );
    let flagged = matches
        .lines()
        .skip(1)
        .filter(|l| l.ends_with(",1"))
        .count() as u64;
    assert_eq!(flagged, v["inliers"].as_u64().unwrap());
}

#[test]
fn pipeline_errors_are_stage_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.xyz");
    fs::write(&a, "1 0 0\n0 1 0\n").unwrap();
    let out_json = dir.path().join("out.json");
    let out = curvreg(&["register", s(&a), s(&a), "-o", s(&out_json)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage failed"), "{err}");
    assert!(!out_json.exists());
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "config_version = 1\n[ransac]\nmin_inliers = 0\n").unwrap();
    let out = curvreg(&["--config", s(&cfg), "selftest"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("min_inliers"));

    let missing = curvreg(&["project", s(&dir.path().join("nope.ply")), "-o", "x.pgm"]);
    assert!(!missing.status.success());

    let threads = Command::new(env!("CARGO_BIN_EXE_curvreg"))
        .args(["register", "x", "y"])
        .env("CURVREG_THREADS", "many")
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&threads.stderr).contains("CURVREG_THREADS"));
}

#[test]
fn batch_reports_one_row_per_metric() {
    let (dir, cfg) = small_set();
    let d = dir.path();
    let out = d.join("out");
    let stdout = ok(&[
        "--config",
        s(&cfg),
        "--no-timings",
        "batch",
        s(&d.join("set/scans")),
        "--truth",
        s(&d.join("set/truth.txt")),
        "-o",
        s(&out),
    ]);
    assert!(stdout.contains("1 pairs"), "{stdout}");
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let keys: Vec<&str> = summary
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        keys,
        [
            "rmse_translation_m",
            "rmse_rotation_rad",
            "failure_rate",
            "failure_threshold_rad",
            "pairs",
            "registration_failures"
        ]
    );
    for f in [
        "ecdf_rotation.csv",
        "ecdf_translation.csv",
        "errors.csv",
        "trajectory.txt",
        "map.ply",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert!(fs::read_to_string(out.join("ecdf_rotation.csv"))
        .unwrap()
        .starts_with("threshold,proportion\n"));
    assert!(!out.join("timings.csv").exists());
}
