use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn letflow(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_letflow"))
        .args(args)
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn ok(args: &[&str]) -> String {
    let r = letflow(args);
    assert_eq!(r.code, 0, "letflow {args:?} failed: {}", r.stderr);
    r.stdout
}

fn json(args: &[&str]) -> Value {
    let mut full = args.to_vec();
    full.extend(["--format", "json"]);
    serde_json::from_str(&ok(&full)).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a synthetic pair into `dir` and returns (a, b, manifest).
fn synth(dir: &Path, extra: &[&str]) -> (PathBuf, PathBuf, PathBuf) {
    let mut args = vec!["synth", "pair", s(dir)];
    args.extend(extra);
    ok(&args);
    (dir.join("a.png"), dir.join("b.png"), dir.join("manifest.txt"))
}

fn write_gray(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
    let img = image::GrayImage::from_fn(w, h, |x, y| image::Luma([f(x, y)]));
    img.save(path).unwrap();
}

#[test]
fn detect_emits_bounded_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _, _) = synth(dir.path(), &["--width", "96", "--height", "80"]);
    let out = ok(&["detect", s(&a), "--network", "random", "--seed", "3", "--max-points", "25"]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("x,y,score"));
    let rows: Vec<Vec<f32>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert!(rows.len() <= 25);
    for r in &rows {
        assert_eq!(r.len(), 3);
        assert!(r[0] >= 0.0 && r[0] < 96.0 && r[1] >= 0.0 && r[1] < 80.0);
        assert!(r[2] > 0.0 && r[2] < 1.0);
    }
}

#[test]
fn corrupt_and_missing_images_exit_2_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("broken.png");
    fs::write(&bad, b"\x89PNG\r\n\x1a\nnot really").unwrap();
    let r = letflow(&["detect", s(&bad)]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("broken.png"), "{}", r.stderr);
    let r = letflow(&["detect", s(&dir.path().join("absent.pgm"))]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("absent.pgm"));
}

#[test]
fn usage_errors_exit_3_and_help_exits_0() {
    assert_eq!(letflow(&["detect"]).code, 3);
    assert_eq!(letflow(&["frobnicate"]).code, 3);
    assert_eq!(letflow(&["track", "a.png", "b.png", "--levels", "many"]).code, 3);
    assert_eq!(letflow(&["--threads", "0", "detect", "a.png"]).code, 3);
    assert_eq!(letflow(&["--help"]).code, 0);
    assert_eq!(letflow(&["--version"]).code, 0);
    let dir = tempfile::tempdir().unwrap();
    let (a, _, _) = synth(dir.path(), &["--width", "64", "--height", "64"]);
    let r = letflow(&["detect", s(&a), "--inference-scale", "1.5"]);
    assert_eq!(r.code, 3);
    assert!(r.stderr.contains("inference_scale"));
    assert_eq!(letflow(&["detect", s(&a), "--score-threshold", "1.2"]).code, 3);
}

#[test]
fn mismatched_dimensions_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.pgm");
    let b = dir.path().join("b.pgm");
    write_gray(&a, 64, 48, |x, y| ((x * 7 + y * 3) % 256) as u8);
    write_gray(&b, 48, 64, |x, y| ((x * 7 + y * 3) % 256) as u8);
    let r = letflow(&["track", s(&a), s(&b)]);
    assert_eq!(r.code, 3, "{}", r.stderr);
}

#[test]
fn self_track_is_still() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _, _) = synth(dir.path(), &["--width", "128", "--height", "96"]);
    let v = json(&["track", s(&a), s(&a)]);
    assert_eq!(v["schema"], "letflow.track.v1");
    let tracks = v["tracks"].as_array().unwrap();
    assert!(!tracks.is_empty());
    for t in tracks {
        assert_eq!(t["status"], "Converged");
        let dx = t["tracked_x"].as_f64().unwrap() - t["origin_x"].as_f64().unwrap();
        let dy = t["tracked_y"].as_f64().unwrap() - t["origin_y"].as_f64().unwrap();
        assert!(dx.hypot(dy) < 1e-3);
    }
}

#[test]
fn translated_pair_from_disk_is_recovered() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, _) = synth(dir.path(), &["--dx", "3.7", "--dy", "-2.3"]);
    let v = json(&["track", s(&a), s(&b), "--max-points", "200"]);
    let tracks = v["tracks"].as_array().unwrap();
    let good = tracks
        .iter()
        .filter(|t| {
            t["status"] == "Converged"
                && (t["tracked_x"].as_f64().unwrap() - t["origin_x"].as_f64().unwrap() - 3.7)
                    .hypot(t["tracked_y"].as_f64().unwrap() - t["origin_y"].as_f64().unwrap() + 2.3)
                    < 0.2
        })
        .count();
    // PNG quantisation costs a little accuracy against the float pair.
    assert!(good as f64 >= 0.95 * tracks.len() as f64, "{good} of {}", tracks.len());
}

#[test]
fn blank_pair_is_all_singular() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _, _) = synth(dir.path(), &["--width", "96", "--height", "96"]);
    let points = dir.path().join("points.csv");
    ok(&["detect", s(&a), "--max-points", "40", "-o", s(&points)]);
    let white = dir.path().join("white.png");
    write_gray(&white, 96, 96, |_, _| 255);
    let v = json(&["track", s(&white), s(&white), "--points", s(&points)]);
    let tracks = v["tracks"].as_array().unwrap();
    assert!(!tracks.is_empty());
    assert!(tracks.iter().all(|t| t["status"] == "Singular"));
    assert_eq!(v["status_counts"]["Singular"].as_u64().unwrap() as usize, tracks.len());
}

#[test]
fn eval_reports_each_pair_and_an_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = String::new();
    for (i, kind) in ["translation", "homography", "blur"].iter().enumerate() {
        let sub = dir.path().join(format!("p{i}"));
        let (_, _, m) = synth(&sub, &["--kind", kind, "--width", "128", "--height", "112"]);
        let line = fs::read_to_string(m).unwrap();
        manifest += &line.replace("a.png", &format!("p{i}/a.png")).replace("b.png", &format!("p{i}/b.png"));
    }
    let path = dir.path().join("pairs.txt");
    fs::write(&path, &manifest).unwrap();

    let v = json(&["eval", s(&path)]);
    assert_eq!(v["schema"], "letflow.metrics.v1");
    assert_eq!(v["pairs"].as_array().unwrap().len(), 3);
    let agg = &v["aggregate"];
    let tracked: u64 = v["pairs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["report"]["counts"]["tracked"].as_u64().unwrap())
        .sum();
    assert_eq!(agg["counts"]["tracked"].as_u64().unwrap(), tracked);
    for p in v["pairs"].as_array().unwrap() {
        let r = p["report"]["repeatability"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&r));
    }

    let csv = ok(&["eval", s(&path)]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("label,repeatability,correct_tracking_ratio"));
    assert!(lines[4].starts_with("aggregate,"));
}

#[test]
fn malformed_manifest_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, m) = synth(dir.path(), &["--width", "64", "--height", "64"]);
    let good = fs::read_to_string(&m).unwrap();
    let path = dir.path().join("bad.txt");
    fs::write(&path, format!("# header\n{good}a.png b.png 1 0 0\n")).unwrap();
    let r = letflow(&["eval", s(&path)]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("line 3"), "{}", r.stderr);
}

#[test]
fn bench_reports_finite_stage_times() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, _) = synth(dir.path(), &["--width", "160", "--height", "120"]);
    let v = json(&["bench", s(&a), s(&b), "--iterations", "3"]);
    assert_eq!(v["schema"], "letflow.bench.v1");
    let t = &v["timing_ms"];
    for k in ["forward", "detect", "pyramid", "track", "total"] {
        let x = t[k].as_f64().unwrap();
        assert!(x.is_finite() && x >= 0.0, "{k} = {x}");
    }
    assert!(v["keypoints"].as_u64().unwrap() > 0);
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _, _) = synth(dir.path(), &["--width", "96", "--height", "96"]);
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 11\n[detector]\nmax_points = 7\nmin_interval = 9\n[tracker]\nlevels = 2\n").unwrap();

    let v = json(&["detect", s(&a), "--config", s(&cfg), "--max-points", "5"]);
    let c = &v["config"];
    assert_eq!(c["seed"], 11);
    assert_eq!(c["detector"]["max_points"], 5);
    assert_eq!(c["detector"]["min_interval"], 9);
    assert_eq!(c["detector"]["border"], 8);
    assert_eq!(c["tracker"]["levels"], 2);
    assert!(v["keypoints"].as_array().unwrap().len() <= 5);

    fs::write(&cfg, "maxpoints = 3\n").unwrap();
    assert_eq!(letflow(&["detect", s(&a), "--config", s(&cfg)]).code, 2);
}

#[test]
fn weights_files_round_trip_and_bad_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("net.letw");
    let shown = json(&["weights", "init", s(&w), "--network", "random", "--seed", "5"]);
    assert_eq!(shown["layers"].as_array().unwrap().len(), 4);
    assert_eq!(json(&["weights", "show", s(&w)])["layers"], shown["layers"]);

    let (a, _, _) = synth(dir.path(), &["--width", "64", "--height", "64"]);
    let from_file = ok(&["detect", s(&a), "--weights", s(&w)]);
    let from_seed = ok(&["detect", s(&a), "--network", "random", "--seed", "5"]);
    assert_eq!(from_file, from_seed);

    let junk = dir.path().join("junk.letw");
    fs::write(&junk, b"nope").unwrap();
    let r = letflow(&["detect", s(&a), "--weights", s(&junk)]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("junk.letw"));
    assert_eq!(letflow(&["detect", s(&a), "--weights", s(&dir.path().join("none"))]).code, 2);
}

#[test]
fn inference_scale_maps_points_to_full_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _, _) = synth(dir.path(), &["--width", "160", "--height", "128"]);
    let v = json(&["detect", s(&a), "--inference-scale", "0.5"]);
    let kps = v["keypoints"].as_array().unwrap();
    assert!(!kps.is_empty());
    for k in kps {
        let (x, y) = (k["x"].as_f64().unwrap(), k["y"].as_f64().unwrap());
        assert!(x > 0.0 && x < 159.0 && y > 0.0 && y < 127.0);
        // Half-resolution pixel centres land on x = 2i + 0.5 at full scale.
        assert!(((x - 0.5) / 2.0).fract().abs() < 1e-6);
    }
}

#[test]
fn sequence_compares_features_with_rgb() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "sequence", s(dir.path()), "--frames", "4", "--width", "96", "--height", "96"]);
    let v = json(&["sequence", s(dir.path()), "--max-points", "60", "--floor", "30"]);
    assert_eq!(v["frames"].as_array().unwrap().len(), 4);
    assert_eq!(v["features"].as_array().unwrap().len(), 3);
    assert_eq!(v["rgb"].as_array().unwrap().len(), 3);
    for f in v["features"].as_array().unwrap() {
        let rate = f["rate"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&rate));
    }
    let csv = ok(&["sequence", s(dir.path()), "--max-points", "60"]);
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("frame,features_attempted"));

    let lonely = tempfile::tempdir().unwrap();
    ok(&["synth", "sequence", s(lonely.path()), "--frames", "1", "--width", "32", "--height", "32"]);
    assert_eq!(letflow(&["sequence", s(lonely.path())]).code, 2);
}

#[test]
fn output_flag_writes_the_report_to_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _, _) = synth(dir.path(), &["--width", "64", "--height", "64"]);
    let out = dir.path().join("k.csv");
    let printed = ok(&["detect", s(&a), "-o", s(&out)]);
    assert!(printed.is_empty());
    assert_eq!(fs::read_to_string(&out).unwrap(), ok(&["detect", s(&a)]));
}
