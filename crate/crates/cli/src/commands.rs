use std::borrow::Cow;
use std::fs;
use std::path::{Path, PathBuf};

use letflow::eval::{
    bench_frame, eval_pair, rejection_rate, rejection_rate_maps, spotlight_sequence, synth_pair, write_csv,
    EvalPair, FrameBench, FrameRejection, MetricsReport, StageTimings, SynthKind, REPORT_SCHEMA,
};
use letflow::letnet::{forward, LetNetWeights, NetOutput, LAYER_SHAPES};
use letflow::pyrflow::{self, TrackResult, TrackStatus};
use letflow::{detect, Keypoint, Tensor};
use serde::Serialize;
use serde_json::{json, Value};

use crate::cli::PairKind;
use crate::config::{Format, RunConfig};
use crate::error::CliError;
use crate::io::{list_frames, load_image, read_manifest, read_points, save_image};

/// Maps network-resolution pixel coordinates back to the full image.
#[derive(Debug, Clone, Copy)]
struct Rescale {
    sx: f32,
    sy: f32,
}

impl Rescale {
    fn point(&self, x: f32, y: f32) -> (f32, f32) {
        ((x + 0.5) * self.sx - 0.5, (y + 0.5) * self.sy - 0.5)
    }

    fn inverse_point(&self, x: f32, y: f32) -> (f32, f32) {
        ((x + 0.5) / self.sx - 0.5, (y + 0.5) / self.sy - 0.5)
    }

    fn distance(&self, d: f32) -> f32 {
        d * 0.5 * (self.sx + self.sy)
    }
}

fn scaled<'a>(image: &'a Tensor, scale: f64) -> Result<(Cow<'a, Tensor>, Rescale), CliError> {
    if scale >= 1.0 {
        return Ok((Cow::Borrowed(image), Rescale { sx: 1.0, sy: 1.0 }));
    }
    let h = ((image.height() as f64 * scale).round() as usize).max(1);
    let w = ((image.width() as f64 * scale).round() as usize).max(1);
    let small = image
        .resize_bilinear(h, w)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let r = Rescale {
        sx: image.width() as f32 / w as f32,
        sy: image.height() as f32 / h as f32,
    };
    Ok((Cow::Owned(small), r))
}

fn run_network(image: &Tensor, weights: &LetNetWeights) -> Result<NetOutput, CliError> {
    forward(image, weights).map_err(|e| CliError::Internal(e.to_string()))
}

fn finite(v: f32) -> Option<f32> {
    v.is_finite().then_some(v)
}

fn to_json(value: &Value) -> Result<Vec<u8>, CliError> {
    let mut body = serde_json::to_vec_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    body.push(b'\n');
    Ok(body)
}

fn to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Internal(e.to_string());
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.serialize(r).map_err(fail)?;
    }
    w.into_inner().map_err(|e| CliError::Internal(e.to_string()))
}

/// Like `serde_json::to_value`, but single-precision fields keep their
/// shortest decimal form instead of being widened.
fn jv<T: Serialize + ?Sized>(v: &T) -> Value {
    serde_json::to_string(v)
        .and_then(|s| serde_json::from_str(&s))
        .unwrap_or(Value::Null)
}

fn config_json(cfg: &RunConfig) -> Value {
    jv(cfg)
}

pub fn detect_cmd(cfg: &RunConfig, image_path: &Path) -> Result<Vec<u8>, CliError> {
    let weights = cfg.load_weights()?;
    let image = load_image(image_path)?;
    let (small, rescale) = scaled(&image, cfg.inference_scale)?;
    let out = run_network(&small, &weights)?;
    let keypoints: Vec<Keypoint> = detect(&out.score_map, &cfg.detector)
        .into_iter()
        .map(|k| {
            let (x, y) = rescale.point(k.x, k.y);
            Keypoint::new(x, y, k.score)
        })
        .collect();
    match cfg.format {
        Format::Csv => to_csv(&keypoints, &["x", "y", "score"]),
        Format::Json => to_json(&json!({
            "schema": "letflow.detect.v1",
            "config": config_json(cfg),
            "image": { "path": image_path, "width": image.width(), "height": image.height() },
            "keypoints": jv(&keypoints),
        })),
    }
}

#[derive(Debug, Serialize)]
struct TrackRecord {
    origin_x: f32,
    origin_y: f32,
    score: f32,
    tracked_x: Option<f32>,
    tracked_y: Option<f32>,
    status: &'static str,
    residual: Option<f32>,
    fb_error: Option<f32>,
}

const TRACK_HEADER: [&str; 8] = [
    "origin_x", "origin_y", "score", "tracked_x", "tracked_y", "status", "residual", "fb_error",
];

fn track_record(r: &TrackResult, rescale: Rescale) -> TrackRecord {
    let (ox, oy) = rescale.point(r.origin.x, r.origin.y);
    let (tx, ty) = rescale.point(r.tracked_x, r.tracked_y);
    TrackRecord {
        origin_x: ox,
        origin_y: oy,
        score: r.origin.score,
        tracked_x: finite(tx),
        tracked_y: finite(ty),
        status: r.status.as_str(),
        residual: finite(r.residual),
        fb_error: r.fb_error.map(|d| rescale.distance(d)),
    }
}

fn status_counts(results: &[TrackResult]) -> Value {
    let all = [
        TrackStatus::Converged,
        TrackStatus::OutOfBounds,
        TrackStatus::Singular,
        TrackStatus::Diverged,
        TrackStatus::FailedFbCheck,
    ];
    let mut map = serde_json::Map::new();
    for s in all {
        map.insert(s.as_str().into(), results.iter().filter(|r| r.status == s).count().into());
    }
    Value::Object(map)
}

pub fn track_cmd(cfg: &RunConfig, path_a: &Path, path_b: &Path, points: Option<&Path>) -> Result<Vec<u8>, CliError> {
    let weights = cfg.load_weights()?;
    let a = load_image(path_a)?;
    let b = load_image(path_b)?;
    if !a.same_shape(&b) {
        return Err(CliError::Shape {
            a: (a.height(), a.width()),
            b: (b.height(), b.width()),
        });
    }
    let (sa, rescale) = scaled(&a, cfg.inference_scale)?;
    let (sb, _) = scaled(&b, cfg.inference_scale)?;
    let out_a = run_network(&sa, &weights)?;
    let out_b = run_network(&sb, &weights)?;
    let keypoints = match points {
        Some(p) => read_points(p)?
            .into_iter()
            .map(|k| {
                let (x, y) = rescale.inverse_point(k.x, k.y);
                Keypoint::new(x, y, k.score)
            })
            .collect(),
        None => detect(&out_a.score_map, &cfg.detector),
    };
    let results = pyrflow::track(&out_a, &out_b, &keypoints, &cfg.tracker)
        .map_err(|e| CliError::Eval(e.into()))?;
    let records: Vec<TrackRecord> = results.iter().map(|r| track_record(r, rescale)).collect();
    match cfg.format {
        Format::Csv => to_csv(&records, &TRACK_HEADER),
        Format::Json => to_json(&json!({
            "schema": "letflow.track.v1",
            "config": config_json(cfg),
            "images": [path_a, path_b],
            "status_counts": status_counts(&results),
            "tracks": jv(&records),
        })),
    }
}

pub fn eval_cmd(cfg: &RunConfig, manifest: &Path) -> Result<Vec<u8>, CliError> {
    let weights = cfg.load_weights()?;
    let entries = read_manifest(manifest)?;
    let mut rows = Vec::with_capacity(entries.len() + 1);
    let mut pairs = Vec::with_capacity(entries.len());
    for e in &entries {
        let pair = EvalPair::new(load_image(&e.image_a)?, load_image(&e.image_b)?, e.homography)?;
        let report = eval_pair(&pair, &weights, &cfg.detector, &cfg.tracker)?;
        pairs.push(json!({
            "line": e.line,
            "image_a": e.image_a,
            "image_b": e.image_b,
            "report": jv(&report),
        }));
        rows.push((format!("line {}", e.line), report));
    }
    let reports: Vec<MetricsReport> = rows.iter().map(|r| r.1).collect();
    let aggregate = MetricsReport::aggregate(&reports);
    aggregate.validate()?;
    match cfg.format {
        Format::Csv => {
            rows.push(("aggregate".into(), aggregate));
            let mut body = Vec::new();
            write_csv(&mut body, &rows)?;
            Ok(body)
        }
        Format::Json => to_json(&json!({
            "schema": REPORT_SCHEMA,
            "config": config_json(cfg),
            "pairs": pairs,
            "aggregate": jv(&aggregate),
        })),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-stage medians over the runs, and the median of the per-run totals.
pub fn median_timings(runs: &[FrameBench]) -> (StageTimings, f64) {
    let stage = |f: fn(&StageTimings) -> f64| median(runs.iter().map(|r| f(&r.timing_ms)).collect());
    let t = StageTimings {
        forward: stage(|t| t.forward),
        detect: stage(|t| t.detect),
        pyramid: stage(|t| t.pyramid),
        track: stage(|t| t.track),
    };
    (t, stage(|t| t.total()))
}

pub fn bench_cmd(cfg: &RunConfig, path_a: &Path, path_b: Option<&Path>, iterations: u32) -> Result<Vec<u8>, CliError> {
    let weights = cfg.load_weights()?;
    let a = load_image(path_a)?;
    let b = match path_b {
        Some(p) => load_image(p)?,
        None => a.clone(),
    };
    if !a.same_shape(&b) {
        return Err(CliError::Shape {
            a: (a.height(), a.width()),
            b: (b.height(), b.width()),
        });
    }
    let (sa, _) = scaled(&a, cfg.inference_scale)?;
    let (sb, _) = scaled(&b, cfg.inference_scale)?;
    let prev = run_network(&sa, &weights)?;
    let runs = (0..iterations)
        .map(|_| bench_frame(&prev, &sb, &weights, &cfg.detector, &cfg.tracker))
        .collect::<Result<Vec<_>, _>>()?;
    let first = runs[0];
    if runs.iter().any(|r| r.keypoints != first.keypoints || r.converged != first.converged) {
        return Err(CliError::Internal("benchmark runs disagree on their results".into()));
    }
    let (t, total) = median_timings(&runs);
    match cfg.format {
        Format::Csv => to_csv(
            &[(iterations, first.keypoints, first.converged, t.forward, t.detect, t.pyramid, t.track, total)],
            &[
                "iterations", "keypoints", "converged", "forward_ms", "detect_ms", "pyramid_ms", "track_ms", "total_ms",
            ],
        ),
        Format::Json => to_json(&json!({
            "schema": "letflow.bench.v1",
            "config": config_json(cfg),
            "image": { "width": sa.width(), "height": sa.height() },
            "iterations": iterations,
            "keypoints": first.keypoints,
            "converged": first.converged,
            "timing_ms": {
                "forward": t.forward,
                "detect": t.detect,
                "pyramid": t.pyramid,
                "track": t.track,
                "total": total,
            },
        })),
    }
}

#[derive(Debug, Serialize)]
struct SequenceRow {
    frame: usize,
    features_attempted: usize,
    features_rejected: usize,
    features_rate: f64,
    features_replenished: usize,
    rgb_attempted: usize,
    rgb_rejected: usize,
    rgb_rate: f64,
    rgb_replenished: usize,
}

const SEQUENCE_HEADER: [&str; 9] = [
    "frame",
    "features_attempted",
    "features_rejected",
    "features_rate",
    "features_replenished",
    "rgb_attempted",
    "rgb_rejected",
    "rgb_rate",
    "rgb_replenished",
];

pub fn sequence_cmd(cfg: &RunConfig, dir: &Path, floor: usize) -> Result<Vec<u8>, CliError> {
    let weights = cfg.load_weights()?;
    let paths = list_frames(dir)?;
    let images = paths.iter().map(|p| load_image(p)).collect::<Result<Vec<_>, _>>()?;
    let outputs = images
        .iter()
        .map(|im| run_network(im, &weights))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(index) = images.iter().position(|im| !im.same_shape(&images[0])) {
        return Err(CliError::Eval(letflow::eval::EvalError::FrameShape { index }));
    }
    let features = rejection_rate(&outputs, &cfg.detector, &cfg.tracker, floor)?;
    let maps: Vec<&Tensor> = images.iter().collect();
    let scores: Vec<&Tensor> = outputs.iter().map(|o| &o.score_map).collect();
    let rgb = rejection_rate_maps(&maps, &scores, &cfg.detector, &cfg.tracker, floor)?;
    let rows: Vec<SequenceRow> = features
        .iter()
        .zip(&rgb)
        .map(|(f, r): (&FrameRejection, &FrameRejection)| SequenceRow {
            frame: f.frame,
            features_attempted: f.attempted,
            features_rejected: f.rejected,
            features_rate: f.rate,
            features_replenished: f.replenished,
            rgb_attempted: r.attempted,
            rgb_rejected: r.rejected,
            rgb_rate: r.rate,
            rgb_replenished: r.replenished,
        })
        .collect();
    match cfg.format {
        Format::Csv => to_csv(&rows, &SEQUENCE_HEADER),
        Format::Json => to_json(&json!({
            "schema": "letflow.sequence.v1",
            "config": config_json(cfg),
            "floor": floor,
            "frames": paths,
            "features": jv(&features),
            "rgb": jv(&rgb),
        })),
    }
}

pub struct PairSpec {
    pub kind: PairKind,
    pub dx: f64,
    pub dy: f64,
    pub sigma: f64,
    pub width: usize,
    pub height: usize,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Write {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })
}

fn check_size(width: usize, height: usize) -> Result<(), CliError> {
    if width < 8 || height < 8 {
        return Err(CliError::Config(format!("synthetic images must be at least 8×8, got {width}×{height}")));
    }
    Ok(())
}

pub fn synth_pair_cmd(cfg: &RunConfig, out_dir: &Path, spec: &PairSpec) -> Result<Vec<u8>, CliError> {
    check_size(spec.width, spec.height)?;
    let kind = match spec.kind {
        PairKind::Translation => SynthKind::Translation { dx: spec.dx, dy: spec.dy },
        PairKind::Homography => SynthKind::Homography,
        PairKind::Spotlight => SynthKind::Spotlight,
        PairKind::Blur => SynthKind::Blur { sigma: spec.sigma },
    };
    let pair = synth_pair(cfg.seed, kind, spec.width, spec.height)?;
    create_dir(out_dir)?;
    save_image(&out_dir.join("a.png"), &pair.image_a)?;
    save_image(&out_dir.join("b.png"), &pair.image_b)?;
    let h = pair.homography().to_row_major();
    let numbers: Vec<String> = h.iter().map(|v| v.to_string()).collect();
    let line = format!("a.png b.png {}\n", numbers.join(" "));
    let manifest = out_dir.join("manifest.txt");
    fs::write(&manifest, &line).map_err(|e| CliError::Write {
        path: manifest.clone(),
        reason: e.to_string(),
    })?;
    match cfg.format {
        Format::Csv => Ok(line.into_bytes()),
        Format::Json => to_json(&json!({
            "schema": "letflow.synth.v1",
            "seed": cfg.seed,
            "kind": kind,
            "manifest": manifest,
            "homography": h,
        })),
    }
}

pub fn synth_sequence_cmd(
    cfg: &RunConfig,
    out_dir: &Path,
    frames: usize,
    width: usize,
    height: usize,
) -> Result<Vec<u8>, CliError> {
    check_size(width, height)?;
    let images = spotlight_sequence(cfg.seed, frames, width, height)?;
    create_dir(out_dir)?;
    let mut paths: Vec<PathBuf> = Vec::with_capacity(images.len());
    for (i, im) in images.iter().enumerate() {
        let p = out_dir.join(format!("frame_{i:04}.png"));
        save_image(&p, im)?;
        paths.push(p);
    }
    match cfg.format {
        Format::Csv => {
            let rows: Vec<(String,)> = paths.iter().map(|p| (p.display().to_string(),)).collect();
            to_csv(&rows, &["path"])
        }
        Format::Json => to_json(&json!({
            "schema": "letflow.synth.v1",
            "seed": cfg.seed,
            "kind": "spotlight_sequence",
            "frames": paths,
        })),
    }
}

pub fn weights_init_cmd(cfg: &RunConfig, path: &Path) -> Result<Vec<u8>, CliError> {
    let weights = cfg.load_weights()?;
    weights.save(path).map_err(|e| CliError::Write {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    weights_summary(cfg, path, &weights)
}

pub fn weights_show_cmd(cfg: &RunConfig, path: &Path) -> Result<Vec<u8>, CliError> {
    let weights = LetNetWeights::load(path).map_err(|source| CliError::Weights {
        path: path.to_path_buf(),
        source,
    })?;
    weights_summary(cfg, path, &weights)
}

#[derive(Debug, Serialize)]
struct LayerRow {
    layer: &'static str,
    kernel: usize,
    inputs: usize,
    outputs: usize,
    weight_sum: f64,
    bias_sum: f64,
}

fn weights_summary(cfg: &RunConfig, path: &Path, weights: &LetNetWeights) -> Result<Vec<u8>, CliError> {
    let rows: Vec<LayerRow> = LAYER_SHAPES
        .iter()
        .zip(weights.layers())
        .map(|(&(name, k, i, o), layer)| LayerRow {
            layer: name,
            kernel: k,
            inputs: i,
            outputs: o,
            weight_sum: layer.weights().iter().map(|&v| v as f64).sum(),
            bias_sum: layer.bias().iter().map(|&v| v as f64).sum(),
        })
        .collect();
    match cfg.format {
        Format::Csv => to_csv(&rows, &["layer", "kernel", "inputs", "outputs", "weight_sum", "bias_sum"]),
        Format::Json => to_json(&json!({
            "schema": "letflow.weights.v1",
            "path": path,
            "layers": jv(&rows),
        })),
    }
}
