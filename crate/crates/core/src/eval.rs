//! Evaluation protocols on synthetic pairs with exact ground truth:
//! repeatability, correct tracking ratio and per-frame rejection rate.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{detect, detect_excluding, DetectorConfig, Keypoint};
use crate::geometry::{GeometryError, Homography};
use crate::letnet::{forward, LetNetWeights, NetError, NetOutput};
use crate::pyrflow::{build_pyramid, track_maps, track_pyramids, FlowError, TrackConfig, TrackResult};
use crate::tensor::{Tensor, TensorError};

/// Pixel threshold under which a re-detected point counts as repeated.
pub const REPEAT_THRESHOLD: f64 = 3.0;
/// Pixel tolerance for a correct track.
pub const TRACK_TOLERANCE: f64 = 1.0;
/// Schema tag written at the top of every JSON report.
pub const REPORT_SCHEMA: &str = "letflow.metrics.v1";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no keypoints in the region visible to both images")]
    NoSharedKeypoints,
    #[error("no tracking results to score")]
    NoResults,
    #[error("a sequence needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("frame {index} differs in shape from frame 0")]
    FrameShape { index: usize },
    #[error("images differ in shape: {a:?} vs {b:?}")]
    PairShape { a: (usize, usize, usize), b: (usize, usize, usize) },
    #[error("report invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("report serialization failed: {0}")]
    Serialize(String),
}

/// Two images and the ground-truth warp from A's pixels to B's.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub image_a: Tensor,
    pub image_b: Tensor,
    homography: Homography,
}

impl EvalPair {
    pub fn new(image_a: Tensor, image_b: Tensor, homography: Homography) -> Result<Self, EvalError> {
        homography.inverse()?;
        if !image_a.same_shape(&image_b) {
            return Err(EvalError::PairShape {
                a: (image_a.height(), image_a.width(), image_a.channels()),
                b: (image_b.height(), image_b.width(), image_b.channels()),
            });
        }
        Ok(Self {
            image_a,
            image_b,
            homography,
        })
    }

    pub fn homography(&self) -> &Homography {
        &self.homography
    }

    pub fn width(&self) -> usize {
        self.image_a.width()
    }

    pub fn height(&self) -> usize {
        self.image_a.height()
    }
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Seeded, continuous multi-octave value noise with independent channels.
///
/// The texture is a function of real coordinates, so an image warped by any
/// homography can be rendered exactly rather than resampled.
#[derive(Debug, Clone, PartialEq)]
pub struct ProceduralTexture {
    seed: u64,
    /// `(lattice period in pixels, amplitude)` per octave.
    octaves: Vec<(f64, f64)>,
    norm: f64,
}

impl ProceduralTexture {
    /// Octaves from 64 px down to 4 px.
    pub fn new(seed: u64) -> Self {
        Self::with_octaves(seed, &[(64.0, 1.0), (32.0, 0.8), (16.0, 0.6), (8.0, 0.45), (4.0, 0.3)])
    }

    pub fn with_octaves(seed: u64, octaves: &[(f64, f64)]) -> Self {
        let norm = octaves.iter().map(|o| o.1).sum::<f64>();
        Self {
            seed,
            octaves: octaves.to_vec(),
            norm,
        }
    }

    fn lattice(&self, octave: usize, channel: usize, ix: i64, iy: i64) -> f64 {
        // splitmix64 over the packed lattice coordinates
        let mut z = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((octave as u64) << 56 ^ (channel as u64) << 48)
            .wrapping_add((ix as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93))
            .wrapping_add((iy as u64).wrapping_mul(0xA076_1D64_78BD_642F));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Value in `[0, 1]` at real coordinates `(x, y)`.
    pub fn sample(&self, x: f64, y: f64, channel: usize) -> f64 {
        let mut v = 0.0;
        for (o, &(period, amp)) in self.octaves.iter().enumerate() {
            let (u, w) = (x / period, y / period);
            let (fx, fy) = (u.floor(), w.floor());
            let (ix, iy) = (fx as i64, fy as i64);
            let sx = smoothstep(u - fx);
            let sy = smoothstep(w - fy);
            let top = lerp(self.lattice(o, channel, ix, iy), self.lattice(o, channel, ix + 1, iy), sx);
            let bot = lerp(self.lattice(o, channel, ix, iy + 1), self.lattice(o, channel, ix + 1, iy + 1), sx);
            v += amp * lerp(top, bot, sy);
        }
        v / self.norm
    }

    /// Renders `height×width×channels`, evaluating pixel `(x, y)` at
    /// `inverse_warp(x, y)`.
    pub fn render(
        &self,
        height: usize,
        width: usize,
        channels: usize,
        inverse_warp: Option<&Homography>,
    ) -> Result<Tensor, EvalError> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = match inverse_warp {
                    Some(h) => h.project(x as f64, y as f64)?,
                    None => (x as f64, y as f64),
                };
                for c in 0..channels {
                    data.push(self.sample(u, v, c) as f32);
                }
            }
        }
        Ok(Tensor::from_vec(height, width, channels, data)?)
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SynthKind {
    /// B is A shifted by `(dx, dy)` pixels.
    Translation { dx: f64, dy: f64 },
    /// A mild random perspective warp about the image centre.
    Homography,
    /// A dimmed A multiplied by an elliptical brightness gain; identity geometry.
    Spotlight,
    /// A Gaussian-blurred copy of A; identity geometry.
    Blur { sigma: f64 },
}

/// Elliptical multiplicative gain field `base + (peak − base)·exp(−r²/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spotlight {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub angle: f64,
    pub base_gain: f64,
    pub peak_gain: f64,
}

impl Spotlight {
    fn random(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Self {
        let (w, h) = (width as f64, height as f64);
        Self {
            center: (rng.gen_range(0.35..0.65) * w, rng.gen_range(0.35..0.65) * h),
            semi_axes: (rng.gen_range(0.15..0.25) * w, rng.gen_range(0.15..0.25) * h),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            base_gain: rng.gen_range(0.9..1.0),
            peak_gain: rng.gen_range(2.0..3.0),
        }
    }

    pub fn gain(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.semi_axes.0;
        let v = (-s * dx + c * dy) / self.semi_axes.1;
        self.base_gain + (self.peak_gain - self.base_gain) * (-(u * u + v * v) / 2.0).exp()
    }

    /// Multiplies every channel by the gain and clips to `[0, 1]`.
    pub fn apply(&self, image: &Tensor) -> Tensor {
        let c = image.channels();
        let w = image.width();
        let mut out = image.clone();
        for (i, px) in out.data_mut().chunks_exact_mut(c).enumerate() {
            let g = self.gain((i % w) as f64, (i / w) as f64) as f32;
            px.iter_mut().for_each(|v| *v = (*v * g).clamp(0.0, 1.0));
        }
        out
    }
}

/// Brightness scale of the base image before a spotlight is applied, so a
/// gain of 3 stays inside the valid range.
const SPOTLIGHT_BASE_SCALE: f32 = 1.0 / 3.0;

/// Deterministic synthetic RGB pair with exact ground truth.
pub fn synth_pair(seed: u64, kind: SynthKind, width: usize, height: usize) -> Result<EvalPair, EvalError> {
    let texture = ProceduralTexture::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_CAFE);
    let image_a = texture.render(height, width, 3, None)?;
    match kind {
        SynthKind::Translation { dx, dy } => {
            let h = Homography::translation(dx, dy);
            let image_b = texture.render(height, width, 3, Some(&h.inverse()?))?;
            EvalPair::new(image_a, image_b, h)
        }
        SynthKind::Homography => {
            let h = random_homography(&mut rng, width, height);
            let image_b = texture.render(height, width, 3, Some(&h.inverse()?))?;
            EvalPair::new(image_a, image_b, h)
        }
        SynthKind::Spotlight => {
            let dim = image_a.map(|v| v * SPOTLIGHT_BASE_SCALE);
            let lit = Spotlight::random(&mut rng, width, height).apply(&dim);
            EvalPair::new(dim, lit, Homography::IDENTITY)
        }
        SynthKind::Blur { sigma } => {
            let blurred = gaussian_blur(&image_a, sigma)?;
            EvalPair::new(image_a, blurred, Homography::IDENTITY)
        }
    }
}

/// `T(c) · M · T(−c)` with `M` a small perturbation of the identity.
fn random_homography(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Homography {
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let scale = width.max(height) as f64;
    let m = Homography::from_row_major([
        1.0 + rng.gen_range(-0.08..0.08),
        rng.gen_range(-0.08..0.08),
        rng.gen_range(-0.05..0.05) * width as f64,
        rng.gen_range(-0.08..0.08),
        1.0 + rng.gen_range(-0.08..0.08),
        rng.gen_range(-0.05..0.05) * height as f64,
        rng.gen_range(-0.1..0.1) / scale,
        rng.gen_range(-0.1..0.1) / scale,
        1.0,
    ]);
    Homography::translation(cx, cy)
        .compose(&m)
        .compose(&Homography::translation(-cx, -cy))
}

/// Separable Gaussian blur with radius `ceil(3σ)` and replicated borders.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor, EvalError> {
    if !(sigma > 0.0) {
        return Ok(image.clone());
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let pass = |src: &Tensor, horizontal: bool| {
        Tensor::from_fn(h, w, c, |y, x, ch| {
            let mut acc = 0.0f64;
            for (k, &kv) in kernel.iter().enumerate() {
                let off = k as isize - r;
                let (yy, xx) = if horizontal {
                    (y, (x as isize + off).clamp(0, w as isize - 1) as usize)
                } else {
                    ((y as isize + off).clamp(0, h as isize - 1) as usize, x)
                };
                acc += kv * src.get(yy, xx, ch) as f64;
            }
            acc as f32
        })
    };
    let tmp = pass(image, true)?;
    Ok(pass(&tmp, false)?)
}

/// A static textured scene lit by a spotlight that drifts across it.
pub fn spotlight_sequence(seed: u64, frames: usize, width: usize, height: usize) -> Result<Vec<Tensor>, EvalError> {
    let base = ProceduralTexture::new(seed)
        .render(height, width, 3, None)?
        .map(|v| v * SPOTLIGHT_BASE_SCALE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5907_11CE);
    let mut light = Spotlight::random(&mut rng, width, height);
    let start = (0.25 * width as f64, 0.3 * height as f64);
    let end = (0.75 * width as f64, 0.7 * height as f64);
    Ok((0..frames)
        .map(|i| {
            let t = if frames > 1 { i as f64 / (frames - 1) as f64 } else { 0.0 };
            light.center = (lerp(start.0, end.0, t), lerp(start.1, end.1, t));
            light.apply(&base)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Repeatability {
    pub ratio: f64,
    pub repeated: usize,
    /// A's points whose projection lands inside B.
    pub visible_a: usize,
    /// B's points whose back-projection lands inside A.
    pub visible_b: usize,
}

fn inside_image(p: (f64, f64), width: usize, height: usize) -> bool {
    p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= (width - 1) as f64 && p.1 <= (height - 1) as f64
}

/// Fraction of keypoints re-detected within `threshold` under the pair's
/// homography. Pairs are assigned one-to-one, nearest first.
pub fn repeatability(
    pair: &EvalPair,
    keypoints_a: &[Keypoint],
    keypoints_b: &[Keypoint],
    threshold: f64,
) -> Result<Repeatability, EvalError> {
    let (w, h) = (pair.width(), pair.height());
    let inv = pair.homography.inverse()?;
    let mut projected = Vec::new();
    for k in keypoints_a {
        if let Ok(p) = pair.homography.project(k.x as f64, k.y as f64) {
            if inside_image(p, w, h) {
                projected.push(p);
            }
        }
    }
    let mut visible_b = Vec::new();
    for k in keypoints_b {
        if let Ok(p) = inv.project(k.x as f64, k.y as f64) {
            if inside_image(p, w, h) {
                visible_b.push((k.x as f64, k.y as f64));
            }
        }
    }
    let denom = projected.len().min(visible_b.len());
    if denom == 0 {
        return Err(EvalError::NoSharedKeypoints);
    }
    let mut candidates = Vec::new();
    for (i, a) in projected.iter().enumerate() {
        for (j, b) in visible_b.iter().enumerate() {
            let d = (a.0 - b.0).hypot(a.1 - b.1);
            if d < threshold {
                candidates.push((d, i, j));
            }
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; projected.len()];
    let mut used_b = vec![false; visible_b.len()];
    let mut repeated = 0;
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            repeated += 1;
        }
    }
    Ok(Repeatability {
        ratio: repeated as f64 / denom as f64,
        repeated,
        visible_a: projected.len(),
        visible_b: visible_b.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingScore {
    pub ratio: f64,
    pub correct: usize,
    pub attempted: usize,
}

/// A track is correct when converged and strictly within `tolerance` of the
/// origin's projection.
pub fn correct_tracking_ratio(
    pair: &EvalPair,
    results: &[TrackResult],
    tolerance: f64,
) -> Result<TrackingScore, EvalError> {
    if results.is_empty() {
        return Err(EvalError::NoResults);
    }
    let correct = results
        .iter()
        .filter(|r| r.is_converged() && is_correct(&pair.homography, r, tolerance))
        .count();
    Ok(TrackingScore {
        ratio: correct as f64 / results.len() as f64,
        correct,
        attempted: results.len(),
    })
}

fn is_correct(h: &Homography, r: &TrackResult, tolerance: f64) -> bool {
    match h.project(r.origin.x as f64, r.origin.y as f64) {
        Ok((x, y)) => (r.tracked_x as f64 - x).hypot(r.tracked_y as f64 - y) < tolerance,
        Err(_) => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRejection {
    /// Index of the destination frame.
    pub frame: usize,
    pub attempted: usize,
    pub rejected: usize,
    /// `rejected / attempted`, or 0 when nothing was tracked.
    pub rate: f64,
    /// Points added by re-detection on this frame.
    pub replenished: usize,
}

/// Per-frame rejection rate over a sequence of network outputs, tracking on
/// the feature maps.
pub fn rejection_rate(
    frames: &[NetOutput],
    detector: &DetectorConfig,
    tracker: &TrackConfig,
    floor: usize,
) -> Result<Vec<FrameRejection>, EvalError> {
    let maps: Vec<&Tensor> = frames.iter().map(|f| &f.feature_map).collect();
    let scores: Vec<&Tensor> = frames.iter().map(|f| &f.score_map).collect();
    rejection_rate_maps(&maps, &scores, detector, tracker, floor)
}

/// Frame-to-frame tracking on arbitrary maps (for example raw RGB), with
/// detection and replenishment on the given score maps. When fewer than
/// `floor` points survive a frame, new ones are detected away from them.
pub fn rejection_rate_maps(
    tracking_maps: &[&Tensor],
    score_maps: &[&Tensor],
    detector: &DetectorConfig,
    tracker: &TrackConfig,
    floor: usize,
) -> Result<Vec<FrameRejection>, EvalError> {
    if tracking_maps.len() < 2 || score_maps.len() != tracking_maps.len() {
        return Err(EvalError::TooFewFrames(tracking_maps.len().min(score_maps.len())));
    }
    for (i, (m, s)) in tracking_maps.iter().zip(score_maps).enumerate() {
        if !m.same_shape(tracking_maps[0]) || s.height() != m.height() || s.width() != m.width() {
            return Err(EvalError::FrameShape { index: i });
        }
    }
    let mut points = detect(score_maps[0], detector);
    let mut out = Vec::with_capacity(tracking_maps.len() - 1);
    for t in 1..tracking_maps.len() {
        let results = track_maps(tracking_maps[t - 1], tracking_maps[t], &points, tracker)?;
        let rejected = results.iter().filter(|r| !r.is_converged()).count();
        let mut survivors: Vec<Keypoint> = results
            .iter()
            .filter(|r| r.is_converged())
            .map(|r| Keypoint::new(r.tracked_x, r.tracked_y, r.origin.score))
            .collect();
        let mut replenished = 0;
        if survivors.len() < floor {
            let fresh = detect_excluding(score_maps[t], detector, &survivors);
            replenished = fresh.len();
            survivors.extend(fresh);
        }
        out.push(FrameRejection {
            frame: t,
            attempted: results.len(),
            rejected,
            rate: if results.is_empty() { 0.0 } else { rejected as f64 / results.len() as f64 },
            replenished,
        });
        points = survivors;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsCounts {
    pub detected_a: usize,
    pub detected_b: usize,
    /// Denominator of the repeatability ratio.
    pub shared: usize,
    pub repeated: usize,
    pub tracked: usize,
    pub correct: usize,
    pub rejected: usize,
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub forward: f64,
    pub detect: f64,
    pub pyramid: f64,
    pub track: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.forward + self.detect + self.pyramid + self.track
    }
}

/// Ratios are `None` when their denominator is zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub repeatability: Option<f64>,
    pub correct_tracking_ratio: Option<f64>,
    pub rejection_rate: Option<f64>,
    pub counts: MetricsCounts,
    pub timing_ms: StageTimings,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl MetricsReport {
    pub fn from_counts(counts: MetricsCounts, timing_ms: StageTimings) -> Self {
        Self {
            repeatability: ratio(counts.repeated, counts.shared),
            correct_tracking_ratio: ratio(counts.correct, counts.tracked),
            rejection_rate: ratio(counts.rejected, counts.tracked),
            counts,
            timing_ms,
        }
    }

    /// Pools the counts of several reports; timings are averaged.
    pub fn aggregate(reports: &[MetricsReport]) -> Self {
        let mut c = MetricsCounts::default();
        let mut t = StageTimings::default();
        for r in reports {
            c.detected_a += r.counts.detected_a;
            c.detected_b += r.counts.detected_b;
            c.shared += r.counts.shared;
            c.repeated += r.counts.repeated;
            c.tracked += r.counts.tracked;
            c.correct += r.counts.correct;
            c.rejected += r.counts.rejected;
            t.forward += r.timing_ms.forward;
            t.detect += r.timing_ms.detect;
            t.pyramid += r.timing_ms.pyramid;
            t.track += r.timing_ms.track;
        }
        if !reports.is_empty() {
            let n = reports.len() as f64;
            t = StageTimings {
                forward: t.forward / n,
                detect: t.detect / n,
                pyramid: t.pyramid / n,
                track: t.track / n,
            };
        }
        Self::from_counts(c, t)
    }

    /// Checks ratio ranges and count consistency.
    pub fn validate(&self) -> Result<(), EvalError> {
        let c = &self.counts;
        let bad = |m: &str| Err(EvalError::Invariant(m.to_string()));
        for r in [self.repeatability, self.correct_tracking_ratio, self.rejection_rate].into_iter().flatten() {
            if !(0.0..=1.0).contains(&r) {
                return bad("ratio outside [0, 1]");
            }
        }
        if c.repeated > c.shared || c.shared > c.detected_a.min(c.detected_b) {
            return bad("repeated <= shared <= detected");
        }
        if c.correct + c.rejected > c.tracked || c.tracked > c.detected_a {
            return bad("correct + rejected <= tracked <= detected_a");
        }
        Ok(())
    }

    /// Copy with every timing zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        Self {
            timing_ms: StageTimings::default(),
            ..*self
        }
    }
}

/// Flat CSV row; the header is the field names in order.
#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    label: &'a str,
    repeatability: Option<f64>,
    correct_tracking_ratio: Option<f64>,
    rejection_rate: Option<f64>,
    detected_a: usize,
    detected_b: usize,
    shared: usize,
    repeated: usize,
    tracked: usize,
    correct: usize,
    rejected: usize,
    forward_ms: f64,
    detect_ms: f64,
    pyramid_ms: f64,
    track_ms: f64,
}

/// CSV column names, in output order.
pub const CSV_HEADER: [&str; 15] = [
    "label",
    "repeatability",
    "correct_tracking_ratio",
    "rejection_rate",
    "detected_a",
    "detected_b",
    "shared",
    "repeated",
    "tracked",
    "correct",
    "rejected",
    "forward_ms",
    "detect_ms",
    "pyramid_ms",
    "track_ms",
];

/// Writes one CSV row per labelled report, with a header row. Missing ratios
/// are empty cells.
pub fn write_csv<W: Write>(writer: W, rows: &[(String, MetricsReport)]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    for (label, r) in rows {
        w.serialize(CsvRow {
            label,
            repeatability: r.repeatability,
            correct_tracking_ratio: r.correct_tracking_ratio,
            rejection_rate: r.rejection_rate,
            detected_a: r.counts.detected_a,
            detected_b: r.counts.detected_b,
            shared: r.counts.shared,
            repeated: r.counts.repeated,
            tracked: r.counts.tracked,
            correct: r.counts.correct,
            rejected: r.counts.rejected,
            forward_ms: r.timing_ms.forward,
            detect_ms: r.timing_ms.detect,
            pyramid_ms: r.timing_ms.pyramid,
            track_ms: r.timing_ms.track,
        })
        .map_err(|e| EvalError::Serialize(e.to_string()))?;
    }
    if rows.is_empty() {
        w.write_record(CSV_HEADER).map_err(|e| EvalError::Serialize(e.to_string()))?;
    }
    w.flush().map_err(|e| EvalError::Serialize(e.to_string()))?;
    Ok(())
}

/// Runs the full pipeline on a pair: forward on both images, detection on
/// both, then tracking A's points into B on the feature maps.
pub fn eval_pair(
    pair: &EvalPair,
    weights: &LetNetWeights,
    detector: &DetectorConfig,
    tracker: &TrackConfig,
) -> Result<MetricsReport, EvalError> {
    tracker.validate()?;
    let mut timing = StageTimings::default();
    let clock = Instant::now();
    let out_a = forward(&pair.image_a, weights)?;
    let out_b = forward(&pair.image_b, weights)?;
    timing.forward = ms(clock);

    let clock = Instant::now();
    let kps_a = detect(&out_a.score_map, detector);
    let kps_b = detect(&out_b.score_map, detector);
    timing.detect = ms(clock);

    let mut counts = MetricsCounts {
        detected_a: kps_a.len(),
        detected_b: kps_b.len(),
        ..Default::default()
    };
    match repeatability(pair, &kps_a, &kps_b, REPEAT_THRESHOLD) {
        Ok(r) => {
            counts.shared = r.visible_a.min(r.visible_b);
            counts.repeated = r.repeated;
        }
        Err(EvalError::NoSharedKeypoints) => {}
        Err(e) => return Err(e),
    }

    if !kps_a.is_empty() {
        let clock = Instant::now();
        let prev = build_pyramid(&out_a.feature_map, tracker.levels, tracker.window_radius)?;
        let next = build_pyramid(&out_b.feature_map, tracker.levels, tracker.window_radius)?;
        timing.pyramid = ms(clock);
        let clock = Instant::now();
        let results = track_pyramids(&prev, &next, &kps_a, tracker);
        timing.track = ms(clock);
        counts.tracked = results.len();
        counts.rejected = results.iter().filter(|r| !r.is_converged()).count();
        counts.correct = results
            .iter()
            .filter(|r| r.is_converged() && is_correct(&pair.homography, r, TRACK_TOLERANCE))
            .count();
    }
    let report = MetricsReport::from_counts(counts, timing);
    report.validate()?;
    Ok(report)
}

/// Work done for one incoming frame once the previous frame's network output
/// is known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameBench {
    pub timing_ms: StageTimings,
    pub keypoints: usize,
    pub converged: usize,
}

/// Times one front-end step: the network on `next_image`, detection on the
/// previous score map, both pyramids, and tracking into the new frame.
pub fn bench_frame(
    prev: &NetOutput,
    next_image: &Tensor,
    weights: &LetNetWeights,
    detector: &DetectorConfig,
    tracker: &TrackConfig,
) -> Result<FrameBench, EvalError> {
    tracker.validate()?;
    let (h, w) = (prev.feature_map.height(), prev.feature_map.width());
    if next_image.height() != h || next_image.width() != w {
        return Err(EvalError::PairShape {
            a: (h, w, 3),
            b: (next_image.height(), next_image.width(), next_image.channels()),
        });
    }
    let mut timing = StageTimings::default();
    let clock = Instant::now();
    let next = forward(next_image, weights)?;
    timing.forward = ms(clock);

    let clock = Instant::now();
    let kps = detect(&prev.score_map, detector);
    timing.detect = ms(clock);

    let clock = Instant::now();
    let a = build_pyramid(&prev.feature_map, tracker.levels, tracker.window_radius)?;
    let b = build_pyramid(&next.feature_map, tracker.levels, tracker.window_radius)?;
    timing.pyramid = ms(clock);

    let clock = Instant::now();
    let results = track_pyramids(&a, &b, &kps, tracker);
    timing.track = ms(clock);
    Ok(FrameBench {
        timing_ms: timing,
        keypoints: kps.len(),
        converged: results.iter().filter(|r| r.is_converged()).count(),
    })
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyrflow::TrackStatus;
    use proptest::prelude::{prop, prop_assert, proptest, ProptestConfig};

    fn kp(x: f32, y: f32) -> Keypoint {
        Keypoint::new(x, y, 1.0)
    }

    fn flat_pair(h: Homography) -> EvalPair {
        let img = Tensor::zeros(50, 50, 3).unwrap();
        EvalPair::new(img.clone(), img, h).unwrap()
    }

    #[test]
    fn texture_is_deterministic_continuous_and_bounded() {
        let t = ProceduralTexture::new(3);
        assert_eq!(t.sample(10.3, 4.7, 1), ProceduralTexture::new(3).sample(10.3, 4.7, 1));
        assert_ne!(t.sample(10.3, 4.7, 1), ProceduralTexture::new(4).sample(10.3, 4.7, 1));
        for i in 0..200 {
            let (x, y) = (i as f64 * 1.37 - 40.0, i as f64 * 0.61);
            let v = t.sample(x, y, 0);
            assert!((0.0..=1.0).contains(&v));
            assert!((t.sample(x + 1e-6, y, 0) - v).abs() < 1e-5);
        }
        // Lattice corners are continuous across cells.
        assert!((t.sample(64.0 - 1e-9, 5.0, 2) - t.sample(64.0, 5.0, 2)).abs() < 1e-6);
    }

    #[test]
    fn translation_pair_has_exact_ground_truth() {
        let p = synth_pair(1, SynthKind::Translation { dx: 5.0, dy: 0.0 }, 40, 30).unwrap();
        assert_eq!(*p.homography(), Homography::translation(5.0, 0.0));
        for y in 0..30 {
            for x in 5..40 {
                for c in 0..3 {
                    assert_eq!(p.image_b.get(y, x, c), p.image_a.get(y, x - 5, c));
                }
            }
        }
    }

    #[test]
    fn same_seed_same_pair() {
        for kind in [
            SynthKind::Translation { dx: 1.5, dy: -2.0 },
            SynthKind::Homography,
            SynthKind::Spotlight,
            SynthKind::Blur { sigma: 1.0 },
        ] {
            let a = synth_pair(9, kind, 48, 32).unwrap();
            let b = synth_pair(9, kind, 48, 32).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn homography_pair_matches_rendered_warp() {
        let p = synth_pair(2, SynthKind::Homography, 64, 48).unwrap();
        let tex = ProceduralTexture::new(2);
        let h = p.homography();
        assert!(h.is_invertible());
        // image_b at H(q) shows A's content at q.
        for &(qx, qy) in &[(20.0, 15.0), (33.0, 30.0)] {
            let (bx, by) = h.project(qx, qy).unwrap();
            let back = h.inverse().unwrap().project(bx, by).unwrap();
            assert!((tex.sample(back.0, back.1, 0) - tex.sample(qx, qy, 0)).abs() < 1e-9);
        }
        let (x, y) = (17usize, 9usize);
        let src = h.inverse().unwrap().project(x as f64, y as f64).unwrap();
        assert_eq!(p.image_b.get(y, x, 1), tex.sample(src.0, src.1, 1) as f32);
    }

    #[test]
    fn spotlight_changes_brightness_not_geometry() {
        let p = synth_pair(5, SynthKind::Spotlight, 64, 64).unwrap();
        assert_eq!(*p.homography(), Homography::IDENTITY);
        let differing = p
            .image_a
            .data()
            .iter()
            .zip(p.image_b.data())
            .filter(|(a, b)| (*a - *b).abs() > 1e-3)
            .count();
        assert!(differing > p.image_a.data().len() / 2);
        assert!(p.image_b.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn spotlight_gain_range() {
        let s = Spotlight {
            center: (10.0, 10.0),
            semi_axes: (4.0, 2.0),
            angle: 0.3,
            base_gain: 0.4,
            peak_gain: 2.5,
        };
        assert!((s.gain(10.0, 10.0) - 2.5).abs() < 1e-12);
        assert!((s.gain(1e4, 1e4) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn blur_preserves_constants_and_mean() {
        let c = Tensor::filled(10, 12, 3, 0.4).unwrap();
        let b = gaussian_blur(&c, 1.5).unwrap();
        assert!(b.data().iter().all(|v| (v - 0.4).abs() < 1e-6));
        let mut imp = Tensor::zeros(21, 21, 1).unwrap();
        imp.set(10, 10, 0, 1.0);
        let b = gaussian_blur(&imp, 1.0).unwrap();
        let total: f64 = b.data().iter().map(|&v| v as f64).sum();
        assert!((total - 1.0).abs() < 1e-5);
        assert!((b.get(10, 11, 0) - b.get(11, 10, 0)).abs() < 1e-7);
    }

    #[test]
    fn repeatability_trivial_cases() {
        let pair = flat_pair(Homography::IDENTITY);
        let pts = vec![kp(5.0, 5.0), kp(20.0, 30.0), kp(40.0, 10.0)];
        assert_eq!(repeatability(&pair, &pts, &pts, 3.0).unwrap().ratio, 1.0);
        let far: Vec<_> = pts.iter().map(|p| kp(p.x + 4.0, p.y)).collect();
        assert_eq!(repeatability(&pair, &pts, &far, 3.0).unwrap().ratio, 0.0);
        assert!(matches!(repeatability(&pair, &[], &pts, 3.0), Err(EvalError::NoSharedKeypoints)));
    }

    #[test]
    fn repeatability_excludes_points_projecting_outside() {
        let pair = flat_pair(Homography::translation(10.0, 0.0));
        let a = vec![kp(5.0, 5.0), kp(45.0, 5.0)];
        let b = vec![kp(15.0, 5.0), kp(2.0, 40.0), kp(30.0, 30.0)];
        let r = repeatability(&pair, &a, &b, 3.0).unwrap();
        assert_eq!((r.visible_a, r.visible_b, r.repeated), (1, 2, 1));
        assert_eq!(r.ratio, 1.0);
    }

    // Exhaustive matrix, repeatedly extracting the global minimum.
    fn repeat_oracle(h: &Homography, a: &[Keypoint], b: &[Keypoint], size: usize, t: f64) -> (usize, usize) {
        let inv = h.inverse().unwrap();
        let within = |p: (f64, f64)| p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= (size - 1) as f64 && p.1 <= (size - 1) as f64;
        let pa: Vec<_> = a.iter().map(|k| h.project(k.x as f64, k.y as f64).unwrap()).filter(|&p| within(p)).collect();
        let pb: Vec<_> = b
            .iter()
            .filter(|k| within(inv.project(k.x as f64, k.y as f64).unwrap()))
            .map(|k| (k.x as f64, k.y as f64))
            .collect();
        let mut d = vec![vec![f64::INFINITY; pb.len()]; pa.len()];
        for i in 0..pa.len() {
            for j in 0..pb.len() {
                d[i][j] = ((pa[i].0 - pb[j].0).powi(2) + (pa[i].1 - pb[j].1).powi(2)).sqrt();
            }
        }
        let mut count = 0;
        loop {
            let mut best = (t, usize::MAX, usize::MAX);
            for i in 0..pa.len() {
                for j in 0..pb.len() {
                    if d[i][j] < best.0 {
                        best = (d[i][j], i, j);
                    }
                }
            }
            if best.1 == usize::MAX {
                break;
            }
            count += 1;
            d[best.1].iter_mut().for_each(|v| *v = f64::INFINITY);
            d.iter_mut().for_each(|row| row[best.2] = f64::INFINITY);
        }
        (count, pa.len().min(pb.len()))
    }

    #[test]
    fn repeatability_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..30 {
            let h = Homography::from_row_major([
                1.0 + rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-0.1..0.1),
                1.0 + rng.gen_range(-0.1..0.1),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-1e-3..1e-3),
                rng.gen_range(-1e-3..1e-3),
                1.0,
            ]);
            let a: Vec<_> = (0..25).map(|_| kp(rng.gen_range(0.0..49.0), rng.gen_range(0.0..49.0))).collect();
            let noise: Vec<(f32, f32)> = (0..25).map(|_| (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0))).collect();
            let extra: Vec<_> = (0..5).map(|_| kp(rng.gen_range(0.0..49.0), rng.gen_range(0.0..49.0))).collect();
            let b: Vec<_> = a
                .iter()
                .zip(&noise)
                .map(|(k, n)| {
                    let (x, y) = h.project(k.x as f64, k.y as f64).unwrap();
                    kp(x as f32 + n.0, y as f32 + n.1)
                })
                .chain(extra)
                .collect();
            let pair = flat_pair(h);
            let r = repeatability(&pair, &a, &b, 3.0).unwrap();
            let (count, den) = repeat_oracle(&h, &a, &b, 50, 3.0);
            assert_eq!((r.repeated, r.visible_a.min(r.visible_b)), (count, den));
        }
    }

    #[test]
    fn repeatability_nearly_symmetric_on_small_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        for _ in 0..100 {
            let h = Homography::from_row_major([
                1.0 + rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-0.05..0.05),
                1.0 + rng.gen_range(-0.05..0.05),
                rng.gen_range(-3.0..3.0),
                0.0,
                0.0,
                1.0,
            ]);
            let a: Vec<_> = (0..8).map(|_| kp(rng.gen_range(8.0..41.0), rng.gen_range(8.0..41.0))).collect();
            let b: Vec<_> = a
                .iter()
                .map(|k| {
                    let (x, y) = h.project(k.x as f64, k.y as f64).unwrap();
                    kp(x as f32 + rng.gen_range(-1.5..1.5), y as f32 + rng.gen_range(-1.5..1.5))
                })
                .collect();
            let r = repeatability(&flat_pair(h), &a, &b, 3.0).unwrap();
            let s = repeatability(&flat_pair(h.inverse().unwrap()), &b, &a, 3.0).unwrap();
            assert!((s.repeated as i64 - r.repeated as i64).abs() <= 1);
        }
    }

    fn result(origin: Keypoint, x: f32, y: f32, status: TrackStatus) -> TrackResult {
        TrackResult {
            origin,
            tracked_x: x,
            tracked_y: y,
            status,
            residual: 0.0,
            fb_error: None,
        }
    }

    #[test]
    fn tracking_ratio_cases() {
        let pair = flat_pair(Homography::translation(2.0, 1.0));
        assert!(matches!(correct_tracking_ratio(&pair, &[], 1.0), Err(EvalError::NoResults)));
        let o = kp(10.0, 10.0);
        let all_singular = vec![result(o, 10.0, 10.0, TrackStatus::Singular); 4];
        assert_eq!(correct_tracking_ratio(&pair, &all_singular, 1.0).unwrap().ratio, 0.0);

        let rs = vec![
            result(o, 12.0, 11.0, TrackStatus::Converged),
            result(o, 12.5, 11.0, TrackStatus::Converged),
            result(o, 13.0, 11.0, TrackStatus::Converged),
            result(o, 12.0, 11.0, TrackStatus::FailedFbCheck),
        ];
        // Hand-looped check with a strict tolerance of 1.
        let mut correct = 0;
        for r in &rs {
            let (ex, ey) = (r.origin.x + 2.0, r.origin.y + 1.0);
            let d = ((r.tracked_x - ex).powi(2) + (r.tracked_y - ey).powi(2)).sqrt();
            if r.status == TrackStatus::Converged && d < 1.0 {
                correct += 1;
            }
        }
        let s = correct_tracking_ratio(&pair, &rs, 1.0).unwrap();
        assert_eq!(s.correct, correct);
        assert_eq!(s.correct, 2);
        assert_eq!(s.ratio, 0.5);
    }

    #[test]
    fn identical_frames_track_perfectly() {
        let p = synth_pair(4, SynthKind::Translation { dx: 0.0, dy: 0.0 }, 96, 96).unwrap();
        let pts: Vec<_> = (0..5).flat_map(|i| (0..5).map(move |j| kp(20.0 + 12.0 * i as f32, 20.0 + 12.0 * j as f32))).collect();
        let rs = track_maps(&p.image_a, &p.image_b, &pts, &TrackConfig::default()).unwrap();
        assert_eq!(correct_tracking_ratio(&p, &rs, 1.0).unwrap().ratio, 1.0);
    }

    #[test]
    fn static_sequence_has_no_rejections() {
        let frame = ProceduralTexture::new(8).render(96, 96, 3, None).unwrap();
        let out = forward(&frame, &LetNetWeights::chromaticity()).unwrap();
        let frames = vec![out.clone(), out.clone(), out];
        let det = DetectorConfig {
            max_points: 40,
            ..Default::default()
        };
        let rates = rejection_rate(&frames, &det, &TrackConfig::default(), 20).unwrap();
        assert_eq!(rates.len(), 2);
        for r in &rates {
            assert!(r.attempted > 0);
            assert_eq!(r.rejected, 0);
        }
    }

    #[test]
    fn blank_frames_reject_everything() {
        let tex = ProceduralTexture::new(8).render(96, 96, 3, None).unwrap();
        let blank = Tensor::filled(96, 96, 3, 1.0).unwrap();
        let w = LetNetWeights::chromaticity();
        let (t, b) = (forward(&tex, &w).unwrap(), forward(&blank, &w).unwrap());
        let frames = vec![t.clone(), b.clone(), t, b];
        let det = DetectorConfig {
            max_points: 40,
            ..Default::default()
        };
        let rates = rejection_rate(&frames, &det, &TrackConfig::default(), 20).unwrap();
        assert_eq!(rates[0].rate, 1.0);
        assert!(rates[0].attempted > 0);
        assert_eq!(rates[2].rate, 1.0);
        assert!(matches!(rejection_rate(&frames[..1], &det, &TrackConfig::default(), 5), Err(EvalError::TooFewFrames(1))));
    }

    #[test]
    fn replenishment_restores_points() {
        let frames = spotlight_sequence(12, 3, 96, 96).unwrap();
        let w = LetNetWeights::chromaticity();
        let outs: Vec<_> = frames.iter().map(|f| forward(f, &w).unwrap()).collect();
        let det = DetectorConfig {
            max_points: 30,
            ..Default::default()
        };
        let rates = rejection_rate(&outs, &det, &TrackConfig::default(), 1000).unwrap();
        for r in &rates {
            assert!(r.rate.is_finite() && (0.0..=1.0).contains(&r.rate));
            assert!(r.attempted <= 30);
        }
    }

    #[test]
    fn report_aggregation_and_validation() {
        let a = MetricsReport::from_counts(
            MetricsCounts { detected_a: 10, detected_b: 12, shared: 9, repeated: 6, tracked: 10, correct: 7, rejected: 2 },
            StageTimings { forward: 2.0, detect: 1.0, pyramid: 0.5, track: 1.5 },
        );
        let b = MetricsReport::from_counts(
            MetricsCounts { detected_a: 5, detected_b: 5, shared: 3, repeated: 3, tracked: 5, correct: 5, rejected: 0 },
            StageTimings { forward: 4.0, detect: 1.0, pyramid: 0.5, track: 0.5 },
        );
        a.validate().unwrap();
        let agg = MetricsReport::aggregate(&[a, b]);
        assert_eq!(agg.repeatability, Some(0.75));
        assert_eq!(agg.correct_tracking_ratio, Some(0.8));
        assert_eq!(agg.timing_ms.forward, 3.0);
        assert_eq!(agg.timing_ms.total(), 5.5);
        let broken = MetricsReport::from_counts(
            MetricsCounts { detected_a: 2, detected_b: 2, shared: 2, repeated: 3, ..Default::default() },
            StageTimings::default(),
        );
        assert!(broken.validate().is_err());
        assert_eq!(MetricsReport::default().repeatability, None);
    }

    #[test]
    fn csv_has_header_and_empty_missing_ratios() {
        let r = MetricsReport::from_counts(
            MetricsCounts { detected_a: 1, detected_b: 0, ..Default::default() },
            StageTimings::default(),
        );
        let mut buf = Vec::new();
        write_csv(&mut buf, &[("p0".to_string(), r)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        assert_eq!(lines.next().unwrap(), "p0,,,,1,0,0,0,0,0,0,0.0,0.0,0.0,0.0");
        let mut empty = Vec::new();
        write_csv(&mut empty, &[]).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap().trim_end(), CSV_HEADER.join(","));
    }

    #[test]
    fn eval_pair_report_is_consistent() {
        let p = synth_pair(6, SynthKind::Translation { dx: 2.5, dy: -1.0 }, 96, 96).unwrap();
        let det = DetectorConfig {
            max_points: 50,
            ..Default::default()
        };
        let r = eval_pair(&p, &LetNetWeights::chromaticity(), &det, &TrackConfig::default()).unwrap();
        r.validate().unwrap();
        assert!(r.counts.detected_a > 0 && r.counts.tracked == r.counts.detected_a);
        let again = eval_pair(&p, &LetNetWeights::chromaticity(), &det, &TrackConfig::default()).unwrap();
        assert_eq!(r.without_timing(), again.without_timing());
    }

    #[test]
    fn bench_frame_counts_and_shape_check() {
        let p = synth_pair(9, SynthKind::Translation { dx: 1.5, dy: 0.5 }, 112, 96).unwrap();
        let w = LetNetWeights::chromaticity();
        let det = DetectorConfig { max_points: 40, ..Default::default() };
        let prev = forward(&p.image_a, &w).unwrap();
        let b = bench_frame(&prev, &p.image_b, &w, &det, &TrackConfig::default()).unwrap();
        assert_eq!(b.keypoints, detect(&prev.score_map, &det).len());
        assert!(b.converged <= b.keypoints && b.converged > 0);
        assert!(b.timing_ms.total().is_finite());
        let small = Tensor::zeros(40, 40, 3).unwrap();
        assert!(matches!(
            bench_frame(&prev, &small, &w, &det, &TrackConfig::default()),
            Err(EvalError::PairShape { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn repeatability_ratio_in_unit_interval(
            a in prop::collection::vec((0.0f32..49.0, 0.0f32..49.0), 1..30),
            b in prop::collection::vec((0.0f32..49.0, 0.0f32..49.0), 1..30),
            dx in -10.0f64..10.0,
        ) {
            let pair = flat_pair(Homography::translation(dx, 0.0));
            let ka: Vec<_> = a.iter().map(|&(x, y)| kp(x, y)).collect();
            let kb: Vec<_> = b.iter().map(|&(x, y)| kp(x, y)).collect();
            if let Ok(r) = repeatability(&pair, &ka, &kb, 3.0) {
                prop_assert!((0.0..=1.0).contains(&r.ratio));
                prop_assert!(r.repeated <= r.visible_a.min(r.visible_b));
            }
        }
    }
}
