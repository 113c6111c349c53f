//! Value-level keypoint, descriptor and feature losses.
//!
//! These evaluate how well score, feature and descriptor maps satisfy the
//! training objectives on a pair of images related by a known homography.
//! Nothing here computes gradients; the functions are analysis tools.
//!
//! All losses are computed in `f64`. Points whose projection leaves the other
//! image are skipped and counted rather than failing the whole evaluation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::Keypoint;
use crate::geometry::{GeometryError, Homography};
use crate::tensor::{Tensor, TensorError};

/// Pairing radius for the reprojection loss, in pixels.
pub const MATCH_RADIUS: f64 = 3.0;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("no pairable points from {0}")]
    NoPairs(Direction),
    #[error("{n}x{n} patch around ({x}, {y}) exceeds the {width}x{height} score map")]
    PatchOutOfBounds {
        x: f32,
        y: f32,
        n: usize,
        width: usize,
        height: usize,
    },
    #[error("descriptor has {found} entries, map has {expected} channels")]
    DimMismatch { expected: usize, found: usize },
    #[error("keypoint set of image {0} is empty")]
    NoKeypoints(char),
    #[error("score products sum to zero")]
    DegenerateScores,
    #[error("invalid loss parameter: {0}")]
    Parameter(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    AToB,
    BToA,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::AToB => "A to B",
            Direction::BToA => "B to A",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    /// Softmax / exponential temperature `t`.
    pub temperature: f64,
    /// Half-width `d` of the box mask used by the masked NRE.
    pub mask_radius: f64,
    /// Odd patch side `N` for the peaky losses.
    pub patch_size: usize,
    /// Standard deviation of the line-distance Gaussian.
    pub line_sigma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            k1: 1.0,
            k2: 0.5,
            k3: 1.0,
            temperature: 0.02,
            mask_radius: 80.0,
            patch_size: 5,
            line_sigma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.temperature > 0.0) {
            return Err(LossError::Parameter("temperature must be positive"));
        }
        if !(self.mask_radius >= 1.0) {
            return Err(LossError::Parameter("mask radius must be at least 1"));
        }
        if self.patch_size < 3 || self.patch_size % 2 == 0 {
            return Err(LossError::Parameter("patch size must be odd and at least 3"));
        }
        if !(self.line_sigma > 0.0) {
            return Err(LossError::Parameter("line sigma must be positive"));
        }
        Ok(())
    }
}

/// Keypoints of two images and the homography mapping A's pixels into B.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    homography: Homography,
    inverse: Homography,
    pub points_a: Vec<Keypoint>,
    pub points_b: Vec<Keypoint>,
}

impl CorrespondenceSet {
    pub fn new(homography: Homography, points_a: Vec<Keypoint>, points_b: Vec<Keypoint>) -> Result<Self, LossError> {
        let inverse = homography.inverse()?;
        Ok(Self {
            homography,
            inverse,
            points_a,
            points_b,
        })
    }

    pub fn homography(&self) -> &Homography {
        &self.homography
    }

    pub fn inverse(&self) -> &Homography {
        &self.inverse
    }

    /// The same correspondences seen from image B.
    pub fn swapped(&self) -> Self {
        Self {
            homography: self.inverse,
            inverse: self.homography,
            points_a: self.points_b.clone(),
            points_b: self.points_a.clone(),
        }
    }

    fn directions(&self) -> [(&[Keypoint], &[Keypoint], &Homography, Direction); 2] {
        [
            (&self.points_a, &self.points_b, &self.homography, Direction::AToB),
            (&self.points_b, &self.points_a, &self.inverse, Direction::BToA),
        ]
    }
}

fn project_kp(h: &Homography, k: &Keypoint) -> Result<(f64, f64), GeometryError> {
    h.project(k.x as f64, k.y as f64)
}

fn inside(x: f64, y: f64, map: &Tensor) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (map.width() - 1) as f64 && y <= (map.height() - 1) as f64
}

/// The four bilinear taps `(flat pixel index, weight)` at `(x, y)`, with the
/// same edge handling as [`Tensor::bilinear_sample`].
fn bilinear_taps(width: usize, height: usize, x: f64, y: f64) -> [(usize, f64); 4] {
    let x0 = (x.floor() as usize).min(width - 1);
    let y0 = (y.floor() as usize).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let ax = x - x0 as f64;
    let ay = y - y0 as f64;
    [
        (y0 * width + x0, (1.0 - ax) * (1.0 - ay)),
        (y0 * width + x1, ax * (1.0 - ay)),
        (y1 * width + x0, (1.0 - ax) * ay),
        (y1 * width + x1, ax * ay),
    ]
}

fn sample_f64(map: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let c = map.channels();
    let mut out = vec![0.0; c];
    for (idx, w) in bilinear_taps(map.width(), map.height(), x, y) {
        for (o, &v) in out.iter_mut().zip(&map.data()[idx * c..(idx + 1) * c]) {
            *o += w * v as f64;
        }
    }
    out
}

/// Unit descriptor of a keypoint: bilinear sample of its own map, renormalized.
fn keypoint_descriptor(map: &Tensor, k: &Keypoint) -> Option<Vec<f64>> {
    let (x, y) = (k.x as f64, k.y as f64);
    if !inside(x, y, map) {
        return None;
    }
    let mut d = sample_f64(map, x, y);
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        d.iter_mut().for_each(|v| *v /= norm);
    }
    Some(d)
}

fn dot_at(map: &Tensor, idx: usize, d: &[f64]) -> f64 {
    let c = map.channels();
    map.data()[idx * c..(idx + 1) * c]
        .iter()
        .zip(d)
        .map(|(&a, b)| a as f64 * b)
        .sum()
}

pub fn reprojection_loss(corr: &CorrespondenceSet) -> Result<f64, LossError> {
    reprojection_loss_with_radius(corr, MATCH_RADIUS)
}

/// Symmetric mean distance between projected points and their nearest
/// extracted counterpart within `radius`; unpaired points are left out.
pub fn reprojection_loss_with_radius(corr: &CorrespondenceSet, radius: f64) -> Result<f64, LossError> {
    let mut total = 0.0;
    for (from, to, h, dir) in corr.directions() {
        let mut sum = 0.0;
        let mut n = 0usize;
        for p in from {
            let Ok((px, py)) = project_kp(h, p) else { continue };
            let nearest = to
                .iter()
                .map(|q| (q.x as f64 - px).hypot(q.y as f64 - py))
                .fold(f64::INFINITY, f64::min);
            if nearest <= radius {
                sum += nearest;
                n += 1;
            }
        }
        if n == 0 {
            return Err(LossError::NoPairs(dir));
        }
        total += sum / n as f64;
    }
    Ok(total)
}

/// Integer top-left corner of the `n×n` patch centred on the keypoint's pixel.
fn patch_origin(score_map: &Tensor, kp: &Keypoint, n: usize) -> Result<(usize, usize), LossError> {
    let half = (n / 2) as i64;
    let cx = kp.x.round() as i64;
    let cy = kp.y.round() as i64;
    let err = LossError::PatchOutOfBounds {
        x: kp.x,
        y: kp.y,
        n,
        width: score_map.width(),
        height: score_map.height(),
    };
    if n % 2 == 0 || n == 0 {
        return Err(LossError::Parameter("patch size must be odd"));
    }
    if cx - half < 0 || cy - half < 0 || cx + half >= score_map.width() as i64 || cy + half >= score_map.height() as i64 {
        return Err(err);
    }
    Ok(((cx - half) as usize, (cy - half) as usize))
}

/// Per-pixel `∂L/∂s` of the peaky loss: `d(p, i, j) / N²`, row-major over the patch.
pub fn peaky_weights(score_map: &Tensor, kp: &Keypoint, n: usize) -> Result<Vec<f64>, LossError> {
    let (x0, y0) = patch_origin(score_map, kp, n)?;
    let nn = (n * n) as f64;
    let mut out = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let d = ((x0 + i) as f64 - kp.x as f64).hypot((y0 + j) as f64 - kp.y as f64);
            out.push(d / nn);
        }
    }
    Ok(out)
}

fn patch_scores(score_map: &Tensor, kp: &Keypoint, n: usize) -> Result<Vec<f64>, LossError> {
    let (x0, y0) = patch_origin(score_map, kp, n)?;
    let mut out = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            out.push(score_map.get(y0 + j, x0 + i, 0) as f64);
        }
    }
    Ok(out)
}

/// `(1/N²) Σ d · s` over the `N×N` patch around the keypoint.
pub fn peaky_loss(score_map: &Tensor, kp: &Keypoint, n: usize) -> Result<f64, LossError> {
    let w = peaky_weights(score_map, kp, n)?;
    let s = patch_scores(score_map, kp, n)?;
    Ok(w.iter().zip(&s).map(|(a, b)| a * b).sum())
}

/// The four line shapes, named by the line along which the weight stays at
/// its peak.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinePattern {
    /// Weight depends on the column offset `|x − p_x|`.
    Vertical,
    /// Weight depends on the row offset `|y − p_y|`.
    Horizontal,
    /// Weight depends on `|x + y − p_x − p_y|`.
    AntiDiagonal,
    /// Weight depends on `|x − y − p_x + p_y|`.
    Diagonal,
}

impl LinePattern {
    pub const ALL: [LinePattern; 4] = [
        LinePattern::Vertical,
        LinePattern::Horizontal,
        LinePattern::AntiDiagonal,
        LinePattern::Diagonal,
    ];

    fn offset(&self, dx: f64, dy: f64) -> f64 {
        match self {
            LinePattern::Vertical => dx.abs(),
            LinePattern::Horizontal => dy.abs(),
            LinePattern::AntiDiagonal => (dx + dy).abs(),
            LinePattern::Diagonal => (dx - dy).abs(),
        }
    }
}

#[inline]
fn gaussian(u: f64, sigma: f64) -> f64 {
    (-(u * u) / (2.0 * sigma * sigma)).exp()
}

/// Per-pixel `w_k · d / N²` for one line pattern, row-major over the patch.
pub fn line_pattern_weights(
    score_map: &Tensor,
    kp: &Keypoint,
    n: usize,
    line_sigma: f64,
    pattern: LinePattern,
) -> Result<Vec<f64>, LossError> {
    let (x0, y0) = patch_origin(score_map, kp, n)?;
    let nn = (n * n) as f64;
    let mut out = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let dx = (x0 + i) as f64 - kp.x as f64;
            let dy = (y0 + j) as f64 - kp.y as f64;
            out.push(gaussian(pattern.offset(dx, dy), line_sigma) * dx.hypot(dy) / nn);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinePeaky {
    /// Loss under each pattern, in [`LinePattern::ALL`] order.
    pub per_pattern: [f64; 4],
    pub selected: LinePattern,
    pub value: f64,
}

/// Evaluates all four line patterns and keeps the largest. Ties go to the
/// earlier pattern in [`LinePattern::ALL`].
pub fn line_peaky(score_map: &Tensor, kp: &Keypoint, n: usize, line_sigma: f64) -> Result<LinePeaky, LossError> {
    let s = patch_scores(score_map, kp, n)?;
    let mut per_pattern = [0.0; 4];
    for (slot, pattern) in per_pattern.iter_mut().zip(LinePattern::ALL) {
        let w = line_pattern_weights(score_map, kp, n, line_sigma, pattern)?;
        *slot = w.iter().zip(&s).map(|(a, b)| a * b).sum();
    }
    let mut best = 0;
    for k in 1..4 {
        if per_pattern[k] > per_pattern[best] {
            best = k;
        }
    }
    Ok(LinePeaky {
        per_pattern,
        selected: LinePattern::ALL[best],
        value: per_pattern[best],
    })
}

pub fn line_peaky_loss(score_map: &Tensor, kp: &Keypoint, n: usize, line_sigma: f64) -> Result<f64, LossError> {
    Ok(line_peaky(score_map, kp, n, line_sigma)?.value)
}

/// Per-pixel dot product between `descriptor` and every descriptor in the map.
pub fn similarity_map(descriptor: &[f32], desc_map: &Tensor) -> Result<Tensor, LossError> {
    if descriptor.len() != desc_map.channels() {
        return Err(LossError::DimMismatch {
            expected: desc_map.channels(),
            found: descriptor.len(),
        });
    }
    let data = desc_map
        .data()
        .chunks_exact(desc_map.channels())
        .map(|px| px.iter().zip(descriptor).map(|(a, b)| a * b).sum())
        .collect();
    Ok(Tensor::from_vec(desc_map.height(), desc_map.width(), 1, data)?)
}

/// `exp((sim − 1) / t)` elementwise.
pub fn match_probability_exp(sim: &Tensor, t: f64) -> Tensor {
    sim.map(|s| ((s as f64 - 1.0) / t).exp() as f32)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Softmax over all positions of `(sim − 1) / t`; the map sums to one.
pub fn softmax_probability_map(sim: &Tensor, t: f64) -> Tensor {
    let logits: Vec<f64> = sim.data().iter().map(|&s| (s as f64 - 1.0) / t).collect();
    let p = softmax(&logits);
    Tensor::from_vec(sim.height(), sim.width(), 1, p.into_iter().map(|v| v as f32).collect()).unwrap()
}

#[inline]
fn in_mask(x: usize, y: usize, center: (f64, f64), d: f64) -> bool {
    (x as f64 - center.0).abs().max((y as f64 - center.1).abs()) < d
}

/// Softmax of `(mask · sim − 1) / t` with a box mask of half-width `d`
/// centred at `center`. Masked-out positions keep logit `−1/t`.
pub fn masked_softmax_probability_map(sim: &Tensor, t: f64, center: (f64, f64), d: f64) -> Tensor {
    let w = sim.width();
    let logits: Vec<f64> = sim
        .data()
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let m = if in_mask(i % w, i / w, center, d) { 1.0 } else { 0.0 };
            (m * s as f64 - 1.0) / t
        })
        .collect();
    let p = softmax(&logits);
    Tensor::from_vec(sim.height(), w, 1, p.into_iter().map(|v| v as f32).collect()).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reliability {
    /// Loss over A's keypoints matched into B.
    pub a: f64,
    /// Loss over B's keypoints matched into A.
    pub b: f64,
    /// Keypoints whose projection left the other image.
    pub skipped: usize,
}

impl Reliability {
    pub fn mean(&self) -> f64 {
        0.5 * (self.a + self.b)
    }
}

/// Score-weighted unreliability `1 − r` of the keypoints, where `r` samples the
/// exponential matching map at the projected position.
pub fn reliability_loss(
    corr: &CorrespondenceSet,
    score_maps: (&Tensor, &Tensor),
    desc_maps: (&Tensor, &Tensor),
    t: f64,
) -> Result<Reliability, LossError> {
    if !(t > 0.0) {
        return Err(LossError::Parameter("temperature must be positive"));
    }
    let mut skipped = 0;
    let mut values = [0.0; 2];
    let maps = [
        (desc_maps.0, desc_maps.1, score_maps.1),
        (desc_maps.1, desc_maps.0, score_maps.0),
    ];
    for (k, ((from, _, h, dir), (own_desc, other_desc, other_score))) in corr.directions().into_iter().zip(maps).enumerate() {
        if from.is_empty() {
            return Err(LossError::NoKeypoints(if dir == Direction::AToB { 'A' } else { 'B' }));
        }
        check_dims(own_desc, other_desc)?;
        let mut terms = Vec::with_capacity(from.len());
        for p in from {
            let Some(d) = keypoint_descriptor(own_desc, p) else {
                skipped += 1;
                continue;
            };
            let proj = project_kp(h, p).ok().filter(|&(x, y)| inside(x, y, other_desc));
            let Some((px, py)) = proj else {
                skipped += 1;
                continue;
            };
            let r: f64 = bilinear_taps(other_desc.width(), other_desc.height(), px, py)
                .iter()
                .map(|&(idx, w)| w * ((dot_at(other_desc, idx, &d) - 1.0) / t).exp())
                .sum();
            let s_proj = sample_f64(other_score, px, py)[0];
            terms.push((p.score as f64 * s_proj, r));
        }
        let norm: f64 = terms.iter().map(|t| t.0).sum();
        if terms.is_empty() {
            continue;
        }
        if norm <= 0.0 {
            return Err(LossError::DegenerateScores);
        }
        let sum: f64 = terms.iter().map(|&(w, r)| w / norm * (1.0 - r)).sum();
        values[k] = sum / from.len() as f64;
    }
    Ok(Reliability {
        a: values[0],
        b: values[1],
        skipped,
    })
}

fn check_dims(a: &Tensor, b: &Tensor) -> Result<(), LossError> {
    if a.channels() != b.channels() {
        return Err(LossError::DimMismatch {
            expected: a.channels(),
            found: b.channels(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointLossParts {
    pub reprojection: f64,
    /// Mean line-peaky loss over the keypoints of both images.
    pub line_peaky: f64,
    /// Mean of the two directional reliability losses.
    pub reliability: f64,
}

impl KeypointLossParts {
    pub fn combine(&self, w: &LossWeights) -> f64 {
        w.k1 * self.reprojection + w.k2 * self.line_peaky + w.k3 * self.reliability
    }
}

pub fn keypoint_loss_parts(
    corr: &CorrespondenceSet,
    score_maps: (&Tensor, &Tensor),
    desc_maps: (&Tensor, &Tensor),
    w: &LossWeights,
) -> Result<KeypointLossParts, LossError> {
    w.validate()?;
    let reprojection = reprojection_loss(corr)?;
    let n = corr.points_a.len() + corr.points_b.len();
    if n == 0 {
        return Err(LossError::NoKeypoints('A'));
    }
    let mut lpk = 0.0;
    for (points, map) in [(&corr.points_a, score_maps.0), (&corr.points_b, score_maps.1)] {
        for p in points {
            lpk += line_peaky_loss(map, p, w.patch_size, w.line_sigma)?;
        }
    }
    let reliability = reliability_loss(corr, score_maps, desc_maps, w.temperature)?.mean();
    Ok(KeypointLossParts {
        reprojection,
        line_peaky: lpk / n as f64,
        reliability,
    })
}

/// `k1 · reprojection + k2 · mean line-peaky + k3 · mean reliability`.
pub fn keypoint_loss(
    corr: &CorrespondenceSet,
    score_maps: (&Tensor, &Tensor),
    desc_maps: (&Tensor, &Tensor),
    w: &LossWeights,
) -> Result<f64, LossError> {
    Ok(keypoint_loss_parts(corr, score_maps, desc_maps, w)?.combine(w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NreLoss {
    pub value: f64,
    /// Points left out because their projection (or descriptor sample) fell
    /// outside the image.
    pub skipped: usize,
}

/// Negative log of the softmax matching probability at each projection,
/// averaged over the keypoints of both images.
pub fn nre_loss(corr: &CorrespondenceSet, desc_maps: (&Tensor, &Tensor), t: f64) -> Result<NreLoss, LossError> {
    neural_reprojection(corr, desc_maps, t, None)
}

/// [`nre_loss`] with the similarity multiplied by a box mask of half-width `d`
/// centred at each query keypoint's own coordinates.
pub fn mnre_loss(corr: &CorrespondenceSet, feature_maps: (&Tensor, &Tensor), t: f64, d: f64) -> Result<NreLoss, LossError> {
    if !(d >= 1.0) {
        return Err(LossError::Parameter("mask radius must be at least 1"));
    }
    neural_reprojection(corr, feature_maps, t, Some(d))
}

fn neural_reprojection(
    corr: &CorrespondenceSet,
    maps: (&Tensor, &Tensor),
    t: f64,
    mask: Option<f64>,
) -> Result<NreLoss, LossError> {
    if !(t > 0.0) {
        return Err(LossError::Parameter("temperature must be positive"));
    }
    check_dims(maps.0, maps.1)?;
    let mut sums = [0.0f64; 2];
    let mut counted = 0usize;
    let mut skipped = 0usize;
    let pairs = [(maps.0, maps.1), (maps.1, maps.0)];
    for (k, ((from, _, h, _), (own, other))) in corr.directions().into_iter().zip(pairs).enumerate() {
        let (w, ht) = (other.width(), other.height());
        let mut logits = vec![0.0f64; w * ht];
        for p in from {
            let Some(d) = keypoint_descriptor(own, p) else {
                skipped += 1;
                continue;
            };
            let proj = project_kp(h, p).ok().filter(|&(x, y)| inside(x, y, other));
            let Some((px, py)) = proj else {
                skipped += 1;
                continue;
            };
            let center = (p.x as f64, p.y as f64);
            for (i, l) in logits.iter_mut().enumerate() {
                let sim = dot_at(other, i, &d);
                let m = match mask {
                    Some(r) if !in_mask(i % w, i / w, center, r) => 0.0,
                    _ => 1.0,
                };
                *l = (m * sim - 1.0) / t;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let num: f64 = bilinear_taps(w, ht, px, py)
                .iter()
                .map(|&(idx, wt)| wt * (logits[idx] - max).exp())
                .sum();
            sums[k] += -(num / z).ln();
            counted += 1;
        }
    }
    let value = if counted == 0 { 0.0 } else { (sums[0] + sums[1]) / counted as f64 };
    Ok(NreLoss { value, skipped })
}
