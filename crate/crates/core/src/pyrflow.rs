//! Coarse-to-fine Lucas-Kanade over multi-channel maps.
//!
//! The data term is constancy of every channel of the tracked map (the
//! network's unit-norm feature map, or raw RGB for the classical baseline).
//! Each level accumulates a single 2×2 normal system over the whole window and
//! all channels:
//!
//! ```text
//! G = Σ [Fx Fy]ᵀ [Fx Fy]        b = Σ [Fx Fy]ᵀ (prev − next)
//! ```
//!
//! and iterates `v ← v + G⁻¹ b` with `next` re-sampled at the current estimate.
//! Window samples outside the image replicate the border.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::Keypoint;
use crate::letnet::NetOutput;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("pyramid with {requested} levels needs a top level of at least {min_size} px; at most {max_feasible} levels fit")]
    TooManyLevels {
        requested: usize,
        max_feasible: usize,
        min_size: usize,
    },
    #[error("frames differ in shape: {prev:?} vs {next:?}")]
    ShapeMismatch {
        prev: (usize, usize, usize),
        next: (usize, usize, usize),
    },
    #[error("invalid tracker configuration: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    /// The window is `(2r + 1)²` pixels.
    pub window_radius: usize,
    pub max_iterations: usize,
    /// Convergence threshold on the update norm, in pixels of the current level.
    pub epsilon: f32,
    pub levels: usize,
    /// Lower bound on `λ_min(G) / window_area`.
    pub min_eigen_threshold: f32,
    /// Forward–backward round-trip tolerance in pixels; `None` disables the check.
    pub fb_threshold: Option<f32>,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            window_radius: 10,
            max_iterations: 30,
            epsilon: 0.01,
            levels: 3,
            min_eigen_threshold: 1e-4,
            fb_threshold: Some(1.0),
        }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.window_radius < 1 {
            return Err(FlowError::Config("window_radius must be at least 1"));
        }
        if self.levels < 1 {
            return Err(FlowError::Config("levels must be at least 1"));
        }
        if !(self.epsilon > 0.0) {
            return Err(FlowError::Config("epsilon must be positive"));
        }
        if let Some(t) = self.fb_threshold {
            if !(t >= 0.0) {
                return Err(FlowError::Config("fb_threshold must be non-negative"));
            }
        }
        Ok(())
    }

    fn window_side(&self) -> usize {
        2 * self.window_radius + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackStatus {
    Converged,
    OutOfBounds,
    Singular,
    Diverged,
    #[serde(rename = "FailedFBCheck")]
    FailedFbCheck,
}

impl TrackStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrackStatus::Converged => "Converged",
            TrackStatus::OutOfBounds => "OutOfBounds",
            TrackStatus::Singular => "Singular",
            TrackStatus::Diverged => "Diverged",
            TrackStatus::FailedFbCheck => "FailedFBCheck",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub origin: Keypoint,
    pub tracked_x: f32,
    pub tracked_y: f32,
    pub status: TrackStatus,
    /// Mean absolute per-channel difference over the final window.
    pub residual: f32,
    /// Round-trip distance, when the forward–backward check ran and the
    /// backward track converged.
    pub fb_error: Option<f32>,
}

impl TrackResult {
    pub fn displacement(&self) -> (f32, f32) {
        (self.tracked_x - self.origin.x, self.tracked_y - self.origin.y)
    }

    pub fn is_converged(&self) -> bool {
        self.status == TrackStatus::Converged
    }
}

/// One pyramid level: the map plus its central-difference gradients, stored
/// with a replicated border so every window the tracker visits is a plain
/// contiguous read.
#[derive(Debug, Clone)]
pub struct PyramidLevel {
    height: usize,
    width: usize,
    pad: usize,
    map: Tensor,
    grad_x: Tensor,
    grad_y: Tensor,
}

impl PyramidLevel {
    fn new(map: &Tensor, pad: usize) -> Self {
        let (h, w, c) = (map.height(), map.width(), map.channels());
        let padded = pad_replicate(map, pad);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let stride = pw * c;
        let mut gx = vec![0.0f32; ph * stride];
        let mut gy = vec![0.0f32; ph * stride];
        // Inside the padded map the clamped neighbours are already in place.
        let d = padded.data();
        let (lo, hi) = (pad * c, (pad + w) * c);
        for py in pad..pad + h {
            let row = &d[py * stride..(py + 1) * stride];
            let up = &d[(py - 1) * stride..py * stride];
            let down = &d[(py + 1) * stride..(py + 2) * stride];
            let gxr = &mut gx[py * stride..(py + 1) * stride];
            let gyr = &mut gy[py * stride..(py + 1) * stride];
            for j in lo..hi {
                gxr[j] = 0.5 * (row[j + c] - row[j - c]);
                gyr[j] = 0.5 * (down[j] - up[j]);
            }
        }
        for g in [&mut gx, &mut gy] {
            replicate_border(g, h, w, c, pad);
        }
        Self {
            height: h,
            width: w,
            pad,
            map: padded,
            grad_x: Tensor::from_vec(ph, pw, c, gx).unwrap(),
            grad_y: Tensor::from_vec(ph, pw, c, gy).unwrap(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.map.channels()
    }

    pub fn map(&self) -> Tensor {
        self.crop(&self.map)
    }

    pub fn grad_x(&self) -> Tensor {
        self.crop(&self.grad_x)
    }

    pub fn grad_y(&self) -> Tensor {
        self.crop(&self.grad_y)
    }

    fn crop(&self, t: &Tensor) -> Tensor {
        let p = self.pad;
        Tensor::from_fn(self.height, self.width, t.channels(), |y, x, c| t.get(y + p, x + p, c)).unwrap()
    }

    fn contains(&self, x: f32, y: f32, slack: f32) -> bool {
        x.is_finite()
            && y.is_finite()
            && x >= -slack
            && y >= -slack
            && x <= (self.width - 1) as f32 + slack
            && y <= (self.height - 1) as f32 + slack
    }
}

/// Copies `t` into a larger tensor whose extra `pad` pixels on every side
/// repeat the nearest edge pixel.
fn pad_replicate(t: &Tensor, pad: usize) -> Tensor {
    let (h, w, c) = (t.height(), t.width(), t.channels());
    let pw = w + 2 * pad;
    let mut data = Vec::with_capacity((h + 2 * pad) * pw * c);
    for py in 0..h + 2 * pad {
        let y = py.saturating_sub(pad).min(h - 1);
        let row = &t.data()[y * w * c..(y + 1) * w * c];
        for _ in 0..pad {
            data.extend_from_slice(&row[..c]);
        }
        data.extend_from_slice(row);
        for _ in 0..pad {
            data.extend_from_slice(&row[(w - 1) * c..]);
        }
    }
    Tensor::from_vec(h + 2 * pad, pw, c, data).unwrap()
}

/// Fills the `pad`-wide frame of a padded buffer from its `h × w` interior.
fn replicate_border(data: &mut [f32], h: usize, w: usize, c: usize, pad: usize) {
    let stride = (w + 2 * pad) * c;
    for py in pad..pad + h {
        let row = &mut data[py * stride..(py + 1) * stride];
        let (first, last) = (pad * c, (pad + w - 1) * c);
        for x in 0..pad {
            row.copy_within(first..first + c, x * c);
            row.copy_within(last..last + c, (pad + w + x) * c);
        }
    }
    for py in 0..pad {
        data.copy_within(pad * stride..(pad + 1) * stride, py * stride);
        let src = (pad + h - 1) * stride;
        data.copy_within(src..src + stride, (pad + h + py) * stride);
    }
}

#[derive(Debug, Clone)]
pub struct Pyramid {
    levels: Vec<PyramidLevel>,
}

impl Pyramid {
    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn base(&self) -> &PyramidLevel {
        &self.levels[0]
    }
}

/// Number of levels whose smaller side stays at or above `min_size`.
pub fn max_levels(height: usize, width: usize, min_size: usize) -> usize {
    let (mut h, mut w, mut n) = (height, width, 0);
    while h >= min_size && w >= min_size && h >= 1 && w >= 1 {
        n += 1;
        h /= 2;
        w /= 2;
    }
    n
}

/// Level 0 is `map`; level `L` is the 2×2 block mean of level `L − 1`. The
/// top level must still hold a full `(2r + 1)²` window.
pub fn build_pyramid(map: &Tensor, levels: usize, window_radius: usize) -> Result<Pyramid, FlowError> {
    let min_size = 2 * window_radius + 1;
    let max_feasible = max_levels(map.height(), map.width(), min_size);
    if levels == 0 || levels > max_feasible {
        return Err(FlowError::TooManyLevels {
            requested: levels,
            max_feasible,
            min_size,
        });
    }
    // Covers the coarse-level slack, the window and the bilinear neighbour.
    let pad = 2 * window_radius + 2;
    let mut out = Vec::with_capacity(levels);
    out.push(PyramidLevel::new(map, pad));
    let mut current = None;
    for _ in 1..levels {
        let next = current.as_ref().unwrap_or(map).downsample_half()?;
        out.push(PyramidLevel::new(&next, pad));
        current = Some(next);
    }
    Ok(Pyramid { levels: out })
}

/// Central differences per channel, `(F(x + 1) − F(x − 1)) / 2`, with
/// replicate-clamped neighbours at the border.
pub fn spatial_gradients(map: &Tensor) -> (Tensor, Tensor) {
    let (h, w, c) = (map.height(), map.width(), map.channels());
    let mut gx = vec![0.0f32; h * w * c];
    let mut gy = vec![0.0f32; h * w * c];
    let d = map.data();
    let stride = w * c;
    for y in 0..h {
        let row = &d[y * stride..(y + 1) * stride];
        let up = &d[y.saturating_sub(1) * stride..][..stride];
        let down = &d[(y + 1).min(h - 1) * stride..][..stride];
        let gxr = &mut gx[y * stride..(y + 1) * stride];
        let gyr = &mut gy[y * stride..(y + 1) * stride];
        for j in 0..stride {
            gyr[j] = 0.5 * (down[j] - up[j]);
        }
        if w == 1 {
            continue;
        }
        for j in c..stride - c {
            gxr[j] = 0.5 * (row[j + c] - row[j - c]);
        }
        for ch in 0..c {
            gxr[ch] = 0.5 * (row[c + ch] - row[ch]);
            let last = stride - c + ch;
            gxr[last] = 0.5 * (row[last] - row[last - c]);
        }
    }
    (
        Tensor::from_vec(h, w, c, gx).unwrap(),
        Tensor::from_vec(h, w, c, gy).unwrap(),
    )
}

/// Bilinear samples of a `(2r + 1)²` window centred at `(cx, cy)`, written in
/// `(dy, dx, channel)` order. All taps share the centre's fractional offset;
/// out-of-image taps replicate the border.
struct WindowSampler {
    bx: isize,
    by: isize,
    side: usize,
    w00: f32,
    w01: f32,
    w10: f32,
    w11: f32,
}

impl WindowSampler {
    /// `pad` is the border width of the maps that will be sampled.
    #[inline(always)]
    fn new(cx: f32, cy: f32, radius: usize, pad: usize) -> Self {
        let fx = cx.floor();
        let fy = cy.floor();
        let ax = cx - fx;
        let ay = cy - fy;
        Self {
            bx: fx as isize - radius as isize + pad as isize,
            by: fy as isize - radius as isize + pad as isize,
            side: 2 * radius + 1,
            w00: (1.0 - ax) * (1.0 - ay),
            w01: ax * (1.0 - ay),
            w10: (1.0 - ax) * ay,
            w11: ax * ay,
        }
    }

    #[inline(always)]
    fn sample(&self, map: &Tensor, out: &mut [f32]) {
        let (w, h) = (map.width() as isize, map.height() as isize);
        let side = self.side as isize;
        if self.bx >= 0 && self.by >= 0 && self.bx + side < w && self.by + side < h {
            self.sample_interior(map, out);
        } else {
            self.sample_clamped(map, out);
        }
    }

    /// Every tap and its +1 neighbours lie inside: each window row is one
    /// contiguous run, shifted by one pixel for the right-hand taps.
    #[inline(always)]
    fn sample_interior(&self, map: &Tensor, out: &mut [f32]) {
        let c = map.channels();
        let w = map.width();
        let d = map.data();
        let run = self.side * c;
        for (r, dst) in out.chunks_exact_mut(run).enumerate() {
            let y0 = self.by as usize + r;
            let s0 = (y0 * w + self.bx as usize) * c;
            let s1 = s0 + w * c;
            let (tl, tr) = (&d[s0..s0 + run], &d[s0 + c..s0 + c + run]);
            let (bl, br) = (&d[s1..s1 + run], &d[s1 + c..s1 + c + run]);
            for ((((o, &a), &b), &e), &f) in dst.iter_mut().zip(tl).zip(tr).zip(bl).zip(br) {
                *o = self.w00 * a + self.w01 * b + self.w10 * e + self.w11 * f;
            }
        }
    }

    fn sample_clamped(&self, map: &Tensor, out: &mut [f32]) {
        let c = map.channels();
        let (w, h) = (map.width(), map.height());
        let d = map.data();
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let mut k = 0;
        for r in 0..self.side as isize {
            let r0 = clamp(self.by + r, h) * w;
            let r1 = clamp(self.by + r + 1, h) * w;
            for i in 0..self.side as isize {
                let x0 = clamp(self.bx + i, w);
                let x1 = clamp(self.bx + i + 1, w);
                let (p00, p01, p10, p11) = ((r0 + x0) * c, (r0 + x1) * c, (r1 + x0) * c, (r1 + x1) * c);
                for ch in 0..c {
                    out[k] = self.w00 * d[p00 + ch]
                        + self.w01 * d[p01 + ch]
                        + self.w10 * d[p10 + ch]
                        + self.w11 * d[p11 + ch];
                    k += 1;
                }
            }
        }
    }
}

const LANES: usize = 4;

/// `Σ gx·(i − j)` and `Σ gy·(i − j)` in f64, accumulated in a fixed lane order.
#[inline(always)]
fn mismatch(i_win: &[f32], j_win: &[f32], gx: &[f32], gy: &[f32]) -> (f64, f64) {
    let mut bx = [0.0f64; LANES];
    let mut by = [0.0f64; LANES];
    let chunks = i_win
        .chunks_exact(LANES)
        .zip(j_win.chunks_exact(LANES))
        .zip(gx.chunks_exact(LANES).zip(gy.chunks_exact(LANES)));
    for ((i, j), (x, y)) in chunks {
        for l in 0..LANES {
            let diff = (i[l] - j[l]) as f64;
            bx[l] += x[l] as f64 * diff;
            by[l] += y[l] as f64 * diff;
        }
    }
    let n = i_win.len() / LANES * LANES;
    for k in n..i_win.len() {
        let diff = (i_win[k] - j_win[k]) as f64;
        bx[0] += gx[k] as f64 * diff;
        by[0] += gy[k] as f64 * diff;
    }
    ((bx[0] + bx[1]) + (bx[2] + bx[3]), (by[0] + by[1]) + (by[2] + by[3]))
}

/// Entries of `Σ [gx; gy][gx gy]`, accumulated like [`mismatch`].
#[inline(always)]
fn structure_tensor(gx: &[f32], gy: &[f32]) -> (f64, f64, f64) {
    let mut xx = [0.0f64; LANES];
    let mut xy = [0.0f64; LANES];
    let mut yy = [0.0f64; LANES];
    let n = gx.len() / LANES * LANES;
    let mut add = |l: usize, a: f32, b: f32| {
        let (a, b) = (a as f64, b as f64);
        xx[l] += a * a;
        xy[l] += a * b;
        yy[l] += b * b;
    };
    for (a, b) in gx.chunks_exact(LANES).zip(gy.chunks_exact(LANES)) {
        for l in 0..LANES {
            add(l, a[l], b[l]);
        }
    }
    for k in n..gx.len() {
        add(0, gx[k], gy[k]);
    }
    let sum = |v: [f64; LANES]| (v[0] + v[1]) + (v[2] + v[3]);
    (sum(xx), sum(xy), sum(yy))
}

fn mean_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    let s: f64 = a.iter().zip(b).map(|(p, q)| (p - q).abs() as f64).sum();
    (s / a.len() as f64) as f32
}

/// Tracks one point from `prev` into `next`. `guess` is an absolute level-0
/// position in `next` used as the initial estimate.
pub fn track_point(
    prev: &Pyramid,
    next: &Pyramid,
    point: Keypoint,
    guess: Option<(f32, f32)>,
    config: &TrackConfig,
) -> TrackResult {
    track_point_inner(prev, next, point, guess, config)
}

#[inline(always)]
fn track_point_inner(
    prev: &Pyramid,
    next: &Pyramid,
    point: Keypoint,
    guess: Option<(f32, f32)>,
    config: &TrackConfig,
) -> TrackResult {
    let levels = config.levels.min(prev.len()).min(next.len());
    let radius = config.window_radius;
    let side = config.window_side();
    let channels = prev.base().channels();
    let n = side * side * channels;
    let area = (side * side) as f64;

    let fail = |status, x: f32, y: f32| TrackResult {
        origin: point,
        tracked_x: x,
        tracked_y: y,
        status,
        residual: f32::NAN,
        fb_error: None,
    };

    if !prev.base().contains(point.x, point.y, 0.0) {
        return fail(TrackStatus::OutOfBounds, point.x, point.y);
    }

    let mut i_win = vec![0.0f32; n];
    let mut ix_win = vec![0.0f32; n];
    let mut iy_win = vec![0.0f32; n];
    let mut j_win = vec![0.0f32; n];

    let top_scale = (1u32 << (levels - 1)) as f32;
    let (mut fx, mut fy) = match guess {
        Some((gx, gy)) => ((gx - point.x) / top_scale, (gy - point.y) / top_scale),
        None => (0.0, 0.0),
    };

    let mut converged_at_base = false;
    let mut initial_residual = f32::NAN;

    for level in (0..levels).rev() {
        let lp = &prev.levels[level];
        let ln = &next.levels[level];
        let (cx, cy) = if level == 0 {
            (point.x, point.y)
        } else {
            let s = (1u32 << level) as f32;
            ((point.x + 0.5) / s - 0.5, (point.y + 0.5) / s - 0.5)
        };
        // Coarse levels tolerate centres off the image while the window overlaps.
        let slack = if level == 0 { 0.0 } else { radius as f32 };

        let sampler = WindowSampler::new(cx, cy, radius, lp.pad);
        sampler.sample(&lp.map, &mut i_win);
        sampler.sample(&lp.grad_x, &mut ix_win);
        sampler.sample(&lp.grad_y, &mut iy_win);

        let (gxx, gxy, gyy) = structure_tensor(&ix_win, &iy_win);
        let det = gxx * gyy - gxy * gxy;
        debug_assert!(gxx >= 0.0 && gyy >= 0.0 && det >= -1e-9 * (gxx + gyy).powi(2).max(1e-30));
        let min_eig = ((gxx + gyy) - ((gxx - gyy).powi(2) + 4.0 * gxy * gxy).sqrt()) / 2.0 / area;

        if min_eig < config.min_eigen_threshold as f64 || det < 1e-12 {
            if level == 0 {
                return fail(TrackStatus::Singular, point.x + fx, point.y + fy);
            }
            fx *= 2.0;
            fy *= 2.0;
            continue;
        }

        let mut converged = false;
        for iter in 0..config.max_iterations {
            let (nx, ny) = (cx + fx, cy + fy);
            if !ln.contains(nx, ny, slack) {
                return fail(TrackStatus::OutOfBounds, point.x + fx, point.y + fy);
            }
            WindowSampler::new(nx, ny, radius, ln.pad).sample(&ln.map, &mut j_win);
            if level == 0 && iter == 0 {
                initial_residual = mean_abs_diff(&i_win, &j_win);
            }
            let (bx, by) = mismatch(&i_win, &j_win, &ix_win, &iy_win);
            let dx = ((gyy * bx - gxy * by) / det) as f32;
            let dy = ((gxx * by - gxy * bx) / det) as f32;
            fx += dx;
            fy += dy;
            if !(fx.is_finite() && fy.is_finite()) {
                return fail(TrackStatus::Diverged, f32::NAN, f32::NAN);
            }
            if dx * dx + dy * dy < config.epsilon * config.epsilon {
                converged = true;
                break;
            }
        }

        if level == 0 {
            converged_at_base = converged;
        } else {
            fx *= 2.0;
            fy *= 2.0;
        }
    }

    let (tx, ty) = (point.x + fx, point.y + fy);
    let base_next = next.base();
    if !base_next.contains(tx, ty, 0.0) {
        return fail(TrackStatus::OutOfBounds, tx, ty);
    }
    WindowSampler::new(tx, ty, radius, base_next.pad).sample(&base_next.map, &mut j_win);
    let residual = mean_abs_diff(&i_win, &j_win);
    let status = if !converged_at_base && residual > initial_residual {
        TrackStatus::Diverged
    } else {
        TrackStatus::Converged
    };
    TrackResult {
        origin: point,
        tracked_x: tx,
        tracked_y: ty,
        status,
        residual,
        fb_error: None,
    }
}

/// Forward track plus the optional backward check, on the widest vector unit
/// available. Results do not depend on which path runs.
fn track_one(prev: &Pyramid, next: &Pyramid, point: Keypoint, config: &TrackConfig) -> TrackResult {
    #[cfg(target_arch = "x86_64")]
    if crate::tensor::wide_simd_available() {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { track_one_avx2(prev, next, point, config) };
    }
    track_one_portable(prev, next, point, config)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn track_one_avx2(prev: &Pyramid, next: &Pyramid, point: Keypoint, config: &TrackConfig) -> TrackResult {
    track_one_portable(prev, next, point, config)
}

#[inline(always)]
fn track_one_portable(prev: &Pyramid, next: &Pyramid, point: Keypoint, config: &TrackConfig) -> TrackResult {
    verify_backward(prev, next, track_point_inner(prev, next, point, None, config), config)
}

/// Applies the forward–backward check to a forward result.
#[inline(always)]
fn verify_backward(prev: &Pyramid, next: &Pyramid, mut fwd: TrackResult, config: &TrackConfig) -> TrackResult {
    let Some(threshold) = config.fb_threshold else {
        return fwd;
    };
    if fwd.status != TrackStatus::Converged {
        return fwd;
    }
    let start = Keypoint::new(fwd.tracked_x, fwd.tracked_y, fwd.origin.score);
    let back = track_point_inner(next, prev, start, None, config);
    if back.status != TrackStatus::Converged {
        fwd.status = TrackStatus::FailedFbCheck;
        return fwd;
    }
    let err = (back.tracked_x - fwd.origin.x).hypot(back.tracked_y - fwd.origin.y);
    fwd.fb_error = Some(err);
    if err > threshold {
        fwd.status = TrackStatus::FailedFbCheck;
    }
    fwd
}

/// Tracks every point between two prebuilt pyramids. Points are processed in
/// parallel; the result order and every value match the sequential path.
pub fn track_pyramids(
    prev: &Pyramid,
    next: &Pyramid,
    points: &[Keypoint],
    config: &TrackConfig,
) -> Vec<TrackResult> {
    // Visiting points in raster order keeps neighbouring windows in cache.
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (&points[a], &points[b]);
        p.y.total_cmp(&q.y).then(p.x.total_cmp(&q.x))
    });
    let tracked: Vec<TrackResult> = order
        .par_iter()
        .map(|&i| track_one(prev, next, points[i], config))
        .collect();
    let mut out = tracked.clone();
    for (&i, r) in order.iter().zip(tracked) {
        out[i] = r;
    }
    out
}

/// Sequential reference for [`track_pyramids`].
pub fn track_pyramids_sequential(
    prev: &Pyramid,
    next: &Pyramid,
    points: &[Keypoint],
    config: &TrackConfig,
) -> Vec<TrackResult> {
    points
        .iter()
        .map(|&p| track_one(prev, next, p, config))
        .collect()
}

/// Tracks `points` from one arbitrary multi-channel map into another.
pub fn track_maps(
    prev: &Tensor,
    next: &Tensor,
    points: &[Keypoint],
    config: &TrackConfig,
) -> Result<Vec<TrackResult>, FlowError> {
    config.validate()?;
    if !prev.same_shape(next) {
        return Err(FlowError::ShapeMismatch {
            prev: (prev.height(), prev.width(), prev.channels()),
            next: (next.height(), next.width(), next.channels()),
        });
    }
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let prev_pyr = build_pyramid(prev, config.levels, config.window_radius)?;
    let next_pyr = build_pyramid(next, config.levels, config.window_radius)?;
    Ok(track_pyramids(&prev_pyr, &next_pyr, points, config))
}

/// Tracks on the feature maps of two network outputs.
pub fn track(
    prev_out: &NetOutput,
    next_out: &NetOutput,
    points: &[Keypoint],
    config: &TrackConfig,
) -> Result<Vec<TrackResult>, FlowError> {
    track_maps(&prev_out.feature_map, &next_out.feature_map, points, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Smooth random texture: a sum of random sinusoids per channel.
    fn texture(seed: u64, h: usize, w: usize, c: usize, shift: (f32, f32)) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<Vec<(f32, f32, f32, f32)>> = (0..c)
            .map(|_| {
                (0..12)
                    .map(|_| {
                        let period = rng.gen_range(6.0f32..40.0);
                        let angle = rng.gen_range(0.0f32..std::f32::consts::TAU);
                        let k = std::f32::consts::TAU / period;
                        (k * angle.cos(), k * angle.sin(), rng.gen_range(0.0..std::f32::consts::TAU), rng.gen_range(0.3..1.0))
                    })
                    .collect()
            })
            .collect();
        Tensor::from_fn(h, w, c, |y, x, ch| {
            let (px, py) = (x as f32 - shift.0, y as f32 - shift.1);
            waves[ch].iter().map(|&(kx, ky, ph, a)| a * (kx * px + ky * py + ph).sin()).sum::<f32>() * 0.1
        })
        .unwrap()
    }

    #[test]
    fn pyramid_shapes_and_levels() {
        let map = texture(2, 64, 64, 3, (0.0, 0.0));
        let p = build_pyramid(&map, 1, 10).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.base().map(), map);
        assert_eq!(p.base().grad_x(), spatial_gradients(&map).0);
        let p = build_pyramid(&map, 3, 5).unwrap();
        let dims: Vec<_> = p.levels().iter().map(|l| (l.height(), l.width())).collect();
        assert_eq!(dims, vec![(64, 64), (32, 32), (16, 16)]);
        assert_eq!(
            build_pyramid(&map, 3, 8).unwrap_err(),
            FlowError::TooManyLevels { requested: 3, max_feasible: 2, min_size: 17 }
        );
        assert!(build_pyramid(&map, 0, 1).is_err());
    }

    #[test]
    fn level_gradients_and_borders_match_reference() {
        for (h, w) in [(23, 17), (1, 9), (9, 1)] {
            let map = texture(5, h, w, 2, (0.0, 0.0));
            let level = PyramidLevel::new(&map, 4);
            let (gx, gy) = spatial_gradients(&map);
            assert_eq!(level.grad_x(), gx);
            assert_eq!(level.grad_y(), gy);
            assert_eq!(level.grad_x, pad_replicate(&gx, 4));
            assert_eq!(level.grad_y, pad_replicate(&gy, 4));
        }
    }

    #[test]
    fn padded_windows_match_clamped_sampling() {
        let map = texture(3, 40, 30, 3, (0.0, 0.0));
        let level = PyramidLevel::new(&map, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (mut a, mut b) = (vec![0.0; 11 * 11 * 3], vec![0.0; 11 * 11 * 3]);
        for _ in 0..200 {
            let (cx, cy) = (rng.gen_range(-6.0f32..36.0), rng.gen_range(-6.0f32..46.0));
            WindowSampler::new(cx, cy, 5, 12).sample(&level.map, &mut a);
            WindowSampler::new(cx, cy, 5, 0).sample_clamped(&map, &mut b);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn pyramid_level_is_block_mean() {
        let map = texture(1, 32, 32, 2, (0.0, 0.0));
        let p = build_pyramid(&map, 2, 3).unwrap();
        let l1 = &p.levels()[1].map();
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..2 {
                    let m = (map.get(2 * y, 2 * x, c) as f64
                        + map.get(2 * y, 2 * x + 1, c) as f64
                        + map.get(2 * y + 1, 2 * x, c) as f64
                        + map.get(2 * y + 1, 2 * x + 1, c) as f64)
                        / 4.0;
                    assert!((l1.get(y, x, c) as f64 - m).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn gradients_of_ramp_and_constant() {
        let ramp = Tensor::from_fn(6, 7, 1, |_, x, _| x as f32).unwrap();
        let (gx, gy) = spatial_gradients(&ramp);
        for y in 0..6 {
            for x in 1..6 {
                assert_eq!(gx.get(y, x, 0), 1.0);
                assert_eq!(gy.get(y, x, 0), 0.0);
            }
        }
        assert_eq!(gx.get(0, 0, 0), 0.5);
        let (gx, gy) = spatial_gradients(&Tensor::filled(5, 5, 2, 3.0).unwrap());
        assert!(gx.data().iter().chain(gy.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_difference_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map = Tensor::from_fn(9, 8, 2, |_, _, _| rng.gen_range(-1.0..1.0)).unwrap();
        let (gx, gy) = spatial_gradients(&map);
        for y in 0..9 {
            for x in 0..8 {
                for c in 0..2 {
                    let at = |yy: i64, xx: i64| {
                        map.get(yy.clamp(0, 8) as usize, xx.clamp(0, 7) as usize, c) as f64
                    };
                    let ex = (at(y as i64, x as i64 + 1) - at(y as i64, x as i64 - 1)) / 2.0;
                    let ey = (at(y as i64 + 1, x as i64) - at(y as i64 - 1, x as i64)) / 2.0;
                    assert!((gx.get(y, x, c) as f64 - ex).abs() < 1e-6);
                    assert!((gy.get(y, x, c) as f64 - ey).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn identical_frames_track_to_origin() {
        let map = texture(2, 96, 96, 3, (0.0, 0.0));
        let cfg = TrackConfig::default();
        let pts: Vec<_> = (0..10).map(|i| Keypoint::new(10.0 + 7.3 * i as f32, 20.0 + 5.1 * i as f32, 0.5)).collect();
        let res = track_maps(&map, &map, &pts, &cfg).unwrap();
        for r in res {
            assert_eq!(r.status, TrackStatus::Converged);
            let (dx, dy) = r.displacement();
            assert!(dx.abs() < 1e-3 && dy.abs() < 1e-3);
            assert!(r.fb_error.unwrap() < 1e-3);
        }
    }

    #[test]
    fn recovers_subpixel_shift() {
        let shift = (3.7f32, -2.3f32);
        let a = texture(3, 128, 128, 3, (0.0, 0.0));
        let b = texture(3, 128, 128, 3, shift);
        let cfg = TrackConfig { fb_threshold: None, ..Default::default() };
        let pts: Vec<_> = (0..25)
            .map(|i| Keypoint::new(30.0 + 15.0 * (i % 5) as f32, 30.0 + 15.0 * (i / 5) as f32, 0.5))
            .collect();
        let res = track_maps(&a, &b, &pts, &cfg).unwrap();
        for r in res {
            assert_eq!(r.status, TrackStatus::Converged);
            let (dx, dy) = r.displacement();
            assert!((dx - shift.0).abs() < 0.2 && (dy - shift.1).abs() < 0.2, "{dx} {dy}");
        }
    }

    #[test]
    fn flat_map_is_singular() {
        let map = Tensor::filled(96, 96, 3, 0.5).unwrap();
        let res = track_maps(&map, &map, &[Keypoint::new(30.0, 30.0, 1.0)], &TrackConfig::default()).unwrap();
        assert_eq!(res[0].status, TrackStatus::Singular);
    }

    #[test]
    fn point_outside_is_out_of_bounds() {
        let map = texture(4, 96, 96, 1, (0.0, 0.0));
        let res = track_maps(&map, &map, &[Keypoint::new(96.5, 3.0, 1.0)], &TrackConfig::default()).unwrap();
        assert_eq!(res[0].status, TrackStatus::OutOfBounds);
    }

    #[test]
    fn empty_points_and_shape_checks() {
        let a = Tensor::zeros(96, 96, 3).unwrap();
        let b = Tensor::zeros(96, 95, 3).unwrap();
        assert!(track_maps(&a, &a, &[], &TrackConfig::default()).unwrap().is_empty());
        assert!(matches!(track_maps(&a, &b, &[], &TrackConfig::default()), Err(FlowError::ShapeMismatch { .. })));
        let bad = TrackConfig { window_radius: 0, ..Default::default() };
        assert!(track_maps(&a, &a, &[], &bad).is_err());
    }

    #[test]
    fn guess_is_used() {
        let shift = (12.0f32, 9.0f32);
        let a = texture(6, 96, 96, 3, (0.0, 0.0));
        let b = texture(6, 96, 96, 3, shift);
        let cfg = TrackConfig { levels: 1, window_radius: 7, fb_threshold: None, ..Default::default() };
        let pa = build_pyramid(&a, 1, 7).unwrap();
        let pb = build_pyramid(&b, 1, 7).unwrap();
        let p = Keypoint::new(40.0, 40.0, 1.0);
        let r = track_point(&pa, &pb, p, Some((51.5, 48.6)), &cfg);
        assert_eq!(r.status, TrackStatus::Converged);
        assert!((r.tracked_x - 52.0).abs() < 0.1 && (r.tracked_y - 49.0).abs() < 0.1);
    }

    #[test]
    fn parallel_batch_equals_sequential() {
        let a = texture(7, 96, 96, 3, (0.0, 0.0));
        let b = texture(7, 96, 96, 3, (1.3, 0.4));
        let cfg = TrackConfig::default();
        let pa = build_pyramid(&a, 3, 10).unwrap();
        let pb = build_pyramid(&b, 3, 10).unwrap();
        let pts: Vec<_> = (0..40).map(|i| Keypoint::new((i * 7 % 90) as f32, (i * 13 % 90) as f32, 0.1)).collect();
        let par = track_pyramids(&pa, &pb, &pts, &cfg);
        let seq = track_pyramids_sequential(&pa, &pb, &pts, &cfg);
        let single: Vec<_> = pts
            .iter()
            .map(|&p| verify_backward(&pa, &pb, track_point(&pa, &pb, p, None, &cfg), &cfg))
            .collect();
        let bits = |v: &[TrackResult]| {
            v.iter()
                .map(|r| (r.tracked_x.to_bits(), r.tracked_y.to_bits(), r.status, r.residual.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&par), bits(&seq));
        assert_eq!(bits(&par), bits(&single));
    }
}
