//! Keypoint extraction from a score map: strict 3×3 non-maximum suppression,
//! score threshold, border rejection and greedy spaced selection in the
//! manner of `goodFeaturesToTrack`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    /// Column, subpixel.
    pub x: f32,
    /// Row, subpixel.
    pub y: f32,
    pub score: f32,
}

impl Keypoint {
    pub fn new(x: f32, y: f32, score: f32) -> Self {
        Self { x, y, score }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub max_points: usize,
    pub score_threshold: f32,
    /// Minimum Chebyshev spacing between selected keypoints.
    pub min_interval: usize,
    /// Keypoints closer than this to any image edge are dropped.
    pub border: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            max_points: 300,
            score_threshold: 0.1,
            min_interval: 5,
            border: 8,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("max_points must be at least 1")]
    MaxPoints,
    #[error("score_threshold must lie in [0, 1), got {0}")]
    ScoreThreshold(f32),
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_points == 0 {
            return Err(ConfigError::MaxPoints);
        }
        if !(0.0..1.0).contains(&self.score_threshold) {
            return Err(ConfigError::ScoreThreshold(self.score_threshold));
        }
        Ok(())
    }
}

/// Pixels strictly greater than all eight neighbours. Border pixels never
/// qualify. Returned in row-major order.
pub fn nms_3x3(score_map: &Tensor) -> Vec<Keypoint> {
    assert_eq!(score_map.channels(), 1, "score map must be single-channel");
    let (h, w) = (score_map.height(), score_map.width());
    let s = score_map.data();
    let mut out = Vec::new();
    if h < 3 || w < 3 {
        return out;
    }
    for y in 1..h - 1 {
        let up = &s[(y - 1) * w..y * w];
        let mid = &s[y * w..(y + 1) * w];
        let down = &s[(y + 1) * w..(y + 2) * w];
        for x in 1..w - 1 {
            let v = mid[x];
            if v > mid[x - 1]
                && v > mid[x + 1]
                && v > up[x - 1]
                && v > up[x]
                && v > up[x + 1]
                && v > down[x - 1]
                && v > down[x]
                && v > down[x + 1]
            {
                out.push(Keypoint::new(x as f32, y as f32, v));
            }
        }
    }
    out
}

/// Descending score; ties go to the smaller row, then the smaller column.
pub fn selection_order(a: &Keypoint, b: &Keypoint) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.y.total_cmp(&b.y))
        .then(a.x.total_cmp(&b.x))
}

pub fn detect(score_map: &Tensor, config: &DetectorConfig) -> Vec<Keypoint> {
    detect_excluding(score_map, config, &[])
}

/// Like [`detect`], but keeps new points at least `min_interval` away from
/// `existing` and returns at most `max_points − existing.len()` of them.
pub fn detect_excluding(score_map: &Tensor, config: &DetectorConfig, existing: &[Keypoint]) -> Vec<Keypoint> {
    let (h, w) = (score_map.height(), score_map.width());
    let border = config.border as f32;
    let mut candidates: Vec<Keypoint> = nms_3x3(score_map)
        .into_iter()
        .filter(|k| k.score >= config.score_threshold)
        .filter(|k| {
            k.x >= border
                && k.y >= border
                && k.x <= (w - 1) as f32 - border
                && k.y <= (h - 1) as f32 - border
        })
        .collect();
    candidates.sort_by(selection_order);
    let budget = config.max_points.saturating_sub(existing.len());
    select_spaced(&candidates, w, h, config.min_interval, budget, existing)
}

/// Greedy selection over `ordered` candidates, skipping any point within
/// Chebyshev distance `< min_interval` of an already selected one (including
/// `existing`). Candidates must sit on integer pixels inside `width×height`.
pub fn select_spaced(
    ordered: &[Keypoint],
    width: usize,
    height: usize,
    min_interval: usize,
    max_points: usize,
    existing: &[Keypoint],
) -> Vec<Keypoint> {
    let mut blocked = vec![false; width * height];
    let reach = min_interval.saturating_sub(1) as isize;
    let block = |x: isize, y: isize, blocked: &mut [bool]| {
        if min_interval == 0 {
            return;
        }
        let y0 = (y - reach).max(0);
        let y1 = (y + reach).min(height as isize - 1);
        let x0 = (x - reach).max(0);
        let x1 = (x + reach).min(width as isize - 1);
        for yy in y0..=y1 {
            for xx in x0..=x1 {
                blocked[yy as usize * width + xx as usize] = true;
            }
        }
    };
    for k in existing {
        block(k.x.round() as isize, k.y.round() as isize, &mut blocked);
    }
    let mut selected = Vec::new();
    for k in ordered {
        if selected.len() >= max_points {
            break;
        }
        let (x, y) = (k.x as usize, k.y as usize);
        if blocked[y * width + x] {
            continue;
        }
        selected.push(*k);
        block(x as isize, y as isize, &mut blocked);
    }
    selected
}
