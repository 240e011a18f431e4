//! Score smoothing: a spatio-temporal mean over associated objects, an
//! optional box-width scale adjustment, and Gaussian filtering of the
//! per-frame signal.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scoring::{normalize_video, ScoreTable};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingConfig {
    /// Frames on either side searched for associated objects.
    pub temporal_radius: usize,
    pub association_min_iou: f64,
    pub gaussian_sigma: f64,
    pub scale_adjust: bool,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            temporal_radius: 2,
            association_min_iou: 0.2,
            gaussian_sigma: 3.0,
            scale_adjust: false,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma > 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(Error::Config("gaussian sigma must be positive".into()));
        }
        if !(self.association_min_iou > 0.0 && self.association_min_iou <= 1.0) {
            return Err(Error::Config("association IoU must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Replaces each score by the mean over itself and every object in the
/// neighbouring frames whose box overlaps it with IoU at least the
/// association threshold. Same-frame objects are not mixed.
pub fn smooth_object_scores(table: &ScoreTable, cfg: &SmoothingConfig) -> ScoreTable {
    let r = cfg.temporal_radius as i64;
    let mut by_frame: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, e) in table.entries.iter().enumerate() {
        by_frame.entry(e.frame_index).or_default().push(i);
    }
    let mut out = table.clone();
    for (i, e) in table.entries.iter().enumerate() {
        let t = e.frame_index as i64;
        let (lo, hi) = ((t - r).max(0) as u32, (t + r).max(0) as u32);
        let mut sum = e.score;
        let mut n = 1usize;
        for (&f, members) in by_frame.range(lo..=hi) {
            if f == e.frame_index {
                continue;
            }
            for &j in members {
                let other = &table.entries[j];
                if e.bbox.iou(&other.bbox) >= cfg.association_min_iou {
                    sum += other.score;
                    n += 1;
                }
            }
        }
        out.entries[i].score = sum / n as f64;
    }
    out
}

/// Multiplies every score by its box width, then re-normalises over the
/// video.
pub fn scale_adjust(table: &ScoreTable) -> ScoreTable {
    let scaled: Vec<f64> = table.entries.iter().map(|e| e.score * e.bbox.w as f64).collect();
    let normalized = normalize_video(&scaled);
    let mut out = table.clone();
    for (e, s) in out.entries.iter_mut().zip(normalized) {
        e.score = s;
    }
    out
}

/// Normalised Gaussian taps over `[-ceil(3 sigma), ceil(3 sigma)]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Half-sample symmetric reflection: `... b a | a b c ... | c b ...`.
fn reflect(idx: i64, n: i64) -> usize {
    let period = 2 * n;
    let j = idx.rem_euclid(period);
    (if j >= n { period - 1 - j } else { j }) as usize
}

pub fn gaussian_filter(signal: &[f64], sigma: f64) -> Vec<f64> {
    let n = signal.len() as i64;
    if n == 0 {
        return Vec::new();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    (0..n)
        .map(|t| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * signal[reflect(t + k as i64 - radius, n)])
                .sum()
        })
        .collect()
}

/// Max object score per frame (0 for empty frames).
pub fn frame_max(table: &ScoreTable, frame_count: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; frame_count];
    for e in &table.entries {
        if let Some(slot) = out.get_mut(e.frame_index as usize) {
            *slot = slot.max(e.score);
        }
    }
    out
}

pub fn frame_scores(table: &ScoreTable, frame_count: usize, cfg: &SmoothingConfig) -> Vec<f64> {
    gaussian_filter(&frame_max(table, frame_count), cfg.gaussian_sigma)
}
