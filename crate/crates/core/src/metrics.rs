//! Frame-level ROC AUC and the region/track detection criteria.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::features::BBox;
use crate::ground_truth::GroundTruth;
use crate::scoring::ScoreTable;

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub video_id: String,
    pub frame_index: u32,
    pub bbox: BBox,
    pub score: f64,
}

pub fn detections_from_table(table: &ScoreTable) -> Vec<Detection> {
    table
        .entries
        .iter()
        .map(|e| Detection {
            video_id: table.video_id.clone(),
            frame_index: e.frame_index,
            bbox: e.bbox,
            score: e.score,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    /// All frames of all videos pooled into one ROC.
    #[default]
    Micro,
    /// Mean of per-video AUCs over videos that contain both classes.
    Macro,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverlapMode {
    /// Intersection divided by the ground-truth region's area.
    #[default]
    GtArea,
    Iou,
}

impl OverlapMode {
    pub fn overlap(self, det: &BBox, gt: &BBox) -> f64 {
        match self {
            OverlapMode::GtArea => {
                let a = gt.area();
                if a > 0.0 {
                    det.intersection(gt) / a
                } else {
                    0.0
                }
            }
            OverlapMode::Iou => det.iou(gt),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricConfig {
    pub overlap_threshold: f64,
    pub track_fraction: f64,
    pub overlap: OverlapMode,
    /// Upper end of the false-positives-per-frame axis.
    pub max_fp_rate: f64,
    pub averaging: Averaging,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            overlap_threshold: 0.1,
            track_fraction: 0.1,
            overlap: OverlapMode::GtArea,
            max_fp_rate: 1.0,
            averaging: Averaging::Micro,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold <= 1.0) {
            return Err(Error::Config("overlap threshold must lie in (0, 1]".into()));
        }
        if !(self.track_fraction > 0.0 && self.track_fraction <= 1.0) {
            return Err(Error::Config("track fraction must lie in (0, 1]".into()));
        }
        if !(self.max_fp_rate > 0.0 && self.max_fp_rate.is_finite()) {
            return Err(Error::Config("max false-positive rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Scores `>= threshold` survive. The origin uses `+inf`.
    pub threshold: f64,
    pub fp: f64,
    pub tp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveResult {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl CurveResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fp,tp\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{:.9},{:.9}", p.threshold, p.fp, p.tp);
        }
        s
    }
}

/// Trapezoidal area under a curve with non-decreasing x, clipped at
/// `x_max` and held flat from the last point out to `x_max`, divided by
/// `x_max`.
pub fn curve_area(points: &[RocPoint], x_max: f64) -> f64 {
    let mut area = 0.0;
    let mut last = match points.first() {
        Some(p) => (p.fp, p.tp),
        None => return 0.0,
    };
    for p in &points[1..] {
        let (x0, y0) = last;
        if x0 >= x_max {
            break;
        }
        let (x1, y1) = (p.fp, p.tp);
        if x1 > x_max {
            let y_at = y0 + (y1 - y0) * (x_max - x0) / (x1 - x0);
            area += (x_max - x0) * (y0 + y_at) / 2.0;
            last = (x_max, y_at);
            break;
        }
        area += (x1 - x0) * (y0 + y1) / 2.0;
        last = (x1, y1);
    }
    if last.0 < x_max {
        area += (x_max - last.0) * last.1;
    }
    (area / x_max).clamp(0.0, 1.0)
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Validation("non-finite score".into()));
    }
    Ok(())
}

/// ROC over pooled frames: one point per distinct score, descending.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<CurveResult> {
    if scores.len() != labels.len() {
        return Err(Error::dim("frame labels", scores.len(), labels.len()));
    }
    check_scores(scores)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("frame labels contain a single class".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fp: 0.0, tp: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let thr = scores[order[i]];
        while i < order.len() && scores[order[i]] == thr {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: thr,
            fp: fp as f64 / neg as f64,
            tp: tp as f64 / pos as f64,
        });
    }
    let auc = curve_area(&points, 1.0);
    Ok(CurveResult { points, auc })
}

pub fn frame_auc(scores: &[Vec<f64>], labels: &[Vec<bool>], averaging: Averaging) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("videos with frame labels", scores.len(), labels.len()));
    }
    for (s, l) in scores.iter().zip(labels) {
        if s.len() != l.len() {
            return Err(Error::dim("frame labels", s.len(), l.len()));
        }
    }
    match averaging {
        Averaging::Micro => {
            let s: Vec<f64> = scores.iter().flatten().copied().collect();
            let l: Vec<bool> = labels.iter().flatten().copied().collect();
            Ok(roc_curve(&s, &l)?.auc)
        }
        Averaging::Macro => {
            let mut aucs = Vec::new();
            for (s, l) in scores.iter().zip(labels) {
                match roc_curve(s, l) {
                    Ok(c) => aucs.push(c.auc),
                    Err(Error::UndefinedMetric(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            if aucs.is_empty() {
                return Err(Error::UndefinedMetric("no video contains both classes".into()));
            }
            Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
        }
    }
}

/// Detections against ground truth, flattened into index form.
struct Matching {
    /// Detection scores, parallel to `hits`.
    scores: Vec<f64>,
    /// Global region indices each detection overlaps.
    hits: Vec<Vec<usize>>,
    region_track: Vec<usize>,
    track_sizes: Vec<usize>,
    total_frames: usize,
}

impl Matching {
    fn build(detections: &[Detection], gt: &[GroundTruth], cfg: &MetricConfig) -> Result<Self> {
        cfg.validate()?;
        let mut by_video: HashMap<&str, usize> = HashMap::new();
        let mut region_offset = Vec::with_capacity(gt.len());
        let mut region_track = Vec::new();
        let mut track_sizes = Vec::new();
        let mut total_frames = 0usize;
        for (v, g) in gt.iter().enumerate() {
            if by_video.insert(g.video_id.as_str(), v).is_some() {
                return Err(Error::Validation(format!("duplicate ground truth for {}", g.video_id)));
            }
            region_offset.push(region_track.len());
            let mut local = vec![0usize; g.regions.len()];
            for members in g.tracks().values() {
                for &r in members {
                    local[r] = track_sizes.len();
                }
                track_sizes.push(members.len());
            }
            region_track.extend(local);
            total_frames += g.frame_count();
        }
        let mut frame_regions: BTreeMap<(usize, u32), Vec<usize>> = BTreeMap::new();
        for (v, g) in gt.iter().enumerate() {
            for (r, region) in g.regions.iter().enumerate() {
                frame_regions.entry((v, region.frame_index)).or_default().push(region_offset[v] + r);
            }
        }
        let all_regions: Vec<&BBox> = gt.iter().flat_map(|g| g.regions.iter().map(|r| &r.bbox)).collect();
        let mut scores = Vec::with_capacity(detections.len());
        let mut hits = Vec::with_capacity(detections.len());
        for d in detections {
            if !d.score.is_finite() {
                return Err(Error::Validation(format!("{}: non-finite detection score", d.video_id)));
            }
            let v = *by_video
                .get(d.video_id.as_str())
                .ok_or_else(|| Error::Validation(format!("no ground truth for video {}", d.video_id)))?;
            if d.frame_index as usize >= gt[v].frame_count() {
                return Err(Error::Validation(format!(
                    "{}: detection in frame {} beyond {} frames",
                    d.video_id,
                    d.frame_index,
                    gt[v].frame_count()
                )));
            }
            let overlapped = frame_regions
                .get(&(v, d.frame_index))
                .map(|rs| {
                    rs.iter()
                        .copied()
                        .filter(|&r| cfg.overlap.overlap(&d.bbox, all_regions[r]) >= cfg.overlap_threshold)
                        .collect()
                })
                .unwrap_or_default();
            scores.push(d.score);
            hits.push(overlapped);
        }
        Ok(Self {
            scores,
            hits,
            region_track,
            track_sizes,
            total_frames,
        })
    }

    fn descending_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        order
    }
}

#[derive(Clone, Copy)]
enum Criterion {
    Region,
    Track,
}

fn track_detected(hits: usize, size: usize, fraction: f64) -> bool {
    hits as f64 / size as f64 >= fraction
}

fn sweep(m: &Matching, criterion: Criterion, cfg: &MetricConfig) -> Result<CurveResult> {
    let denom = match criterion {
        Criterion::Region => m.region_track.len(),
        Criterion::Track => m.track_sizes.len(),
    };
    if denom == 0 {
        return Err(Error::UndefinedMetric("ground truth has no anomalous regions".into()));
    }
    if m.total_frames == 0 {
        return Err(Error::UndefinedMetric("ground truth has no frames".into()));
    }
    let mut region_hit = vec![false; m.region_track.len()];
    let mut track_hits = vec![0usize; m.track_sizes.len()];
    let (mut regions, mut tracks, mut fps) = (0usize, 0usize, 0usize);
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fp: 0.0, tp: 0.0 }];
    let order = m.descending_order();
    let mut i = 0;
    while i < order.len() {
        let thr = m.scores[order[i]];
        while i < order.len() && m.scores[order[i]] == thr {
            let hits = &m.hits[order[i]];
            if hits.is_empty() {
                fps += 1;
            }
            for &r in hits {
                if region_hit[r] {
                    continue;
                }
                region_hit[r] = true;
                regions += 1;
                let t = m.region_track[r];
                let before = track_detected(track_hits[t], m.track_sizes[t], cfg.track_fraction);
                track_hits[t] += 1;
                if !before && track_detected(track_hits[t], m.track_sizes[t], cfg.track_fraction) {
                    tracks += 1;
                }
            }
            i += 1;
        }
        let found = match criterion {
            Criterion::Region => regions,
            Criterion::Track => tracks,
        };
        points.push(RocPoint {
            threshold: thr,
            fp: fps as f64 / m.total_frames as f64,
            tp: found as f64 / denom as f64,
        });
    }
    let auc = curve_area(&points, cfg.max_fp_rate);
    Ok(CurveResult { points, auc })
}

pub fn rbdc(detections: &[Detection], gt: &[GroundTruth], cfg: &MetricConfig) -> Result<CurveResult> {
    sweep(&Matching::build(detections, gt, cfg)?, Criterion::Region, cfg)
}

pub fn tbdc(detections: &[Detection], gt: &[GroundTruth], cfg: &MetricConfig) -> Result<CurveResult> {
    sweep(&Matching::build(detections, gt, cfg)?, Criterion::Track, cfg)
}

/// Per-threshold recomputation from raw boxes, used to cross-check the
/// incremental sweep.
pub mod brute_force {
    use super::*;

    fn evaluate(
        detections: &[Detection],
        gt: &[GroundTruth],
        cfg: &MetricConfig,
        thr: f64,
    ) -> (usize, usize, usize) {
        let alive: Vec<&Detection> = detections.iter().filter(|d| d.score >= thr).collect();
        let (mut regions, mut tracks, mut fps) = (0, 0, 0);
        for g in gt {
            let hit = |r: &crate::ground_truth::Region| {
                alive.iter().any(|d| {
                    d.video_id == g.video_id
                        && d.frame_index == r.frame_index
                        && cfg.overlap.overlap(&d.bbox, &r.bbox) >= cfg.overlap_threshold
                })
            };
            let flags: Vec<bool> = g.regions.iter().map(hit).collect();
            regions += flags.iter().filter(|&&f| f).count();
            for members in g.tracks().values() {
                let n = members.iter().filter(|&&r| flags[r]).count();
                if track_detected(n, members.len(), cfg.track_fraction) {
                    tracks += 1;
                }
            }
        }
        for d in &alive {
            let g = gt.iter().find(|g| g.video_id == d.video_id).expect("known video");
            let overlaps_any = g.regions.iter().any(|r| {
                r.frame_index == d.frame_index && cfg.overlap.overlap(&d.bbox, &r.bbox) >= cfg.overlap_threshold
            });
            if !overlaps_any {
                fps += 1;
            }
        }
        (regions, tracks, fps)
    }

    fn curve(detections: &[Detection], gt: &[GroundTruth], cfg: &MetricConfig, tracks: bool) -> CurveResult {
        let frames: usize = gt.iter().map(|g| g.frame_count()).sum();
        let total_regions: usize = gt.iter().map(|g| g.regions.len()).sum();
        let total_tracks: usize = gt.iter().map(|g| g.tracks().len()).sum();
        let mut thresholds: Vec<f64> = detections.iter().map(|d| d.score).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut points = vec![RocPoint { threshold: f64::INFINITY, fp: 0.0, tp: 0.0 }];
        for thr in thresholds {
            let (r, t, fp) = evaluate(detections, gt, cfg, thr);
            let tp = if tracks {
                t as f64 / total_tracks as f64
            } else {
                r as f64 / total_regions as f64
            };
            points.push(RocPoint { threshold: thr, fp: fp as f64 / frames as f64, tp });
        }
        let auc = curve_area(&points, cfg.max_fp_rate);
        CurveResult { points, auc }
    }

    pub fn rbdc(detections: &[Detection], gt: &[GroundTruth], cfg: &MetricConfig) -> CurveResult {
        curve(detections, gt, cfg, false)
    }

    pub fn tbdc(detections: &[Detection], gt: &[GroundTruth], cfg: &MetricConfig) -> CurveResult {
        curve(detections, gt, cfg, true)
    }

    /// Mann-Whitney U over all positive/negative pairs, ties worth one half.
    pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut credit, mut pairs) = (0.0, 0usize);
        for (i, &si) in scores.iter().enumerate() {
            if !labels[i] {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] {
                    continue;
                }
                pairs += 1;
                if si > sj {
                    credit += 1.0;
                } else if si == sj {
                    credit += 0.5;
                }
            }
        }
        credit / pairs as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub seed: Option<u64>,
    pub videos: usize,
    pub frames: usize,
    pub frame_auc: f64,
    pub frame_roc: CurveResult,
    pub rbdc: CurveResult,
    pub tbdc: CurveResult,
}

/// Evaluates per-video frame scores and detections against ground truth.
/// `frame_scores` and `gt` are matched by position.
pub fn evaluate(
    frame_scores: &[Vec<f64>],
    detections: &[Detection],
    gt: &[GroundTruth],
    cfg: &MetricConfig,
) -> Result<EvalReport> {
    let labels: Vec<Vec<bool>> = gt.iter().map(|g| g.frame_labels.clone()).collect();
    let auc = frame_auc(frame_scores, &labels, cfg.averaging)?;
    let pooled: Vec<f64> = frame_scores.iter().flatten().copied().collect();
    let pooled_labels: Vec<bool> = labels.iter().flatten().copied().collect();
    let frame_roc = roc_curve(&pooled, &pooled_labels)?;
    let m = Matching::build(detections, gt, cfg)?;
    Ok(EvalReport {
        seed: None,
        videos: gt.len(),
        frames: pooled.len(),
        frame_auc: auc,
        frame_roc,
        rbdc: sweep(&m, Criterion::Region, cfg)?,
        tbdc: sweep(&m, Criterion::Track, cfg)?,
    })
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed={seed}");
        }
        let _ = writeln!(s, "videos={}", self.videos);
        let _ = writeln!(s, "frames={}", self.frames);
        let _ = writeln!(s, "frame_auc={:.4}", self.frame_auc);
        let _ = writeln!(s, "rbdc={:.4}", self.rbdc.auc);
        let _ = writeln!(s, "tbdc={:.4}", self.tbdc.auc);
        s
    }
}
