//! Per-object anomaly scores.
//!
//! Three raw components are computed per object, each is min-max normalised
//! over the whole video, and the final score is their mean.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{BBox, FeatureRecord, VideoFeatureSet};
use crate::losses::cosine_distance;
use crate::network::{forward_batch, BatchInput, ModelParams};

/// Objects per forward batch during scoring.
const SCORE_BATCH: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RawComponents {
    /// `||x_app - xhat_app|| + ||x_mo - xhat_mo||`
    pub rec_l2: f64,
    /// Appearance plus motion cosine distance, in `[0, 4]`.
    pub rec_cos: f64,
    /// Cosine distance between `h` and its nearest item, in `[0, 2]`.
    pub mem_cos: f64,
}

impl RawComponents {
    pub fn as_array(&self) -> [f64; 3] {
        [self.rec_l2, self.rec_cos, self.mem_cos]
    }
}

/// Which components enter the final mean. All three by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComponentMask {
    pub rec_l2: bool,
    pub rec_cos: bool,
    pub mem_cos: bool,
}

impl Default for ComponentMask {
    fn default() -> Self {
        Self {
            rec_l2: true,
            rec_cos: true,
            mem_cos: true,
        }
    }
}

impl ComponentMask {
    pub fn as_array(&self) -> [bool; 3] {
        [self.rec_l2, self.rec_cos, self.mem_cos]
    }

    /// Parses a comma-separated list of components to drop, e.g. `rec_cos`.
    pub fn without(list: &str) -> Result<Self> {
        let mut m = Self::default();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty() && *s != "none") {
            match name {
                "rec_l2" => m.rec_l2 = false,
                "rec_cos" => m.rec_cos = false,
                "mem_cos" | "mem" => m.mem_cos = false,
                other => return Err(Error::Config(format!("unknown score component {other:?}"))),
            }
        }
        if !(m.rec_l2 || m.rec_cos || m.mem_cos) {
            return Err(Error::Config("cannot ablate every score component".into()));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEntry {
    pub frame_index: u32,
    pub object_id: u32,
    pub bbox: BBox,
    pub raw: RawComponents,
    pub normalized: [f64; 3],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub video_id: String,
    pub entries: Vec<ScoreEntry>,
}

fn components_from(
    x_app: &[f64],
    x_mo: &[f64],
    xhat_app: &[f64],
    xhat_mo: &[f64],
    h: &[f64],
    m_k: &[f64],
) -> RawComponents {
    let l2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    RawComponents {
        rec_l2: l2(x_app, xhat_app) + l2(x_mo, xhat_mo),
        rec_cos: cosine_distance(x_app, xhat_app) + cosine_distance(x_mo, xhat_mo),
        mem_cos: cosine_distance(h, m_k),
    }
}

/// Raw components for a batch of records, in input order.
pub fn raw_components_batch(params: &ModelParams, records: &[&FeatureRecord]) -> Result<Vec<RawComponents>> {
    let da = params.spec.d_app;
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(SCORE_BATCH) {
        let input = BatchInput::from_records(&params.spec, chunk)?;
        let fwd = forward_batch(params, &input)?;
        let target = input.target();
        for i in 0..chunk.len() {
            let x: Vec<f64> = target.row(i).iter().copied().collect();
            let y: Vec<f64> = fwd.xhat.row(i).iter().copied().collect();
            let h: Vec<f64> = fwd.h.row(i).iter().copied().collect();
            let m: Vec<f64> = params.memory.row(fwd.nearest[i]).iter().copied().collect();
            out.push(components_from(&x[..da], &x[da..], &y[..da], &y[da..], &h, &m));
        }
    }
    Ok(out)
}

pub fn raw_components(params: &ModelParams, rec: &FeatureRecord) -> Result<RawComponents> {
    Ok(raw_components_batch(params, &[rec])?[0])
}

/// Min-max normalisation over one video; a constant input maps to zeros.
pub fn normalize_video(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| ((v - min) / range).clamp(0.0, 1.0)).collect()
}

/// Normalises every component and averages the enabled ones.
pub fn assemble_table(
    video_id: &str,
    records: &[&FeatureRecord],
    raw: &[RawComponents],
    mask: ComponentMask,
) -> ScoreTable {
    let norm: Vec<Vec<f64>> = (0..3)
        .map(|c| normalize_video(&raw.iter().map(|r| r.as_array()[c]).collect::<Vec<_>>()))
        .collect();
    let enabled = mask.as_array();
    let count = enabled.iter().filter(|&&e| e).count() as f64;
    let entries = records
        .iter()
        .zip(raw)
        .enumerate()
        .map(|(i, (rec, raw))| {
            let normalized = [norm[0][i], norm[1][i], norm[2][i]];
            let sum: f64 = (0..3).filter(|&c| enabled[c]).map(|c| normalized[c]).sum();
            ScoreEntry {
                frame_index: rec.frame_index,
                object_id: rec.object_id,
                bbox: rec.bbox,
                raw: *raw,
                normalized,
                score: sum / count,
            }
        })
        .collect();
    ScoreTable {
        video_id: video_id.to_string(),
        entries,
    }
}

pub fn score_video_with(params: &ModelParams, video: &VideoFeatureSet, mask: ComponentMask) -> Result<ScoreTable> {
    if video.d_app != params.spec.d_app || video.d_mo != params.spec.d_mo {
        return Err(Error::Dimension {
            context: format!(
                "video {} (features d_app={}, d_mo={}) vs model (d_app={}, d_mo={})",
                video.video_id, video.d_app, video.d_mo, params.spec.d_app, params.spec.d_mo
            ),
            expected: params.spec.d_app + 2 * params.spec.d_mo,
            actual: video.d_app + 2 * video.d_mo,
        });
    }
    let records: Vec<&FeatureRecord> = video.records.iter().collect();
    let raw = raw_components_batch(params, &records)?;
    Ok(assemble_table(&video.video_id, &records, &raw, mask))
}

pub fn score_video(params: &ModelParams, video: &VideoFeatureSet) -> Result<ScoreTable> {
    score_video_with(params, video, ComponentMask::default())
}

impl ScoreTable {
    /// `video_id,frame_index,object_id,x,y,w,h,score`, six decimals for the score.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let b = e.bbox;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{:.6}",
                self.video_id, e.frame_index, e.object_id, b.x, b.y, b.w, b.h, e.score
            );
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }
}

/// One line of an object score file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredObject {
    pub video_id: String,
    pub frame_index: u32,
    pub object_id: u32,
    pub bbox: BBox,
    pub score: f64,
}

pub fn parse_object_scores(text: &str) -> Result<Vec<ScoredObject>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("score line {}: {line:?}", i + 1));
        let p: Vec<&str> = line.split(',').collect();
        if p.len() != 8 {
            return Err(bad());
        }
        let f = |s: &str| s.parse::<f32>().map_err(|_| bad());
        out.push(ScoredObject {
            video_id: p[0].to_string(),
            frame_index: p[1].parse().map_err(|_| bad())?,
            object_id: p[2].parse().map_err(|_| bad())?,
            bbox: BBox::new(f(p[3])?, f(p[4])?, f(p[5])?, f(p[6])?),
            score: p[7].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_video(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_video(&[3.0]), vec![0.0]);
        assert_eq!(normalize_video(&[1.5, 1.5, 1.5]), vec![0.0; 3]);
        assert!(normalize_video(&[]).is_empty());
    }

    #[test]
    fn component_extremes() {
        let c = components_from(&[1.0, 2.0], &[0.5, 0.5], &[1.0, 2.0], &[0.5, 0.5], &[1.0, 0.0], &[2.0, 0.0]);
        assert_abs_diff_eq!(c.rec_l2, 0.0);
        assert_abs_diff_eq!(c.rec_cos, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.mem_cos, 0.0, epsilon = 1e-12);

        let c = components_from(&[1.0, 2.0], &[0.5, 0.5], &[-1.0, -2.0], &[0.5, 0.5], &[1.0, 0.0], &[0.0, 3.0]);
        assert_abs_diff_eq!(c.rec_cos, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.mem_cos, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mask_parsing() {
        let m = ComponentMask::without("rec_cos").unwrap();
        assert_eq!(m.as_array(), [true, false, true]);
        assert_eq!(ComponentMask::without("").unwrap(), ComponentMask::default());
        assert!(ComponentMask::without("rec_l2,rec_cos,mem_cos").is_err());
        assert!(ComponentMask::without("bogus").is_err());
    }

    #[test]
    fn score_lines_round_trip() {
        let table = ScoreTable {
            video_id: "v".into(),
            entries: vec![ScoreEntry {
                frame_index: 3,
                object_id: 1,
                bbox: BBox::new(1.5, 2.25, 30.1, 40.0),
                raw: RawComponents::default(),
                normalized: [0.0; 3],
                score: 0.1234567,
            }],
        };
        let text = table.to_text();
        assert_eq!(text, "v,3,1,1.5,2.25,30.1,40,0.123457\n");
        let parsed = parse_object_scores(&text).unwrap();
        assert_eq!(parsed[0].bbox, table.entries[0].bbox);
        assert_eq!(parsed[0].score, 0.123457);
    }
}
