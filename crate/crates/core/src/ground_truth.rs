//! Per-video anomaly annotations: frame labels plus tracked regions.
//!
//! Files are plain UTF-8. Regions: `frame_index,track_id,x,y,w,h` per line.
//! Labels: one `0`/`1` per line, one line per frame.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::BBox;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub frame_index: u32,
    pub track_id: u32,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub video_id: String,
    pub frame_labels: Vec<bool>,
    pub regions: Vec<Region>,
}

impl GroundTruth {
    pub fn normal(video_id: impl Into<String>, frame_count: usize) -> Self {
        Self {
            video_id: video_id.into(),
            frame_labels: vec![false; frame_count],
            regions: Vec::new(),
        }
    }

    pub fn frame_count(&self) -> usize {
        self.frame_labels.len()
    }

    /// Region indices grouped by track id, in ascending track order.
    pub fn tracks(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.regions.iter().enumerate() {
            out.entry(r.track_id).or_default().push(i);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.regions {
            let f = r.frame_index as usize;
            if f >= self.frame_labels.len() {
                return Err(Error::Validation(format!(
                    "{}: region frame {} beyond {} labelled frames",
                    self.video_id,
                    f,
                    self.frame_labels.len()
                )));
            }
            if !self.frame_labels[f] {
                return Err(Error::Validation(format!(
                    "{}: region in frame {f} but the frame is labelled normal",
                    self.video_id
                )));
            }
            if !r.bbox.is_valid() {
                return Err(Error::Validation(format!("{}: degenerate region box in frame {f}", self.video_id)));
            }
        }
        Ok(())
    }

    pub fn regions_text(&self) -> String {
        let mut s = String::new();
        for r in &self.regions {
            let b = r.bbox;
            let _ = writeln!(s, "{},{},{},{},{},{}", r.frame_index, r.track_id, b.x, b.y, b.w, b.h);
        }
        s
    }

    pub fn labels_text(&self) -> String {
        let mut s = String::with_capacity(self.frame_labels.len() * 2);
        for &l in &self.frame_labels {
            s.push(if l { '1' } else { '0' });
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let (regions, labels) = gt_paths(dir, &self.video_id);
        std::fs::write(&regions, self.regions_text()).map_err(|e| Error::io(&regions, e))?;
        std::fs::write(&labels, self.labels_text()).map_err(|e| Error::io(&labels, e))
    }

    pub fn read(dir: &Path, video_id: &str) -> Result<Self> {
        let (regions_path, labels_path) = gt_paths(dir, video_id);
        let labels = std::fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        let regions = std::fs::read_to_string(&regions_path).map_err(|e| Error::io(&regions_path, e))?;
        let gt = Self::parse(video_id, &labels, &regions)?;
        gt.validate()?;
        Ok(gt)
    }

    pub fn parse(video_id: &str, labels: &str, regions: &str) -> Result<Self> {
        let frame_labels = labels
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(i, l)| match l {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(Error::Format(format!("{video_id}: label line {}: expected 0 or 1, got {l:?}", i + 1))),
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::new();
        for (i, line) in regions.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("{video_id}: region line {}: {line:?}", i + 1));
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != 6 {
                return Err(bad());
            }
            let frame_index = parts[0].parse().map_err(|_| bad())?;
            let track_id = parts[1].parse().map_err(|_| bad())?;
            let mut b = [0f32; 4];
            for (slot, p) in b.iter_mut().zip(&parts[2..]) {
                *slot = p.parse().map_err(|_| bad())?;
            }
            out.push(Region {
                frame_index,
                track_id,
                bbox: BBox::new(b[0], b[1], b[2], b[3]),
            });
        }
        Ok(Self {
            video_id: video_id.to_string(),
            frame_labels,
            regions: out,
        })
    }
}

pub fn gt_paths(dir: &Path, video_id: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    (
        dir.join(format!("{video_id}.regions.txt")),
        dir.join(format!("{video_id}.labels.txt")),
    )
}
